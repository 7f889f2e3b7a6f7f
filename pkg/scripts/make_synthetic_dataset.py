"""Write a planted-pattern dataset directory (metadata.json + PPM frames)."""

import argparse

from capsnet_lstm.data import write_planted_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root")
    ap.add_argument("--clips", type=int, default=16)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = write_planted_dataset(args.root, args.clips, size=args.size, seed=args.seed)
    print(f"wrote {args.clips} clips to {root}")


if __name__ == "__main__":
    main()
