"""Print the layer table for a preset and time one forward/backward pass."""

import argparse
import time

import numpy as np

from capsnet_lstm.model import build_model, model_summary, preset
from capsnet_lstm.tensor import seeded_rng
from capsnet_lstm.training import one_hot


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="paper-default")
    ap.add_argument("--time", action="store_true", help="also run one batch-1 forward/backward")
    args = ap.parse_args()
    cfg = preset(args.preset)
    model = build_model(cfg, init=args.time)
    print(model_summary(model))
    if args.time:
        x = seeded_rng(0).uniform(size=(1,) + model.input_shape).astype(np.float32)
        start = time.perf_counter()
        model.forward(x)
        mid = time.perf_counter()
        model.backward(x, one_hot([1]))
        print(f"forward {mid - start:.2f}s, forward+backward {time.perf_counter() - mid:.2f}s")


if __name__ == "__main__":
    main()
