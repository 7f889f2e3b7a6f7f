"""Train the small localisation model on planted clips and write Grad-CAM strips for FAKE clips."""

import argparse
from pathlib import Path

import numpy as np

from capsnet_lstm.data import ArrayClips, planted_clips
from capsnet_lstm.explain import clip_overlay_strip, gradcam, heatmap_filename, write_image
from capsnet_lstm.loop import TrainConfig, train_loop
from capsnet_lstm.model import build_localisation_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/gradcam")
    ap.add_argument("--trials", type=int, default=10)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    x, y, _ = planted_clips(32, seed=11)
    model = build_localisation_model(seed=0)
    train_loop(model, ArrayClips(x.astype(np.float32) / 255, y), None, TrainConfig(epochs=30, lr=1e-2, seed=11))

    hits = 0
    for k in range(args.trials):
        xs, _, corners = planted_clips(2, seed=1000 + k)
        clip = xs[1].astype(np.float32) / 255
        heat = gradcam(model, clip, 1, "conv1")
        r, c = np.unravel_index(np.argmax(heat.upsampled), heat.upsampled.shape)
        r0, c0 = corners[1]
        inside = r0 <= r < r0 + 8 and c0 <= c < c0 + 8
        hits += inside
        write_image(clip_overlay_strip(heat, clip), out / heatmap_filename(f"trial{k:02d}", 1))
        print(f"trial {k}: peak ({r}, {c}), patch at ({r0}, {c0}) -> {'inside' if inside else 'outside'}")
    print(f"{hits}/{args.trials} peaks inside the patch; strips in {out}")


if __name__ == "__main__":
    main()
