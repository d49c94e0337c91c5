"""Cut 32x32 RGB thumbnails out of scikit-image's sample photos.

Training crops come from the left 80% of each photo, held-out crops from the
right 20%, so no pixel appears in both sets.
"""

import argparse
import pathlib

import numpy as np
from PIL import Image
from skimage import data

SOURCES = ["astronaut", "chelsea", "coffee", "hubble_deep_field", "rocket"]
SIZE = 32


def crops(rng, photo, count, x_lo, x_hi):
    h, w, _ = photo.shape
    out = []
    for _ in range(count):
        side = int(rng.integers(SIZE, min(3 * SIZE, x_hi - x_lo, h) + 1))
        x = int(rng.integers(x_lo, x_hi - side + 1))
        y = int(rng.integers(0, h - side + 1))
        patch = Image.fromarray(photo[y : y + side, x : x + side])
        out.append(patch.resize((SIZE, SIZE), Image.Resampling.BOX))
    return out


def write_ppm(path, image):
    pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
    h, w, _ = pixels.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--train", type=int, default=100)
    ap.add_argument("--heldout", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    photos = [getattr(data, name)()[..., :3] for name in SOURCES]
    for split, total in [("train", args.train), ("heldout", args.heldout)]:
        folder = args.out / split
        folder.mkdir(parents=True, exist_ok=True)
        n = 0
        for i, photo in enumerate(photos):
            w = photo.shape[1]
            cut = int(0.8 * w)
            lo, hi = (0, cut) if split == "train" else (cut, w)
            count = total // len(photos) + (i < total % len(photos))
            for thumb in crops(rng, photo, count, lo, hi):
                write_ppm(folder / f"{n:03}.ppm", thumb)
                n += 1


if __name__ == "__main__":
    main()
