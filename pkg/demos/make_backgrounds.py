"""Write a few procedural clean backgrounds into demos/backgrounds/.

Smooth colour gradients with soft blobs stand in for photographs, so the
demos run without downloading anything.
"""

from pathlib import Path

import numpy as np

from rainforge.pipeline import save_image


def background(seed, height=160, width=200):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width] / max(height, width)
    top, bottom = rng.uniform(0.1, 0.7, (2, 3))
    img = top + (bottom - top) * y[..., None]
    for _ in range(6):
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
        blob = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * r * r))
        img += 0.3 * blob[..., None] * rng.uniform(-1, 1, 3)
    return np.clip(img, 0.0, 1.0)


if __name__ == "__main__":
    out = Path(__file__).parent / "backgrounds"
    out.mkdir(exist_ok=True)
    for i in range(3):
        save_image(out / f"scene_{i}.png", background(i))
    print(f"wrote 3 backgrounds to {out}")
