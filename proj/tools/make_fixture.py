#!/usr/bin/env python3
# Copyright 2026 The gmmoe Authors
# SPDX-License-Identifier: Apache-2.0
"""Regenerates the small paired PNG fixtures under tests/fixtures.

Ground truth is a smooth synthetic scene; the low-light input is a gamma
darkened, slightly noisy copy. Output is deterministic for a given seed.

    python3 tools/make_fixture.py [--out tests/fixtures]
"""

import argparse
import pathlib

import cv2
import numpy as np


def scene(rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, f, p = rng.uniform(0.2, 0.8), rng.uniform(-0.3, 0.3), rng.uniform(1, 4), rng.uniform(0, np.pi)
        img[..., c] = a + b * x + 0.15 * np.sin(2 * np.pi * f * y + p)
    for _ in range(3):
        cy, cx, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.2)
        mask = (y - cy) ** 2 + (x - cx) ** 2 < r * r
        img[mask] = rng.uniform(0.1, 0.95, size=3)
    return np.clip(img, 0.0, 1.0)


def darken(rng: np.random.Generator, gt: np.ndarray) -> np.ndarray:
    low = 0.35 * gt ** 1.6 + rng.normal(0.0, 0.01, size=gt.shape)
    return np.clip(low, 0.0, 1.0)


def write(path: pathlib.Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = np.round(img[..., ::-1] * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), bgr):
        raise RuntimeError(f"cannot write {path}")


def make_set(root: pathlib.Path, split: str, count: int, size: int, rng: np.random.Generator) -> None:
    for i in range(count):
        gt = scene(rng, size)
        low = darken(rng, gt)
        name = f"{split}_{i:02d}.png"
        write(root / split / "high" / name, gt)
        write(root / split / "low" / name, low)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"))
    ap.add_argument("--seed", type=int, default=2026)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    rng = np.random.default_rng(args.seed)

    make_set(out / "paired4", "train", 4, 64, rng)
    make_set(out / "paired4", "test", 2, 64, rng)

    make_set(out / "overfit2", "train", 2, 64, rng)
    for f in sorted((out / "overfit2" / "train").rglob("*.png")):
        dst = out / "overfit2" / "test" / f.relative_to(out / "overfit2" / "train")
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(f.read_bytes())


if __name__ == "__main__":
    main()
