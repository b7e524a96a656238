"""PNG helpers: 8-bit RGB frames in [0, 1] and single-channel boolean masks."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_RE = re.compile(r"frame_(\d{5})\.png$")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_png(path, image) -> None:
    image = np.asarray(image, dtype=np.float64)
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def save_mask(path, mask) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_frames(directory) -> np.ndarray:
    """Read ``frame_%05d.png`` files, which must be numbered 0..N-1 without gaps."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no frames directory {directory}")
    found = {}
    for p in directory.iterdir():
        m = FRAME_RE.search(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise ValueError(f"no frame_%05d.png files in {directory}")
    missing = sorted(set(range(max(found) + 1)) - set(found))
    if missing:
        raise ValueError(f"frame sequence has gaps: missing {missing[:5]}")
    frames = [load_png(found[i]) for i in range(len(found))]
    if len({f.shape for f in frames}) != 1:
        raise ValueError("frames have inconsistent sizes")
    return np.stack(frames)


def load_layer_masks(directory, n_frames: int, shape) -> np.ndarray:
    """Read ``mask_%02d_%05d.png`` (layer, frame) into ``(N, K, H, W)``."""
    directory = Path(directory)
    layers = sorted({int(p.name[5:7]) for p in directory.glob("mask_??_?????.png")})
    if not layers:
        raise ValueError(f"no mask_%02d_%05d.png files in {directory}")
    out = np.zeros((n_frames, len(layers), *shape), dtype=bool)
    for t in range(n_frames):
        for k in range(len(layers)):
            path = directory / f"mask_{k:02d}_{t:05d}.png"
            if not path.exists():
                raise FileNotFoundError(f"missing mask {path}")
            m = load_mask(path)
            if m.shape != tuple(shape):
                raise ValueError(f"{path}: mask size {m.shape} != frame size {tuple(shape)}")
            out[t, k] = m
    return out
