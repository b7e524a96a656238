"""Dense optical flow: Middlebury ``.flo`` files, backward warping, confidence masks.

Flows are ``(H, W, 2)`` arrays of ``(u, v)`` pixel displacements. Externally
computed flows are expected as ``flow_fwd_%05d.flo`` (frame t -> t+1) and
``flow_bwd_%05d.flo`` (frame t+1 -> t), both indexed by t.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLO_MAGIC = np.float32(202021.25)
FWD_NAME = "flow_fwd_{:05d}.flo"
BWD_NAME = "flow_bwd_{:05d}.flo"


class FloError(ValueError):
    pass


class FloMagicError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


class FloDimensionError(FloError):
    pass


@dataclass
class FlowField:
    uv: np.ndarray
    direction: str = "fwd"
    source: int = 0
    target: int = 1

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float32)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {self.uv.shape}")
        if self.direction not in ("fwd", "bwd"):
            raise ValueError(f"direction must be 'fwd' or 'bwd', got {self.direction!r}")

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]


@dataclass
class ConfidenceMask:
    mask: np.ndarray
    threshold: float


def write_flo(path, flow) -> None:
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow)
    uv = np.asarray(uv, dtype="<f4")
    h, w = uv.shape[:2]
    if h <= 0 or w <= 0:
        raise FloDimensionError(f"cannot write a {w}x{h} flow")
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(uv).tobytes())


def read_flo(path, direction="fwd", source=0, target=1) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FloTruncatedError(f"{path}: header needs 12 bytes, file has {len(data)}")
    magic = np.frombuffer(data, dtype="<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FloMagicError(f"{path}: bad magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FloDimensionError(f"{path}: nonpositive size {w}x{h}")
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FloTruncatedError(f"{path}: payload needs {need} bytes, file has {len(data)}")
    uv = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(uv.astype(np.float32), direction, source, target)


def bilinear_sample(image, px, py):
    """Sample ``image`` (H, W[, C]) at continuous pixel positions, clamping to the edge."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    px = np.clip(px, 0.0, w - 1)
    py = np.clip(py, 0.0, h - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def warp(image, flow) -> np.ndarray:
    """Backward warp: ``out(x) = image(x + flow(x))``, bilinear, edge-clamped."""
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow)
    image = np.asarray(image)
    if image.shape[:2] != uv.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and flow {uv.shape[:2]} sizes differ")
    h, w = uv.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    out = bilinear_sample(image, xs + uv[..., 0], ys + uv[..., 1])
    return out.astype(image.dtype, copy=False)


def confidence_mask(image, fwd, bwd, eps=0.02) -> ConfidenceMask:
    """Pixels where warping forward then backward reproduces ``image`` within ``eps``.

    The color error is the maximum absolute difference over channels.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    image = np.asarray(image, dtype=np.float64)
    round_trip = warp(warp(image, fwd), bwd)
    err = np.abs(round_trip - image)
    if err.ndim == 3:
        err = err.max(axis=2)
    return ConfidenceMask(err < eps, float(eps))


def flow_masks(frames, fwd, bwd, eps=0.02) -> np.ndarray:
    """Confidence masks for every consecutive frame pair, shape ``(N - 1, H, W)``."""
    return np.stack([confidence_mask(frames[i], fwd[i], bwd[i], eps).mask for i in range(len(fwd))])


def save_flows(directory, fwd, bwd) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (f, b) in enumerate(zip(fwd, bwd)):
        write_flo(directory / FWD_NAME.format(i), f)
        write_flo(directory / BWD_NAME.format(i), b)


def load_flows(directory, n_frames: int):
    """Read the ``n_frames - 1`` forward/backward pairs; raises FileNotFoundError if one is missing."""
    directory = Path(directory)
    fwd, bwd = [], []
    for i in range(n_frames - 1):
        for name, acc, direction in ((FWD_NAME, fwd, "fwd"), (BWD_NAME, bwd, "bwd")):
            path = directory / name.format(i)
            if not path.exists():
                raise FileNotFoundError(f"missing flow file {path}")
            src, dst = (i, i + 1) if direction == "fwd" else (i + 1, i)
            acc.append(read_flo(path, direction, src, dst).uv)
    if not fwd:
        return np.zeros((0, 0, 0, 2), np.float32), np.zeros((0, 0, 0, 2), np.float32)
    return np.stack(fwd), np.stack(bwd)
