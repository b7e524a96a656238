"""Downstream use of a fitted model: canonical image, reconstruction, tracking,
mask and edit propagation, PSNR.

Canonical rasters sample the padded canonical plane at the frame's pixel
density: with ``pad = round(s * W)`` extra pixels per side, raster column
``a`` has its center at canonical ``X = (a - pad + 0.5) / W``. The central
``H x W`` window therefore lines up exactly with frame pixel centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import FieldModel, GroupedFieldModel, assign_layers, evaluate, frame_time, pixel_points
from .flow import bilinear_sample

PSNR_CAP = 99.0
CHUNK = 65536
INVERSION_TOLERANCE_PX = 0.5


def _chunked(fn, points, width):
    out = np.empty((len(points), width), dtype=np.float32)
    for i in range(0, len(points), CHUNK):
        out[i:i + CHUNK] = fn(points[i:i + CHUNK])
    return out


def _layer(ckpt, layer) -> FieldModel:
    layers = ckpt.layers
    if layer is None:
        layer = 0
    if not 0 <= layer < len(layers):
        raise IndexError(f"layer {layer} out of range for a model with {len(layers)} layer(s)")
    return layers[layer]


@dataclass
class CanonicalRaster:
    """Raster over the padded canonical plane plus its pixel <-> plane map."""

    image: np.ndarray  # (Hc, Wc, 3)
    frame_height: int
    frame_width: int
    pad_x: int
    pad_y: int
    scale: int = 1

    @classmethod
    def geometry(cls, frame_height, frame_width, padding, scale=1, image=None):
        pad_x = int(round(padding * frame_width))
        pad_y = int(round(padding * frame_height))
        hc = (frame_height + 2 * pad_y) * scale
        wc = (frame_width + 2 * pad_x) * scale
        if image is None:
            image = np.zeros((hc, wc, 3), dtype=np.float32)
        return cls(image, frame_height, frame_width, pad_x, pad_y, scale)

    @property
    def shape(self):
        return self.image.shape[:2]

    def pixel_centers(self) -> np.ndarray:
        """Canonical coordinates of every raster pixel center, row-major ``(Hc * Wc, 2)``."""
        hc, wc = self.shape
        a = np.arange(wc)
        b = np.arange(hc)
        xs = (a + 0.5) / (self.frame_width * self.scale) - self.pad_x / self.frame_width
        ys = (b + 0.5) / (self.frame_height * self.scale) - self.pad_y / self.frame_height
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def to_raster(self, xc) -> np.ndarray:
        """Canonical coordinates to continuous raster pixel coordinates (centers at integers)."""
        xc = np.asarray(xc, dtype=np.float64)
        a = (xc[..., 0] + self.pad_x / self.frame_width) * self.frame_width * self.scale - 0.5
        b = (xc[..., 1] + self.pad_y / self.frame_height) * self.frame_height * self.scale - 0.5
        return np.stack([a, b], axis=-1)

    def from_raster(self, ab) -> np.ndarray:
        ab = np.asarray(ab, dtype=np.float64)
        x = (ab[..., 0] + 0.5) / (self.frame_width * self.scale) - self.pad_x / self.frame_width
        y = (ab[..., 1] + 0.5) / (self.frame_height * self.scale) - self.pad_y / self.frame_height
        return np.stack([x, y], axis=-1)

    def center_crop(self, image=None) -> np.ndarray:
        """The window covering the frame (exact when ``scale == 1``)."""
        image = self.image if image is None else image
        s = self.scale
        return image[self.pad_y * s:(self.pad_y + self.frame_height) * s,
                     self.pad_x * s:(self.pad_x + self.frame_width) * s]

    def with_image(self, image) -> "CanonicalRaster":
        image = np.asarray(image, dtype=np.float32)
        if image.shape[:2] != self.shape:
            raise ValueError(f"raster size {image.shape[:2]} does not match canonical raster {self.shape}")
        return CanonicalRaster(image, self.frame_height, self.frame_width, self.pad_x, self.pad_y, self.scale)


def render_canonical(ckpt, layer=None, scale: int = 1) -> CanonicalRaster:
    """Canonical image: the content field sampled with the deformation switched off."""
    model = _layer(ckpt, layer)
    _, h, w = ckpt.video_shape
    raster = CanonicalRaster.geometry(h, w, model.padding, scale)
    xc = raster.pixel_centers().astype(model.dtype)
    rgb = _chunked(lambda q: model.color_forward(q)[0], xc, 3)
    raster.image = rgb.reshape(*raster.shape, 3)
    return raster


def _routing(ckpt, masks, scale):
    """Per-pixel layer index for one frame of a grouped model, or None."""
    if ckpt.mode != "grouped":
        return None
    if masks is None:
        raise ValueError("grouped reconstruction needs the frame's layer masks")
    a = assign_layers(masks, ckpt.video_shape[1:])
    if scale > 1:
        a = np.repeat(np.repeat(a, scale, axis=0), scale, axis=1)
    return a.ravel()


def reconstruct_frame(ckpt, frame: int, scale: int = 1, masks=None) -> np.ndarray:
    """Frame ``frame`` rendered from the fields at ``scale`` times the pixel density.

    ``masks`` (K, H, W) routes pixels between layers of a grouped model.
    """
    n, h, w = ckpt.video_shape
    if not 0 <= frame < n:
        raise IndexError(f"frame {frame} out of range [0, {n})")
    dtype = ckpt.layers[0].dtype
    p = pixel_points(h, w, frame, n, scale, dtype)
    route = _routing(ckpt, masks, scale)
    if route is None:
        rgb = _chunked(lambda q: evaluate(ckpt.model, q), p, 3)
    else:
        rgb = np.empty((len(p), 3), dtype=np.float32)
        for k, layer in enumerate(ckpt.layers):
            sel = route == k
            if sel.any():
                rgb[sel] = _chunked(lambda q: evaluate(layer, q), p[sel], 3)
    return rgb.reshape(h * scale, w * scale, 3)


def reconstruct(ckpt, frames=None, scale: int = 1, masks=None) -> np.ndarray:
    """Frames ``frames`` (all by default) as ``(N, H, W, 3)``; ``masks`` is (N, K, H, W) if grouped."""
    n = ckpt.video_shape[0]
    frames = range(n) if frames is None else frames
    return np.stack([
        reconstruct_frame(ckpt, f, scale, None if masks is None else masks[f]) for f in frames
    ])


# -- inversion and tracking -----------------------------------------------------


def _forward_map(model, x, t, dtype):
    p = np.empty((len(x), 3), dtype=dtype)
    p[:, :2] = x
    p[:, 2] = t
    return x + model.displacement(p).astype(np.float64)


def invert_deformation(ckpt, xc, t: float, layer=None, seeds=None, stride: int = 4,
                       max_iter: int = 20, step_tol_px: float = 1e-3):
    """Frame points whose deformation lands on canonical points ``xc`` at time ``t``.

    Minimizes ``|x + delta(x, t) - x'|`` from the best of a stride-``stride``
    pixel grid, the query itself, and any extra ``seeds`` (M, S, 2), then
    refines with damped Gauss-Newton. Returns ``(x, residual_px, valid)``
    with ``x`` normalized; ``valid`` means residual below 0.5 px.
    """
    model = _layer(ckpt, layer)
    _, h, w = ckpt.video_shape
    dtype = model.dtype
    xc = np.atleast_2d(np.asarray(xc, dtype=np.float64))
    m = len(xc)
    px = np.array([w, h], dtype=np.float64)

    cols = np.unique(np.r_[np.arange(0, w, stride), w - 1])
    rows = np.unique(np.r_[np.arange(0, h, stride), h - 1])
    gy, gx = np.meshgrid((rows + 0.5) / h, (cols + 0.5) / w, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    fgrid = _forward_map(model, grid, t, dtype)
    d = np.linalg.norm(((fgrid[None] - xc[:, None]) * px), axis=2)
    cand = [grid[np.argmin(d, axis=1)], np.clip(xc, 0.0, 1.0)]
    if seeds is not None:
        seeds = np.asarray(seeds, dtype=np.float64).reshape(m, -1, 2)
        cand.extend(np.clip(seeds[:, j], 0.0, 1.0) for j in range(seeds.shape[1]))

    best_x = np.zeros((m, 2))
    best_r = np.full(m, np.inf)
    for x in cand:
        x, r = _refine(model, xc, x.copy(), t, px, dtype, max_iter, step_tol_px)
        better = r < best_r
        best_x[better] = x[better]
        best_r[better] = r[better]
    return best_x, best_r, best_r < INVERSION_TOLERANCE_PX


def _refine(model, xc, x, t, px, dtype, max_iter, step_tol_px):
    """Levenberg-style damped Gauss-Newton in pixel units, per point."""
    m = len(x)
    mu = np.full(m, 1e-3)
    active = np.ones(m, dtype=bool)
    r = (_forward_map(model, x, t, dtype) - xc) * px
    cost = np.sum(r * r, axis=1)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        p = np.empty((len(idx), 3), dtype=dtype)
        p[:, :2] = x[idx]
        p[:, 2] = t
        # Jacobian of the pixel residual with respect to pixel position
        jac = np.eye(2) + model.displacement_jacobian(p).astype(np.float64)
        jac = jac * px[None, :, None] / px[None, None, :]
        jt = np.transpose(jac, (0, 2, 1))
        a = jt @ jac + mu[idx, None, None] * np.eye(2)
        g = (jt @ r[idx, :, None])[..., 0]
        step_px = -np.linalg.solve(a, g[..., None])[..., 0]
        trial = np.clip(x[idx] + step_px / px, 0.0, 1.0)
        r_new = (_forward_map(model, trial, t, dtype) - xc[idx]) * px
        c_new = np.sum(r_new * r_new, axis=1)
        ok = c_new < cost[idx]
        acc = idx[ok]
        moved = np.linalg.norm((trial[ok] - x[acc]) * px, axis=1)
        x[acc] = trial[ok]
        r[acc] = r_new[ok]
        cost[acc] = c_new[ok]
        mu[acc] = np.maximum(mu[acc] * 0.3, 1e-9)
        mu[idx[~ok]] *= 10.0
        done = np.zeros(m, dtype=bool)
        done[acc[moved < step_tol_px]] = True
        done[idx[~ok][mu[idx[~ok]] > 1e6]] = True
        active &= ~done
    return x, np.sqrt(cost)


@dataclass
class TrackedPoint:
    query_frame: int
    query_px: tuple
    anchor: np.ndarray  # canonical position, normalized
    positions: np.ndarray  # (N, 2) pixel coordinates per frame
    residuals: np.ndarray  # (N,) inversion residual in pixels
    valid: np.ndarray  # (N,) residual below tolerance

    def to_dict(self) -> dict:
        return {
            "query_frame": int(self.query_frame),
            "query_px": [float(v) for v in self.query_px],
            "anchor": [float(v) for v in self.anchor],
            "positions": [[float(a), float(b)] for a, b in self.positions],
            "residuals": [float(v) for v in self.residuals],
            "valid": [bool(v) for v in self.valid],
        }


def track_keypoints(ckpt, frame: int, points_px, layer=None) -> list:
    """Track pixel positions ``points_px`` (M, 2) given in ``frame`` through every frame.

    Pixel coordinates have pixel centers at integers. Each point's canonical
    anchor is its deformed position; every frame is then solved by inverting
    the deformation, seeded also with the previous frame's solution.
    """
    model = _layer(ckpt, layer)
    n, h, w = ckpt.video_shape
    pts = np.atleast_2d(np.asarray(points_px, dtype=np.float64))
    m = len(pts)
    px = np.array([w, h], dtype=np.float64)
    xq = (pts + 0.5) / px
    anchor = _forward_map(model, xq, frame_time(frame, n), model.dtype)
    pos = np.zeros((n, m, 2))
    res = np.zeros((n, m))
    val = np.zeros((n, m), dtype=bool)
    order = [frame] + list(range(frame + 1, n)) + list(range(frame - 1, -1, -1))
    prev = {}
    for f in order:
        seeds = [xq]
        for g in (f - 1, f + 1):
            if g in prev:
                seeds.append(prev[g])
        x, r, ok = invert_deformation(ckpt, anchor, frame_time(f, n), layer, np.stack(seeds, axis=1))
        prev[f] = x
        pos[f] = x * px - 0.5
        res[f] = r
        val[f] = ok
    return [
        TrackedPoint(frame, tuple(pts[i]), anchor[i], pos[:, i], res[:, i], val[:, i]) for i in range(m)
    ]


# -- propagation -----------------------------------------------------------------


def _deformed(ckpt, model, frame):
    n, h, w = ckpt.video_shape
    p = pixel_points(h, w, frame, n, 1, model.dtype)
    delta = _chunked(model.displacement, p, 2)
    return p[:, :2].astype(np.float64) + delta


def propagate_mask(ckpt, mask, layer=None, frames=None) -> np.ndarray:
    """Label each frame pixel by the canonical mask at its deformed position (nearest raster pixel)."""
    model = _layer(ckpt, layer)
    n, h, w = ckpt.video_shape
    raster = CanonicalRaster.geometry(h, w, model.padding)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != raster.shape:
        raise ValueError(f"mask size {mask.shape} does not match canonical raster {raster.shape}")
    frames = range(n) if frames is None else frames
    out = []
    for f in frames:
        ab = raster.to_raster(_deformed(ckpt, model, f))
        a = np.clip(np.floor(ab[:, 0] + 0.5).astype(np.int64), 0, raster.shape[1] - 1)
        b = np.clip(np.floor(ab[:, 1] + 0.5).astype(np.int64), 0, raster.shape[0] - 1)
        out.append(mask[b, a].reshape(h, w))
    return np.stack(out)


def propagate_edit(ckpt, edited, mode: str = "replace", layer=None, frames=None, masks=None) -> np.ndarray:
    """Carry an edited canonical image to every frame.

    ``replace`` samples the edited raster bilinearly at each pixel's deformed
    position. ``residual`` adds the edit (edited minus rendered canonical),
    sampled the same way, to the reconstruction. For grouped models the edit
    touches only pixels routed to ``layer``; ``masks`` is (N, K, H, W).
    """
    if mode not in ("replace", "residual"):
        raise ValueError(f"unknown mode {mode!r}")
    model = _layer(ckpt, layer)
    n, h, w = ckpt.video_shape
    raster = CanonicalRaster.geometry(h, w, model.padding)
    edited = np.asarray(edited.image if isinstance(edited, CanonicalRaster) else edited, dtype=np.float32)
    if edited.shape[:2] != raster.shape:
        raise ValueError(f"edited raster size {edited.shape[:2]} does not match canonical raster {raster.shape}")
    if mode == "residual":
        edited = edited - render_canonical(ckpt, layer).image
    frames = range(n) if frames is None else frames
    out = []
    for f in frames:
        ab = raster.to_raster(_deformed(ckpt, model, f))
        sample = bilinear_sample(edited, ab[:, 0], ab[:, 1]).astype(np.float32).reshape(h, w, 3)
        if mode == "replace" and ckpt.mode == "single":
            out.append(np.clip(sample, 0.0, 1.0))
            continue
        frame_masks = None if masks is None else masks[f]
        base = reconstruct_frame(ckpt, f, 1, frame_masks)
        edit = sample if mode == "replace" else base + sample
        if ckpt.mode == "grouped":
            route = _routing(ckpt, frame_masks, 1).reshape(h, w)
            edit = np.where((route == (layer or 0))[..., None], edit, base)
        out.append(np.clip(edit, 0.0, 1.0))
    return np.stack(out)


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for values in [0, 1], capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


# -- JSON I/O -------------------------------------------------------------------------


def load_keypoints(path) -> list:
    """Read ``[{"frame": int, "x_px": float, "y_px": float}, ...]``."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError(f"{path}: keypoints must be a JSON array")
    out = []
    for i, kp in enumerate(data):
        try:
            out.append({"frame": int(kp["frame"]), "x_px": float(kp["x_px"]), "y_px": float(kp["y_px"])})
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}: keypoint {i} is malformed: {e}") from e
    return out


def save_keypoints(path, keypoints) -> None:
    Path(path).write_text(json.dumps(list(keypoints), indent=2))


def save_tracks(path, tracks) -> None:
    Path(path).write_text(json.dumps({"tracks": [t.to_dict() for t in tracks]}, indent=2))


def load_tracks(path) -> list:
    data = json.loads(Path(path).read_text())
    return [
        TrackedPoint(
            d["query_frame"], tuple(d["query_px"]), np.array(d["anchor"]), np.array(d["positions"]),
            np.array(d["residuals"]), np.array(d["valid"], dtype=bool),
        )
        for d in data["tracks"]
    ]
