"""Synthetic videos with analytically known motion.

A procedural texture is pushed through a closed-form warp ``warp_t`` (texture
coordinates -> frame-t pixel coordinates), so frame ``t`` samples the texture
at ``warp_t^-1(x)``. An optional textured disk moves on top with constant
velocity. Everything a fit needs as ground truth comes out exactly: flows
between consecutive frames, object masks, and round-trip occlusion maps.

Pixel coordinates put pixel centers at integers: pixel ``(row i, col j)`` is
the point ``(j, i)``.

Parameter bounds (checked by :func:`validate`):

* translation: ``|velocity|`` at most 8 px per frame;
* affine: ``|rotation|`` at most 0.1 rad per frame and the scale factor
  ``1 + scale_rate * t`` stays within ``[0.5, 2]``;
* sinusoidal: ``amplitude <= period / (2 pi)`` so the local stretch of each
  shear stays below 2;
* object: radius at least 2 px.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

TEXTURES = ("checker", "noise", "checker+noise")
WARPS = ("none", "translation", "affine", "sinusoidal")


@dataclass
class SynthSpec:
    width: int = 64
    height: int = 64
    frames: int = 10
    texture: str = "checker+noise"
    warp: str = "translation"
    velocity: tuple = (2.0, 0.0)
    rotation: float = 0.0
    scale_rate: float = 0.0
    amplitude: float = 3.0
    period: float = 32.0
    checker_size: float = 10.0
    object: bool = False
    object_radius: float = 10.0
    object_start: tuple = (20.0, 32.0)
    object_velocity: tuple = (2.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.velocity = tuple(float(v) for v in self.velocity)
        self.object_start = tuple(float(v) for v in self.object_start)
        self.object_velocity = tuple(float(v) for v in self.object_velocity)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("velocity", "object_start", "object_velocity"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def translation_spec(**kw) -> SynthSpec:
    """Default rigid fixture: 64x64, 10 frames, 2 px/frame to the right."""
    return SynthSpec(**{"warp": "translation", "velocity": (2.0, 0.0), **kw})


def sinusoidal_spec(**kw) -> SynthSpec:
    """Default non-rigid fixture: sinusoidal shears, amplitude 3 px, period 32 px."""
    return SynthSpec(**{"warp": "sinusoidal", "amplitude": 3.0, "period": 32.0, **kw})


def moving_object_spec(**kw) -> SynthSpec:
    """Static background with a textured disk crossing it."""
    base = {
        "warp": "none",
        "object": True,
        "object_radius": 10.0,
        "object_start": (18.0, 32.0),
        "object_velocity": (3.0, 0.0),
    }
    return SynthSpec(**{**base, **kw})


def validate(spec: SynthSpec) -> None:
    if spec.width < 2 or spec.height < 2 or spec.frames < 1:
        raise ValueError("need at least a 2x2 frame and one frame")
    if spec.texture not in TEXTURES:
        raise ValueError(f"unknown texture {spec.texture!r}")
    if spec.warp not in WARPS:
        raise ValueError(f"unknown warp {spec.warp!r}")
    if spec.warp == "translation" and math.hypot(*spec.velocity) > 8.0:
        raise ValueError("translation speed above 8 px/frame")
    if spec.warp == "affine":
        if abs(spec.rotation) > 0.1:
            raise ValueError("rotation above 0.1 rad/frame")
        last = spec.frames - 1
        for s in (1.0, 1.0 + spec.scale_rate * last):
            if not 0.5 <= s <= 2.0:
                raise ValueError("scale factor leaves [0.5, 2]")
    if spec.warp == "sinusoidal":
        if spec.period <= 0 or abs(spec.amplitude) > spec.period / (2 * math.pi):
            raise ValueError("sinusoidal amplitude above period / (2 pi)")
    if spec.object and spec.object_radius < 2.0:
        raise ValueError("object radius below 2 px")


class Texture:
    """Smooth procedural RGB texture defined on the whole plane."""

    def __init__(self, kind: str, seed: int, checker_size: float = 10.0):
        rng = np.random.default_rng(seed)
        self.kind = kind
        self.checker_size = checker_size
        self.colors = rng.uniform(0.25, 0.75, size=(2, 3))
        # keep the two checker colors well apart
        self.colors[1] = 1.0 - self.colors[0]
        self.spacing = 8.0
        # B-spline coefficients used without prefiltering: a smoothed lattice
        self.coeffs = list(rng.uniform(0.0, 1.0, size=(3, 48, 48)))

    def checker(self, X, Y):
        c = self.checker_size
        s = np.tanh(1.5 * np.sin(np.pi * X / c) * np.sin(np.pi * Y / c))
        a = (0.5 + 0.5 * s)[..., None]
        return a * self.colors[0] + (1 - a) * self.colors[1]

    def noise(self, X, Y):
        coords = np.stack([np.ravel(Y) / self.spacing, np.ravel(X) / self.spacing])
        out = [
            ndimage.map_coordinates(c, coords, order=3, mode="grid-wrap", prefilter=False)
            for c in self.coeffs
        ]
        return np.stack(out, axis=-1).reshape(np.shape(X) + (3,))

    def __call__(self, X, Y):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if self.kind == "checker":
            out = self.checker(X, Y)
        elif self.kind == "noise":
            out = self.noise(X, Y)
        else:
            out = 0.6 * self.checker(X, Y) + 0.4 * self.noise(X, Y)
        return np.clip(out, 0.0, 1.0)


class ObjectTexture:
    """Reddish blotchy texture for the moving disk, in object-centered coordinates."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed + 7919)
        self.freqs = rng.uniform(-0.35, 0.35, size=(4, 2))
        self.phases = rng.uniform(0, 2 * np.pi, size=4)

    def __call__(self, X, Y):
        s = sum(np.sin(f[0] * X + f[1] * Y + p) for f, p in zip(self.freqs, self.phases)) / 4
        r = 0.85 + 0.1 * s
        g = 0.25 + 0.15 * s
        b = 0.2 - 0.1 * s
        return np.stack([r, g, b], axis=-1)


class Motion:
    """Closed-form background warp ``warp_t`` and its inverse, in pixel coordinates."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.center = np.array([(spec.width - 1) / 2, (spec.height - 1) / 2])

    def _shear(self, t):
        s = self.spec
        return s.amplitude * math.sin(2 * math.pi * t / s.frames), 2 * math.pi / s.period

    def forward(self, q, t):
        """Texture point ``q`` (..., 2) to its position in frame ``t``."""
        s = self.spec
        q = np.asarray(q, dtype=np.float64)
        if s.warp == "none":
            return q.copy()
        if s.warp == "translation":
            return q + t * np.asarray(s.velocity)
        if s.warp == "affine":
            th = s.rotation * t
            sc = 1.0 + s.scale_rate * t
            R = sc * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
            return (q - self.center) @ R.T + self.center
        a, k = self._shear(t)
        x = q[..., 0] + a * np.sin(k * q[..., 1])
        y = q[..., 1] + a * np.sin(k * x)
        return np.stack([x, y], axis=-1)

    def inverse(self, p, t):
        s = self.spec
        p = np.asarray(p, dtype=np.float64)
        if s.warp == "none":
            return p.copy()
        if s.warp == "translation":
            return p - t * np.asarray(s.velocity)
        if s.warp == "affine":
            th = s.rotation * t
            sc = 1.0 + s.scale_rate * t
            R = sc * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
            return (p - self.center) @ np.linalg.inv(R).T + self.center
        a, k = self._shear(t)
        y = p[..., 1] - a * np.sin(k * p[..., 0])
        x = p[..., 0] - a * np.sin(k * y)
        return np.stack([x, y], axis=-1)


@dataclass
class SynthVideo:
    spec: SynthSpec
    frames: np.ndarray  # (N, H, W, 3) in [0, 1]
    fwd: np.ndarray  # (N-1, H, W, 2) flow t -> t+1 in pixels
    bwd: np.ndarray  # (N-1, H, W, 2) flow t+1 -> t
    occlusion: np.ndarray  # (N-1, H, W) where the exact fwd/bwd round trip fails
    masks: np.ndarray  # (N, H, W) object footprint
    motion: Motion = field(repr=False, default=None)

    def layer_masks(self) -> np.ndarray:
        """(N, 2, H, W) background / object masks for grouped fitting."""
        return np.stack([~self.masks, self.masks], axis=1)

    def object_center(self, t):
        s = self.spec
        return np.asarray(s.object_start) + t * np.asarray(s.object_velocity)

    def on_object(self, p, t):
        if not self.spec.object:
            return np.zeros(np.shape(p)[:-1], dtype=bool)
        d = np.asarray(p, dtype=np.float64) - self.object_center(t)
        return np.hypot(d[..., 0], d[..., 1]) <= self.spec.object_radius

    def warp_oracle(self, p, t_from, t_to):
        """Exact position in frame ``t_to`` of the content at ``p`` in frame ``t_from``."""
        p = np.asarray(p, dtype=np.float64)
        bg = self.motion.forward(self.motion.inverse(p, t_from), t_to)
        if not self.spec.object:
            return bg
        obj = p + (t_to - t_from) * np.asarray(self.spec.object_velocity)
        on = self.on_object(p, t_from)[..., None]
        return np.where(on, obj, bg)

    def save(self, directory) -> None:
        """Write frames/, flow/, masks/ and occlusion/ plus synth.json."""
        from .images import save_mask, save_png
        from .flow import save_flows

        root = Path(directory)
        for sub in ("frames", "flow", "masks", "occlusion"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(self.frames):
            save_png(root / "frames" / f"frame_{t:05d}.png", frame)
            if self.spec.object:
                for k, m in enumerate(self.layer_masks()[t]):
                    save_mask(root / "masks" / f"mask_{k:02d}_{t:05d}.png", m)
        for t, occ in enumerate(self.occlusion):
            save_mask(root / "occlusion" / f"occ_{t:05d}.png", occ)
        save_flows(root / "flow", self.fwd, self.bwd)
        (root / "synth.json").write_text(json.dumps(self.spec.to_dict(), indent=2, sort_keys=True))


def _pixel_grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def _object_alpha(spec, grid, t):
    c = np.asarray(spec.object_start) + t * np.asarray(spec.object_velocity)
    d = np.hypot(grid[..., 0] - c[0], grid[..., 1] - c[1])
    # one-pixel linear ramp keeps the edge band-limited
    return np.clip(spec.object_radius - d + 0.5, 0.0, 1.0), d <= spec.object_radius, c


def generate(spec: SynthSpec) -> SynthVideo:
    validate(spec)
    motion = Motion(spec)
    tex = Texture(spec.texture, spec.seed, spec.checker_size)
    obj_tex = ObjectTexture(spec.seed)
    h, w, n = spec.height, spec.width, spec.frames
    grid = _pixel_grid(h, w)

    frames = np.empty((n, h, w, 3))
    masks = np.zeros((n, h, w), dtype=bool)
    for t in range(n):
        q = motion.inverse(grid, t)
        img = tex(q[..., 0], q[..., 1])
        if spec.object:
            alpha, inside, c = _object_alpha(spec, grid, t)
            col = obj_tex(grid[..., 0] - c[0], grid[..., 1] - c[1])
            img = alpha[..., None] * col + (1 - alpha[..., None]) * img
            masks[t] = inside
        frames[t] = img

    video = SynthVideo(spec, frames.astype(np.float32), None, None, None, masks, motion)
    fwd = np.empty((max(n - 1, 0), h, w, 2))
    bwd = np.empty_like(fwd)
    for t in range(n - 1):
        fwd[t] = video.warp_oracle(grid, t, t + 1) - grid
        bwd[t] = video.warp_oracle(grid, t + 1, t) - grid
    video.fwd = fwd.astype(np.float32)
    video.bwd = bwd.astype(np.float32)
    video.occlusion = np.stack([_round_trip_failure(video, t, grid) for t in range(n - 1)]) if n > 1 \
        else np.zeros((0, h, w), dtype=bool)
    return video


def _round_trip_failure(video: SynthVideo, t: int, grid, tolerance: float = 0.2) -> np.ndarray:
    """Pixels where the forward-backward round trip cannot return to the start.

    This is the geometry the forward-backward color test probes. Following
    the backward flow from ``x`` to ``y`` and the exact forward motion from
    ``y`` must land back on ``x`` (0.5 px) with ``y`` inside the frame.
    The discrete test also reads the forward flow from the pixels around
    ``y`` and clamps at the frame edge, so the same double warp is applied
    to the pixel coordinates themselves; where it is off by ``tolerance`` px
    or more, the pixel is in the boundary band.
    """
    from .flow import warp

    h, w = grid.shape[:2]
    y = grid + video.bwd[t]
    inside = (y[..., 0] >= 0) & (y[..., 0] <= w - 1) & (y[..., 1] >= 0) & (y[..., 1] <= h - 1)
    z = video.warp_oracle(y, t, t + 1)
    back = np.hypot(*(z - grid).transpose(2, 0, 1)) < 0.5
    coords = warp(warp(grid, video.fwd[t].astype(np.float64)), video.bwd[t].astype(np.float64))
    clean = np.hypot(*(coords - grid).transpose(2, 0, 1)) < tolerance
    return ~(inside & back & clean)


def texture_resampling_error(spec: SynthSpec) -> float:
    """Max error of bilinearly resampling the texture at half-pixel offsets."""
    tex = Texture(spec.texture, spec.seed, spec.checker_size)
    g = _pixel_grid(spec.height, spec.width)
    img = tex(g[..., 0], g[..., 1])
    from .flow import bilinear_sample

    px = g[:-1, :-1, 0] + 0.5
    py = g[:-1, :-1, 1] + 0.5
    approx = bilinear_sample(img, px, py)
    exact = tex(px, py)
    return float(np.abs(approx - exact).max())
