"""Canonical content field, temporal deformation field, and their composition.

A frame point ``p = (x, y, t)`` (all in ``[0, 1]``) is mapped to the canonical
plane by ``x' = (x, y) + delta(x, y, t)`` where ``delta`` is the deformation
head applied to the 3D grid encoding. The canonical head turns the 2D grid
encoding of ``x'`` into an RGB color. The canonical plane extends ``padding``
beyond the unit square on every side so content that moves out of view still
has a home.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_encoding import (
    CANONICAL_ENCODING,
    DEFORMATION_ENCODING,
    EncodingConfig,
    FeatureGrid,
    encode,
    encode_backward,
)
from .mlp import MlpParams, mlp_backward, mlp_forward


@dataclass(frozen=True)
class FieldConfig:
    canonical: EncodingConfig = CANONICAL_ENCODING
    deformation: EncodingConfig = DEFORMATION_ENCODING
    canonical_hidden: tuple = (64, 64)
    deformation_hidden: tuple = (64, 64)
    padding: float = 0.2

    def __post_init__(self):
        if self.canonical.dims != 2 or self.deformation.dims != 3:
            raise ValueError("canonical encoding must be 2D and deformation encoding 3D")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        object.__setattr__(self, "canonical_hidden", tuple(self.canonical_hidden))
        object.__setattr__(self, "deformation_hidden", tuple(self.deformation_hidden))

    def to_dict(self) -> dict:
        return {
            "canonical": self.canonical.to_dict(),
            "deformation": self.deformation.to_dict(),
            "canonical_hidden": list(self.canonical_hidden),
            "deformation_hidden": list(self.deformation_hidden),
            "padding": self.padding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["canonical"] = EncodingConfig.from_dict(d["canonical"])
        d["deformation"] = EncodingConfig.from_dict(d["deformation"])
        return cls(**d)


@dataclass
class FieldModel:
    config: FieldConfig
    canonical_grid: FeatureGrid
    canonical_mlp: MlpParams
    deform_grid: FeatureGrid
    deform_mlp: MlpParams

    @classmethod
    def create(cls, config: FieldConfig = FieldConfig(), rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        cg = FeatureGrid.create(config.canonical, rng, dtype)
        # zero final layers: training starts from a mid-gray canonical image
        # seen through the identity deformation
        cm = MlpParams.create(
            (config.canonical.output_dim, *config.canonical_hidden, 3), "sigmoid", rng, dtype,
            zero_last=True,
        )
        dg = FeatureGrid.create(config.deformation, rng, dtype)
        dm = MlpParams.create(
            (config.deformation.output_dim, *config.deformation_hidden, 2), "identity", rng, dtype,
            zero_last=True,
        )
        return cls(config, cg, cm, dg, dm)

    @property
    def padding(self) -> float:
        return self.config.padding

    @property
    def dtype(self):
        return self.canonical_grid.dtype

    def grids(self):
        return [self.canonical_grid, self.deform_grid]

    def mlps(self):
        return [self.canonical_mlp, self.deform_mlp]

    def zero_grad(self):
        for g in self.grids():
            g.zero_grad()
        for m in self.mlps():
            m.zero_grad()

    def astype(self, dtype) -> "FieldModel":
        return FieldModel(
            self.config,
            self.canonical_grid.astype(dtype),
            self.canonical_mlp.astype(dtype),
            self.deform_grid.astype(dtype),
            self.deform_mlp.astype(dtype),
        )

    # -- deformation ---------------------------------------------------------

    def displacement(self, p, weights=None):
        """Displacement ``delta`` at frame points ``p`` of shape ``(B, 3)``."""
        return self.displacement_forward(p, weights)[0]

    def displacement_forward(self, p, weights=None):
        p = np.ascontiguousarray(p, dtype=self.dtype)
        feats = encode(self.deform_grid, p, weights)
        delta, mcache = mlp_forward(self.deform_mlp, feats)
        return delta, (p, weights, mcache)

    def displacement_backward(self, cache, grad_delta):
        p, weights, mcache = cache
        g = mlp_backward(self.deform_mlp, mcache, grad_delta)
        encode_backward(self.deform_grid, p, weights, g, want_x=False)

    def displacement_jacobian(self, p, weights=None):
        """d(delta)/d(x, y) at each point, shape ``(B, 2, 2)``; no gradients stored."""
        delta, (p, weights, mcache) = self.displacement_forward(p, weights)
        jac = np.empty((p.shape[0], 2, 2), dtype=self.dtype)
        for k in range(2):
            up = np.zeros_like(delta)
            up[:, k] = 1.0
            g = mlp_backward(self.deform_mlp, mcache, up, param_grads=False)
            gx = encode_backward(self.deform_grid, p, weights, g, accumulate=False)
            jac[:, k, :] = gx[:, :2]
        return jac

    # -- canonical -----------------------------------------------------------

    def to_unit(self, xc):
        """Affine map from the padded canonical plane to the encoder's unit square."""
        s = self.padding
        return (xc + s) / (1.0 + 2.0 * s)

    def color_forward(self, xc, weights=None):
        xc = np.asarray(xc, dtype=self.dtype)
        u = self.to_unit(xc)
        inside = (u >= 0.0) & (u <= 1.0)
        u = np.ascontiguousarray(np.clip(u, 0.0, 1.0), dtype=self.dtype)
        feats = encode(self.canonical_grid, u, weights)
        rgb, mcache = mlp_forward(self.canonical_mlp, feats)
        return rgb, (u, inside, weights, mcache)

    def color_backward(self, cache, grad_rgb):
        """Accumulate canonical-parameter gradients; return d(loss)/d(x')."""
        u, inside, weights, mcache = cache
        g = mlp_backward(self.canonical_mlp, mcache, grad_rgb)
        gu = encode_backward(self.canonical_grid, u, weights, g)
        return gu * inside / (1.0 + 2.0 * self.padding)

    # -- composition ---------------------------------------------------------

    def forward(self, p, weights_2d=None, weights_3d=None):
        delta, dcache = self.displacement_forward(p, weights_3d)
        xc = dcache[0][:, :2] + delta
        rgb, ccache = self.color_forward(xc, weights_2d)
        return rgb, (dcache, ccache, delta)

    def backward(self, cache, grad_rgb):
        dcache, ccache, _ = cache
        grad_xc = self.color_backward(ccache, grad_rgb)
        self.displacement_backward(dcache, grad_xc)


def deform(model: FieldModel, p, weights=None) -> np.ndarray:
    """Canonical position ``x' = (x, y) + delta(x, y, t)`` of frame points ``p``."""
    p = np.ascontiguousarray(p, dtype=model.dtype)
    return p[:, :2] + model.displacement(p, weights)


def canonical_color(model: FieldModel, xc, weights=None) -> np.ndarray:
    """RGB of the canonical field at canonical positions ``xc`` (clamped to the padded plane)."""
    return model.color_forward(xc, weights)[0]


def evaluate(model: FieldModel, p, weights_2d=None, weights_3d=None) -> np.ndarray:
    """Color of frame points ``p``: canonical color at the deformed position."""
    return model.forward(p, weights_2d, weights_3d)[0]


@dataclass
class GroupedFieldModel:
    """One field model per semantic layer; pixels are routed by hard assignment."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one layer")

    @classmethod
    def create(cls, n_layers: int, config: FieldConfig = FieldConfig(), rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        return cls([FieldModel.create(config, rng, dtype) for _ in range(n_layers)])

    @property
    def config(self) -> FieldConfig:
        return self.layers[0].config

    @property
    def dtype(self):
        return self.layers[0].dtype

    def __len__(self):
        return len(self.layers)

    def zero_grad(self):
        for m in self.layers:
            m.zero_grad()

    def evaluate(self, p, assignment, weights_2d=None, weights_3d=None):
        """Evaluate each point with the layer given by ``assignment`` (one int per point)."""
        p = np.ascontiguousarray(p, dtype=self.dtype)
        assignment = np.asarray(assignment)
        out = np.empty((p.shape[0], 3), dtype=self.dtype)
        for k, layer in enumerate(self.layers):
            sel = assignment == k
            if sel.any():
                out[sel] = evaluate(layer, p[sel], weights_2d, weights_3d)
        return out


def assign_layers(masks, shape=None) -> np.ndarray:
    """Per-pixel layer index from ``K`` boolean masks of shape ``(K, H, W)``.

    Where masks overlap the highest layer index wins; pixels no mask covers
    go to layer 0 (background).
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3:
        raise ValueError(f"masks must have shape (K, H, W), got {masks.shape}")
    if shape is not None and masks.shape[1:] != tuple(shape):
        raise ValueError(f"mask size {masks.shape[1:]} does not match frame size {tuple(shape)}")
    out = np.zeros(masks.shape[1:], dtype=np.int64)
    for k in range(1, masks.shape[0]):
        out[masks[k]] = k
    return out


def frame_time(frame, n_frames: int) -> float:
    if n_frames <= 1:
        return 0.0
    return frame / (n_frames - 1)


def pixel_points(height: int, width: int, frame=0, n_frames=1, scale=1, dtype=np.float32) -> np.ndarray:
    """Normalized ``(x, y, t)`` of every pixel center of a frame, row-major.

    ``scale`` rasterizes at ``scale`` times the pixel density.
    """
    h, w = height * scale, width * scale
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    t = np.full(h * w, frame_time(frame, n_frames))
    return np.stack([xs.ravel(), ys.ravel(), t], axis=1).astype(dtype)


def to_pixels(xy, height: int, width: int) -> np.ndarray:
    """Normalized coordinates to continuous pixel coordinates (pixel centers at integers)."""
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([xy[..., 0] * width - 0.5, xy[..., 1] * height - 0.5], axis=-1)


def from_pixels(px, height: int, width: int) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(px[..., 0] + 0.5) / width, (px[..., 1] + 0.5) / height], axis=-1)
