"""Multi-resolution feature-grid encodings with spatial hashing.

A grid of ``L`` levels maps a point in ``[0, 1]^d`` to the concatenation of the
raw coordinates and one ``F``-dimensional feature per level, each obtained by
d-linear interpolation of learnable vertex features. Coarse levels whose
vertex count fits in the table are indexed densely (x fastest); finer levels
go through an XOR-of-primes hash.

The heavy lifting is done by small numba kernels that visit the batch in a
fixed order, so forward and backward passes are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

DEFAULT_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class EncodingConfig:
    dims: int = 2
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2**19
    n_min: int = 16
    n_max: int = 1024
    primes: tuple = DEFAULT_PRIMES

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table_size must be a power of two, got {t}")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.levels >= 2 and self.n_max <= self.n_min:
            raise ValueError("n_max must exceed n_min when levels >= 2")
        if len(self.primes) < self.dims:
            raise ValueError("need one prime per dimension")
        object.__setattr__(self, "primes", tuple(int(p) for p in self.primes))

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.levels - 1))

    @property
    def output_dim(self) -> int:
        return self.dims + self.levels * self.features_per_level

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "levels": self.levels,
            "features_per_level": self.features_per_level,
            "table_size": self.table_size,
            "n_min": self.n_min,
            "n_max": self.n_max,
            "primes": list(self.primes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingConfig":
        d = dict(d)
        if "primes" in d:
            d["primes"] = tuple(d["primes"])
        return cls(**d)


CANONICAL_ENCODING = EncodingConfig(dims=2, n_min=16, n_max=1024)
DEFORMATION_ENCODING = EncodingConfig(dims=3, n_min=8, n_max=256)


def level_resolution(config: EncodingConfig, level: int) -> int:
    """Cells per unit length at ``level``: floor(n_min * b**level)."""
    if not 0 <= level < config.levels:
        raise IndexError(f"level {level} outside [0, {config.levels})")
    if level == 0:
        return config.n_min
    v = config.n_min * config.growth**level
    r = round(v)
    # snap values that are integers up to rounding noise
    if abs(v - r) <= 1e-9 * v:
        return int(r)
    return int(math.floor(v))


def level_resolutions(config: EncodingConfig) -> np.ndarray:
    return np.array([level_resolution(config, l) for l in range(config.levels)], dtype=np.int64)


def is_dense(config: EncodingConfig, level: int) -> bool:
    n = level_resolution(config, level)
    return (n + 1) ** config.dims <= config.table_size


def corner_coords(x, resolution: int):
    """Enclosing cell of ``x`` at the given resolution.

    Returns ``(lower, upper, corners, weights)`` where ``corners`` lists the
    2**d lattice points (bit i of the corner number selects the upper end on
    axis i) and ``weights`` their d-linear interpolation coefficients. A
    coordinate sitting exactly on the far boundary stays in the last cell with
    fraction 1.
    """
    x = np.asarray(x, dtype=np.float64)
    pos = x * resolution
    lower = np.minimum(np.floor(pos).astype(np.int64), resolution - 1)
    lower = np.maximum(lower, 0)
    frac = pos - lower
    d = x.shape[0]
    corners = []
    weights = []
    for c in range(1 << d):
        bits = np.array([(c >> i) & 1 for i in range(d)])
        corners.append(lower + bits)
        weights.append(float(np.prod(np.where(bits == 1, frac, 1.0 - frac))))
    return lower, lower + 1, np.array(corners), np.array(weights)


def hash_index(corner, level: int, config: EncodingConfig) -> int:
    """Table row for an integer lattice corner at ``level``."""
    n = level_resolution(config, level)
    corner = [int(c) for c in corner]
    if (n + 1) ** config.dims <= config.table_size:
        idx, stride = 0, 1
        for c in corner:
            idx += c * stride
            stride *= n + 1
        return idx
    h = 0
    for c, p in zip(corner, config.primes):
        h ^= c * p
    return h % config.table_size


@numba.njit(cache=True)
def _cell(v, n):
    q = v * n
    i = int(math.floor(q))
    if i > n - 1:
        i = n - 1
    if i < 0:
        i = 0
    return i, q - i


@numba.njit(cache=True)
def _encode2(x, tables, res, dense, primes, weights, out):
    L, T, F = tables.shape
    mask = T - 1
    p1 = primes[1]
    rows = np.empty(4, np.int64)
    wcs = np.empty(4, np.float64)
    for b in range(x.shape[0]):
        x0 = x[b, 0]
        x1 = x[b, 1]
        out[b, 0] = x0
        out[b, 1] = x1
        for l in range(L):
            base = 2 + l * F
            w = weights[l]
            if w == 0.0:
                for f in range(F):
                    out[b, base + f] = 0.0
                continue
            n = res[l]
            i0, f0 = _cell(x0, n)
            i1, f1 = _cell(x1, n)
            isd = dense[l]
            for c in range(4):
                c0 = c & 1
                c1 = c >> 1
                wcs[c] = w * (f0 if c0 else 1 - f0) * (f1 if c1 else 1 - f1)
                if isd:
                    rows[c] = (i0 + c0) + (n + 1) * (i1 + c1)
                else:
                    rows[c] = ((i0 + c0) ^ ((i1 + c1) * p1)) & mask
            for f in range(F):
                acc = 0.0
                for c in range(4):
                    acc += wcs[c] * tables[l, rows[c], f]
                out[b, base + f] = acc


@numba.njit(cache=True)
def _encode3(x, tables, res, dense, primes, weights, out):
    L, T, F = tables.shape
    mask = T - 1
    p1 = primes[1]
    p2 = primes[2]
    rows = np.empty(8, np.int64)
    wcs = np.empty(8, np.float64)
    for b in range(x.shape[0]):
        x0 = x[b, 0]
        x1 = x[b, 1]
        x2 = x[b, 2]
        out[b, 0] = x0
        out[b, 1] = x1
        out[b, 2] = x2
        for l in range(L):
            base = 3 + l * F
            w = weights[l]
            if w == 0.0:
                for f in range(F):
                    out[b, base + f] = 0.0
                continue
            n = res[l]
            s = n + 1
            i0, f0 = _cell(x0, n)
            i1, f1 = _cell(x1, n)
            i2, f2 = _cell(x2, n)
            isd = dense[l]
            for c in range(8):
                c0 = c & 1
                c1 = (c >> 1) & 1
                c2 = c >> 2
                wcs[c] = w * (f0 if c0 else 1 - f0) * (f1 if c1 else 1 - f1) * (f2 if c2 else 1 - f2)
                if isd:
                    rows[c] = (i0 + c0) + s * ((i1 + c1) + s * (i2 + c2))
                else:
                    rows[c] = ((i0 + c0) ^ ((i1 + c1) * p1) ^ ((i2 + c2) * p2)) & mask
            for f in range(F):
                acc = 0.0
                for c in range(8):
                    acc += wcs[c] * tables[l, rows[c], f]
                out[b, base + f] = acc


@numba.njit(cache=True)
def _backward2(x, tables, res, dense, primes, weights, upstream, grads, dirty, grad_x, want_x, accumulate):
    L, T, F = tables.shape
    mask = T - 1
    p1 = primes[1]
    for b in range(x.shape[0]):
        g0 = np.float64(upstream[b, 0])
        g1 = np.float64(upstream[b, 1])
        for l in range(L):
            w = weights[l]
            if w == 0.0:
                continue
            base = 2 + l * F
            n = res[l]
            i0, f0 = _cell(x[b, 0], n)
            i1, f1 = _cell(x[b, 1], n)
            isd = dense[l]
            for c in range(4):
                c0 = c & 1
                c1 = c >> 1
                a0 = f0 if c0 else 1 - f0
                a1 = f1 if c1 else 1 - f1
                if isd:
                    row = (i0 + c0) + (n + 1) * (i1 + c1)
                else:
                    row = ((i0 + c0) ^ ((i1 + c1) * p1)) & mask
                if accumulate:
                    dirty[l, row] = True
                wc = a0 * a1
                dot = 0.0
                for f in range(F):
                    g = upstream[b, base + f] * w
                    if accumulate:
                        grads[l, row, f] += g * wc
                    if want_x:
                        dot += g * tables[l, row, f]
                if not want_x:
                    continue
                dot *= n
                # d(corner weight)/dx_a = +-n * (other axis factor)
                g0 += dot * a1 if c0 else -dot * a1
                g1 += dot * a0 if c1 else -dot * a0
        grad_x[b, 0] = g0
        grad_x[b, 1] = g1


@numba.njit(cache=True)
def _backward3(x, tables, res, dense, primes, weights, upstream, grads, dirty, grad_x, want_x, accumulate):
    L, T, F = tables.shape
    mask = T - 1
    p1 = primes[1]
    p2 = primes[2]
    for b in range(x.shape[0]):
        g0 = np.float64(upstream[b, 0])
        g1 = np.float64(upstream[b, 1])
        g2 = np.float64(upstream[b, 2])
        for l in range(L):
            w = weights[l]
            if w == 0.0:
                continue
            base = 3 + l * F
            n = res[l]
            s = n + 1
            i0, f0 = _cell(x[b, 0], n)
            i1, f1 = _cell(x[b, 1], n)
            i2, f2 = _cell(x[b, 2], n)
            isd = dense[l]
            for c in range(8):
                c0 = c & 1
                c1 = (c >> 1) & 1
                c2 = c >> 2
                a0 = f0 if c0 else 1 - f0
                a1 = f1 if c1 else 1 - f1
                a2 = f2 if c2 else 1 - f2
                if isd:
                    row = (i0 + c0) + s * ((i1 + c1) + s * (i2 + c2))
                else:
                    row = ((i0 + c0) ^ ((i1 + c1) * p1) ^ ((i2 + c2) * p2)) & mask
                if accumulate:
                    dirty[l, row] = True
                wc = a0 * a1 * a2
                dot = 0.0
                for f in range(F):
                    g = upstream[b, base + f] * w
                    if accumulate:
                        grads[l, row, f] += g * wc
                    if want_x:
                        dot += g * tables[l, row, f]
                if not want_x:
                    continue
                dot *= n
                g0 += dot * a1 * a2 if c0 else -dot * a1 * a2
                g1 += dot * a0 * a2 if c1 else -dot * a0 * a2
                g2 += dot * a0 * a1 if c2 else -dot * a0 * a1
        grad_x[b, 0] = g0
        grad_x[b, 1] = g1
        grad_x[b, 2] = g2


@numba.njit(cache=True)
def _clear_dirty(grads, dirty):
    L, T, F = grads.shape
    for l in range(L):
        for r in range(T):
            if dirty[l, r]:
                dirty[l, r] = False
                for f in range(F):
                    grads[l, r, f] = 0.0


@dataclass
class FeatureGrid:
    """Learnable per-level feature tables plus their gradient accumulators.

    ``tables`` has shape ``(L, T, F)``; every level owns ``T`` rows even when
    the dense lattice needs fewer. ``dirty[l, r]`` marks rows written by
    :func:`encode_backward` since the last :meth:`zero_grad`.
    """

    config: EncodingConfig
    tables: np.ndarray
    grads: np.ndarray = None
    dirty: np.ndarray = None

    def __post_init__(self):
        c = self.config
        shape = (c.levels, c.table_size, c.features_per_level)
        if self.tables.shape != shape:
            raise ValueError(f"tables shape {self.tables.shape} != {shape}")
        self.tables = np.ascontiguousarray(self.tables)
        if self.grads is None:
            self.grads = np.zeros_like(self.tables)
        if self.dirty is None:
            self.dirty = np.zeros(shape[:2], dtype=np.bool_)
        self._res = level_resolutions(c)
        self._dense = np.array([is_dense(c, l) for l in range(c.levels)])
        self._primes = np.zeros(3, dtype=np.int64)
        self._primes[: c.dims] = c.primes[: c.dims]

    @classmethod
    def create(cls, config: EncodingConfig, rng=None, dtype=np.float32, init_range=1e-4):
        rng = np.random.default_rng(rng)
        shape = (config.levels, config.table_size, config.features_per_level)
        tables = rng.uniform(-init_range, init_range, size=shape).astype(dtype)
        return cls(config, tables)

    @property
    def dtype(self):
        return self.tables.dtype

    def zero_grad(self):
        _clear_dirty(self.grads, self.dirty)

    def astype(self, dtype) -> "FeatureGrid":
        return FeatureGrid(self.config, self.tables.astype(dtype))


def _prepare(grid: FeatureGrid, x, weights):
    x = np.ascontiguousarray(x, dtype=grid.dtype)
    if x.ndim != 2 or x.shape[1] != grid.config.dims:
        raise ValueError(f"expected points of shape (B, {grid.config.dims}), got {x.shape}")
    if weights is None:
        weights = np.ones(grid.config.levels)
    weights = np.ascontiguousarray(weights, dtype=grid.dtype)
    if weights.shape != (grid.config.levels,):
        raise ValueError("need one weight per level")
    return x, weights


def encode(grid: FeatureGrid, x, weights=None) -> np.ndarray:
    """Encode a batch of points ``x`` of shape ``(B, d)`` in ``[0, 1]^d``.

    Level ``l``'s interpolated feature is scaled by ``weights[l]``; output has
    shape ``(B, d + L * F)``.
    """
    x, weights = _prepare(grid, x, weights)
    out = np.empty((x.shape[0], grid.config.output_dim), dtype=grid.dtype)
    kernel = _encode2 if grid.config.dims == 2 else _encode3
    kernel(x, grid.tables, grid._res, grid._dense, grid._primes, weights, out)
    return out


def encode_backward(grid: FeatureGrid, x, weights, upstream, want_x=True, accumulate=True) -> np.ndarray:
    """Accumulate table gradients into ``grid.grads``; return d(loss)/dx.

    The coordinate gradient is the derivative of the d-linear interpolant
    inside the enclosing cell; across cell faces it jumps (a subgradient).
    With ``want_x=False`` only the raw-coordinate passthrough term is returned,
    which skips a table read per corner. ``accumulate=False`` leaves the
    table gradients untouched (Jacobian queries).
    """
    x, weights = _prepare(grid, x, weights)
    upstream = np.ascontiguousarray(upstream, dtype=grid.dtype)
    if upstream.shape != (x.shape[0], grid.config.output_dim):
        raise ValueError(f"upstream shape {upstream.shape} does not match encoding")
    grad_x = np.empty_like(x)
    kernel = _backward2 if grid.config.dims == 2 else _backward3
    kernel(x, grid.tables, grid._res, grid._dense, grid._primes, weights, upstream,
           grid.grads, grid.dirty, grad_x, want_x, accumulate)
    return grad_x


@dataclass
class AnnealState:
    n_beg: int = 4000
    n_step: int = 4000
    base_levels: int = 4
    step: int = 0


def anneal_weights(state: AnnealState, levels: int) -> np.ndarray:
    """Coarse-to-fine level weights at the current step.

    Levels below ``base_levels`` are always on. The remaining ones open one
    after another along a cosine ramp as ``alpha`` sweeps from 0 to
    ``levels - base_levels`` over ``[n_beg, n_beg + n_step]``.
    """
    w = np.ones(levels)
    if state.n_step > 0:
        progress = min(max((state.step - state.n_beg) / state.n_step, 0.0), 1.0)
    else:
        progress = 1.0 if state.step >= state.n_beg else 0.0
    alpha = (levels - state.base_levels) * progress
    for l in range(state.base_levels, levels):
        a = min(max(alpha - (l - state.base_levels), 0.0), 1.0)
        w[l] = (1.0 - math.cos(math.pi * a)) / 2.0
    return w
