"""Per-scene fitting: pixel sampling, losses, Adam, annealing and checkpoints.

One training step draws a batch of pixels, evaluates the composed field,
and accumulates gradients of

    total = loss_rec + flow_weight * loss_flow (+ bg_weight * loss_bg)

into the model before a single Adam update. The standalone loss functions
below are the reference definitions; :func:`train_step` fuses them so the
deformation of each sampled point is evaluated and back-propagated once.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from .fields import FieldConfig, FieldModel, GroupedFieldModel, assign_layers
from .flow import flow_masks as compute_flow_masks
from .grid_encoding import AnnealState, FeatureGrid, anneal_weights
from .mlp import MlpParams

CHECKPOINT_MAGIC = b"CODF"
CHECKPOINT_VERSION = 1
LOG_HEADER = "step,loss_rec,loss_flow,loss_bg,total"


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 10000
    n_beg: int = 4000
    n_step: int = 4000
    base_levels: int = 4
    anneal: bool = True
    batch_size: int = 8192
    flow_weight: float = 1.0
    bg_weight: float = 1.0
    bg_fraction: float = 0.25
    eps: float = 0.02
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.total_steps < 0 or self.batch_size < 0:
            raise ValueError("total_steps and batch_size must be nonnegative")
        if self.n_beg < 0 or self.n_step < 0:
            raise ValueError("anneal steps must be nonnegative")
        if self.anneal and self.n_beg + self.n_step > self.total_steps:
            raise ValueError(
                f"anneal ends at step {self.n_beg + self.n_step}, after total_steps={self.total_steps}"
            )
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.bg_fraction <= 1.0:
            raise ValueError("bg_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def anneal_state(self, step: int) -> AnnealState:
        return AnnealState(self.n_beg, self.n_step, self.base_levels, step)


def level_weights(config: TrainConfig, levels: int, step: int) -> np.ndarray:
    """Deformation-encoding level weights at ``step`` (all ones with annealing off)."""
    if not config.anneal:
        return np.ones(levels)
    return anneal_weights(config.anneal_state(step), levels)


# -- sampling -----------------------------------------------------------------


@dataclass
class Batch:
    """Sampled pixels: frame index, row, column, and normalized ``(x, y, t)``."""

    frame: np.ndarray
    row: np.ndarray
    col: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.frame)

    def subset(self, sel) -> "Batch":
        return Batch(self.frame[sel], self.row[sel], self.col[sel], self.points[sel])


def make_batch(frame, row, col, shape, dtype=np.float32) -> Batch:
    n, h, w = shape
    frame = np.asarray(frame, dtype=np.int64)
    row = np.asarray(row, dtype=np.int64)
    col = np.asarray(col, dtype=np.int64)
    t = frame / (n - 1) if n > 1 else np.zeros(len(frame))
    pts = np.stack([(col + 0.5) / w, (row + 0.5) / h, t], axis=1).astype(dtype)
    return Batch(frame, row, col, pts.reshape(-1, 3))


def sample_batch(rng, shape, batch_size: int, dtype=np.float32) -> Batch:
    """Uniform i.i.d. draws over all ``N * H * W`` pixels of the video."""
    n, h, w = shape
    if n * h * w == 0:
        raise ValueError("cannot sample from an empty video")
    idx = rng.integers(0, n * h * w, size=batch_size)
    frame, rest = np.divmod(idx, h * w)
    row, col = np.divmod(rest, w)
    return make_batch(frame, row, col, shape, dtype)


def sample_from(rng, flat_index, count: int, shape, dtype=np.float32) -> Batch:
    """Uniform draws among the given flat ``(frame, row, col)`` indices."""
    n, h, w = shape
    if len(flat_index) == 0 or count == 0:
        return make_batch([], [], [], shape, dtype)
    idx = flat_index[rng.integers(0, len(flat_index), size=count)]
    frame, rest = np.divmod(idx, h * w)
    row, col = np.divmod(rest, w)
    return make_batch(frame, row, col, shape, dtype)


def sample_grouped(rng, assignment, k: int, batch_size: int, bg_fraction: float, dtype=np.float32):
    """In-layer and background samples for layer ``k`` of a ``(N, H, W)`` assignment.

    Draws ``batch_size`` pixels inside the layer and ``round(bg_fraction * batch_size)``
    outside it.
    """
    flat = assignment.reshape(-1)
    inside = np.flatnonzero(flat == k)
    outside = np.flatnonzero(flat != k)
    n_bg = int(round(bg_fraction * batch_size))
    return (
        sample_from(rng, inside, batch_size, assignment.shape, dtype),
        sample_from(rng, outside, n_bg, assignment.shape, dtype),
    )


# -- losses -------------------------------------------------------------------


def loss_rec(model: FieldModel, points, target, weights_2d=None, weights_3d=None, scale=1.0) -> float:
    """Mean squared color error over points and channels.

    Gradients of ``scale * loss`` are accumulated into ``model``.
    """
    target = np.asarray(target)
    if len(target) == 0:
        return 0.0
    rgb, cache = model.forward(points, weights_2d, weights_3d)
    diff = rgb - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    model.backward(cache, (2.0 * scale / diff.size) * diff)
    return loss


def flow_targets(batch: Batch, fwd, confident, shape):
    """Flow-loss terms available for ``batch``.

    Returns ``(sel, flow_n)``: the batch entries that have a following frame,
    a confident forward flow, and whose flow target stays inside the frame,
    with their forward flow in normalized units.
    """
    n, h, w = shape
    sel = batch.frame < n - 1
    f = np.minimum(batch.frame, max(n - 2, 0))
    if n < 2:
        return np.zeros(len(batch), dtype=bool), np.zeros((0, 2))
    uv = fwd[f, batch.row, batch.col]
    sel &= confident[f, batch.row, batch.col]
    tx = batch.col + uv[:, 0]
    ty = batch.row + uv[:, 1]
    sel &= (tx >= -0.5) & (tx <= w - 0.5) & (ty >= -0.5) & (ty <= h - 0.5)
    flow_n = uv[sel] / np.array([w, h], dtype=uv.dtype)
    return sel, flow_n


def _flow_residual_grad(model: FieldModel, src, flow_n, dt, weights_3d, delta_src=None):
    """Residual norms and the d/d(delta) factors for the flow term."""
    src = np.ascontiguousarray(src, dtype=model.dtype)
    dst = src.copy()
    dst[:, :2] += flow_n.astype(model.dtype)
    dst[:, 2] += dt
    if delta_src is None:
        delta_src = model.displacement(src, weights_3d)
    delta_dst, cache_dst = model.displacement_forward(dst, weights_3d)
    r = delta_src.astype(np.float64) - delta_dst - flow_n
    norm = np.sqrt(np.sum(r * r, axis=1))
    unit = np.divide(r, norm[:, None], out=np.zeros_like(r), where=norm[:, None] > 0)
    return norm, unit, cache_dst


def loss_flow(model: FieldModel, points, flow_n, dt, weights_3d=None, scale=1.0) -> float:
    """Mean over points of ``|delta(x, t) - delta(x + F, t + dt) - F|``.

    ``points`` are the confident source points and ``flow_n`` their forward
    flow in normalized units; ``dt`` is the normalized time between frames.
    The norm's gradient at a zero residual is taken as 0.
    """
    points = np.ascontiguousarray(points, dtype=model.dtype)
    if len(points) == 0:
        return 0.0
    delta_src, cache_src = model.displacement_forward(points, weights_3d)
    norm, unit, cache_dst = _flow_residual_grad(model, points, flow_n, dt, weights_3d, delta_src)
    g = (scale / len(points)) * unit
    model.displacement_backward(cache_src, g.astype(model.dtype))
    model.displacement_backward(cache_dst, (-g).astype(model.dtype))
    return float(norm.mean())


def loss_bg(model: GroupedFieldModel, outside, targets, weights_2d=None, weights_3d=None, scale=1.0) -> float:
    """Mean squared error of each layer evaluated outside its own mask.

    ``outside[k]`` holds points outside layer ``k``'s mask and ``targets[k]``
    their frame colors. The mean runs over all points and channels.
    """
    total = sum(np.asarray(t).size for t in targets)
    if total == 0:
        return 0.0
    loss = 0.0
    for layer, p, tgt in zip(model.layers, outside, targets):
        tgt = np.asarray(tgt)
        if len(tgt) == 0:
            continue
        share = tgt.size / total
        loss += share * loss_rec(layer, p, tgt, weights_2d, weights_3d, scale * share)
    return loss


# -- Adam -----------------------------------------------------------------------


def adam_step(param, grad, m, v, step: int, lr: float, beta1=0.9, beta2=0.99, eps=1e-15) -> None:
    """Bias-corrected Adam update of ``param`` in place; ``step`` counts from 1."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    param -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(param.dtype)


@numba.njit(cache=True)
def _sparse_adam(tables, grads, dirty, m, v, lr, beta1, beta2, eps, c1, c2):
    L, T, F = tables.shape
    for l in range(L):
        for r in range(T):
            if not dirty[l, r]:
                continue
            dirty[l, r] = False
            for f in range(F):
                g = grads[l, r, f]
                mf = beta1 * m[l, r, f] + (1.0 - beta1) * g
                vf = beta2 * v[l, r, f] + (1.0 - beta2) * g * g
                m[l, r, f] = mf
                v[l, r, f] = vf
                tables[l, r, f] -= lr * (mf / c1) / (np.sqrt(vf / c2) + eps)
                grads[l, r, f] = 0.0


def sparse_adam_step(grid: FeatureGrid, m, v, step: int, lr: float, beta1=0.9, beta2=0.99, eps=1e-15) -> None:
    """Adam on the table rows touched since the last update, then clear their gradients.

    Untouched rows keep their parameters and moments, which is the usual
    treatment of hash-grid tables where most rows see no data in a step.
    """
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    _sparse_adam(grid.tables, grid.grads, grid.dirty, m, v, lr, beta1, beta2, eps, c1, c2)


class Optimizer:
    """Adam over every parameter of a (grouped) field model."""

    def __init__(self, model, config: TrainConfig):
        self.config = config
        self.step = 0
        layers = model.layers if isinstance(model, GroupedFieldModel) else [model]
        self.grids = []
        self.dense = []
        for layer in layers:
            for g in layer.grids():
                self.grids.append((g, np.zeros_like(g.tables), np.zeros_like(g.tables)))
            for mlp in layer.mlps():
                for p, g in zip(mlp.parameters(), mlp.gradients()):
                    self.dense.append((p, g, np.zeros_like(p), np.zeros_like(p)))

    def update(self) -> None:
        c = self.config
        self.step += 1
        for grid, m, v in self.grids:
            sparse_adam_step(grid, m, v, self.step, c.lr_grid, c.beta1, c.beta2, c.adam_eps)
        for p, g, m, v in self.dense:
            adam_step(p, g, m, v, self.step, c.lr_mlp, c.beta1, c.beta2, c.adam_eps)
            g[...] = 0.0


# -- fused training step --------------------------------------------------------


@dataclass
class StepLosses:
    rec: float = 0.0
    flow: float = 0.0
    bg: float = 0.0
    total: float = 0.0


def _layer_step(model: FieldModel, rec: Batch, bg: Batch, video, fwd, confident, w3, scales):
    """Accumulate one layer's gradients; returns summed (not averaged) loss terms."""
    n, h, w = video.shape[:3]
    rec_scale, bg_scale, flow_scale = scales
    points = np.concatenate([rec.points, bg.points])
    target = np.concatenate([video[rec.frame, rec.row, rec.col], video[bg.frame, bg.row, bg.col]])
    rgb, (dcache, ccache, delta) = model.forward(points, None, w3)
    diff = rgb - target
    sq = np.square(diff, dtype=np.float64).sum(axis=1)
    nr = len(rec)
    coef = np.empty((len(points), 1), dtype=model.dtype)
    coef[:nr] = 2.0 * rec_scale
    coef[nr:] = 2.0 * bg_scale
    grad_xc = model.color_backward(ccache, coef * diff)

    flow_sum = 0.0
    if flow_scale > 0 and n > 1:
        sel, flow_n = flow_targets(rec, fwd, confident, video.shape[:3])
        if sel.any():
            idx = np.flatnonzero(sel)
            norm, unit, cache_dst = _flow_residual_grad(
                model, rec.points[idx], flow_n, 1.0 / (n - 1), w3, delta[idx]
            )
            g = (flow_scale * unit).astype(model.dtype)
            grad_xc[idx] += g
            model.displacement_backward(cache_dst, -g)
            flow_sum = float(norm.sum())
    model.displacement_backward(dcache, grad_xc)
    return float(sq[:nr].sum()), float(sq[nr:].sum()), flow_sum


def train_step(model, video, fwd, confident, rng, config: TrainConfig, step: int, assignment=None) -> StepLosses:
    """Sample a batch and accumulate gradients of the total loss into ``model``."""
    shape = video.shape[:3]
    n = shape[0]
    d_levels = (model.layers[0] if isinstance(model, GroupedFieldModel) else model).config.deformation.levels
    w3 = level_weights(config, d_levels, step)
    use_flow = config.flow_weight > 0 and n > 1
    if isinstance(model, GroupedFieldModel):
        k_layers = len(model)
        per = config.batch_size // k_layers
        draws = [sample_grouped(rng, assignment, k, per, config.bg_fraction if k_layers > 1 else 0.0,
                                model.dtype) for k in range(k_layers)]
        layers = model.layers
    else:
        draws = [(sample_batch(rng, shape, config.batch_size, model.dtype), make_batch([], [], [], shape))]
        layers = [model]
    n_rec = sum(len(r) for r, _ in draws)
    n_bg = sum(len(b) for _, b in draws)
    n_flow = 0
    if use_flow:
        n_flow = sum(int(flow_targets(r, fwd, confident, shape)[0].sum()) for r, _ in draws)
    scales = (
        1.0 / (3 * n_rec) if n_rec else 0.0,
        config.bg_weight / (3 * n_bg) if n_bg else 0.0,
        config.flow_weight / n_flow if n_flow else 0.0,
    )
    rec_sum = bg_sum = flow_sum = 0.0
    for layer, (rec, bg) in zip(layers, draws):
        r, b, f = _layer_step(layer, rec, bg, video, fwd, confident, w3, scales)
        rec_sum += r
        bg_sum += b
        flow_sum += f
    out = StepLosses(
        rec_sum / (3 * n_rec) if n_rec else 0.0,
        flow_sum / n_flow if n_flow else 0.0,
        bg_sum / (3 * n_bg) if n_bg else 0.0,
    )
    out.total = out.rec + config.flow_weight * out.flow + config.bg_weight * out.bg
    return out


# -- fitting --------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: object
    train_config: TrainConfig
    video_shape: tuple
    step: int = 0
    rng_state: dict = None

    @property
    def mode(self) -> str:
        return "grouped" if isinstance(self.model, GroupedFieldModel) else "single"

    @property
    def layers(self) -> list:
        return self.model.layers if isinstance(self.model, GroupedFieldModel) else [self.model]

    @property
    def field_config(self) -> FieldConfig:
        return self.layers[0].config


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: np.ndarray = field(repr=False)  # (steps, 5): step, rec, flow, bg, total


def fit(video, fwd=None, bwd=None, config: TrainConfig = None, field_config: FieldConfig = None,
        layer_masks=None, confident=None, log_path=None, callback=None) -> FitResult:
    """Fit a field model to ``video`` (N, H, W, 3) in [0, 1].

    ``fwd``/``bwd`` are (N-1, H, W, 2) pixel flows, needed when the flow
    weight is positive. ``layer_masks`` (N, K, H, W) switches to grouped
    mode with one field per layer. ``confident`` overrides the flow
    confidence masks computed from the flows. ``callback(step, losses, model)``
    runs after every update.
    """
    config = config or TrainConfig()
    field_config = field_config or FieldConfig()
    video = np.ascontiguousarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[3] != 3 or video.shape[0] == 0:
        raise ValueError(f"video must have shape (N, H, W, 3) with N >= 1, got {video.shape}")
    shape = video.shape[:3]
    n = shape[0]
    if config.flow_weight > 0 and n > 1:
        if fwd is None or bwd is None:
            raise ValueError("flows are required when flow_weight > 0")
        fwd = np.asarray(fwd, dtype=np.float32)
        bwd = np.asarray(bwd, dtype=np.float32)
        if fwd.shape != (n - 1, *shape[1:], 2) or bwd.shape != fwd.shape:
            raise ValueError(f"flows must have shape {(n - 1, *shape[1:], 2)}")
        if confident is None:
            confident = compute_flow_masks(video, fwd, bwd, config.eps)
    rng = np.random.default_rng(config.seed)
    assignment = None
    if layer_masks is not None:
        layer_masks = np.asarray(layer_masks, dtype=bool)
        if layer_masks.shape[0] != n or layer_masks.shape[2:] != shape[1:]:
            raise ValueError(f"layer masks {layer_masks.shape} do not match video {shape}")
        assignment = np.stack([assign_layers(m, shape[1:]) for m in layer_masks])
        model = GroupedFieldModel.create(layer_masks.shape[1], field_config, rng)
    else:
        model = FieldModel.create(field_config, rng)
    opt = Optimizer(model, config)
    log = np.zeros((config.total_steps, 5))
    for step in range(config.total_steps):
        losses = train_step(model, video, fwd, confident, rng, config, step, assignment)
        opt.update()
        log[step] = (step, losses.rec, losses.flow, losses.bg, losses.total)
        if callback is not None:
            callback(step, losses, model)
    ckpt = Checkpoint(model, config, shape, config.total_steps, rng.bit_generator.state)
    if log_path is not None:
        write_loss_log(log_path, log)
    return FitResult(ckpt, log)


def write_loss_log(path, log) -> None:
    lines = [LOG_HEADER]
    for row in log:
        lines.append(f"{int(row[0])},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_log(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"{path}: not a loss log")
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, 5)


# -- checkpoint I/O ---------------------------------------------------------------


def _blobs(ckpt: Checkpoint):
    for k, layer in enumerate(ckpt.layers):
        yield f"layer{k}.canonical.tables", layer.canonical_grid.tables
        for name, mlp in (("canonical", layer.canonical_mlp), ("deformation", layer.deform_mlp)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                yield f"layer{k}.{name}.w{i}", w
                yield f"layer{k}.{name}.b{i}", b
            if name == "canonical":
                yield f"layer{k}.deformation.tables", layer.deform_grid.tables


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blobs = [(name, np.ascontiguousarray(a, dtype="<f4")) for name, a in _blobs(ckpt)]
    header = {
        "field_config": ckpt.field_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "mode": ckpt.mode,
        "layers": len(ckpt.layers),
        "video_shape": list(ckpt.video_shape),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "blobs": [{"name": name, "dtype": "<f4", "shape": list(a.shape)} for name, a in blobs],
    }
    meta = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    parts.extend(a.tobytes() for _, a in blobs)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a temporary file in the same directory is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(data, dtype)


def checkpoint_from_bytes(data: bytes, dtype=np.float32) -> Checkpoint:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint is corrupt (CRC mismatch)")
    version, meta_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + meta_len])
    offset = 12 + meta_len
    arrays = {}
    for b in header["blobs"]:
        count = int(np.prod(b["shape"]))
        a = np.frombuffer(data, dtype=b["dtype"], count=count, offset=offset).reshape(b["shape"])
        arrays[b["name"]] = a.astype(dtype)
        offset += a.nbytes
    if offset != len(data) - 4:
        raise CheckpointError("checkpoint payload size does not match its header")

    fc = FieldConfig.from_dict(header["field_config"])
    layers = []
    for k in range(header["layers"]):
        def mlp(name, widths, act):
            n_layers = len(widths) - 1
            return MlpParams(
                widths,
                [arrays[f"layer{k}.{name}.w{i}"] for i in range(n_layers)],
                [arrays[f"layer{k}.{name}.b{i}"] for i in range(n_layers)],
                act,
            )

        layers.append(FieldModel(
            fc,
            FeatureGrid(fc.canonical, arrays[f"layer{k}.canonical.tables"]),
            mlp("canonical", (fc.canonical.output_dim, *fc.canonical_hidden, 3), "sigmoid"),
            FeatureGrid(fc.deformation, arrays[f"layer{k}.deformation.tables"]),
            mlp("deformation", (fc.deformation.output_dim, *fc.deformation_hidden, 2), "identity"),
        ))
    model = GroupedFieldModel(layers) if header["mode"] == "grouped" else layers[0]
    return Checkpoint(
        model,
        TrainConfig.from_dict(header["train_config"]),
        tuple(header["video_shape"]),
        header["step"],
        header["rng_state"],
    )
