"""Shared oracles and small builders for the test suite."""

from __future__ import annotations

import itertools

import mpmath
import numpy as np

from codef.fields import FieldConfig, FieldModel
from codef.grid_encoding import EncodingConfig, FeatureGrid


def resolution_oracle(n_min, n_max, levels, level):
    """floor(n_min * b**level) evaluated with 60 significant digits."""
    mpmath.mp.dps = 60
    if levels == 1:
        return n_min
    b = mpmath.e ** ((mpmath.log(n_max) - mpmath.log(n_min)) / (levels - 1))
    return int(mpmath.floor(n_min * b**level + mpmath.mpf(10) ** -40))


def naive_encode(config: EncodingConfig, tables, x, weights=None):
    """Straight-line reference: per query, per level, loop over the 2**d corners."""
    x = np.asarray(x, dtype=np.float64)
    d, L, F, T = config.dims, config.levels, config.features_per_level, config.table_size
    weights = np.ones(L) if weights is None else np.asarray(weights, dtype=np.float64)
    out = np.zeros((len(x), d + L * F))
    out[:, :d] = x
    for l in range(L):
        n = resolution_oracle(config.n_min, config.n_max, L, l)
        dense = (n + 1) ** d <= T
        for b, q in enumerate(x):
            cell = [min(int(np.floor(v * n)), n - 1) for v in q]
            frac = [v * n - c for v, c in zip(q, cell)]
            acc = np.zeros(F)
            for offs in itertools.product((0, 1), repeat=d):
                corner = [c + o for c, o in zip(cell, offs)]
                w = 1.0
                for o, f in zip(offs, frac):
                    w *= f if o else 1.0 - f
                if dense:
                    row = sum(c * (n + 1) ** i for i, c in enumerate(corner))
                else:
                    h = 0
                    for c, p in zip(corner, config.primes):
                        h ^= c * p
                    row = h % T
                acc += w * tables[l, row]
            out[b, d + l * F:d + (l + 1) * F] = weights[l] * acc
    return out


def tiny_field_config(padding=0.2) -> FieldConfig:
    return FieldConfig(
        canonical=EncodingConfig(dims=2, levels=3, features_per_level=2, table_size=2**6, n_min=2, n_max=12),
        deformation=EncodingConfig(dims=3, levels=3, features_per_level=2, table_size=2**6, n_min=2, n_max=8),
        canonical_hidden=(8,),
        deformation_hidden=(8,),
        padding=padding,
    )


def small_field_config(padding=0.2) -> FieldConfig:
    """Fast configuration for end-to-end tests that only need plumbing to work."""
    return FieldConfig(
        canonical=EncodingConfig(dims=2, levels=8, features_per_level=2, table_size=2**12, n_min=4, n_max=64),
        deformation=EncodingConfig(dims=3, levels=6, features_per_level=2, table_size=2**12, n_min=4, n_max=32),
        canonical_hidden=(16, 16),
        deformation_hidden=(16, 16),
        padding=padding,
    )


def random_model(rng, config=None, dtype=np.float64, table_scale=0.5, deform_scale=0.3) -> FieldModel:
    """A model with every parameter group randomized so all gradients are nonzero."""
    config = config or tiny_field_config()
    m = FieldModel.create(config, rng, dtype)
    for g in m.grids():
        g.tables[...] = rng.uniform(-table_scale, table_scale, g.tables.shape)
    for mlp in m.mlps():
        for b in mlp.biases:
            b[...] = rng.uniform(-0.2, 0.2, b.shape)
    m.deform_mlp.weights[-1][...] = rng.uniform(-deform_scale, deform_scale, m.deform_mlp.weights[-1].shape)
    return m


def relative_error(analytic, numeric, floor=1e-6) -> float:
    """Norm-relative error; below ``floor`` the comparison becomes absolute.

    Central differences with h=1e-6 carry roughly 1e-10 of rounding noise, so
    gradients that are exactly zero (a bias that cancels, say) must not be
    divided by their own noise.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(n), np.linalg.norm(a), floor)
    return float(np.linalg.norm(a - n) / scale)


def finite_difference(fn, array, index, h=1e-6) -> float:
    old = array[index]
    array[index] = old + h
    up = fn()
    array[index] = old - h
    down = fn()
    array[index] = old
    return (up - down) / (2 * h)


def model_parameter_groups(model: FieldModel):
    """(name, parameter, gradient) for every parameter array of a field model."""
    groups = [
        ("canonical.tables", model.canonical_grid.tables, model.canonical_grid.grads),
        ("deformation.tables", model.deform_grid.tables, model.deform_grid.grads),
    ]
    for name, mlp in (("canonical", model.canonical_mlp), ("deformation", model.deform_mlp)):
        for i, (p, g) in enumerate(zip(mlp.parameters(), mlp.gradients())):
            groups.append((f"{name}.mlp{i}", p, g))
    return groups


def check_gradients(model, loss_fn, rng, per_group=6, h=1e-6):
    """Worst relative error over parameter groups of ``loss_fn``'s accumulated gradient.

    ``loss_fn(accumulate)`` returns the loss; with ``accumulate`` True it must
    also add its gradient into ``model``. Coordinates are drawn mostly among
    entries with nonzero analytic gradient.
    """
    models = model.layers if hasattr(model, "layers") else [model]
    for m in models:
        m.zero_grad()
    loss_fn(True)
    analytic = {}
    groups = []
    for k, m in enumerate(models):
        for name, p, g in model_parameter_groups(m):
            groups.append((f"layer{k}.{name}", p, g))
            analytic[f"layer{k}.{name}"] = g.copy()
    worst = 0.0
    for name, p, _ in groups:
        g = analytic[name]
        flat = np.flatnonzero(g)
        # mostly entries the loss touches, plus arbitrary ones to catch missing gradients
        pick = rng.choice(g.size, size=min(2, g.size), replace=False)
        if len(flat):
            pick = np.union1d(pick, rng.choice(flat, size=min(per_group, len(flat)), replace=False))
        idx = [np.unravel_index(i, p.shape) for i in pick]
        num = np.array([finite_difference(lambda: loss_fn(False), p, ix, h) for ix in idx])
        ana = np.array([g[ix] for ix in idx])
        worst = max(worst, relative_error(ana, num))
    return worst
