"""Session fixtures: fitted models of the synthetic videos, plus the acceptance report.

Fits take minutes, so each one is cached under pytest's cache directory,
keyed by the video spec, the training configuration and a hash of the
package sources. Any source change refits. Set ``CODEF_REFIT=1`` to ignore
the cache.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from codef import synth  # noqa: E402
from codef.trainer import TrainConfig, fit, load_checkpoint, save_checkpoint  # noqa: E402

SOURCE_DIR = Path(__file__).resolve().parents[1] / "src" / "codef"


def scaled_schedule(total_steps: int, **kw) -> TrainConfig:
    """Default configuration with the anneal window kept at 40%..80% of the run."""
    return TrainConfig(total_steps=total_steps, n_beg=int(0.4 * total_steps), n_step=int(0.4 * total_steps), **kw)


def checker_layer_masks(video, block: int = 16) -> np.ndarray:
    """(N, 2, H, W) layer masks forming a fixed checkerboard of ``block`` px squares."""
    n, h, w = video.frames.shape[:3]
    rows, cols = np.indices((h, w))
    odd = ((rows // block + cols // block) % 2).astype(bool)
    return np.broadcast_to(np.stack([~odd, odd]), (n, 2, h, w)).copy()


# name -> (synth spec, train config, layer masks: False, True for the object masks, or "checker")
FITS = {
    "static": (synth.SynthSpec(warp="none"), scaled_schedule(500), False),
    "translation": (synth.translation_spec(), scaled_schedule(1000), False),
    "translation_default": (synth.translation_spec(), TrainConfig(), False),
    "sinusoidal": (synth.sinusoidal_spec(), scaled_schedule(3000), False),
    "sinusoidal_no_anneal": (synth.sinusoidal_spec(), scaled_schedule(3000, anneal=False), False),
    "moving_object": (synth.moving_object_spec(), scaled_schedule(3000), True),
    "checker_layers": (synth.translation_spec(), scaled_schedule(400), "checker"),
}


@dataclass
class FittedVideo:
    name: str
    video: synth.SynthVideo
    checkpoint: object
    log: np.ndarray
    fit_seconds: float
    cached: bool

    grouped: object = False

    @property
    def masks(self):
        return _layer_masks(self.video, self.grouped)


def _layer_masks(video, grouped):
    if grouped == "checker":
        return checker_layer_masks(video)
    return video.layer_masks() if grouped else None


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SOURCE_DIR.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _fit_key(spec, config, grouped) -> str:
    blob = json.dumps({"spec": spec.to_dict(), "train": config.to_dict(), "grouped": grouped,
                       "source": _source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


class FitStore:
    def __init__(self, cache_dir: Path):
        self.cache_dir = cache_dir
        self.loaded = {}

    def __call__(self, name: str) -> FittedVideo:
        if name in self.loaded:
            return self.loaded[name]
        spec, config, grouped = FITS[name]
        video = synth.generate(spec)
        key = _fit_key(spec, config, grouped)
        ckpt_path = self.cache_dir / f"{name}-{key}.codf"
        meta_path = ckpt_path.with_suffix(".json")
        log_path = ckpt_path.with_suffix(".npy")
        if ckpt_path.exists() and meta_path.exists() and not os.environ.get("CODEF_REFIT"):
            meta = json.loads(meta_path.read_text())
            fv = FittedVideo(name, video, load_checkpoint(ckpt_path), np.load(log_path), meta["fit_seconds"], True,
                             grouped)
        else:
            t0 = time.perf_counter()
            result = fit(video.frames, video.fwd, video.bwd, config,
                         layer_masks=_layer_masks(video, grouped))
            seconds = time.perf_counter() - t0
            save_checkpoint(ckpt_path, result.checkpoint)
            np.save(log_path, result.log)
            meta_path.write_text(json.dumps({"fit_seconds": seconds}))
            fv = FittedVideo(name, video, result.checkpoint, result.log, seconds, False, grouped)
        self.loaded[name] = fv
        return fv


@pytest.fixture(scope="session")
def fitted(request) -> FitStore:
    return FitStore(Path(request.config.cache.mkdir("codef-fits")))


# -- acceptance report -----------------------------------------------------------------

_REPORT = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        if "fitted" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


@pytest.fixture
def measured(request):
    """Attach measured values to the acceptance line of the running test."""
    def note(**values):
        request.node.user_properties.extend(values.items())
        print("  " + " ".join(f"{k}={v}" for k, v in values.items()))
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = " ".join(f"{k}={v}" for k, v in item.user_properties)
    _REPORT[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_REPORT):
        title, status, detail = _REPORT[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  {detail}".rstrip())
