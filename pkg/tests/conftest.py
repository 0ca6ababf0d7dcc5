import json
import time
from dataclasses import asdict
from pathlib import Path

import pytest

from sfsseg.cli import build_datasets, load_config_file, resolve_config
from sfsseg.model import SegmentationModel
from sfsseg.pipeline import prepare_internal, run_ablation, train_source

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CONFIG = ROOT / "configs" / "reference.json"

# small enough for a full CLI chain in a few seconds, large enough that every
# class survives filtering
TINY_CONFIG = {
    "version": 1,
    "domain": {"width": 24, "height": 24, "slices_per_volume": 4,
               "gain": [1.0, 0.6, 1.1, 0.7, 0.9], "bias": [1.0, 1.5, 1.2, 1.6, 0.8]},
    "data": {"seed": 3, "n_source": 24, "n_target": 16, "n_test": 8},
    "model": {"embed_dim": 4, "encoder_channels": [4, 8], "skip_connections": True},
    "train": {"iterations": 300, "batch_size": 4, "lr": 0.003},
    "adapt": {"iterations": 5, "batch_size": 2, "rho": 0.5, "t": 1, "V": 10, "pseudo_mode": "source-prior"},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


class Reference:
    """The reference experiment, trained once per session and shared.

    Adaptation runs are cached by their resolved config, so criteria that
    share a setting (the default row of several ablations) reuse one run.
    """

    def __init__(self):
        self.cfg = resolve_config(load_config_file(REFERENCE_CONFIG))
        self.data = build_datasets(self.cfg)
        t0 = time.perf_counter()
        model = SegmentationModel(self.cfg.model, seed=self.cfg.train.seed)
        self.source_model, self.source_losses = train_source(model, self.data["source"], self.cfg.train)
        self.seconds = {"train": time.perf_counter() - t0}
        self.gmm_cache = {}
        self.run_cache = {}

    def gmm(self, adapt_cfg=None):
        ac = adapt_cfg or self.cfg.adapt
        key = (ac.rho, ac.t, ac.covariance_type)
        if key not in self.gmm_cache:
            t0 = time.perf_counter()
            self.gmm_cache[key] = prepare_internal(self.source_model, self.data["source"], ac)
            self.seconds.setdefault("gmm", time.perf_counter() - t0)
        return self.gmm_cache[key]

    def ablation(self, axis, values):
        self.gmm()
        t0 = time.perf_counter()
        fresh = len(self.run_cache)
        rows = run_ablation(self.cfg.adapt, axis, values, self.source_model, self.data["source"],
                            self.data["target"].without_labels(), self.data["test"],
                            gmm_cache=self.gmm_cache, run_cache=self.run_cache)
        if fresh == 0:
            self.seconds["adapt"] = time.perf_counter() - t0
        return rows

    def default_run(self):
        """(stats, model, report) of the reference adaptation run."""
        self.ablation("t", [self.cfg.adapt.t])
        return self.run_cache[json.dumps(asdict(self.cfg.adapt), sort_keys=True)]


@pytest.fixture(scope="session")
def reference():
    return Reference()


# -- acceptance summary ---------------------------------------------------------------------

_RESULTS = {}


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with the numbers it measured."""
    marker = request.node.get_closest_marker("criterion")
    out = {}
    if marker is not None:
        _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "outcome": "not run", "measured": out})
        _RESULTS[marker.args[0]]["measured"] = out
    return out


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "outcome": "not run", "measured": {}})
    if rep.when == "call" or rep.failed:
        entry["outcome"] = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        e = _RESULTS[num]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in e["measured"].items())
        tr.write_line(f"criterion {num:2d} {e['outcome']:4s} {e['title']}" + (f"  [{detail}]" if detail else ""))
