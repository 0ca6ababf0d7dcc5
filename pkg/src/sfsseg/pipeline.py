"""Source training, internal-distribution estimation and source-free adaptation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .evaluation import (bound_terms, evaluate_model, migration)
from .internal_dist import (collect_filtered, fit_gmm, match_batch_distribution, sample_pseudo)
from .losses import (AlignmentMetric, ProjectionSet, adaptation_loss, cross_entropy_logits,
                     flatten_pixels, sliced_wasserstein)
from .model import save_checkpoint
from .numerics import ContractViolation, NumericFault, RngStream, Tensor
from .synthdata import augment

log = logging.getLogger(__name__)

PSEUDO_MODES = ("source-prior", "pseudo-label-hist", "oracle-hist", "uniform")
ABLATION_AXES = ("rho", "t", "V", "metric", "lam")


class PipelineStateError(RuntimeError):
    pass


class TrainingAborted(NumericFault):
    """Raised when a loss goes non-finite; parameters are rolled back first."""


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    decay: float = 1e-6
    adam_eps: float = 1e-6
    seed: int = 0
    augment: list = field(default_factory=list)
    ignore_class: int = None
    checkpoint_every: int = 0
    checkpoint_path: str = None

    def __post_init__(self):
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ContractViolation("iterations and batch_size must be positive")


@dataclass
class AdaptConfig:
    iterations: int = 1000
    batch_size: int = 8
    lr: float = 5e-5
    decay: float = 1e-6
    adam_eps: float = 1e-1
    lam: float = 0.5
    rho: float = 0.97
    t: int = 3
    V: int = 100
    p_order: int = 2
    metric: str = "swd"
    mmd_bandwidth: float = 1.0
    pseudo_mode: str = "pseudo-label-hist"
    seed: int = 0
    sample_cap: int = 4096
    freeze_classifier: bool = False
    fixed_pseudo_size: int = 0  # > 0: draw D_P once with this many samples
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-5
    gmm_max_points: int = 20000
    covariance_type: str = "diag"
    checkpoint_every: int = 0
    checkpoint_path: str = None

    def __post_init__(self):
        if self.lam < 0:
            raise ContractViolation("lam must be >= 0")
        if not 0 <= self.rho < 1:
            raise ContractViolation("rho must satisfy 0 <= rho < 1")
        if self.t < 1 or self.V < 1:
            raise ContractViolation("t and V must be >= 1")
        if self.p_order not in (1, 2):
            raise ContractViolation("p_order must be 1 or 2")
        if self.pseudo_mode not in PSEUDO_MODES:
            raise ContractViolation(f"pseudo_mode must be one of {PSEUDO_MODES}")
        AlignmentMetric.named(self.metric)

    def alignment_metric(self):
        return AlignmentMetric.named(self.metric, num_projections=self.V, p=self.p_order,
                                     bandwidth=self.mmd_bandwidth)


def config_from_dict(cls, data):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


# -- events ---------------------------------------------------------------------------------

class EventLog:
    """Collects per-iteration events and optionally mirrors them as JSON lines."""

    def __init__(self, path=None):
        self.events = []
        self._fh = open(path, "w") if path else None

    def __call__(self, event):
        self.events.append(event)
        if self._fh:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data[...] = s


# -- source training ------------------------------------------------------------------------

def _batch_indices(n, batch, rng):
    """Endless epoch-wise shuffled index batches."""
    order = np.array([], dtype=np.int64)
    while True:
        while len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch]
        order = order[batch:]


def train_source(model, dataset, cfg, events=None):
    """Minimise pixel-wise cross-entropy on the labelled source set with Adam.

    Returns ``(model, losses)``.  On a non-finite loss the parameters are
    rolled back to the last finite step, checkpointed (if a path is set)
    and :class:`TrainingAborted` is raised.
    """
    if len(dataset) == 0:
        raise ContractViolation("source dataset is empty")
    K = model.config.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= K:
        raise ContractViolation("source labels out of range")
    root = RngStream(cfg.seed, "train-source")
    batches = _batch_indices(len(dataset), cfg.batch_size, root.spawn("batches"))
    aug_rng = root.spawn("augment")
    params = model.parameters()
    opt = nx.Adam(params, lr=cfg.lr, eps=cfg.adam_eps, decay=cfg.decay)
    losses = []
    for it in range(cfg.iterations):
        idx = next(batches)
        x, y = dataset.images[idx], dataset.labels[idx]
        if cfg.augment:
            pairs = [augment(xi, yi, cfg.augment, aug_rng) for xi, yi in zip(x, y)]
            x = np.stack([a for a, _ in pairs])
            y = np.stack([b for _, b in pairs])
        good = _snapshot(params)
        try:
            mask = None if cfg.ignore_class is None else (y == cfg.ignore_class)
            loss = cross_entropy_logits(model.logits(model.embed(x)), y, mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not all(np.isfinite(p.data).all() for p in params):
                raise NumericFault("parameters became non-finite")
        except NumericFault as exc:
            _restore(params, good)
            if cfg.checkpoint_path:
                save_checkpoint(model, cfg.checkpoint_path)
            raise TrainingAborted(f"source training aborted at iteration {it}: {exc}") from exc
        losses.append(loss.item())
        if events is not None:
            events({"stage": "train-source", "iteration": it, "loss_ce": losses[-1]})
        if cfg.checkpoint_every and cfg.checkpoint_path and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, cfg.checkpoint_path)
    return model, np.array(losses)


# -- internal distribution --------------------------------------------------------------------

def prepare_internal(model, source, cfg):
    """Filter confident source embeddings and fit the class-conditional GMM."""
    sets = collect_filtered(model, source.images, source.labels, cfg.rho, cfg.t)
    return fit_gmm(sets, cfg.t, cfg.gmm_max_iters, cfg.gmm_tol, cfg.seed, cfg.covariance_type,
                   cfg.gmm_max_points)


# -- adaptation -------------------------------------------------------------------------------

@dataclass
class AdaptReport:
    config: dict
    iterations: list
    pre_metrics: object = None
    post_metrics: object = None
    migration: object = None
    bound_pre: object = None
    bound_post: object = None

    def series(self, key):
        return np.array([e[key] for e in self.iterations])

    def to_dict(self):
        return {
            "config": self.config,
            "iterations": self.iterations,
            "pre_metrics": None if self.pre_metrics is None else self.pre_metrics.to_dict(),
            "post_metrics": None if self.post_metrics is None else self.post_metrics.to_dict(),
            "migration": None if self.migration is None else list(self.migration.rows()),
            "bound_pre": None if self.bound_pre is None else self.bound_pre.to_dict(),
            "bound_post": None if self.bound_post is None else self.bound_post.to_dict(),
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _pseudo_histogram(mode, model, emb_rows, oracle_labels, K, priors):
    if mode == "uniform":
        return np.ones(K)
    if mode == "source-prior":
        return priors
    if mode == "oracle-hist":
        if oracle_labels is None:
            raise ContractViolation("oracle-hist mode needs target labels")
        return np.bincount(oracle_labels, minlength=K)
    logits = model.logits(Tensor(emb_rows)).data
    return np.bincount(logits.argmax(axis=-1), minlength=K)


def adapt(model, gmm, target, cfg, events=None, eval_data=None, bound_subsample=256, handoff=None):
    """Source-free adaptation of ``model`` to unlabelled ``target`` images.

    ``target`` is a Dataset; its labels are read only in oracle-hist mode.
    ``eval_data`` (a labelled target set) adds before/after metrics, the
    migration table and bound terms to the report; ``handoff`` carries the
    source-side bound terms recorded when the GMM was fitted.
    """
    if gmm is None:
        raise PipelineStateError("adaptation needs a fitted GMM")
    K, d = model.config.num_classes, model.config.embed_dim
    if gmm.dim != d or gmm.num_classes != K:
        raise ContractViolation(f"GMM ({gmm.num_classes} classes, d={gmm.dim}) does not match the model")
    images = target.images
    oracle = target.labels if cfg.pseudo_mode == "oracle-hist" else None
    if cfg.pseudo_mode == "oracle-hist":
        log.warning("oracle-hist mode reads target labels to size pseudo batches (label leak)")
    metric = cfg.alignment_metric()

    report = AdaptReport(asdict(cfg), [])
    pre_preds = None
    if eval_data is not None:
        report.pre_metrics, pre_preds = evaluate_model(model, eval_data)
        report.bound_pre = bound_terms(model, gmm, None, eval_data.images, bound_subsample, cfg.seed, cfg.rho,
                                       cfg.p_order, handoff=handoff)

    root = RngStream(cfg.seed, "adapt")
    batches = _batch_indices(len(images), cfg.batch_size, root.spawn("batches"))
    sub_rng = root.spawn("subsample")
    pseudo_rng = root.spawn("pseudo")
    proj_rng = root.spawn("projections")
    fixed = None
    if cfg.fixed_pseudo_size:
        counts = match_batch_distribution(gmm.priors, cfg.fixed_pseudo_size)
        fixed = sample_pseudo(gmm, counts, root.spawn("fixed-pseudo"))

    params = model.parameters(include_classifier=not cfg.freeze_classifier)
    opt = nx.Adam(params, lr=cfg.lr, eps=cfg.adam_eps, decay=cfg.decay)
    cap = cfg.sample_cap
    if metric.max_samples:
        cap = min(cap, metric.max_samples)
    for it in range(cfg.iterations):
        idx = next(batches)
        good = _snapshot(params)
        try:
            emb = model.embed(images[idx])
            flat = flatten_pixels(emb)
            n_pix = flat.shape[0]
            n = min(n_pix, cap)
            rows = np.arange(n_pix) if n == n_pix else np.sort(sub_rng.choice(n_pix, n, replace=False))
            oracle_rows = None if oracle is None else oracle[idx].reshape(-1)[rows]
            hist = _pseudo_histogram(cfg.pseudo_mode, model, flat.data[rows], oracle_rows, K, gmm.priors)
            counts = match_batch_distribution(hist, n)
            if fixed is None:
                pseudo = sample_pseudo(gmm, counts, pseudo_rng)
                Z, Y = pseudo.Z, pseudo.Y
            else:
                pick = np.concatenate([pseudo_rng.choice(np.nonzero(fixed.Y == k)[0], c, replace=True)
                                       for k, c in enumerate(counts) if c])
                Z, Y = fixed.Z[pick], fixed.Y[pick]
            proj = ProjectionSet.draw(d, cfg.V, cfg.seed, proj_rng) if metric.kind == "swd" else None
            total, ce, align = adaptation_loss(model, (Z, Y), None, cfg.lam, proj, metric,
                                               target_rows=rows, target_embeddings=emb)
            opt.zero_grad()
            total.backward()
            opt.step()
            if not all(np.isfinite(p.data).all() for p in params):
                raise NumericFault("parameters became non-finite")
        except NumericFault as exc:
            _restore(params, good)
            if cfg.checkpoint_path:
                save_checkpoint(model, cfg.checkpoint_path, gmm)
            raise TrainingAborted(f"adaptation aborted at iteration {it}: {exc}") from exc
        event = {"stage": "adapt", "iteration": it, "loss_ce": ce.item(),
                 "loss_swd": align.item(), "loss_total": total.item()}
        report.iterations.append(event)
        if events is not None:
            events(event)
        if cfg.checkpoint_every and cfg.checkpoint_path and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, cfg.checkpoint_path, gmm)

    if eval_data is not None:
        report.post_metrics, post_preds = evaluate_model(model, eval_data)
        report.migration = migration(pre_preds, post_preds, eval_data.labels, K)
        report.bound_post = bound_terms(model, gmm, None, eval_data.images, bound_subsample, cfg.seed, cfg.rho,
                                        cfg.p_order, handoff=handoff)
    return model, report


def swd_estimate_spread(P, Q, V, seeds=20, p=2):
    """Mean and variance of the SWD estimate over ``seeds`` projection draws."""
    vals = np.array([sliced_wasserstein(P, Q, ProjectionSet.draw(P.shape[1], V, s), p).item()
                     for s in range(seeds)])
    return float(vals.mean()), float(vals.var())


# -- state machine ------------------------------------------------------------------------------

class Pipeline:
    """Sequential stages: train_source -> prepare_internal -> adapt.

    After ``prepare_internal`` the pipeline keeps no reference to source
    images or labels.
    """

    def __init__(self, model, train_cfg=None, adapt_cfg=None):
        self.model = model
        self.train_cfg = train_cfg or TrainConfig()
        self.adapt_cfg = adapt_cfg or AdaptConfig()
        self.gmm = None
        self.state = "init"
        self.source_losses = None

    def train_source(self, source, events=None):
        self.model, self.source_losses = train_source(self.model, source, self.train_cfg, events)
        self.state = "trained"
        return self.source_losses

    def prepare_internal(self, source):
        if self.state == "init":
            raise PipelineStateError("prepare_internal needs a source-trained model")
        self.gmm = prepare_internal(self.model, source, self.adapt_cfg)
        self.state = "internal"
        return self.gmm

    def adapt(self, target, events=None, eval_data=None):
        if self.state not in ("internal", "adapted") or self.gmm is None:
            raise PipelineStateError("adapt called before prepare_internal: no internal distribution")
        self.model, report = adapt(self.model, self.gmm, target, self.adapt_cfg, events, eval_data)
        self.state = "adapted"
        return report


# -- ablations -----------------------------------------------------------------------------------

ABLATION_FIELDS = ["axis", "value", "pre_dice", "post_dice", "pre_assd", "post_assd",
                   "w_target_pre", "w_target_post", "swd_first", "swd_last", "swd_estimate_mean",
                   "swd_estimate_var"]


def _axis_update(cfg, axis, value):
    key = {"rho": "rho", "t": "t", "V": "V", "metric": "metric", "lam": "lam"}[axis]
    if key in ("t", "V"):
        value = int(value)
    elif key in ("rho", "lam"):
        value = float(value)
    else:
        value = str(value).lower()
    return replace(cfg, **{key: value})


def _ablation_run(cfg, source_model, gmm, target, eval_data, spread_seeds):
    model = source_model.copy()
    # SWD estimate spread of the starting model against pseudo samples, per V
    rng = RngStream(cfg.seed, "ablation-spread")
    emb = model.embed_array(target.images[: cfg.batch_size]).reshape(-1, model.config.embed_dim)
    n = min(len(emb), 1024)
    emb = emb[np.sort(rng.choice(len(emb), n, replace=False))]
    pz = sample_pseudo(gmm, match_batch_distribution(gmm.priors, n), rng.spawn("pseudo")).Z
    s_mean, s_var = swd_estimate_spread(pz, emb, cfg.V, spread_seeds, cfg.p_order)
    model, report = adapt(model, gmm, target, cfg, eval_data=eval_data)
    sw = report.series("loss_swd")
    k = max(1, len(sw) // 10)
    stats = {
        "pre_dice": report.pre_metrics.macro_dice, "post_dice": report.post_metrics.macro_dice,
        "pre_assd": report.pre_metrics.macro_assd, "post_assd": report.post_metrics.macro_assd,
        "w_target_pre": report.bound_pre.w_target_pseudo,
        "w_target_post": report.bound_post.w_target_pseudo,
        "swd_first": float(sw[:k].mean()), "swd_last": float(sw[-k:].mean()),
        "swd_estimate_mean": s_mean, "swd_estimate_var": s_var,
    }
    return stats, model, report


def run_ablation(base_cfg, axis, values, source_model, source, target, eval_data,
                 csv_path=None, gmm_cache=None, spread_seeds=20, run_cache=None):
    """Adapt a copy of the source model once per value of ``axis``.

    Every row uses the same seeds.  ``gmm_cache`` maps (rho, t, covariance
    type) to a fitted GMM so axes that do not touch the GMM reuse one fit;
    ``run_cache`` maps a resolved config to ``(stats, model, report)`` so a
    value equal to an earlier run is not adapted twice.
    """
    if axis not in ABLATION_AXES:
        raise ContractViolation(f"axis must be one of {ABLATION_AXES}")
    if not values:
        raise ContractViolation("ablation needs at least one value")
    if eval_data is None or eval_data.labels is None:
        raise ContractViolation("ablation rows need a labelled evaluation set")
    gmm_cache = {} if gmm_cache is None else gmm_cache
    run_cache = {} if run_cache is None else run_cache
    rows = []
    for value in values:
        cfg = _axis_update(base_cfg, axis, value)
        key = (cfg.rho, cfg.t, cfg.covariance_type)
        if key not in gmm_cache:
            gmm_cache[key] = prepare_internal(source_model, source, cfg)
        run_key = json.dumps(asdict(cfg), sort_keys=True)
        if run_key not in run_cache:
            run_cache[run_key] = _ablation_run(cfg, source_model, gmm_cache[key], target, eval_data, spread_seeds)
        stats = run_cache[run_key][0]
        rows.append({"axis": axis, "value": value, **stats})
        log.info("ablation %s=%s: dice %.3f -> %.3f", axis, value, stats["pre_dice"], stats["post_dice"])
    if csv_path:
        write_ablation_csv(csv_path, rows)
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("null" if isinstance(v, float) and not np.isfinite(v) else
                            repr(v) if isinstance(v, float) else v) for k, v in r.items()})
