"""Dice / ASSD, pixel-migration tables, bound diagnostics and embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .internal_dist import match_batch_distribution, sample_pseudo
from .losses import ORACLE_CAP, exact_wd_oracle
from .numerics import ContractViolation, RngStream

NULL = "null"


# -- per-map metrics ----------------------------------------------------------------------

def dice(pred, truth, num_classes):
    """Per-class Dice; NaN where both masks are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p, t = pred == k, truth == k
        denom = p.sum() + t.sum()
        if denom:
            out[k] = 2.0 * np.logical_and(p, t).sum() / denom
    return out


def boundary(mask):
    """Mask pixels with at least one 4-neighbour outside the mask (image edge counts as outside)."""
    mask = np.asarray(mask, bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _surface_distances(a_border, b_border):
    # exact EDT: distance from every pixel to the nearest b boundary pixel
    dist = ndimage.distance_transform_edt(~b_border)
    return dist[a_border]


def assd_mask(pred_mask, truth_mask):
    """ASSD between two binary masks in pixels; NaN if either is empty."""
    if not pred_mask.any() or not truth_mask.any():
        return np.nan
    bp, bt = boundary(pred_mask), boundary(truth_mask)
    d1 = _surface_distances(bp, bt)
    d2 = _surface_distances(bt, bp)
    return float((d1.sum() + d2.sum()) / (d1.size + d2.size))


def assd(pred, truth, num_classes):
    pred, truth = np.asarray(pred), np.asarray(truth)
    return np.array([assd_mask(pred == k, truth == k) for k in range(num_classes)])


@dataclass
class ClassMetrics:
    dice: np.ndarray  # per class, NaN = undefined
    assd: np.ndarray
    classes: tuple  # classes entering the macro average

    @property
    def macro_dice(self):
        vals = self.dice[list(self.classes)]
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")

    @property
    def macro_assd(self):
        vals = self.assd[list(self.classes)]
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")

    def to_dict(self):
        return {"dice": _nullable(self.dice), "assd": _nullable(self.assd),
                "macro_dice": _nullable(self.macro_dice), "macro_assd": _nullable(self.macro_assd),
                "classes": list(self.classes)}


def _nullable(x):
    if np.ndim(x) == 0:
        return None if not np.isfinite(x) else float(x)
    return [None if not np.isfinite(v) else float(v) for v in x]


def _nanmean_rows(rows):
    rows = np.asarray(rows, dtype=float)
    out = np.full(rows.shape[1], np.nan)
    ok = np.isfinite(rows).any(axis=0)
    out[ok] = np.nanmean(rows[:, ok], axis=0)
    return out


def segmentation_metrics(preds, truths, num_classes, volume_ids=None, per_slice=False,
                         include_background=False):
    """Dice pooled per volume then averaged over volumes; ASSD averaged over slices.

    With ``per_slice`` Dice is computed per slice and averaged instead.
    """
    preds, truths = np.asarray(preds), np.asarray(truths)
    if volume_ids is None or per_slice:
        groups = [np.array([i]) for i in range(len(preds))]
    else:
        volume_ids = np.asarray(volume_ids)
        groups = [np.nonzero(volume_ids == v)[0] for v in np.unique(volume_ids)]
    dices = [dice(preds[g], truths[g], num_classes) for g in groups]
    assds = [assd(preds[i], truths[i], num_classes) for i in range(len(preds))]
    classes = tuple(range(num_classes)) if include_background else tuple(range(1, num_classes))
    return ClassMetrics(_nanmean_rows(dices), _nanmean_rows(assds), classes)


def evaluate_model(model, dataset, batch_size=32, **kwargs):
    preds, _ = model.predict(dataset.images, batch_size)
    return segmentation_metrics(preds, dataset.labels, model.config.num_classes, dataset.volume_ids, **kwargs), preds


# -- migration --------------------------------------------------------------------------

@dataclass
class MigrationTable:
    """``switched[i, j]``: % of pixels labelled i before adaptation that are j after.

    ``wrong[i, j]`` / ``right[i, j]`` (i != j): of those switchers, % whose
    true label is i (should have stayed) / j (moved to the right class).
    Diagonal entries of ``wrong``/``right`` and rows with no pixels are NaN.
    """

    switched: np.ndarray
    wrong: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def rows(self):
        K = self.switched.shape[0]
        for i in range(K):
            for j in range(K):
                yield {"from": i, "to": j,
                       "pct_switched": _nullable(self.switched[i, j]),
                       "pct_switched_wrong": _nullable(self.wrong[i, j]),
                       "pct_switched_right": _nullable(self.right[i, j])}

    def to_csv(self, path):
        _write_csv(path, ["from", "to", "pct_switched", "pct_switched_wrong", "pct_switched_right"], self.rows())


def migration(pre_preds, post_preds, truth, num_classes=None):
    pre, post, truth = (np.asarray(a).reshape(-1) for a in (pre_preds, post_preds, truth))
    if not (pre.shape == post.shape == truth.shape):
        raise ContractViolation("label maps must share a shape")
    K = num_classes or int(max(pre.max(), post.max(), truth.max()) + 1)
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (pre, post), 1)
    wrong_n = np.zeros((K, K), dtype=np.int64)
    right_n = np.zeros((K, K), dtype=np.int64)
    np.add.at(wrong_n, (pre, post), truth == pre)
    np.add.at(right_n, (pre, post), truth == post)
    row = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        switched = np.where(row > 0, 100.0 * counts / row, np.nan)
        wrong = np.where(counts > 0, 100.0 * wrong_n / counts, np.nan)
        right = np.where(counts > 0, 100.0 * right_n / counts, np.nan)
    np.fill_diagonal(wrong, np.nan)
    np.fill_diagonal(right, np.nan)
    return MigrationTable(switched, wrong, right, counts)


# -- bound diagnostics ---------------------------------------------------------------------

@dataclass
class BoundReport:
    w_source_pseudo: float | None
    w_target_pseudo: float
    source_term_available: bool
    e_source: float | None
    n_source: int | None
    n_target: int
    n_pseudo: int
    one_minus_rho: float
    p: int
    subsample: int
    omitted_terms: tuple = ("e_C'(w*)", "xi", "zeta")

    def to_dict(self):
        d = asdict(self)
        d["omitted_terms"] = list(self.omitted_terms)
        d["omitted_reason"] = "joint-optimal error and concentration constants cannot be estimated from samples"
        return d

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def wasserstein_between(P, Q, p=2):
    """Exact W_p (rooted) between two equal-size empirical measures."""
    return exact_wd_oracle(P, Q, p) ** (1.0 / p)


def _subsample_rows(x, n, rng):
    if len(x) < n:
        raise ContractViolation(f"need {n} rows to subsample, have {len(x)}")
    return x[np.sort(rng.choice(len(x), n, replace=False))]


def source_pseudo_distance(gmm, source_snapshot, subsample=256, seed=0, p=2):
    """W between a subsample of source embeddings and a prior-matched pseudo draw."""
    root = RngStream(seed, "bound-terms")
    pseudo = sample_pseudo(gmm, match_batch_distribution(gmm.priors, subsample), root.spawn("pseudo")).Z
    s_sub = _subsample_rows(np.asarray(source_snapshot), subsample, root.spawn("source"))
    return wasserstein_between(s_sub, pseudo, p)


def bound_terms(model, gmm, source_snapshot, target_images, subsample=256, seed=0, rho=0.97,
                p=2, e_source=None, n_source=None, n_pseudo=None, handoff=None):
    """Measurable terms of the target-risk bound on fixed-seed subsamples.

    ``source_snapshot`` is an optional ``N x d`` array of source embeddings.
    Without it the source term comes from ``handoff`` (values recorded when
    the GMM was fitted) or is reported as missing.
    """
    if subsample > ORACLE_CAP:
        raise ContractViolation(f"subsample {subsample} exceeds the oracle cap {ORACLE_CAP}")
    root = RngStream(seed, "bound-terms")
    counts = match_batch_distribution(gmm.priors, subsample)
    pseudo = sample_pseudo(gmm, counts, root.spawn("pseudo")).Z
    target = model.embed_array(target_images)
    target = target.reshape(-1, target.shape[-1])
    t_sub = _subsample_rows(target, subsample, root.spawn("target"))
    w_tp = wasserstein_between(t_sub, pseudo, p)
    w_sp = None
    if source_snapshot is not None:
        w_sp = source_pseudo_distance(gmm, source_snapshot, subsample, seed, p)
    elif handoff:
        w_sp = handoff.get("w_source_pseudo")
        e_source = handoff.get("e_source", e_source)
        n_source = handoff.get("n_source", n_source)
    return BoundReport(
        w_source_pseudo=w_sp, w_target_pseudo=w_tp, source_term_available=w_sp is not None,
        e_source=e_source, n_source=n_source, n_target=int(target.shape[0]),
        n_pseudo=int(n_pseudo if n_pseudo is not None else subsample),
        one_minus_rho=float(round(1.0 - rho, 12)), p=p, subsample=subsample)


# -- embedding export ---------------------------------------------------------------------

def pca(x, n_components=2):
    """Returns ``(scores, components, mean)``; components are rows."""
    mean = x.mean(axis=0)
    xc = x - mean
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:n_components]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return xc @ comps.T, comps, mean


def export_embeddings(model, images, path, projection="none", labels=None, max_rows=None, seed=0):
    """Per-pixel embeddings (or their 2-D PCA scores) with predicted/true labels, as CSV."""
    if projection not in ("none", "pca2"):
        raise ContractViolation("projection must be 'none' or 'pca2'")
    emb = model.embed_array(images)
    d = emb.shape[-1]
    z = emb.reshape(-1, d)
    pred = model.classify(emb).data.argmax(axis=-1).reshape(-1)
    true = None if labels is None else np.asarray(labels).reshape(-1)
    idx = np.arange(len(z))
    if max_rows is not None and len(z) > max_rows:
        idx = np.sort(RngStream(seed, "export").choice(len(z), max_rows, replace=False))
    z, pred = z[idx], pred[idx]
    true = None if true is None else true[idx]
    if projection == "pca2":
        z, _, _ = pca(z, 2)
        cols = ["pc1", "pc2"]
    else:
        cols = [f"z{i}" for i in range(d)]
    rows = ({**{c: float(v) for c, v in zip(cols, z[r])}, "pred": int(pred[r]),
             "true": NULL if true is None else int(true[r])} for r in range(len(z)))
    _write_csv(path, cols + ["pred", "true"], rows)
    return Path(path)


# -- CSV -------------------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return NULL
    if isinstance(v, float):
        return NULL if not np.isfinite(v) else repr(v)
    return v


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def metrics_rows(run, metrics):
    for k in range(len(metrics.dice)):
        yield {"run": run, "class": str(k), "dice": _nullable(metrics.dice[k]), "assd": _nullable(metrics.assd[k])}
    yield {"run": run, "class": "macro", "dice": _nullable(metrics.macro_dice), "assd": _nullable(metrics.macro_assd)}


def write_metrics_csv(path, runs):
    """``runs``: mapping run name -> ClassMetrics."""
    rows = [r for name, m in runs.items() for r in metrics_rows(name, m)]
    _write_csv(path, ["run", "class", "dice", "assd"], rows)
