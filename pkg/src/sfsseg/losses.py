"""Cross-entropy, sliced Wasserstein and alternative alignment metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .numerics import ContractViolation, NumericFault, RngStream, Tensor

ORACLE_CAP = 512


@dataclass(frozen=True)
class ProjectionSet:
    """``V`` unit directions in R^d, stored as a ``d x V`` matrix."""

    directions: np.ndarray
    seed: int

    @classmethod
    def draw(cls, dim, count, seed, rng=None):
        """Uniform directions on the unit sphere (normalized Gaussian draws)."""
        rng = rng if rng is not None else RngStream(seed, "projections")
        g = rng.normal(size=(dim, count))
        norms = np.linalg.norm(g, axis=0)
        # a zero column has probability zero; redraw just in case
        while np.any(norms == 0):
            bad = norms == 0
            g[:, bad] = rng.normal(size=(dim, int(bad.sum())))
            norms = np.linalg.norm(g, axis=0)
        return cls(g / norms, seed)

    @property
    def dim(self):
        return self.directions.shape[0]

    @property
    def count(self):
        return self.directions.shape[1]


@dataclass(frozen=True)
class AlignmentMetric:
    kind: str = "swd"  # one of "swd", "kl", "mmd"
    num_projections: int = 100
    p: int = 2
    bandwidth: float = 1.0
    var_floor: float = 1e-6
    # extra per-side sample cap (MMD builds N x N kernel matrices)
    max_samples: int = 0

    def __post_init__(self):
        if self.kind not in ("swd", "kl", "mmd"):
            raise ContractViolation(f"unknown alignment metric '{self.kind}'")

    @classmethod
    def named(cls, kind, **kw):
        kind = kind.lower()
        if kind == "mmd":
            kw.setdefault("max_samples", 1024)
        return cls(kind=kind, **kw)


# -- cross entropy ------------------------------------------------------------------

def _label_index(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractViolation(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def _picked(scores, labels, ignore_mask):
    """Entries of ``scores`` at the true class, for pixels not masked out."""
    lead = scores.shape[:-1]
    flat = nx.reshape(scores, (-1, scores.shape[-1]))
    lab = labels.reshape(-1)
    keep = np.ones(lab.shape, bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool).reshape(-1)
    if lab.shape[0] != int(np.prod(lead)):
        raise ContractViolation(f"labels shape {labels.shape} does not match predictions {lead}")
    rows = np.nonzero(keep)[0]
    if rows.size == 0:
        raise ContractViolation("every pixel is masked out")
    return nx.pick(flat, rows, lab[rows])


def cross_entropy(probs, labels, ignore_mask=None):
    """Mean of -log p(true class) over pixels not flagged in ``ignore_mask``."""
    probs = nx.as_tensor(probs)
    labels = _label_index(labels, probs.shape[-1])
    # log only the picked entries: off-class probabilities may be exactly 0
    return -nx.mean(nx.log(_picked(probs, labels, ignore_mask)))


def cross_entropy_logits(logits, labels, ignore_mask=None):
    """Same value as ``cross_entropy(softmax(logits), ...)`` via log-softmax."""
    logits = nx.as_tensor(logits)
    labels = _label_index(labels, logits.shape[-1])
    return -nx.mean(_picked(nx.log_softmax(logits, axis=-1), labels, ignore_mask))


# -- Wasserstein ------------------------------------------------------------------------

def _pth(diff, p):
    if p == 2:
        return nx.power(diff, 2)
    if p == 1:
        return nx.absolute(diff)
    return nx.power(nx.absolute(diff), p)


def wasserstein_1d(a, b, p=2):
    """Closed-form 1-D optimal transport cost between equal-size samples.

    Returns the unrooted p-th power mean ``mean_i |a_(i) - b_(i)|^p`` over the
    sorted order statistics.
    """
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.size == 0 or b.size == 0:
        raise ContractViolation("wasserstein_1d needs non-empty samples")
    if a.size != b.size:
        raise ContractViolation(f"equal sample counts required, got {a.size} and {b.size}")
    sa = nx.sort_columns(nx.reshape(a, (-1, 1)))
    sb = nx.sort_columns(nx.reshape(b, (-1, 1)))
    return nx.mean(_pth(sa - sb, p))


def sliced_wasserstein(P, Q, proj, p=2):
    """Mean over projection directions of the 1-D cost of the projected samples."""
    P, Q = nx.as_tensor(P), nx.as_tensor(Q)
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise ContractViolation(f"sample sets must be N x d with equal d, got {P.shape} and {Q.shape}")
    if P.shape[0] != Q.shape[0]:
        raise ContractViolation(f"equal sample counts required, got {P.shape[0]} and {Q.shape[0]}")
    if P.shape[1] != proj.dim:
        raise ContractViolation(f"projection dim {proj.dim} != sample dim {P.shape[1]}")
    G = Tensor(proj.directions)
    sp = nx.sort_columns(P @ G)
    sq = nx.sort_columns(Q @ G)
    return nx.mean(_pth(sp - sq, p))


def exact_wd_oracle(P, Q, p=2, cap=ORACLE_CAP):
    """Optimal assignment cost ``min_perm mean_i ||P_i - Q_perm(i)||^p``."""
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=float)
    Q = np.asarray(Q.data if isinstance(Q, Tensor) else Q, dtype=float)
    if P.ndim == 1:
        P, Q = P[:, None], Q[:, None]
    n = P.shape[0]
    if n > cap:
        raise ContractViolation(f"oracle refuses N={n} above cap {cap}")
    if Q.shape != P.shape:
        raise ContractViolation(f"equal-shape sample sets required, got {P.shape} and {Q.shape}")
    dist = np.sqrt(((P[:, None, :] - Q[None, :, :]) ** 2).sum(-1))
    cost = dist ** p
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


# -- alternative metrics -------------------------------------------------------------------

def mmd_rbf(P, Q, bandwidth=1.0):
    """Biased squared MMD with an RBF kernel exp(-||x-y||^2 / (2 h^2))."""
    P, Q = nx.as_tensor(P), nx.as_tensor(Q)
    gamma = 1.0 / (2.0 * bandwidth ** 2)

    def kmean(A, B):
        sq = nx.tsum(A * A, axis=1, keepdims=True) + nx.reshape(nx.tsum(B * B, axis=1), (1, -1)) \
            - 2.0 * nx.matmul(A, nx.transpose(B))
        return nx.mean(nx.exp(sq * (-gamma)))

    out = kmean(P, P) + kmean(Q, Q) - 2.0 * kmean(P, Q)
    # tiny negative values from cancellation when P == Q
    return nx.relu(out)


def gaussian_kl(P, Q, var_floor=1e-6):
    """KL(N_P || N_Q) between per-dimension moment-matched Gaussians, summed over dims."""
    P, Q = nx.as_tensor(P), nx.as_tensor(Q)
    mp, mq = nx.mean(P, axis=0), nx.mean(Q, axis=0)
    vp = nx.mean(nx.power(P - mp, 2), axis=0) + var_floor
    vq = nx.mean(nx.power(Q - mq, 2), axis=0) + var_floor
    per_dim = 0.5 * (nx.log(vq) - nx.log(vp)) + (vp + nx.power(mp - mq, 2)) / (2.0 * vq) - 0.5
    return nx.tsum(per_dim)


def alt_metric(P, Q, metric, proj=None):
    if metric.kind == "swd":
        if proj is None:
            raise ContractViolation("SWD needs a ProjectionSet")
        return sliced_wasserstein(P, Q, proj, metric.p)
    P, Q = nx.as_tensor(P), nx.as_tensor(Q)
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise ContractViolation(f"sample sets must be N x d with equal d, got {P.shape} and {Q.shape}")
    if metric.kind == "mmd":
        return mmd_rbf(P, Q, metric.bandwidth)
    return gaussian_kl(P, Q, metric.var_floor)


# -- combined adaptation objective -----------------------------------------------------------

def flatten_pixels(embeddings):
    return nx.reshape(embeddings, (-1, embeddings.shape[-1]))


def adaptation_loss(model, pseudo_batch, target_images, lam, proj=None, metric=None,
                    target_rows=None, target_embeddings=None):
    """CE on pseudo samples plus ``lam`` times the alignment distance.

    ``pseudo_batch`` is ``(Z_P, Y_P)``.  Target pixels come from
    ``model.embed(target_images)`` unless ``target_embeddings`` (a taped
    tensor of that embedding) is passed.  ``target_rows`` picks which
    flattened pixels enter the distance; the count must match ``Z_P``.
    Returns ``(total, ce, align)``.
    """
    metric = metric if metric is not None else AlignmentMetric()
    Z, Y = pseudo_batch
    Z = nx.as_tensor(Z)
    if Z.shape[-1] != model.config.embed_dim:
        raise ContractViolation(f"pseudo embedding dim {Z.shape[-1]} != model embed_dim {model.config.embed_dim}")
    ce = cross_entropy_logits(model.logits(Z), Y)
    emb = target_embeddings if target_embeddings is not None else model.embed(target_images)
    target = flatten_pixels(emb)
    if target_rows is not None:
        target = nx.take_rows(target, target_rows)
    align = alt_metric(Z, target, metric, proj)
    total = ce + lam * align
    for name, t in (("ce", ce), ("align", align), ("total", total)):
        if not np.isfinite(t.data).all():
            raise NumericFault(f"adaptation loss component '{name}' is not finite")
    return total, ce, align
