"""Class-conditional Gaussian mixture over decoder embeddings.

The mixture stands in for the source data once source training is over:
it is fitted on confidently and correctly classified source pixels, then
sampled to produce labelled pseudo-embeddings during adaptation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .numerics import ContractViolation, RngStream, logsumexp

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
GMM_KIND = "sfsgmm"
LOG_2PI = np.log(2.0 * np.pi)


class UnderCoverageError(ValueError):
    """Too few filtered pixels to fit a class mixture."""


class GmmFitError(RuntimeError):
    pass


@dataclass
class FilteredEmbeddingSet:
    """Per-class embeddings of pixels predicted correctly with confidence > rho.

    ``indices[k]`` holds the flat pixel positions (image, row, col raveled)
    of the members, so sets built at different thresholds can be compared.
    """

    embeddings: list
    indices: list
    rho: float
    totals: np.ndarray  # per-class pixel counts before filtering

    @property
    def counts(self):
        return np.array([len(e) for e in self.embeddings], dtype=np.int64)

    @property
    def num_classes(self):
        return len(self.embeddings)

    @property
    def dim(self):
        return self.embeddings[0].shape[1]


def filter_mask(probs, labels, rho):
    """Boolean mask of pixels with max prob > rho and argmax == label."""
    return (probs.max(axis=-1) > rho) & (probs.argmax(axis=-1) == labels)


def collect_filtered(model, images, labels, rho=0.97, t=3, batch_size=32, check_coverage=True):
    """Embeddings of source pixels passing the confidence/correctness filter."""
    if not 0.0 <= rho < 1.0:
        raise ContractViolation(f"rho must satisfy 0 <= rho < 1, got {rho}")
    K = model.config.num_classes
    d = model.config.embed_dim
    per_class = [[] for _ in range(K)]
    per_index = [[] for _ in range(K)]
    totals = np.zeros(K, dtype=np.int64)
    npix = labels.shape[1] * labels.shape[2]
    for s in range(0, len(images), batch_size):
        emb = model.embed(images[s : s + batch_size]).data
        probs = model.classify(emb).data
        lab = labels[s : s + batch_size]
        keep = filter_mask(probs, lab, rho)
        flat_emb = emb.reshape(-1, d)
        flat_keep = keep.reshape(-1)
        flat_lab = lab.reshape(-1)
        base = s * npix
        totals += np.bincount(flat_lab, minlength=K)
        for k in range(K):
            sel = np.nonzero(flat_keep & (flat_lab == k))[0]
            per_class[k].append(flat_emb[sel])
            per_index[k].append(sel + base)
    sets = FilteredEmbeddingSet(
        embeddings=[np.concatenate(e) if e else np.zeros((0, d)) for e in per_class],
        indices=[np.concatenate(i) if i else np.zeros(0, np.int64) for i in per_index],
        rho=float(rho),
        totals=totals,
    )
    log.info("filtered pixels per class at rho=%.3f: %s", rho, sets.counts.tolist())
    if check_coverage:
        check_under_coverage(sets, t)
    return sets


def check_under_coverage(sets, t):
    need = t * (sets.dim + 2)
    for k, n in enumerate(sets.counts):
        if n < need:
            raise UnderCoverageError(
                f"class {k} retained only {n} pixels after filtering at rho={sets.rho}; "
                f"need at least {need} for t={t} components in d={sets.dim}")


# -- mixture parameters ------------------------------------------------------------------

@dataclass
class GmmParams:
    """``weights`` K x t, ``means`` K x t x d, ``covs`` K x t x d (diag) or K x t x d x d (full)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    priors: np.ndarray
    covariance_type: str = "diag"
    loglik: np.ndarray = None
    history: list = field(default_factory=list)
    fit_counts: np.ndarray = None

    @property
    def num_classes(self):
        return self.means.shape[0]

    @property
    def t(self):
        return self.means.shape[1]

    @property
    def dim(self):
        return self.means.shape[2]

    def header(self):
        return {
            "covariance_type": self.covariance_type,
            "num_classes": int(self.num_classes),
            "components": int(self.t),
            "dim": int(self.dim),
        }

    def arrays(self):
        out = {"weights": self.weights, "means": self.means, "covs": self.covs, "priors": self.priors}
        if self.loglik is not None:
            out["loglik"] = np.asarray(self.loglik, dtype=float)
        return out

    @classmethod
    def from_parts(cls, header, arrays):
        gmm = cls(arrays["weights"], arrays["means"], arrays["covs"], arrays["priors"],
                  header["covariance_type"], arrays.get("loglik"))
        if gmm.header() != header:
            raise ContractViolation(f"GMM header {header} disagrees with stored arrays {gmm.header()}")
        return gmm

    def save(self, path):
        write_container(path, GMM_KIND, {"gmm": self.header()}, self.arrays())

    @classmethod
    def load(cls, path):
        header, arrays = read_container(path, GMM_KIND)
        return cls.from_parts(header["gmm"], arrays)


# -- densities -------------------------------------------------------------------------------

def _component_logpdf(x, means, covs, covariance_type):
    """N x t matrix of log N(x_n | mu_j, Sigma_j)."""
    d = x.shape[1]
    if covariance_type == "diag":
        inv = 1.0 / covs  # t x d
        # sum_d (x-mu)^2 / var, expanded to avoid an N x t x d temporary
        maha = (x * x) @ inv.T - 2.0 * x @ (means * inv).T + np.sum(means * means * inv, axis=1)
        logdet = np.sum(np.log(covs), axis=1)
        return -0.5 * (d * LOG_2PI + logdet + np.maximum(maha, 0.0))
    out = np.empty((x.shape[0], means.shape[0]))
    for j in range(means.shape[0]):
        chol = np.linalg.cholesky(covs[j])
        sol = np.linalg.solve(chol, (x - means[j]).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, j] = -0.5 * (d * LOG_2PI + logdet + np.sum(sol * sol, axis=0))
    return out


def _class_logpdf(x, weights, means, covs, covariance_type):
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logsumexp(_component_logpdf(x, means, covs, covariance_type) + logw, axis=1)


def log_likelihood(gmm, points, k):
    """Sum over ``points`` of log p(z | class k) under class k's mixture."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    return float(np.sum(_class_logpdf(x, gmm.weights[k], gmm.means[k], gmm.covs[k], gmm.covariance_type)))


# -- EM --------------------------------------------------------------------------------------

def kmeans_pp(x, t, rng):
    """k-means++ seeding: indices of ``t`` rows of ``x``."""
    n = x.shape[0]
    first = int(rng.integers(n))
    centers = [first]
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, t):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp, covariance_type, var_floor):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.maximum(nk, 1e-300)
    means = (resp.T @ x) / safe[:, None]
    t, d = means.shape
    if covariance_type == "diag":
        covs = np.empty((t, d))
        for j in range(t):
            diff = x - means[j]
            covs[j] = (resp[:, j] @ (diff * diff)) / safe[j]
        covs = np.maximum(covs, var_floor)
    else:
        covs = np.empty((t, d, d))
        for j in range(t):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / safe[j]
            covs[j] += var_floor * np.eye(d)
    return weights, means, covs


def _collapsed(weights, covs, covariance_type, var_floor):
    if covariance_type == "diag":
        var = covs
    else:
        var = np.diagonal(covs, axis1=1, axis2=2)
    at_floor = np.all(var <= var_floor * (1 + 1e-9), axis=1)
    return (weights < 1e-8) | at_floor


def fit_class_gmm(x, t, max_iters=200, tol=1e-5, rng=None, covariance_type="diag",
                  var_floor=VAR_FLOOR, max_reseeds=5):
    """EM for one class.  Returns ``(weights, means, covs, loglik_history)``.

    Convergence when the relative log-likelihood gain drops below ``tol``.
    """
    rng = rng if rng is not None else RngStream(0, "gmm")
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if covariance_type == "full" and d > 4:
        raise ContractViolation("full-covariance mode is limited to d <= 4")
    centers = kmeans_pp(x, t, rng)
    # hard assignment to the seeds gives the first M-step
    d2 = ((x[:, None, :] - x[centers][None, :, :]) ** 2).sum(-1)
    resp = np.zeros((n, t))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0
    weights, means, covs = _m_step(x, resp, covariance_type, var_floor)
    # empty seed clusters get the seed point and the global variance
    global_var = np.maximum(x.var(axis=0), var_floor)
    for j in range(t):
        if resp[:, j].sum() == 0:
            means[j] = x[centers[j]]
            covs[j] = global_var if covariance_type == "diag" else np.diag(global_var)
    weights = np.maximum(weights, 1.0 / n)
    weights /= weights.sum()

    history = []
    reseeds = 0
    prev = None
    for _ in range(max_iters):
        logp = _component_logpdf(x, means, covs, covariance_type) + np.log(weights)
        norm = logsumexp(logp, axis=1, keepdims=True)
        ll = float(norm.sum())
        history.append(ll)
        if prev is not None and ll - prev < tol * abs(prev):
            break
        prev = ll
        resp = np.exp(logp - norm)
        weights, means, covs = _m_step(x, resp, covariance_type, var_floor)
        bad = _collapsed(weights, covs, covariance_type, var_floor)
        if bad.any():
            reseeds += int(bad.sum())
            if reseeds > max_reseeds:
                raise GmmFitError(f"components kept collapsing ({reseeds} reseeds)")
            for j in np.nonzero(bad)[0]:
                log.warning("GMM component %d collapsed; reseeding from a random data point", j)
                means[j] = x[int(rng.integers(n))]
                covs[j] = global_var if covariance_type == "diag" else np.diag(global_var)
                weights[j] = 1.0 / t
            weights /= weights.sum()
            prev = None  # likelihood may drop after a reseed
            history.append(None)
    return weights, means, covs, history


def fit_gmm(sets, t=3, max_iters=200, tol=1e-5, seed=0, covariance_type="diag",
            max_points_per_class=None, var_floor=VAR_FLOOR):
    """Fit ``t`` components per class, independently for each class."""
    check_under_coverage(sets, t)
    K, d = sets.num_classes, sets.dim
    root = RngStream(seed, "fit-gmm")
    shape = (K, t, d) if covariance_type == "diag" else (K, t, d, d)
    weights, means, covs = np.zeros((K, t)), np.zeros((K, t, d)), np.zeros(shape)
    loglik = np.zeros(K)
    history = []
    used = np.zeros(K, dtype=np.int64)
    for k in range(K):
        rng = root.spawn(f"class-{k}")
        x = sets.embeddings[k]
        if max_points_per_class and len(x) > max_points_per_class:
            x = x[np.sort(rng.choice(len(x), max_points_per_class, replace=False))]
        w, m, c, hist = fit_class_gmm(x, t, max_iters, tol, rng, covariance_type, var_floor)
        weights[k], means[k], covs[k] = w, m, c
        loglik[k] = log_likelihood(GmmParams(weights, means, covs, np.ones(K) / K, covariance_type), x, k)
        history.append(hist)
        used[k] = len(x)
        log.info("class %d: %d points, %d EM iterations, loglik %.4g", k, len(x), len(hist), loglik[k])
    # class priors from the unfiltered label frequencies
    totals = np.asarray(sets.totals, dtype=float)
    priors = totals / totals.sum()
    return GmmParams(weights, means, covs, priors, covariance_type, loglik, history, used)


# -- pseudo-dataset -------------------------------------------------------------------------

@dataclass
class PseudoDataset:
    Z: np.ndarray
    Y: np.ndarray
    components: np.ndarray

    def __len__(self):
        return len(self.Y)


def sample_pseudo(gmm, counts, rng):
    """Draw ``counts[k]`` labelled samples from each class mixture."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (gmm.num_classes,) or np.any(counts < 0):
        raise ContractViolation(f"counts must be {gmm.num_classes} non-negative integers")
    d = gmm.dim
    Z, Y, C = [np.zeros((0, d))], [np.zeros(0, np.int64)], [np.zeros(0, np.int64)]
    for k, c in enumerate(counts):
        if c == 0:
            continue
        comp = rng.choice(gmm.t, size=int(c), p=gmm.weights[k] / gmm.weights[k].sum())
        noise = rng.normal(size=(int(c), d))
        if gmm.covariance_type == "diag":
            z = gmm.means[k][comp] + np.sqrt(gmm.covs[k][comp]) * noise
        else:
            chol = np.linalg.cholesky(gmm.covs[k])
            z = gmm.means[k][comp] + np.einsum("nij,nj->ni", chol[comp], noise)
        Z.append(z)
        Y.append(np.full(int(c), k, dtype=np.int64))
        C.append(comp.astype(np.int64))
    return PseudoDataset(np.concatenate(Z), np.concatenate(Y), np.concatenate(C))


def match_batch_distribution(hist, total):
    """Largest-remainder apportionment of ``total`` samples over ``hist``.

    Remainder ties go to the lower class index.  An all-zero histogram falls
    back to uniform counts.
    """
    hist = np.asarray(hist, dtype=float)
    if np.any(hist < 0):
        raise ContractViolation("histogram entries must be non-negative")
    if hist.sum() == 0:
        log.warning("empty label histogram; falling back to uniform pseudo-sample counts")
        hist = np.ones_like(hist)
    quota = hist * total / hist.sum()
    counts = np.floor(quota).astype(np.int64)
    short = int(total - counts.sum())
    rema = quota - counts
    # stable sort on -remainder keeps lower indices first among ties
    order = np.argsort(-rema, kind="stable")
    counts[order[:short]] += 1
    return counts
