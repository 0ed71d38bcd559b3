"""Debiased clustering probe for paired latent volumes.

Stacked tokens from two volumes are whitened, the cross-volume shared
subspace is identified by CCA (an SVD of the whitened cross-covariance),
projected out, and the residual tokens are regrouped by a full-covariance
Gaussian mixture with confidence-filtered reassignment. The no-CCA variant
(skip the projection) is the raw-clustering baseline it is compared against.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError
from .numerics import Rng, as_matrix, logsumexp_rows, sym_eig


@dataclass
class WhitenedLatents:
    mean: np.ndarray
    whitener: np.ndarray
    tokens_a: np.ndarray
    tokens_b: np.ndarray
    ridge: float


@dataclass
class SharedSubspace:
    correlations: np.ndarray
    retained: np.ndarray
    basis: np.ndarray
    projector: np.ndarray
    tau: float


@dataclass
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    responsibilities: np.ndarray
    log_likelihood: float
    log_likelihood_path: list[float]


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    confidence: np.ndarray
    reassigned: np.ndarray


def whiten(tokens_a, tokens_b, ridge: float = 1e-4) -> WhitenedLatents:
    """Center by the stacked mean and rescale by the ridged inverse
    square-root covariance of the stacked tokens."""
    if not (ridge > 0):
        raise ParameterError(f"ridge must be > 0, got {ridge}")
    a = as_matrix(tokens_a, "tokens_a")
    b = as_matrix(tokens_b, "tokens_b")
    if a.shape != b.shape:
        raise DimensionError(f"volume shapes differ: {a.shape} vs {b.shape}")
    stacked = np.vstack([a, b])
    n, d = stacked.shape
    if n <= d:
        warnings.warn(
            f"whitening {n} tokens in {d} dims; covariance is rank-deficient",
            UserWarning,
            stacklevel=2,
        )
    mean = stacked.mean(axis=0)
    centered = stacked - mean
    cov = centered.T @ centered / n
    evals, evecs = sym_eig(cov)
    whitener = evecs @ np.diag(1.0 / np.sqrt(np.maximum(evals, 0.0) + ridge)) @ evecs.T
    white = centered @ whitener
    k = a.shape[0]
    return WhitenedLatents(mean, whitener, white[:k], white[k:], ridge)


def _gram_schmidt(columns: np.ndarray, drop_tol: float = 1e-10) -> np.ndarray:
    basis: list[np.ndarray] = []
    for j in range(columns.shape[1]):
        v = columns[:, j].copy()
        for u in basis:
            v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm > drop_tol:
            basis.append(v / norm)
    if not basis:
        return np.zeros((columns.shape[0], 0))
    return np.stack(basis, axis=1)


def cca(white_a, white_b, tau: float = 0.9) -> SharedSubspace:
    """Shared subspace of two whitened, row-paired token sets.

    On whitened inputs CCA reduces to the SVD of the cross-covariance
    (1/K) A^T B; directions whose canonical correlation exceeds tau are
    retained, and both the left and right vectors of each retained pair
    enter the basis before re-orthonormalization.
    """
    if not (0 < tau < 1):
        raise ParameterError(f"tau must be in (0, 1), got {tau}")
    a = as_matrix(white_a, "whitened tokens_a")
    b = as_matrix(white_b, "whitened tokens_b")
    if a.shape != b.shape:
        raise DimensionError(f"volume shapes differ: {a.shape} vs {b.shape}")
    k, d = a.shape
    cross = a.T @ b / k
    u, s, v = np.linalg.svd(cross)
    correlations = np.clip(s, 0.0, 1.0)
    retained = np.flatnonzero(correlations > tau)
    if retained.size:
        cols = np.hstack([u[:, retained], v.T[:, retained]])
        basis = _gram_schmidt(cols)
    else:
        basis = np.zeros((d, 0))
    projector = basis @ basis.T
    return SharedSubspace(correlations, retained, basis, projector, tau)


def debias(latents: WhitenedLatents, subspace: SharedSubspace):
    """Remove the shared component: Z - Z P for both volumes."""
    d = latents.tokens_a.shape[1]
    if subspace.projector.shape != (d, d):
        raise DimensionError(
            f"projector shape {subspace.projector.shape} incompatible with width {d}"
        )
    p = subspace.projector
    return latents.tokens_a - latents.tokens_a @ p, latents.tokens_b - latents.tokens_b @ p


def _log_gaussian(tokens: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = tokens.shape[1]
    chol = np.linalg.cholesky(cov)
    diff = tokens - mean
    y = np.linalg.solve(chol, diff.T)
    maha = np.sum(y * y, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)


def _kmeanspp_centers(tokens: np.ndarray, c: int, rng: Rng) -> np.ndarray:
    n = tokens.shape[0]
    centers = [tokens[rng.integer(n)]]
    for _ in range(1, c):
        d2 = np.min(
            [np.sum((tokens - ctr) ** 2, axis=1) for ctr in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(tokens[rng.integer(n)])
            continue
        target = rng.uniform() * total
        idx = int(np.searchsorted(np.cumsum(d2), target, side="right"))
        centers.append(tokens[min(idx, n - 1)])
    return np.stack(centers)


def _lloyd(tokens: np.ndarray, centers: np.ndarray, iters: int = 20) -> np.ndarray:
    """A few k-means iterations; returns hard labels."""
    labels = None
    for _ in range(iters):
        dist = np.stack([np.sum((tokens - ctr) ** 2, axis=1) for ctr in centers])
        new_labels = np.argmin(dist, axis=0)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centers.shape[0]):
            members = labels == j
            if np.any(members):
                centers[j] = tokens[members].mean(axis=0)
    return labels


def _principal_sign_inits(tokens: np.ndarray, c: int, count: int) -> list[np.ndarray]:
    """Hard initial labelings by sign-splitting the top principal axes.

    Full-covariance EM started from random centers routinely walks past
    thin bimodal directions (the covariance absorbs them); a sign split
    along a principal axis starts inside that basin when one exists.
    """
    if c != 2:
        return []
    centered = tokens - tokens.mean(axis=0)
    _, _, v = np.linalg.svd(centered, full_matrices=False)
    inits = []
    for axis in v[: min(count, v.shape[0])]:
        labels = (centered @ axis > 0).astype(int)
        if 0 < labels.sum() < tokens.shape[0]:
            inits.append(labels)
    return inits


def _em_once(tokens, c, rng, ridge, max_em_iters, tol, hard_init=None):
    n, d = tokens.shape
    if hard_init is None:
        centers = _kmeanspp_centers(tokens, c, rng)
        hard = _lloyd(tokens, centers.copy())
    else:
        hard = hard_init
    resp = np.zeros((n, c))
    resp[np.arange(n), hard] = 1.0

    weights = np.full(c, 1.0 / c)
    means = np.zeros((c, d))
    covs = np.stack([np.eye(d)] * c)
    path: list[float] = []
    ll = -np.inf
    for _ in range(max_em_iters):
        # M-step from current responsibilities
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ tokens) / nk[:, None]
        for j in range(c):
            diff = tokens - means[j]
            covs[j] = (resp[:, j][:, None] * diff).T @ diff / nk[j] + ridge * np.eye(d)
        # E-step
        log_prob = np.stack(
            [np.log(weights[j]) + _log_gaussian(tokens, means[j], covs[j]) for j in range(c)],
            axis=1,
        )
        norm = logsumexp_rows(log_prob)
        resp = np.exp(log_prob - norm[:, None])
        new_ll = float(norm.sum())
        path.append(new_ll)
        if new_ll - ll < tol and np.isfinite(ll):
            ll = new_ll
            break
        ll = new_ll
    return MixtureModel(weights, means, covs, resp, ll, path)


def fit_gmm(
    tokens,
    c: int = 2,
    rng: Rng | None = None,
    ridge: float = 1e-4,
    max_em_iters: int = 200,
    tol: float = 1e-6,
    restarts: int = 5,
) -> MixtureModel:
    """Full-covariance GMM by EM with k-means++-style seeding.

    Runs ``restarts`` independently seeded fits and keeps the best
    log-likelihood (ties to the lowest restart index).
    """
    tokens = as_matrix(tokens, "tokens")
    if tokens.shape[0] < c:
        raise ValidationError(f"{tokens.shape[0]} samples cannot support {c} components")
    if rng is None:
        rng = Rng(0)
    best: MixtureModel | None = None
    for r in range(restarts):
        model = _em_once(tokens, c, rng.spawn(r), ridge, max_em_iters, tol)
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    for hard in _principal_sign_inits(tokens, c, count=4):
        model = _em_once(tokens, c, rng.spawn(-1), ridge, max_em_iters, tol, hard_init=hard)
        if model.log_likelihood > best.log_likelihood:
            best = model
    return best


def confident_reassign(model: MixtureModel, tokens, delta: float = 0.6) -> ClusterAssignment:
    """Keep confident argmax labels; pull low-confidence tokens to the nearest
    centroid recomputed from high-confidence members only."""
    if not (0 < delta < 1):
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    tokens = as_matrix(tokens, "tokens")
    resp = model.responsibilities
    labels = np.argmax(resp, axis=1)
    confidence = resp[np.arange(resp.shape[0]), labels]
    low = confidence < delta
    c = resp.shape[1]
    centroids = model.means.copy()
    for j in range(c):
        members = (~low) & (labels == j)
        if np.any(members):
            centroids[j] = tokens[members].mean(axis=0)
    if np.any(low):
        d2 = np.stack([np.sum((tokens[low] - centroids[j]) ** 2, axis=1) for j in range(c)])
        labels = labels.copy()
        labels[low] = np.argmin(d2, axis=0)
    return ClusterAssignment(labels=labels, confidence=confidence, reassigned=low)


@dataclass
class ProbeResult:
    assignment: ClusterAssignment
    subspace: SharedSubspace | None
    model: MixtureModel


def cluster_tokens(
    tokens_a,
    tokens_b,
    tau: float = 0.9,
    delta: float = 0.6,
    ridge: float = 1e-4,
    rng: Rng | None = None,
    use_cca: bool = True,
) -> ProbeResult:
    """Whiten -> CCA -> debias -> GMM -> confident reassignment.

    With use_cca=False the debiasing step is skipped (raw-cluster baseline).
    Labels cover volume A's tokens first, then volume B's.
    """
    latents = whiten(tokens_a, tokens_b, ridge)
    subspace = None
    a, b = latents.tokens_a, latents.tokens_b
    if use_cca:
        subspace = cca(a, b, tau)
        a, b = debias(latents, subspace)
    stacked = np.vstack([a, b])
    model = fit_gmm(stacked, 2, rng=rng, ridge=ridge)
    assignment = confident_reassign(model, stacked, delta)
    return ProbeResult(assignment=assignment, subspace=subspace, model=model)
