"""Full-covariance Gaussian mixtures: EM fitting, conditional MMSE and
quantile estimation, and a binary model format.

The conditional estimators treat the model as a joint density over two
blocks of dimensions (BlockSplit); given the observed block they return
either the posterior mean of the other block or, for a scalar target, the
posterior quantile that minimizes a piecewise-linear asymmetric cost.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, ndtr

GMM_MAGIC = b"GMM1"

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class Gmm:
    """Mixture of M full-covariance Gaussians over D dimensions."""

    weights: np.ndarray        # (M,), simplex
    means: np.ndarray          # (M, D)
    covariances: np.ndarray    # (M, D, D), symmetric positive definite
    fit_log_likelihood: list = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        m, d = self.means.shape
        if self.weights.shape != (m,) or self.covariances.shape != (m, d, d):
            raise ValueError("inconsistent mixture shapes")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0.0):
            raise ValueError("weights must form a simplex")
        if np.max(np.abs(self.covariances - self.covariances.transpose(0, 2, 1))) > 1e-12:
            raise ValueError("covariances must be symmetric")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]


@dataclass
class BlockSplit:
    """Disjoint index sets partitioning the joint dimensions into x and y."""

    x_dims: np.ndarray
    y_dims: np.ndarray

    def __post_init__(self):
        self.x_dims = np.asarray(self.x_dims, dtype=np.intp)
        self.y_dims = np.asarray(self.y_dims, dtype=np.intp)

    def validate(self, dimension: int) -> None:
        both = np.concatenate([self.x_dims, self.y_dims])
        if len(np.unique(both)) != len(both):
            raise ValueError("x_dims and y_dims must be disjoint")
        if sorted(both) != list(range(dimension)):
            raise ValueError(f"split must cover all {dimension} dimensions")


def _chol_logpdf(x: np.ndarray, mean: np.ndarray, chol_lower: np.ndarray) -> np.ndarray:
    """log N(x; mean, L L^T) for rows of x, via the Cholesky factor."""
    solved = linalg.solve_triangular(chol_lower, (x - mean).T, lower=True)
    quad = np.sum(solved**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol_lower)))
    return -0.5 * (len(mean) * _LOG_2PI + logdet + quad)


def _component_logpdfs(x: np.ndarray, weights, means, covariances) -> np.ndarray:
    """(T, M) matrix of log w_m + log N(x_t; mu_m, Sigma_m)."""
    t = x.shape[0]
    m = len(weights)
    out = np.empty((t, m))
    for j in range(m):
        chol = linalg.cholesky(covariances[j], lower=True)
        out[:, j] = np.log(max(weights[j], 1e-300)) + _chol_logpdf(x, means[j], chol)
    return out


def gmm_logpdf(model: Gmm, x: np.ndarray):
    """Log density of one D-vector (or rows of a T x D matrix) under the model."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dimension:
        raise ValueError(f"expected dimension {model.dimension}, got {x.shape[1]}")
    log_joint = _component_logpdfs(x, model.weights, model.means, model.covariances)
    out = logsumexp(log_joint, axis=1)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# EM training.

def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] >= floor:
        return cov
    vals = np.maximum(vals, floor)
    cov = (vecs * vals) @ vecs.T
    return 0.5 * (cov + cov.T)


def _kmeanspp_centers(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers.append(data[rng.integers(len(data))])
            continue
        idx = np.searchsorted(np.cumsum(d2 / total), rng.random())
        centers.append(data[min(idx, len(data) - 1)])
        d2 = np.minimum(d2, np.sum((data - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def em_fit(data: np.ndarray, n_components: int, max_iter: int = 100,
           tol: float = 1e-8, seed: int = 0, cov_floor: float = 1e-6) -> Gmm:
    """Fit a full-covariance mixture by EM with k-means++ style seeding.

    Deterministic given the seed. Covariance eigenvalues are floored at
    cov_floor times the mean per-dimension variance of the data. tol is the
    minimum log-likelihood improvement to keep iterating; pass tol=None to
    always run max_iter iterations. The per-iteration log-likelihood trail
    is kept on the returned model as fit_log_likelihood.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a T x D matrix")
    t, d = data.shape
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains NaN or infinite entries")
    if t < 10 * d:
        raise ValueError(f"need at least {10 * d} rows to fit {d} dimensions, got {t}")
    if n_components < 1 or n_components > t:
        raise ValueError("invalid component count")

    floor = cov_floor * max(float(np.mean(np.var(data, axis=0))), 1e-30)
    rng = np.random.default_rng(seed)

    centers = _kmeanspp_centers(data, n_components, rng)
    d2 = np.empty((t, n_components))
    for j in range(n_components):
        d2[:, j] = np.sum((data - centers[j]) ** 2, axis=1)
    assign = d2.argmin(axis=1)

    global_cov = _floor_covariance(np.cov(data, rowvar=False, bias=True).reshape(d, d), floor)
    weights = np.empty(n_components)
    means = np.empty((n_components, d))
    covs = np.empty((n_components, d, d))
    for j in range(n_components):
        members = data[assign == j]
        weights[j] = max(len(members), 1)
        if len(members) <= d:
            means[j] = centers[j]
            covs[j] = global_cov
        else:
            means[j] = members.mean(axis=0)
            covs[j] = _floor_covariance(
                np.cov(members, rowvar=False, bias=True).reshape(d, d), floor)
    weights /= weights.sum()

    history = []
    for _ in range(max_iter):
        log_joint = _component_logpdfs(data, weights, means, covs)
        log_norm = logsumexp(log_joint, axis=1)
        history.append(float(log_norm.sum()))
        if tol is not None and len(history) > 1 and history[-1] - history[-2] < tol:
            break
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0) + 10.0 * np.finfo(np.float64).tiny
        weights = nk / nk.sum()
        means = (resp.T @ data) / nk[:, None]
        for j in range(n_components):
            diff = data - means[j]
            cov = (resp[:, j, None] * diff).T @ diff / nk[j]
            covs[j] = _floor_covariance(cov, floor)

    model = Gmm(weights, means, covs)
    model.fit_log_likelihood = history
    return model


# ---------------------------------------------------------------------------
# Conditional estimation.

class GmmConditioner:
    """Factorized view of a joint mixture for repeated conditioning on x.

    Precomputes, per component, the Cholesky factor of Sigma_xx, the
    regression matrix Sigma_yx Sigma_xx^-1 and the conditional covariance,
    so per-frame estimates reduce to small matrix products.
    """

    def __init__(self, model: Gmm, split: BlockSplit):
        split.validate(model.dimension)
        self.split = split
        xd, yd = split.x_dims, split.y_dims
        self.weights = model.weights
        self.mu_x = model.means[:, xd]
        self.mu_y = model.means[:, yd]
        m = model.n_components
        self.chol_xx = np.empty((m, len(xd), len(xd)))
        self.regression = np.empty((m, len(yd), len(xd)))
        self.cond_cov = np.empty((m, len(yd), len(yd)))
        for j in range(m):
            cov = model.covariances[j]
            sxx = cov[np.ix_(xd, xd)]
            syx = cov[np.ix_(yd, xd)]
            syy = cov[np.ix_(yd, yd)]
            try:
                chol = linalg.cholesky(sxx, lower=True)
            except linalg.LinAlgError as exc:
                raise ValueError(f"component {j}: Sigma_xx is singular") from exc
            self.chol_xx[j] = chol
            self.regression[j] = linalg.cho_solve((chol, True), syx.T).T
            self.cond_cov[j] = syy - self.regression[j] @ syx.T

    def posterior_weights(self, x: np.ndarray) -> np.ndarray:
        """Responsibilities h_m(x) for rows of x, shape (T, M)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m = len(self.weights)
        log_h = np.empty((x.shape[0], m))
        for j in range(m):
            log_h[:, j] = np.log(max(self.weights[j], 1e-300)) + _chol_logpdf(
                x, self.mu_x[j], self.chol_xx[j])
        return np.exp(log_h - logsumexp(log_h, axis=1)[:, None])

    def conditional_means(self, x: np.ndarray) -> np.ndarray:
        """Per-component conditional means, shape (T, M, |y|)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.mu_x[None, :, :]
        return self.mu_y[None, :, :] + np.einsum("myx,tmx->tmy", self.regression, diff)

    def mmse(self, x: np.ndarray) -> np.ndarray:
        """Posterior mean of y given rows of x, shape (T, |y|)."""
        h = self.posterior_weights(x)
        return np.einsum("tm,tmy->ty", h, self.conditional_means(x))

    def quantile(self, x: np.ndarray, q: float, tol: float = 1e-8) -> np.ndarray:
        """q-quantile of the scalar posterior p(y|x) per row of x, by bisection."""
        if len(self.split.y_dims) != 1:
            raise ValueError("quantile estimation requires a scalar y block")
        if not 0.0 < q < 1.0:
            raise ValueError(f"quantile must be in (0, 1), got {q}")
        h = self.posterior_weights(x)
        mu = self.conditional_means(x)[:, :, 0]
        sigma = np.sqrt(np.maximum(self.cond_cov[:, 0, 0], 1e-30))[None, :]

        def cdf(t):
            return np.sum(h * ndtr((t[:, None] - mu) / sigma), axis=1)

        lo = (mu - 10.0 * sigma).min(axis=1)
        hi = (mu + 10.0 * sigma).max(axis=1)
        span = hi - lo
        for _ in range(60):   # expand until the bracket surely contains q
            bad_lo = cdf(lo) > q
            bad_hi = cdf(hi) < q
            if not (bad_lo.any() or bad_hi.any()):
                break
            lo = np.where(bad_lo, lo - span, lo)
            hi = np.where(bad_hi, hi + span, hi)
        steps = int(np.ceil(np.log2(max(float((hi - lo).max()), tol) / tol))) + 2
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            below = cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


def marginal(model: Gmm, dims) -> Gmm:
    """Marginal mixture over a subset of dimensions (same weights)."""
    dims = np.asarray(dims, dtype=np.intp)
    return Gmm(model.weights.copy(),
               model.means[:, dims],
               model.covariances[:, dims[:, None], dims[None, :]])


def conditional_mmse(model: Gmm, split: BlockSplit, x: np.ndarray) -> np.ndarray:
    """MMSE estimate of the y block given one observed x block vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (len(split.x_dims),):
        raise ValueError(f"expected x of length {len(split.x_dims)}")
    return GmmConditioner(model, split).mmse(x[None, :])[0]


def conditional_quantile_estimate(model: Gmm, split: BlockSplit, x: np.ndarray,
                                  over_penalty: float, under_penalty: float) -> float:
    """Minimizer of E[a*max(e_hat - e, 0) + b*max(e - e_hat, 0) | x].

    With over-estimates costing a and under-estimates b per unit, the optimum
    is the b/(a+b) quantile of the posterior p(e|x).
    """
    if over_penalty <= 0.0 or under_penalty <= 0.0:
        raise ValueError("penalties must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (len(split.x_dims),):
        raise ValueError(f"expected x of length {len(split.x_dims)}")
    q = under_penalty / (over_penalty + under_penalty)
    return float(GmmConditioner(model, split).quantile(x[None, :], q)[0])


# ---------------------------------------------------------------------------
# Serialization: magic "GMM1", then D, M, weights, means (row-major),
# covariances (row-major) all as little-endian float64, then a CRC32 trailer
# over everything before it.

def gmm_to_bytes(model: Gmm) -> bytes:
    header = np.array([model.dimension, model.n_components], dtype="<f8")
    payload = (GMM_MAGIC + header.tobytes()
               + model.weights.astype("<f8").tobytes()
               + np.ascontiguousarray(model.means, dtype="<f8").tobytes()
               + np.ascontiguousarray(model.covariances, dtype="<f8").tobytes())
    return payload + struct.pack("<I", zlib.crc32(payload))


def gmm_from_bytes(blob: bytes) -> Gmm:
    if len(blob) < len(GMM_MAGIC) + 16 + 4 or blob[:4] != GMM_MAGIC:
        raise ValueError("not a GMM1 model blob")
    payload, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", trailer)[0]:
        raise ValueError("GMM1 checksum mismatch")
    d, m = (int(v) for v in np.frombuffer(payload[4:20], dtype="<f8"))
    body = np.frombuffer(payload[20:], dtype="<f8")
    expected = m + m * d + m * d * d
    if len(body) != expected:
        raise ValueError(f"GMM1 payload has {len(body)} values, expected {expected}")
    weights = body[:m].copy()
    means = body[m : m + m * d].reshape(m, d).copy()
    covs = body[m + m * d :].reshape(m, d, d).copy()
    return Gmm(weights, means, covs)


def save_gmm(model: Gmm, path) -> None:
    with open(path, "wb") as fh:
        fh.write(gmm_to_bytes(model))


def load_gmm(path) -> Gmm:
    with open(path, "rb") as fh:
        return gmm_from_bytes(fh.read())
