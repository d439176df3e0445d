"""Gaussian mixture density engine: EM fitting, regression conditioning,
input-marginal evaluation, Mahalanobis distances, and threshold calibration.

Rows are joint (input, output) vectors; the input block is the robot state,
the output block the commanded/measured quantities.  Conditioning follows
the moment formulas of Gaussian mixture regression with the residual (Schur
complement) per-component covariance, which keeps the blended conditional
covariance positive semidefinite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import logsumexp


class FitError(RuntimeError):
    pass


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov_chol: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    z = solve_triangular(cov_chol, (x - mean).T, lower=True).T
    maha = np.einsum("ij,ij->i", z, z)
    logdet = 2.0 * np.log(np.diag(cov_chol)).sum()
    return -0.5 * (x.shape[1] * np.log(2 * np.pi) + logdet + maha)


@dataclass
class GaussianMixture:
    weights: np.ndarray        # (E,)
    means: np.ndarray          # (E, D)
    covariances: np.ndarray    # (E, D, D)
    n_in: int                  # input block size
    loglik_history: list | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float)
        self.means = np.asarray(self.means, float)
        self.covariances = np.asarray(self.covariances, float)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("component weights must sum to 1")
        self._prepare()

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_out(self) -> int:
        return self.dim - self.n_in

    def _prepare(self) -> None:
        """Precompute per-component blocks used by conditioning."""
        i, E = self.n_in, self.n_components
        self._chol_in = np.empty((E, i, i))
        self._gain = np.empty((E, self.n_out, i))       # S_os @ inv(S_ss)
        self._resid = np.empty((E, self.n_out, self.n_out))
        for e in range(E):
            S = self.covariances[e]
            Sss, Sso = S[:i, :i], S[:i, i:]
            Sos, Soo = S[i:, :i], S[i:, i:]
            L = np.linalg.cholesky(Sss)
            self._chol_in[e] = L
            # gain = Sos @ inv(Sss) via two triangular solves
            tmp = solve_triangular(L, Sos.T, lower=True)
            half = solve_triangular(L.T, tmp, lower=False)
            self._gain[e] = half.T
            self._resid[e] = Soo - self._gain[e] @ Sso
            self._resid[e] = 0.5 * (self._resid[e] + self._resid[e].T)

    def input_logpdfs(self, s: np.ndarray) -> np.ndarray:
        """log(pi_e) + log N(s | mean_e^in, cov_e^in) per component."""
        i = self.n_in
        out = np.empty(self.n_components)
        for e in range(self.n_components):
            out[e] = np.log(self.weights[e]) + gaussian_logpdf(
                s, self.means[e, :i], self._chol_in[e])[0]
        return out

    def input_marginal_log(self, s: np.ndarray) -> float:
        """log P(s): log of the input-block mixture density."""
        return float(logsumexp(self.input_logpdfs(s)))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": [
                {"rows": self.dim, "cols": self.dim, "data": c.flatten().tolist()}
                for c in self.covariances
            ],
            "n_in": self.n_in,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        covs = np.array([
            np.asarray(c["data"], float).reshape(c["rows"], c["cols"])
            for c in d["covariances"]
        ])
        return cls(weights=np.asarray(d["weights"], float),
                   means=np.asarray(d["means"], float),
                   covariances=covs, n_in=int(d["n_in"]))


@dataclass(frozen=True)
class Conditioned:
    mu: np.ndarray            # expected output
    sigma: np.ndarray         # conditional output covariance
    h: np.ndarray             # per-component responsibilities
    log_p_s: float            # log input-marginal density


@dataclass(frozen=True)
class Thresholds:
    d_max: float
    log_p_min_s: float
    epsilon_cycles: int

    def to_dict(self) -> dict:
        return {"d_max": self.d_max, "log_p_min_s": self.log_p_min_s,
                "epsilon_cycles": self.epsilon_cycles}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(d_max=float(d["d_max"]), log_p_min_s=float(d["log_p_min_s"]),
                   epsilon_cycles=int(d["epsilon_cycles"]))


def _em(data: np.ndarray, means: np.ndarray, reg: float, max_iter: int,
        tol: float) -> tuple:
    n, d = data.shape
    E = len(means)
    covs = np.array([np.cov(data.T) + reg * np.eye(d) for _ in range(E)])
    if d == 1:
        covs = covs.reshape(E, 1, 1)
    weights = np.full(E, 1.0 / E)
    history = []
    resp = None
    for _ in range(max_iter):
        # E-step
        log_r = np.empty((n, E))
        for e in range(E):
            chol = np.linalg.cholesky(covs[e])
            log_r[:, e] = np.log(weights[e]) + gaussian_logpdf(data, means[e], chol)
        norm = logsumexp(log_r, axis=1)
        ll = float(norm.sum())
        resp = np.exp(log_r - norm[:, None])
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)
        # M-step with covariance floor
        nk = resp.sum(axis=0)
        weights = nk / n
        for e in range(E):
            if nk[e] < 1e-12:
                continue
            means[e] = resp[:, e] @ data / nk[e]
            dev = data - means[e]
            covs[e] = (resp[:, e][:, None] * dev).T @ dev / nk[e] + reg * np.eye(d)
    return weights, means, covs, history, resp


def fit_gmm(data: np.ndarray, n_components: int, reg: float = 1e-6,
            seed: int = 0, n_in: int | None = None, max_iter: int = 200,
            tol: float = 1e-8) -> GaussianMixture:
    """K-means-initialized EM on joint rows.

    A component whose weight collapses below 1e-6 is re-seeded at a random
    data row once; a second collapse raises FitError.
    """
    data = np.atleast_2d(np.asarray(data, float))
    n, d = data.shape
    if n < n_components * (d + 1):
        raise FitError(f"need at least {n_components * (d + 1)} rows for "
                       f"{n_components} components in dim {d}, got {n}")
    rng = np.random.default_rng(seed)
    if n_components == 1:
        means = data.mean(axis=0, keepdims=True).copy()
    else:
        means, _ = kmeans2(data, n_components, minit="++", seed=rng)
    weights, means, covs, history, _ = _em(data, means.copy(), reg, max_iter, tol)
    if (weights < 1e-6).any():
        bad = np.nonzero(weights < 1e-6)[0]
        for e in bad:
            means[e] = data[rng.integers(n)]
        weights, means, covs, history, _ = _em(data, means, reg, max_iter, tol)
        if (weights < 1e-6).any():
            raise FitError("degenerate mixture component after re-seeding")
    gmm = GaussianMixture(weights=weights, means=means, covariances=covs,
                          n_in=n_in if n_in is not None else d - 1)
    gmm.loglik_history = history
    return gmm


def condition(gmm: GaussianMixture, s: np.ndarray,
              covariance: str = "residual") -> Conditioned:
    """Condition the joint mixture on an input vector.

    covariance="residual" (default) uses the Schur-complement per-component
    covariance; "explained" uses the cross-covariance product form instead,
    kept only for comparison.
    """
    s = np.asarray(s, float)
    i = gmm.n_in
    logs = gmm.input_logpdfs(s)
    total = logsumexp(logs)
    h = np.exp(logs - total)
    mu_e = np.empty((gmm.n_components, gmm.n_out))
    for e in range(gmm.n_components):
        mu_e[e] = gmm.means[e, i:] + gmm._gain[e] @ (s - gmm.means[e, :i])
    mu = h @ mu_e
    sigma = -np.outer(mu, mu)
    for e in range(gmm.n_components):
        if covariance == "residual":
            base = gmm._resid[e]
        elif covariance == "explained":
            base = gmm.covariances[e][i:, i:] - gmm._resid[e]
        else:
            raise ValueError(f"unknown covariance form '{covariance}'")
        sigma += h[e] * (base + np.outer(mu_e[e], mu_e[e]))
    sigma = 0.5 * (sigma + sigma.T)
    return Conditioned(mu=mu, sigma=sigma, h=h, log_p_s=float(total))


def mahalanobis(cond: Conditioned, xi: np.ndarray) -> float:
    """Deviation of a measured output from the conditional distribution."""
    dev = np.asarray(xi, float) - cond.mu
    try:
        chol = np.linalg.cholesky(cond.sigma)
        z = solve_triangular(chol, dev, lower=True)
        return float(np.sqrt(z @ z))
    except np.linalg.LinAlgError:
        warnings.warn("singular conditional covariance; pseudo-inverse used")
        pinv = np.linalg.pinv(cond.sigma, hermitian=True)
        return float(np.sqrt(max(dev @ pinv @ dev, 0.0)))


def calibrate(gmm: GaussianMixture, rows: np.ndarray,
              epsilon_cycles: int) -> Thresholds:
    """Thresholds from non-anomalous training rows.

    d_max is the largest Mahalanobis distance observed on the rows;
    log_p_min_s the smallest log input-marginal.  Replaying any training row
    therefore never fires either test.
    """
    rows = np.atleast_2d(np.asarray(rows, float))
    i = gmm.n_in
    d_max = 0.0
    log_p_min = np.inf
    for row in rows:
        c = condition(gmm, row[:i])
        d_max = max(d_max, mahalanobis(c, row[i:]))
        log_p_min = min(log_p_min, c.log_p_s)
    return Thresholds(d_max=d_max, log_p_min_s=float(log_p_min),
                      epsilon_cycles=int(epsilon_cycles))
