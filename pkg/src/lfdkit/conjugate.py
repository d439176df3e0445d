"""Normal-inverse-Wishart conjugate machinery.

Streaming sufficient statistics, posterior updates, the multivariate
Student-T posterior predictive, marginal likelihoods, and the prior density
itself.  Used by the segmentation sampler for both the feature-space and
state-space priors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, multigammaln


@dataclass(frozen=True)
class NIWParams:
    m0: np.ndarray
    kappa0: float
    S0: np.ndarray
    nu0: float

    def __post_init__(self):
        p = len(self.m0)
        if self.kappa0 <= 0:
            raise ValueError("kappa0 must be > 0")
        if self.nu0 <= p + 1:
            raise ValueError(f"nu0 must be > dim + 1 = {p + 1} so E[cov] exists")
        if self.S0.shape != (p, p):
            raise ValueError("S0 shape mismatch")
        if not np.allclose(self.S0, self.S0.T):
            raise ValueError("S0 must be symmetric")
        try:
            np.linalg.cholesky(self.S0)
        except np.linalg.LinAlgError:
            raise ValueError("S0 must be positive definite") from None

    @property
    def dim(self) -> int:
        return len(self.m0)

    def to_dict(self) -> dict:
        return {"m0": self.m0.tolist(), "kappa0": self.kappa0,
                "S0": self.S0.tolist(), "nu0": self.nu0}

    @classmethod
    def from_dict(cls, d: dict) -> "NIWParams":
        return cls(m0=np.asarray(d["m0"], float), kappa0=float(d["kappa0"]),
                   S0=np.asarray(d["S0"], float), nu0=float(d["nu0"]))


def weakly_informative(data: np.ndarray) -> NIWParams:
    """Default prior centered on pooled moments: E[cov] = diag(pooled var)."""
    data = np.atleast_2d(np.asarray(data, float))
    p = data.shape[1]
    var = data.var(axis=0)
    var = np.where(var > 0, var, 1e-6)
    nu0 = p + 2.0
    return NIWParams(m0=data.mean(axis=0), kappa0=1.0,
                     S0=np.diag(var) * (nu0 - p - 1), nu0=nu0)


def subgoal_prior(states: np.ndarray, length_scale: float) -> NIWParams:
    """State-space prior encoding cross-demonstration subgoal similarity.

    A small kappa0 centers the predictive on the already-drawn subgoals of
    the same skill rather than on the workspace mean, and the scale matrix
    expects subgoals of one skill to agree to within a few grid cells.
    """
    states = np.atleast_2d(np.asarray(states, float))
    p = states.shape[1]
    nu0 = p + 3.0
    # the tiny kappa0 keeps the empty-set predictive wide (no opinion about
    # where a first subgoal lies) while the predictive conditioned on other
    # demonstrations' subgoals stays tight around them
    return NIWParams(m0=states.mean(axis=0), kappa0=0.001,
                     S0=np.eye(p) * length_scale ** 2 * (nu0 - p - 1), nu0=nu0)


class GaussianStats:
    """Streaming sufficient statistics (count, sum, sum of outer products).

    remove() then add() of the same row restores the statistics to floating
    round-off (~1e-9 relative).
    """

    __slots__ = ("n", "sum", "sumsq")

    def __init__(self, dim: int):
        self.n = 0
        self.sum = np.zeros(dim)
        self.sumsq = np.zeros((dim, dim))

    @classmethod
    def from_data(cls, x: np.ndarray) -> "GaussianStats":
        x = np.atleast_2d(np.asarray(x, float))
        st = cls(x.shape[1])
        st.n = x.shape[0]
        st.sum = x.sum(axis=0)
        st.sumsq = x.T @ x
        return st

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        self.sum += x
        self.sumsq += np.outer(x, x)

    def remove(self, x: np.ndarray) -> None:
        if self.n <= 0:
            raise ValueError("cannot remove from empty stats")
        self.n -= 1
        self.sum -= x
        self.sumsq -= np.outer(x, x)

    def copy(self) -> "GaussianStats":
        out = GaussianStats(len(self.sum))
        out.n = self.n
        out.sum = self.sum.copy()
        out.sumsq = self.sumsq.copy()
        return out

    def mean(self) -> np.ndarray:
        return self.sum / self.n

    def scatter(self) -> np.ndarray:
        """Sum of squared deviations around the sample mean."""
        if self.n == 0:
            return np.zeros_like(self.sumsq)
        xb = self.mean()
        return self.sumsq - self.n * np.outer(xb, xb)


def _spd_chol(S: np.ndarray, context: str) -> np.ndarray:
    """Cholesky with a scaled jitter fallback; warns when the floor engages."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        scale = max(np.trace(S) / len(S), 1.0)
        jitter = 1e-10 * scale
        for _ in range(8):
            try:
                L = np.linalg.cholesky(S + jitter * np.eye(len(S)))
                warnings.warn(f"{context}: regularization floor {jitter:.2e} applied")
                return L
            except np.linalg.LinAlgError:
                jitter *= 10
        raise


def posterior_params(stats: GaussianStats | None, prior: NIWParams) -> tuple:
    """Conjugate update; returns (m_n, kappa_n, S_n, nu_n)."""
    if stats is None or stats.n == 0:
        return prior.m0, prior.kappa0, prior.S0, prior.nu0
    n = stats.n
    xb = stats.mean()
    kn = prior.kappa0 + n
    nun = prior.nu0 + n
    mn = (prior.kappa0 * prior.m0 + n * xb) / kn
    dm = xb - prior.m0
    Sn = prior.S0 + stats.scatter() + (prior.kappa0 * n / kn) * np.outer(dm, dm)
    return mn, kn, Sn, nun


def mvt_logpdf(x: np.ndarray, mean: np.ndarray, scale_chol: np.ndarray, dof: float) -> np.ndarray:
    """Multivariate Student-T log density given a Cholesky factor of the scale."""
    x = np.atleast_2d(np.asarray(x, float))
    p = x.shape[1]
    z = solve_triangular(scale_chol, (x - mean).T, lower=True).T
    maha = np.einsum("ij,ij->i", z, z)
    logdet = 2.0 * np.log(np.diag(scale_chol)).sum()
    out = (gammaln((dof + p) / 2) - gammaln(dof / 2)
           - 0.5 * p * np.log(dof * np.pi) - 0.5 * logdet
           - 0.5 * (dof + p) * np.log1p(maha / dof))
    return out


class Predictive:
    """Cached posterior predictive (Student-T) for a stats/prior pair.

    Mutating the stats through add()/remove() invalidates the cache; the
    factorization is recomputed lazily on the next density query.  The
    single-row path avoids scipy call overhead (it sits inside the sampler's
    innermost loop).
    """

    __slots__ = ("prior", "stats", "_cache")

    def __init__(self, prior: NIWParams, stats: GaussianStats | None = None):
        self.prior = prior
        self.stats = stats if stats is not None else GaussianStats(prior.dim)
        self._cache = None

    def add(self, x: np.ndarray) -> None:
        self.stats.add(x)
        self._cache = None

    def remove(self, x: np.ndarray) -> None:
        self.stats.remove(x)
        self._cache = None

    def _params(self) -> tuple:
        if self._cache is None:
            mn, kn, Sn, nun = posterior_params(self.stats, self.prior)
            p = self.prior.dim
            dof = nun - p + 1
            scale = Sn * (kn + 1) / (kn * dof)
            chol = _spd_chol(scale, "posterior predictive")
            inv_chol = np.linalg.inv(chol)
            lognorm = float(gammaln((dof + p) / 2) - gammaln(dof / 2)
                            - 0.5 * p * np.log(dof * np.pi)
                            - np.log(np.diag(chol)).sum())
            self._cache = (mn, chol, inv_chol, dof, lognorm)
        return self._cache

    def logpdf(self, x: np.ndarray) -> np.ndarray | float:
        mn, chol, _, dof, _ = self._params()
        out = mvt_logpdf(x, mn, chol, dof)
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def logpdf_one(self, x: np.ndarray) -> float:
        """Density of a single row; hot-loop variant."""
        mn, _, inv_chol, dof, lognorm = self._params()
        z = inv_chol @ (x - mn)
        maha = float(z @ z)
        p = self.prior.dim
        return lognorm - 0.5 * (dof + p) * math.log1p(maha / dof)

    def posterior_mean(self) -> tuple:
        """Plug-in (mean, covariance): the NIW posterior expectations."""
        mn, _, Sn, nun = posterior_params(self.stats, self.prior)
        p = self.prior.dim
        return mn, Sn / (nun - p - 1)


def niw_posterior_predictive(stats: GaussianStats | None, prior: NIWParams,
                             x: np.ndarray) -> np.ndarray | float:
    """Student-T log density of x under the NIW posterior given stats."""
    return Predictive(prior, stats).logpdf(x)


def marginal_loglik(x: np.ndarray, prior: NIWParams) -> float:
    """Log marginal likelihood of rows x under the NIW model."""
    x = np.atleast_2d(np.asarray(x, float))
    n, p = x.shape
    if n == 0:
        return 0.0
    stats = GaussianStats.from_data(x)
    _, kn, Sn, nun = posterior_params(stats, prior)
    sign0, logdet0 = np.linalg.slogdet(prior.S0)
    sign1, logdet1 = np.linalg.slogdet(Sn)
    return float(
        -0.5 * n * p * np.log(np.pi)
        + multigammaln(nun / 2, p) - multigammaln(prior.nu0 / 2, p)
        + 0.5 * prior.nu0 * logdet0 - 0.5 * nun * logdet1
        + 0.5 * p * (np.log(prior.kappa0) - np.log(kn))
    )


def invwishart_logpdf(cov: np.ndarray, S: np.ndarray, nu: float) -> float:
    """Closed-form inverse-Wishart log density (cheaper than scipy's)."""
    p = len(S)
    _, logdet_s = np.linalg.slogdet(S)
    chol = _spd_chol(cov, "inverse Wishart argument")
    logdet_x = 2.0 * np.log(np.diag(chol)).sum()
    inv_half = solve_triangular(chol, np.eye(p), lower=True)
    trace = float(np.einsum("ij,ji->", inv_half.T @ inv_half, S))
    return float(0.5 * nu * logdet_s - 0.5 * nu * p * np.log(2)
                 - multigammaln(nu / 2, p)
                 - 0.5 * (nu + p + 1) * logdet_x - 0.5 * trace)


def niw_logpdf(mean: np.ndarray, cov: np.ndarray, prior: NIWParams) -> float:
    """Log density of (mean, cov) under the NIW prior."""
    p = prior.dim
    iw = invwishart_logpdf(cov, prior.S0, prior.nu0)
    chol = _spd_chol(cov / prior.kappa0, "NIW normal factor")
    z = solve_triangular(chol, mean - prior.m0, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    normal = -0.5 * (p * np.log(2 * np.pi) + logdet + z @ z)
    return float(iw + normal)
