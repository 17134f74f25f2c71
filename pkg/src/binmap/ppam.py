"""Probabilistic piecewise-affine mapping (PPAM).

A K-component model maps low-dimensional directions ``x`` (L) to
high-dimensional cues ``y`` (D)::

    p(x, z=k)      = N(x; c_k, Gamma_k) / K
    p(y | x, z=k)  = N(y; A_k x + b_k, diag(sigma2))

with all ``|Gamma_k|`` equal. Training is closed-form EM; localization uses
the inverse conditional density, a GMM over direction space.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
# Above this many K*N*D multiply-adds, quadratic forms use the expanded
# (GEMM) evaluation instead of explicit residuals.
_DIRECT_LIMIT = 5e7


class DegenerateModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpamModel:
    c: np.ndarray        # (K, L)
    gamma: np.ndarray    # (K, L, L)
    A: np.ndarray        # (K, D, L)
    b: np.ndarray        # (K, D)
    sigma2: np.ndarray   # (D,)

    def __post_init__(self):
        K, L = self.c.shape
        if self.gamma.shape != (K, L, L) or self.A.shape[0] != K or self.A.shape[2] != L:
            raise ValueError("inconsistent PPAM parameter shapes")
        if self.b.shape != (K, self.A.shape[1]) or self.sigma2.shape != (self.A.shape[1],):
            raise ValueError("inconsistent PPAM parameter shapes")
        if np.any(self.sigma2 <= 0):
            raise ValueError("noise variances must be positive")

    @property
    def K(self) -> int:
        return self.c.shape[0]

    @property
    def L(self) -> int:
        return self.c.shape[1]

    @property
    def D(self) -> int:
        return self.b.shape[1]

    @property
    def pi(self) -> np.ndarray:
        return np.full(self.K, 1.0 / self.K)

    def with_sigma2(self, sigma2) -> "PpamModel":
        return PpamModel(self.c, self.gamma, self.A, self.b, np.asarray(sigma2, dtype=float))

    def arrays(self) -> dict:
        return {"c": self.c, "gamma": self.gamma, "A": self.A, "b": self.b,
                "sigma2": self.sigma2}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "PpamModel":
        return cls(*(np.asarray(arrays[name], dtype=float)
                     for name in ("c", "gamma", "A", "b", "sigma2")))

    def volume_spread(self) -> float:
        """Max relative deviation of ``|Gamma_k|`` from their mean."""
        dets = np.linalg.det(self.gamma)
        return float(np.max(np.abs(dets - dets.mean())) / abs(dets.mean()))


@dataclass(frozen=True)
class TrainingSet:
    """Paired directions ``X`` (N, L) and cue vectors ``Y`` (N, D)."""
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} directions but {Y.shape[0]} cue vectors")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def check_directions(self, az_limit: float = 160.0, el_limit: float = 90.0) -> None:
        """Raise unless azimuths lie in [-az_limit, az_limit] and elevations in range."""
        az, el = self.X[:, 0], self.X[:, 1]
        if np.any(np.abs(az) > az_limit) or np.any(np.abs(el) > el_limit):
            raise ValueError("training directions outside the Euclidean subset")

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.X[idx], self.Y[idx])


@dataclass(frozen=True)
class PosteriorGmm:
    """Gaussian mixture over direction space: weights, means, covariances."""
    rho: np.ndarray   # (K,)
    m: np.ndarray     # (K, L)
    V: np.ndarray     # (K, L, L)
    log_rho: Optional[np.ndarray] = None

    @property
    def mean(self) -> np.ndarray:
        return self.rho @ self.m

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        comps = np.stack([_log_gauss(x, self.m[k], self.V[k]) for k in range(self.rho.size)])
        with np.errstate(divide="ignore"):
            logw = np.log(self.rho)
        return logsumexp(comps + logw[:, None], axis=0)

    def grid_density(self, az: np.ndarray, el: np.ndarray) -> np.ndarray:
        """Log-density on an azimuth x elevation grid, shape (len(el), len(az))."""
        A, E = np.meshgrid(az, el)
        pts = np.column_stack([A.ravel(), E.ravel()])
        return self.logpdf(pts).reshape(E.shape)


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, (x - mean).T)
    return -0.5 * (np.sum(diff ** 2, axis=0) + mean.size * LOG_2PI) \
        - np.sum(np.log(np.diag(chol)))


def _log_prior_terms(model: PpamModel, X: np.ndarray) -> np.ndarray:
    """``log pi_k + log N(x_n; c_k, Gamma_k)`` as a (K, N) array."""
    return np.stack([_log_gauss(X, model.c[k], model.gamma[k]) for k in range(model.K)]) \
        - np.log(model.K)


def _sq_mahal_y(model: PpamModel, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``sum_d (y_nd - a_dk.x_n - b_dk)^2 / sigma2_d`` as a (K, N) array."""
    K, N, D = model.K, X.shape[0], model.D
    inv = 1.0 / model.sigma2
    if K * N * D <= _DIRECT_LIMIT:
        out = np.empty((K, N))
        for k in range(K):
            res = Y - X @ model.A[k].T - model.b[k]
            out[k] = (res ** 2) @ inv
        return out
    # expand the quadratic around the global cue mean for conditioning
    ref = Y.mean(axis=0)
    Yc = Y - ref
    Xt = np.hstack([X, np.ones((N, 1))])
    At = np.concatenate([model.A, (model.b - ref)[:, :, None]], axis=2)   # (K, D, L+1)
    yy = (Yc ** 2) @ inv
    cross = (Yc * inv) @ At.transpose(1, 0, 2).reshape(D, -1)             # (N, K*(L+1))
    cross = np.einsum("nkj,nj->kn", cross.reshape(N, K, -1), Xt)
    Q = np.einsum("kdi,d,kdj->kij", At, inv, At)
    quad = np.einsum("ni,kij,nj->kn", Xt, Q, Xt)
    return yy[None, :] - 2.0 * cross + quad


def log_joint(model: PpamModel, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``log pi_k N(x_n; c_k, Gamma_k) N(y_n; A_k x_n + b_k, Sigma)``, shape (K, N)."""
    ylog = -0.5 * (_sq_mahal_y(model, X, Y) + np.sum(np.log(model.sigma2)) + model.D * LOG_2PI)
    return _log_prior_terms(model, X) + ylog


def log_likelihood(model: PpamModel, X: np.ndarray, Y: np.ndarray) -> float:
    return float(np.sum(logsumexp(log_joint(model, X, Y), axis=0)))


def e_step(model: PpamModel, X, Y, *, return_loglik: bool = False):
    """Posterior component memberships ``r`` (K, N), computed in log domain."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[1] != model.L or Y.shape[1] != model.D or X.shape[0] != Y.shape[0]:
        raise ValueError("data dimensions do not match the model")
    lj = log_joint(model, X, Y)
    bad = ~np.isfinite(lj).all(axis=0)
    if bad.any():
        raise FloatingPointError(f"non-finite likelihood for sample n={int(np.flatnonzero(bad)[0])}")
    norm = logsumexp(lj, axis=0)
    r = np.exp(lj - norm)
    if return_loglik:
        return r, float(norm.sum())
    return r


def _floor_spd(S: np.ndarray, rel: float = 1e-8) -> np.ndarray:
    w, v = np.linalg.eigh(S)
    w = np.maximum(w, rel * max(np.trace(S), 0.0) / S.shape[0])
    return (v * w) @ v.T


def m_step(r, X, Y, *, eps: Optional[float] = None, sigma2_floor: float = 1e-10,
           sigma_update: str = "exact") -> PpamModel:
    """Closed-form parameter update under the volume-equality constraint.

    Components whose effective mass ``sum_n r_kn`` falls below ``eps``
    (default ``L + 1``) or whose direction scatter is singular are dropped
    with a warning, and the remaining memberships renormalized.

    ``sigma_update="exact"`` pools squared residuals with weights ``r_kn / N``,
    the maximizer of the expected complete-data log-likelihood.
    ``"equal_weight"`` averages per-component weighted residual means over k.
    """
    r = np.asarray(r, dtype=float)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    N, L = X.shape
    D = Y.shape[1]
    eps = float(L + 1) if eps is None else eps

    keep = r.sum(axis=1) >= eps
    while True:
        if not keep.any():
            raise DegenerateModelError("all components are degenerate")
        rk = r[keep]
        rk = rk / np.maximum(rk.sum(axis=0, keepdims=True), 1e-300)
        rbar = rk.sum(axis=1)
        small = rbar < eps
        if small.any():
            keep[np.flatnonzero(keep)[small]] = False
            continue
        w = rk / rbar[:, None]
        c = w @ X
        S = np.einsum("kn,ni,nj->kij", w, X, X) - np.einsum("ki,kj->kij", c, c)
        dets = np.linalg.det(S)
        scale = np.einsum("kii->k", S) / L
        singular = ~(dets > (1e-12 * np.maximum(scale, 1e-300)) ** L)
        if singular.any():
            keep[np.flatnonzero(keep)[singular]] = False
            continue
        break
    if not keep.all():
        warnings.warn(f"removed {int((~keep).sum())} degenerate PPAM component(s); "
                      f"K={int(keep.sum())}", RuntimeWarning, stacklevel=2)
    K = rbar.size
    n_eff = rbar.sum()

    root = dets ** (1.0 / L)
    shared = np.sum(rbar / n_eff * root)
    gamma = np.stack([_floor_spd(S[k] / root[k] * shared) for k in range(K)])

    ref = Y.mean(axis=0)
    Yc = Y - ref
    ybar = w @ Yc                                                    # (K, D)
    cross = (Yc.T @ (w.T[:, :, None] * X[:, None, :]).reshape(N, K * L)).reshape(D, K, L)
    cross = cross.transpose(1, 0, 2) - np.einsum("kd,kl->kdl", ybar, c)
    A = np.einsum("kdl,klm->kdm", cross, np.linalg.pinv(S, hermitian=True))
    b = ybar - np.einsum("kdl,kl->kd", A, c)

    if K * N * D <= _DIRECT_LIMIT:
        resid = np.empty((K, D))
        for k in range(K):
            res = Yc - X @ A[k].T - b[k]
            resid[k] = w[k] @ (res ** 2)
    else:
        yvar = w @ (Yc ** 2) - ybar ** 2
        resid = yvar - 2.0 * np.einsum("kdl,kdl->kd", A, cross) \
            + np.einsum("kdl,klm,kdm->kd", A, S, A)
    resid = np.maximum(resid, 0.0)
    if sigma_update == "exact":
        sigma2 = (rbar / n_eff) @ resid
    elif sigma_update == "equal_weight":
        sigma2 = resid.mean(axis=0)
    else:
        raise ValueError(f"unknown sigma_update {sigma_update!r}")
    sigma2 = np.maximum(sigma2, sigma2_floor) if sigma2_floor > 0 else np.maximum(sigma2, 1e-300)
    return PpamModel(c, gamma, A, b + ref, sigma2)


def init_responsibilities(X, Y, K: int, strategy: str = "gmm_x", seed: int = 0) -> np.ndarray:
    """Initial memberships from a K-GMM on ``X`` or on ``[X, Y]``."""
    from sklearn.mixture import GaussianMixture

    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    if K == 1:
        return np.ones((1, N))
    if strategy == "gmm_x":
        data, cov = X, "full"
    elif strategy == "gmm_joint":
        data, cov = np.hstack([X, np.asarray(Y, dtype=float)]), "diag"
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            gmm = GaussianMixture(K, covariance_type=cov, init_params="k-means++",
                                  random_state=seed, reg_covar=1e-6, max_iter=100)
            gmm.fit(data)
            r = gmm.predict_proba(data).T
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("non-finite GMM posteriors")
        return r
    except Exception as exc:  # noqa: BLE001 - any GMM failure takes the fallback
        warnings.warn(f"GMM initialization failed ({exc}); using random hard assignment",
                      RuntimeWarning, stacklevel=2)
        rng = np.random.default_rng(seed)
        r = np.zeros((K, N))
        r[rng.integers(0, K, N), np.arange(N)] = 1.0
        return r


def train(X, Y, K: int, init: str = "gmm_x", max_iter: int = 200, tol: float = 1e-6,
          seed: int = 0, *, sigma2_floor: float = 1e-10, sigma_update: str = "exact",
          callback: Optional[Callable[[int, PpamModel], None]] = None
          ) -> Tuple[PpamModel, List[float]]:
    """Fit a PPAM by EM.

    Returns the model and the observed-data log-likelihood after every M-step.
    Stops when the relative improvement drops below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if init in ("gmm_x", "gmm_joint"):
        r = init_responsibilities(X, Y, K, init, seed)
    else:
        r = np.asarray(init, dtype=float)
    trace: List[float] = []
    model = None
    prev_k = r.shape[0]
    for it in range(max_iter):
        model = m_step(r, X, Y, sigma2_floor=sigma2_floor, sigma_update=sigma_update)
        if callback is not None:
            callback(it, model)
        r, ll = e_step(model, X, Y, return_loglik=True)
        pruned = model.K != prev_k
        prev_k = model.K
        trace.append(ll)
        logger.debug("EM iteration %d: K=%d loglik=%.6f", it, model.K, ll)
        if len(trace) > 1 and not pruned:
            if abs(trace[-1] - trace[-2]) < tol * abs(trace[-2]):
                break
    return model, trace


def forward_density(model: PpamModel, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weights (K,), means (K, D) and shared diagonal covariance of ``p(y | x)``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    lw = _log_prior_terms(model, x)[:, 0]
    weights = np.exp(lw - logsumexp(lw))
    means = np.einsum("kdl,l->kd", model.A, x[0]) + model.b
    return weights, means, model.sigma2.copy()


def forward_map(model: PpamModel, x) -> np.ndarray:
    weights, means, _ = forward_density(model, x)
    return weights @ means


@dataclass(frozen=True)
class InverseParams:
    """Per-component parameters of the inverse conditional density."""
    c_star: np.ndarray      # (K, D)
    a_star: np.ndarray      # (K, L, D)
    b_star: np.ndarray      # (K, L)
    sigma_star: np.ndarray  # (K, L, L)
    _model: PpamModel

    def gamma_star(self, k: int) -> np.ndarray:
        """Dense ``Sigma + A_k Gamma_k A_k^T`` (D x D)."""
        m = self._model
        return np.diag(m.sigma2) + m.A[k] @ m.gamma[k] @ m.A[k].T

    def log_evidence(self, Y) -> np.ndarray:
        """``log N(y_n; c*_k, Gamma*_k)`` as (K, N), via the Woodbury identity."""
        m = self._model
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        inv = 1.0 / m.sigma2
        out = np.empty((m.K, Y.shape[0]))
        logdet_sigma = np.sum(np.log(m.sigma2))
        for k in range(m.K):
            diff = Y - self.c_star[k]
            u = diff * inv
            proj = u @ m.A[k]                                          # (N, L)
            quad = np.sum(diff * u, axis=1) - np.einsum("ni,ij,nj->n", proj, self.sigma_star[k], proj)
            logdet = logdet_sigma + np.linalg.slogdet(m.gamma[k])[1] \
                - np.linalg.slogdet(self.sigma_star[k])[1]
            out[k] = -0.5 * (quad + logdet + m.D * LOG_2PI)
        return out


def _inverse(model: PpamModel) -> InverseParams:
    inv = 1.0 / model.sigma2
    gamma_inv = np.linalg.inv(model.gamma)
    AtSi = model.A.transpose(0, 2, 1) * inv                              # (K, L, D)
    sigma_star = np.linalg.inv(gamma_inv + AtSi @ model.A)
    sigma_star = 0.5 * (sigma_star + sigma_star.transpose(0, 2, 1))
    a_star = sigma_star @ AtSi
    b_star = np.einsum("kij,kj->ki", sigma_star,
                       np.einsum("kij,kj->ki", gamma_inv, model.c)
                       - np.einsum("kld,kd->kl", AtSi, model.b))
    c_star = np.einsum("kdl,kl->kd", model.A, model.c) + model.b
    return InverseParams(c_star, a_star, b_star, sigma_star, model)


def invert_params(model: PpamModel, max_condition: float = 1e12) -> InverseParams:
    """Parameters of ``p(x | y)``; refuses when ``Gamma*_k`` is ill-conditioned."""
    for k in range(model.K):
        # cond(Sigma + A Gamma A^T) <= (max sigma2 + |A Gamma A^T|) / min sigma2
        top = np.linalg.eigvalsh(model.gamma[k] @ model.A[k].T @ model.A[k])[-1] \
            if model.D >= model.L else 0.0
        bound = (model.sigma2.max() + max(top, 0.0)) / model.sigma2.min()
        if bound > max_condition:
            exact = np.linalg.cond(_inverse(model).gamma_star(k)) if model.D <= 2000 else bound
            if exact > max_condition:
                raise np.linalg.LinAlgError(
                    f"Gamma*_{k} condition number {exact:.3g} exceeds {max_condition:.0e}; "
                    "raise the noise-variance floor")
    return _inverse(model)


def inverse_density(model: PpamModel, y) -> PosteriorGmm:
    """Posterior GMM over directions given one complete cue vector."""
    y = np.asarray(y, dtype=float).reshape(1, -1)
    inv = _inverse(model)
    lw = inv.log_evidence(y)[:, 0] - np.log(model.K)
    log_rho = lw - logsumexp(lw)
    means = np.einsum("kld,d->kl", inv.a_star, y[0]) + inv.b_star
    return PosteriorGmm(np.exp(log_rho), means, inv.sigma_star.copy(), log_rho)


def inverse_map(model: PpamModel, Y) -> np.ndarray:
    """Posterior mean direction for each row of ``Y`` (or a single vector)."""
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    inv = _inverse(model)
    lw = inv.log_evidence(Y)
    rho = np.exp(lw - logsumexp(lw, axis=0))
    means = np.einsum("kld,nd->knl", inv.a_star, Y) + inv.b_star[:, None, :]
    out = np.einsum("kn,knl->nl", rho, means)
    return out[0] if single else out


def param_count(K: int, D: int, L: int, direction: str = "low_to_high") -> int:
    """Number of free parameters when regressing from low to high dimension or back."""
    if min(K, D, L) <= 0:
        raise ValueError("K, D and L must be positive")
    if direction == "low_to_high":
        return K * (D * (L + 2) + L + L * L + 1)
    if direction == "high_to_low":
        return K * (L * (D + 2) + D + D * D + 1)
    raise ValueError(f"unknown direction {direction!r}")
