"""Single-source localization from sparse ILPD spectrograms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .ppam import PosteriorGmm, PpamModel
from .spectro import BandConfig, IlpdObservation, InterauralSpectrogram, ilpd_matrix

__all__ = ["PosteriorGmm", "SparseObservationSet", "sparse_posterior",
           "weighted_posterior", "localize_point"]


@dataclass(frozen=True)
class SparseObservationSet:
    """Cue values ``y`` (T, D) and availability ``avail`` (T, D)."""
    y: np.ndarray
    avail: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        avail = np.asarray(self.avail, dtype=bool)
        if y.ndim != 2 or y.shape != avail.shape:
            raise ValueError("y and avail must be (T, D) arrays of equal shape")
        # unavailable entries are never read; zero them so sums stay finite
        object.__setattr__(self, "y", np.where(avail, y, 0.0))
        object.__setattr__(self, "avail", avail)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def D(self) -> int:
        return self.y.shape[1]

    @classmethod
    def from_frames(cls, frames: Sequence[IlpdObservation]) -> "SparseObservationSet":
        dims = {f.y.size for f in frames}
        if len(dims) != 1:
            raise ValueError(f"inconsistent cue dimensions across frames: {sorted(dims)}")
        return cls(np.stack([f.y for f in frames]), np.stack([f.avail for f in frames]))

    @classmethod
    def from_spectrogram(cls, ispec: InterauralSpectrogram,
                         band: BandConfig = BandConfig()) -> "SparseObservationSet":
        return cls(*ilpd_matrix(ispec, band))


def weighted_posterior(model: PpamModel, y: np.ndarray, weights: np.ndarray,
                       sigma2: Optional[np.ndarray] = None) -> PosteriorGmm:
    """Posterior GMM over a single direction given per-cell evidence weights.

    Each cell ``(t, d)`` contributes ``N(y_td; a_dk.x + b_dk, sigma2_d)``
    raised to the power ``weights[t, d]``. With 0/1 availability weights
    this is the exact single-source posterior.
    """
    sigma2 = model.sigma2 if sigma2 is None else sigma2
    inv = 1.0 / sigma2
    w = np.asarray(weights, dtype=float)
    u0 = w.sum(axis=0)                       # (D,)
    h1 = (w * y).sum(axis=0)
    s2 = (w * y * y).sum(axis=0)

    A, b, c, gamma = model.A, model.b, model.c, model.gamma
    K, L = model.K, model.L
    m = np.empty((K, L))
    V = np.empty((K, L, L))
    log_rho = np.empty(K)
    for k in range(K):
        g_cf = cho_factor(gamma[k], lower=True)
        prec = cho_solve(g_cf, np.eye(L)) + (A[k].T * (u0 * inv)) @ A[k]
        rhs = cho_solve(g_cf, c[k]) + A[k].T @ (inv * (h1 - u0 * b[k]))
        p_cf = cho_factor(prec, lower=True)
        m[k] = cho_solve(p_cf, rhs)
        V[k] = cho_solve(p_cf, np.eye(L))
        e = b[k] + A[k] @ m[k]
        fit = inv @ (s2 - 2.0 * h1 * e + u0 * e * e)
        dm = m[k] - c[k]
        energy = max(fit, 0.0) + dm @ cho_solve(g_cf, dm)
        # log|V| - log|Gamma| with both from Cholesky diagonals
        logdet = -2.0 * np.sum(np.log(np.diag(p_cf[0]))) - 2.0 * np.sum(np.log(np.diag(g_cf[0])))
        log_rho[k] = -np.log(K) + 0.5 * logdet - 0.5 * energy
    log_rho -= logsumexp(log_rho)
    V = 0.5 * (V + V.transpose(0, 2, 1))
    return PosteriorGmm(np.exp(log_rho), m, V, log_rho)


def sparse_posterior(model: PpamModel, obs: SparseObservationSet) -> PosteriorGmm:
    """Posterior GMM of one source direction given all available cells."""
    if obs.D != model.D:
        raise ValueError(f"observation dimension {obs.D} != model dimension {model.D}")
    return weighted_posterior(model, obs.y, obs.avail.astype(float))


def localize_point(model: PpamModel, obs: SparseObservationSet
                   ) -> Tuple[np.ndarray, PosteriorGmm]:
    """Posterior-mean direction and the full posterior."""
    post = sparse_posterior(model, obs)
    return post.mean, post
