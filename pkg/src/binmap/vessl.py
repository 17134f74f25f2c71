"""Variational EM for joint separation and localization of M sources.

The mixed model assigns every available cue cell ``(t, d)`` to one of M
sources (``W``), each source having a direction ``x_m`` and an affine piece
``z_m`` under a frozen PPAM. The factorized posterior ``q_W q_XZ`` is updated
by three exact coordinate-ascent steps:

* E-XZ: per source, a K-component Gaussian mixture over its direction;
* E-W: per cell (or per tied block of cells), assignment probabilities;
* M: source weights ``lam`` (D, M) and noise variances ``sigma2`` (D,).

Arrays follow the observation layout: ``q`` is (T, D, M).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .localize import PosteriorGmm, SparseObservationSet, weighted_posterior
from .ppam import LOG_2PI, PpamModel
from .spectro import AudioBuffer, ComplexSpectrogram, DimMap, istft

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixedModel:
    base: PpamModel
    sigma2: np.ndarray      # (D,)
    lam: np.ndarray         # (D, M)

    @classmethod
    def initial(cls, base: PpamModel, M: int) -> "MixedModel":
        return cls(base, base.sigma2.copy(), np.full((base.D, M), 1.0 / M))

    @property
    def M(self) -> int:
        return self.lam.shape[1]


@dataclass(frozen=True)
class QXZ:
    """Per-source direction posteriors: weights (M, K), means (M, K, L), covs (M, K, L, L)."""
    alpha: np.ndarray
    mu: np.ndarray
    S: np.ndarray
    log_alpha: np.ndarray

    @property
    def M(self) -> int:
        return self.alpha.shape[0]

    def source(self, m: int) -> PosteriorGmm:
        return PosteriorGmm(self.alpha[m], self.mu[m], self.S[m], self.log_alpha[m])

    def permuted(self, order) -> "QXZ":
        order = list(order)
        return QXZ(self.alpha[order], self.mu[order], self.S[order], self.log_alpha[order])


@dataclass(frozen=True)
class QW:
    """Assignment probabilities ``q`` (T, D, M); zero on unavailable cells."""
    q: np.ndarray

    @property
    def M(self) -> int:
        return self.q.shape[2]


@dataclass(frozen=True)
class BlockStructure:
    """Partition of frequency bins into contiguous blocks sharing one assignment."""
    n_blocks: int
    bin_block: np.ndarray   # (F,) block index of every 0-based bin

    def dim_blocks(self, dim_bins: np.ndarray) -> np.ndarray:
        """Block index of every cue dimension, given 1-based bins per dimension."""
        return self.bin_block[np.asarray(dim_bins) - 1]


def progressive_mask_schedule(iteration: int, T: int, F: int) -> BlockStructure:
    """Blocks per frame at a given VEM iteration: 1, 2, 4, ... capped at ``F``."""
    if iteration < 1:
        raise ValueError("iterations are counted from 1")
    n_blocks = min(2 ** min(iteration - 1, 62), F)
    return BlockStructure(n_blocks, (np.arange(F) * n_blocks) // F)


def e_xz_step(mixed: MixedModel, obs: SparseObservationSet, qw: QW) -> QXZ:
    """Localization step: each source's direction posterior under ``q_W``."""
    M = qw.M
    posts = [weighted_posterior(mixed.base, obs.y, qw.q[:, :, m] * obs.avail, mixed.sigma2)
             for m in range(M)]
    return QXZ(np.stack([p.rho for p in posts]), np.stack([p.m for p in posts]),
               np.stack([p.V for p in posts]), np.stack([p.log_rho for p in posts]))


def _expected_sq_error(mixed: MixedModel, obs: SparseObservationSet, qxz: QXZ) -> np.ndarray:
    """``sum_k alpha_km (a_dk' S_km a_dk + (y_td - a_dk' mu_km - b_dk)^2)``, shape (T, D, M)."""
    A, b = mixed.base.A, mixed.base.b
    pred = np.einsum("kdl,mkl->mkd", A, qxz.mu) + b[None]                 # (M, K, D)
    spread = np.einsum("kdi,mkij,kdj->mkd", A, qxz.S, A)
    p1 = np.einsum("mk,mkd->md", qxz.alpha, spread + pred ** 2)
    p2 = np.einsum("mk,mkd->md", qxz.alpha, pred)
    y = obs.y[:, :, None]
    out = p1.T[None] - 2.0 * y * p2.T[None] + y ** 2
    return np.maximum(out, 0.0)


def _cell_logits(mixed: MixedModel, obs: SparseObservationSet, qxz: QXZ) -> np.ndarray:
    return _log_lam(mixed.lam)[None] - _expected_sq_error(mixed, obs, qxz) / (2.0 * mixed.sigma2[None, :, None])


def _log_lam(lam: np.ndarray) -> np.ndarray:
    # a weight that underflowed to zero must not turn a whole block into -inf
    return np.log(np.maximum(lam, np.finfo(float).tiny))


def _block_onehot(dim_block: np.ndarray, n_blocks: int) -> np.ndarray:
    onehot = np.zeros((dim_block.size, n_blocks))
    onehot[np.arange(dim_block.size), dim_block] = 1.0
    return onehot


def e_w_step(mixed: MixedModel, obs: SparseObservationSet, qxz: QXZ,
             dim_block: Optional[np.ndarray] = None) -> QW:
    """Separation step.

    Without ``dim_block`` every available cell gets its own distribution over
    sources. With ``dim_block`` (block index per cue dimension), all available
    cells of a frame sharing a block share one distribution, whose log-odds
    add the per-cell terms.
    """
    logits = _cell_logits(mixed, obs, qxz)
    avail = obs.avail
    if dim_block is None:
        q = np.exp(logits - logsumexp(logits, axis=2, keepdims=True))
    else:
        onehot = _block_onehot(dim_block, int(dim_block.max()) + 1)
        agg = np.einsum("tdm,db->tbm", np.where(avail[:, :, None], logits, 0.0), onehot)
        qb = np.exp(agg - logsumexp(agg, axis=2, keepdims=True))
        q = qb[:, dim_block, :]
    return QW(q * avail[:, :, None])


def m_step_mixed(mixed: MixedModel, obs: SparseObservationSet, qxz: QXZ, qw: QW,
                 sigma2_floor: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Source weights and noise variances maximizing the free energy.

    ``lam[d]`` is the mean assignment over the frames where ``d`` is
    available; channels with no available frame keep uniform weights and
    their previous variance.
    """
    q = qw.q
    M = q.shape[2]
    count = q.sum(axis=(0, 2))                                         # (D,)
    lam = np.full((obs.D, M), 1.0 / M)
    seen = count > 0
    lam[seen] = q.sum(axis=0)[seen] / count[seen, None]
    num = np.sum(q * _expected_sq_error(mixed, obs, qxz), axis=(0, 2))
    sigma2 = mixed.sigma2.copy()
    sigma2[seen] = np.maximum(num[seen] / count[seen], sigma2_floor)
    return lam, sigma2


def free_energy(mixed: MixedModel, obs: SparseObservationSet, qxz: QXZ, qw: QW,
                dim_block: Optional[np.ndarray] = None) -> float:
    """Evidence lower bound ``E_q[log p(y, w, x, z)] + H(q)``.

    With ``dim_block``, assignments within a frame block are one variable and
    contribute a single entropy term.
    """
    energy, entropy = free_energy_parts(mixed, obs, qxz, qw, dim_block)
    return energy + entropy


def free_energy_parts(mixed: MixedModel, obs: SparseObservationSet, qxz: QXZ, qw: QW,
                      dim_block: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """``(E_q[log p(y, w, x, z)], H(q))``."""
    base = mixed.base
    q = qw.q
    avail = obs.avail
    # data and assignment-prior terms
    cell = _log_lam(mixed.lam)[None] - 0.5 * np.log(2 * np.pi * mixed.sigma2)[None, :, None] \
        - _expected_sq_error(mixed, obs, qxz) / (2.0 * mixed.sigma2[None, :, None])
    energy = float(np.sum(np.where(q > 0, q * cell, 0.0)))

    # direction and component priors
    L = base.L
    gamma_inv = np.linalg.inv(base.gamma)
    logdet_gamma = np.linalg.slogdet(base.gamma)[1]
    logdet_S = np.linalg.slogdet(qxz.S)[1]                              # (M, K)
    diff = qxz.mu - base.c[None]
    prior = -np.log(base.K) - 0.5 * (L * LOG_2PI + logdet_gamma[None]
                                     + np.einsum("kij,mkji->mk", gamma_inv, qxz.S)
                                     + np.einsum("mki,kij,mkj->mk", diff, gamma_inv, diff))
    alpha = qxz.alpha
    safe_log_alpha = np.where(alpha > 0, qxz.log_alpha, 0.0)
    energy += float(np.sum(alpha * prior))

    # entropies
    h_xz = float(np.sum(-alpha * safe_log_alpha + alpha * 0.5 * (L * (LOG_2PI + 1.0) + logdet_S)))
    if dim_block is None:
        units = q[avail]
    else:
        # cells of a (frame, block) share q, so their mean is that shared value
        onehot = _block_onehot(dim_block, int(dim_block.max()) + 1)
        n_avail = avail.astype(float) @ onehot                          # (T, B)
        qb = np.einsum("tdm,db->tbm", q, onehot) / np.maximum(n_avail, 1.0)[:, :, None]
        units = qb[n_avail > 0]
    h_w = float(-np.sum(np.where(units > 0, units * np.log(np.maximum(units, 1e-300)), 0.0)))
    return energy, h_xz + h_w


def map_estimates(qxz: QXZ, qw: Optional[QW] = None
                  ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """MAP direction and piece per source, and the per-cell MAP source.

    The piece maximizes ``alpha_km |S_km|^(-1/2)``; ties go to the lowest
    index. Unavailable cells get source ``-1``.
    """
    score = qxz.log_alpha - 0.5 * np.linalg.slogdet(qxz.S)[1]
    k_map = np.argmax(score, axis=1)
    x_map = qxz.mu[np.arange(qxz.M), k_map]
    w_map = None
    if qw is not None:
        w_map = np.argmax(qw.q, axis=2)
        w_map[qw.q.sum(axis=2) <= 0] = -1
    return x_map, k_map, w_map


def bin_labels(w_map: np.ndarray, dim_map: DimMap, n_bins: int) -> np.ndarray:
    """Per-(bin, frame) source labels (F, T) read from each bin's ILD dimension."""
    ild = dim_map.ild_dims()
    labels = np.full((n_bins, w_map.shape[0]), -1, dtype=int)
    labels[dim_map.bins[ild] - 1] = w_map[:, ild].T
    return labels


def separate(spec_left: ComplexSpectrogram, spec_right: ComplexSpectrogram,
             labels: np.ndarray, M: int, length: int, sample_rate: int = 16000,
             window_ms: float = 64.0, hop_ms: float = 8.0) -> List[AudioBuffer]:
    """Binary-mask resynthesis: source ``m`` keeps the cells labelled ``m``."""
    labels = np.asarray(labels)
    if labels.shape != spec_left.shape or spec_left.shape != spec_right.shape:
        raise ValueError(f"label grid {labels.shape} does not match spectrograms "
                         f"{spec_left.shape}/{spec_right.shape}")
    out = []
    for m in range(M):
        mask = (labels == m).astype(float)
        out.append(istft(spec_left.masked(mask), spec_right.masked(mask), length,
                         sample_rate, window_ms, hop_ms))
    return out


@dataclass(frozen=True)
class SourceSolution:
    """One separated source: direction posterior, MAP estimate, cue-grid mask and audio."""
    posterior: PosteriorGmm
    x_map: np.ndarray
    k_map: int
    mask: np.ndarray                 # (T, D) bool over cue cells
    audio: Optional[AudioBuffer] = None


def source_solutions(qxz: QXZ, qw: QW, audio: Optional[List[AudioBuffer]] = None
                     ) -> List[SourceSolution]:
    x_map, k_map, w_map = map_estimates(qxz, qw)
    return [SourceSolution(qxz.source(m), x_map[m], int(k_map[m]), w_map == m,
                           None if audio is None else audio[m])
            for m in range(qxz.M)]


@dataclass
class VesslResult:
    qxz: QXZ
    qw: QW
    mixed: MixedModel
    traces: Dict[int, List[float]]
    iterations: Dict[int, int] = field(default_factory=dict)

    @property
    def free_energy_trace(self) -> List[float]:
        return [f for K in sorted(self.traces) for f in self.traces[K]]


def initial_qw(obs: SparseObservationSet, M: int, seed: int = 0) -> QW:
    """Frame-level Dirichlet(1) assignments, identical across a frame's cells."""
    rng = np.random.default_rng(seed)
    frame_q = rng.dirichlet(np.ones(M), size=obs.T)
    return QW(np.repeat(frame_q[:, None, :], obs.D, axis=1) * obs.avail[:, :, None])


def run(models_by_scale: Mapping[int, PpamModel], obs: SparseObservationSet, M: int,
        seed: int = 0, max_iter: int = 50, tol: float = 1e-5, *,
        dim_bins: Optional[np.ndarray] = None, n_bins: Optional[int] = None,
        progressive: bool = True, restart_masking: bool = False,
        carry_params: bool = False, update_sigma: bool = True,
        init: Optional[QW] = None) -> VesslResult:
    """Multi-scale VEM over an increasing ladder of PPAM models.

    The first scale starts from seeded random frame-level assignments (or
    ``init``); each later scale starts from the previous scale's assignments.
    Source weights and noise variances restart from uniform weights and the
    scale's own PPAM noise unless ``carry_params``.

    Progressive masking ties the cells of 1, 2, 4, ... frequency blocks per
    frame, doubling every iteration until single bins, during the first
    scale (every scale with ``restart_masking``). A scale ends once fully
    released and the relative free-energy change is below ``tol``.
    """
    scales = sorted(models_by_scale)
    D, L = models_by_scale[scales[0]].D, models_by_scale[scales[0]].L
    for K in scales:
        if models_by_scale[K].D != D or models_by_scale[K].L != L:
            raise ValueError(f"model for K={K} has mismatched dimensions")
    if obs.D != D:
        raise ValueError(f"observation dimension {obs.D} != model dimension {D}")
    if progressive and (dim_bins is None or n_bins is None):
        raise ValueError("progressive masking needs dim_bins and n_bins")

    qw = init if init is not None else initial_qw(obs, M, seed)
    if M == 1:
        qw = QW(obs.avail[:, :, None].astype(float))
    traces: Dict[int, List[float]] = {}
    iterations: Dict[int, int] = {}
    lam, sigma2 = None, None
    for scale_index, K in enumerate(scales):
        base = models_by_scale[K]
        masking = progressive and (restart_masking or scale_index == 0)
        mixed = MixedModel(base, base.sigma2.copy() if sigma2 is None else sigma2,
                           np.full((D, M), 1.0 / M) if lam is None else lam)
        trace: List[float] = []
        for it in range(1, max_iter + 1):
            qxz = e_xz_step(mixed, obs, qw)
            if progressive:
                # once released, cells of one bin in one frame stay tied
                blocks = progressive_mask_schedule(it if masking else n_bins, obs.T, n_bins)
                dim_block = blocks.dim_blocks(dim_bins)
                released = blocks.n_blocks >= n_bins
            else:
                dim_block, released = None, True
            qw = e_w_step(mixed, obs, qxz, dim_block)
            new_lam, new_sigma2 = m_step_mixed(mixed, obs, qxz, qw)
            mixed = MixedModel(base, new_sigma2 if update_sigma else mixed.sigma2, new_lam)
            trace.append(free_energy(mixed, obs, qxz, qw, dim_block))
            if released and len(trace) > 1 and \
                    abs(trace[-1] - trace[-2]) < tol * abs(trace[-2]):
                break
        # direction posterior consistent with the final assignments
        qxz = e_xz_step(mixed, obs, qw)
        traces[K] = trace
        iterations[K] = it
        if carry_params:
            lam, sigma2 = mixed.lam, mixed.sigma2
        logger.debug("scale K=%d: %d iterations, free energy %.4f", K, it, trace[-1])
    return VesslResult(qxz, qw, mixed, traces, iterations)
