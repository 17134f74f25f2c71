"""Scoring: direction errors, source alignment, oracle masks and SDR/SIR."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .spectro import AudioBuffer, ComplexSpectrogram

SCORE_CEILING_DB = 100.0


class UndefinedScoreError(ValueError):
    """Raised when a reference has no energy, so a ratio cannot be formed."""


def angular_error(x_hat, x_true) -> Tuple[np.ndarray, np.ndarray]:
    """Absolute azimuth and elevation errors in degrees; azimuth wraps to [0, 180]."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    d_az = np.mod(np.abs(x_hat[..., 0] - x_true[..., 0]), 360.0)
    d_az = np.minimum(d_az, 360.0 - d_az)
    d_el = np.abs(x_hat[..., 1] - x_true[..., 1])
    return d_az, d_el


def permutation_align(estimates, truths) -> Tuple[int, ...]:
    """Permutation ``p`` minimizing the total error of ``estimates[p[i]]`` against ``truths[i]``.

    Exhaustive search; the first minimal permutation in lexicographic order wins.
    """
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if estimates.shape != truths.shape:
        raise ValueError(f"{estimates.shape[0]} estimates for {truths.shape[0]} truths")
    M = truths.shape[0]
    if M > 8:
        raise ValueError("exhaustive alignment is limited to 8 sources")
    az, el = angular_error(estimates[:, None, :], truths[None, :, :])
    cost = az + el                                  # cost[i, j]: estimate i vs truth j
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(M)):
        total = cost[list(perm), range(M)].sum()
        if total < best_cost:
            best, best_cost = perm, total
    return tuple(int(p) for p in best)


def oracle_mask(source_spectrograms: Sequence[Tuple[ComplexSpectrogram, ComplexSpectrogram]],
                M: int = None) -> np.ndarray:
    """(F, T) labels of the loudest source image per cell; ties go to the lowest index."""
    if M is not None and M != len(source_spectrograms):
        raise ValueError(f"expected {M} source spectrograms, got {len(source_spectrograms)}")
    power = np.stack([np.abs(left.values) ** 2 + np.abs(right.values) ** 2
                      for left, right in source_spectrograms])
    return np.argmax(power, axis=0)


@dataclass(frozen=True)
class SeparationScore:
    sdr_db: np.ndarray
    sir_db: np.ndarray
    permutation: Tuple[int, ...]


def _flat(buffer: AudioBuffer) -> np.ndarray:
    return np.concatenate([buffer.samples_left, buffer.samples_right])


def _ratio_db(num: float, den: float) -> float:
    if den <= num * 10.0 ** (-SCORE_CEILING_DB / 10.0):
        return SCORE_CEILING_DB
    return float(10.0 * np.log10(num / den))


def sdr_sir(estimated: AudioBuffer, true_source: AudioBuffer,
            interferers: Sequence[AudioBuffer]) -> Tuple[float, float]:
    """SDR and SIR (dB) of one estimate from instantaneous least-squares projections.

    Both channels are scored jointly. The target part is the projection on the
    true source image; the interference part is the extra captured by the span
    of all source images; the rest is artifact.
    """
    e = _flat(estimated)
    s = _flat(true_source)
    if e.shape != s.shape:
        raise ValueError(f"estimate has {e.size} samples, reference {s.size}")
    s_energy = float(s @ s)
    if s_energy <= 0:
        raise UndefinedScoreError("true source has zero energy")
    target = (e @ s) / s_energy * s
    basis = np.column_stack([s] + [_flat(u) for u in interferers])
    coef, *_ = np.linalg.lstsq(basis, e, rcond=None)
    in_span = basis @ coef
    interference = in_span - target
    artifact = e - in_span
    t_pow = float(target @ target)
    i_pow = float(interference @ interference)
    a_pow = float(artifact @ artifact)
    if t_pow <= 0:
        return -SCORE_CEILING_DB, -SCORE_CEILING_DB
    return _ratio_db(t_pow, i_pow + a_pow), _ratio_db(t_pow, i_pow)


def score_separation(estimates: Sequence[AudioBuffer], references: Sequence[AudioBuffer],
                     permutation: Sequence[int] = None) -> SeparationScore:
    """Score ``estimates[permutation[i]]`` against ``references[i]`` (identity by default)."""
    M = len(references)
    perm = tuple(range(M)) if permutation is None else tuple(int(p) for p in permutation)
    if sorted(perm) != list(range(len(estimates))):
        raise ValueError(f"{perm} is not a permutation of the estimates")
    sdr, sir = np.empty(M), np.empty(M)
    for i in range(M):
        others = [references[j] for j in range(M) if j != i]
        sdr[i], sir[i] = sdr_sir(estimates[perm[i]], references[i], others)
    return SeparationScore(sdr, sir, perm)


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def format_table(rows: List[Dict[str, object]], columns: Sequence[str],
                 delimiter: str = "\t", summary_label: str = "Avg±Std") -> str:
    """Delimited text with one line per row plus an Avg±Std line for numeric columns."""
    lines = [delimiter.join(columns)]
    for row in rows:
        lines.append(delimiter.join(_fmt(row.get(c, "")) for c in columns))
    if rows:
        cells = []
        for i, col in enumerate(columns):
            vals = [row.get(col) for row in rows]
            if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool)
                   for v in vals):
                mean, std = summarize(vals)
                cells.append(f"{mean:.3f}±{std:.3f}")
            else:
                cells.append(summary_label if i == 0 else "")
        lines.append(delimiter.join(cells))
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.6g}"
    return str(value)
