"""Synthetic ground truth: PPAM sampling and a parametric virtual head.

The virtual head gives every direction a smooth left and right transfer
function ``h(f) = exp(G(f, u)) * exp(-2j*pi*f*tau(f, u))`` where ``u`` is the
unit direction vector and both the log-gain ``G`` and the delay ``tau`` are
low-order polynomials in ``u`` with frequency-smooth seeded coefficients.
Sources are filtered in the STFT domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ppam import PpamModel, TrainingSet, _log_prior_terms
from .spectro import (AudioBuffer, BandConfig, StftParams, assemble_ilpd,
                      interaural_cues, istft_channel, mean_ilpd, stft, stft_channel)

AZ_RANGE = (-160.0, 160.0)
EL_RANGE = (-60.0, 60.0)
SPEED_OF_SOUND = 343.0


def random_model(K: int, L: int, D: int, seed: int = 0, noise: float = 0.05,
                 spread: float = 10.0) -> PpamModel:
    """A PPAM with well-spread regions, for generative tests."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(-spread, spread, size=(K, L))
    gamma = np.empty((K, L, L))
    for k in range(K):
        Q, _ = np.linalg.qr(rng.normal(size=(L, L)))
        scales = rng.uniform(0.5, 2.0, size=L)
        scales /= np.prod(scales) ** (1.0 / L)
        gamma[k] = (Q * scales) @ Q.T * (spread / K ** (1.0 / L)) ** 2
    A = rng.normal(size=(K, D, L))
    b = rng.normal(scale=spread, size=(K, D))
    return PpamModel(c, gamma, A, b, np.full(D, noise ** 2))


def sample_ppam(true_model: PpamModel, N: int, seed: int = 0,
                return_z: bool = False):
    """Draw ``N`` direction/cue pairs from the generative model.

    Directions come from the prior mixture, the affine piece from the
    region posterior at that direction, and cues from the affine map plus
    diagonal Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    m = true_model
    comp = rng.integers(0, m.K, size=N)
    X = np.empty((N, m.L))
    for k in range(m.K):
        idx = comp == k
        X[idx] = rng.multivariate_normal(m.c[k], m.gamma[k], size=int(idx.sum()))
    lw = _log_prior_terms(m, X)
    p = np.exp(lw - lw.max(axis=0))
    p /= p.sum(axis=0)
    cdf = np.cumsum(p, axis=0)
    z = np.minimum((rng.random(N)[None, :] > cdf).sum(axis=0), m.K - 1)
    Y = np.einsum("ndl,nl->nd", m.A[z], X) + m.b[z]
    Y += rng.normal(size=Y.shape) * np.sqrt(m.sigma2)
    ts = TrainingSet(X, Y)
    return (ts, z) if return_z else ts


def _unit(direction) -> np.ndarray:
    az, el = np.deg2rad(np.asarray(direction, dtype=float)[..., 0]), \
        np.deg2rad(np.asarray(direction, dtype=float)[..., 1])
    # x: front, y: right, z: up
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def _harmonics(u: np.ndarray) -> np.ndarray:
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([np.ones_like(x), x, y, z, x * y, y * z, x * z,
                     x * x - y * y, 3 * z * z - 1,
                     x * (x * x - 3 * y * y), z * (x * x - y * y), x * (5 * z * z - 1),
                     y * (5 * z * z - 1)], axis=-1)


@dataclass(frozen=True)
class VirtualHead:
    """Seeded, smooth, left/right-asymmetric binaural filter bank."""
    seed: int = 0
    ear_spacing: float = 0.18
    shadow_db: float = 8.0
    detail_db: float = 4.0
    smoothness: int = 4
    params: StftParams = StftParams()
    _gain: np.ndarray = field(init=False, repr=False, compare=False)
    _delay: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n_freq = self.params.n_bins + 1
        nu = np.linspace(0.0, 1.0, n_freq)
        n_basis = _harmonics(np.zeros((1, 3))).shape[-1]
        # frequency-smooth random coefficient curves, larger at high frequency
        orders = np.arange(self.smoothness)
        gain = np.zeros((2, n_basis, n_freq))
        for ear in range(2):
            amp = rng.normal(size=(n_basis, self.smoothness)) / (1.0 + orders)
            phase = rng.uniform(0, 2 * np.pi, size=(n_basis, self.smoothness))
            curves = np.sum(amp[..., None] * np.cos(np.pi * orders[None, :, None] * nu
                                                  + phase[..., None]), axis=1)
            gain[ear] = curves * (0.3 + nu) * self.detail_db / 8.686
        shadow = self.shadow_db / 8.686 * nu ** 0.6
        gain[0, 2] -= shadow          # right-lateral sources attenuate the left ear
        gain[1, 2] += shadow
        delay = np.zeros((2, n_basis))
        delay[:, 2] = np.array([1.0, -1.0]) * 0.5 * self.ear_spacing / SPEED_OF_SOUND
        delay[:, 1:4] += rng.normal(scale=2e-5, size=(2, 3))
        object.__setattr__(self, "_gain", gain)
        object.__setattr__(self, "_delay", delay)

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.params.n_bins + 1) * self.params.freq_resolution

    def response(self, direction) -> Tuple[np.ndarray, np.ndarray]:
        """Complex left and right responses over bins 0..F for one direction."""
        basis = _harmonics(_unit(direction))
        f = self.freqs
        lowf = 1.0 + 0.3 * np.exp(-f / 1000.0)
        out = []
        for ear in range(2):
            g = basis @ self._gain[ear]
            tau = (basis @ self._delay[ear]) * lowf
            out.append(np.exp(g - 2j * np.pi * f * tau))
        return out[0], out[1]

    def interaural(self, direction) -> np.ndarray:
        left, right = self.response(direction)
        return right / left


IDENTITY = "identity"


@dataclass(frozen=True)
class Scene:
    """Sources as ``(direction, mono signal)`` pairs plus sensor noise."""
    sources: Sequence[Tuple[Tuple[float, float], np.ndarray]]
    noise_level: Optional[float] = None      # dBFS of white sensor noise, None: silent
    seed: int = 0

    def __post_init__(self):
        for direction, _ in self.sources:
            az, el = direction
            if not (AZ_RANGE[0] <= az <= AZ_RANGE[1] and EL_RANGE[0] <= el <= EL_RANGE[1]):
                raise ValueError(f"direction {direction} outside "
                                 f"{AZ_RANGE} x {EL_RANGE}")

    @property
    def directions(self) -> np.ndarray:
        return np.array([d for d, _ in self.sources], dtype=float)


def render_source(head, direction, signal, sample_rate: int = 16000) -> AudioBuffer:
    """Binaural image of one mono signal; ``head="identity"`` copies it to both ears."""
    signal = np.asarray(signal, dtype=float)
    if isinstance(head, str) and head == IDENTITY:
        return AudioBuffer.mono(signal, sample_rate)
    params = head.params
    if params.sample_rate != sample_rate:
        raise ValueError("head and signal sample rates differ")
    spec = stft_channel(signal, params)
    h_left, h_right = head.response(direction)
    chans = []
    for h in (h_left, h_right):
        filtered = type(spec)(spec.values * h[1:, None], spec.dc * h[0].real,
                              spec.freq_resolution, spec.hop)
        chans.append(istft_channel(filtered, signal.shape[0], params))
    return AudioBuffer(chans[0], chans[1], sample_rate)


def render_images(head, scene: Scene, sample_rate: int = 16000) -> List[AudioBuffer]:
    return [render_source(head, d, s, sample_rate) for d, s in scene.sources]


def sensor_noise(scene: Scene, n: int, sample_rate: int = 16000) -> AudioBuffer:
    if scene.noise_level is None:
        return AudioBuffer(np.zeros(n), np.zeros(n), sample_rate)
    rng = np.random.default_rng(scene.seed)
    std = 10.0 ** (scene.noise_level / 20.0)
    return AudioBuffer(rng.normal(scale=std, size=n), rng.normal(scale=std, size=n),
                       sample_rate)


def render_scene(head, scene: Scene, sample_rate: int = 16000) -> AudioBuffer:
    """Sum of the binaural source images plus sensor noise."""
    lengths = {np.asarray(s).shape[0] for _, s in scene.sources}
    if len(lengths) != 1:
        raise ValueError("all source signals must have the same length")
    images = render_images(head, scene, sample_rate)
    out = sensor_noise(scene, lengths.pop(), sample_rate)
    for img in images:
        out = out + img
    return out


def white_noise(duration: float, sample_rate: int, rng) -> np.ndarray:
    return rng.normal(scale=0.1, size=int(round(duration * sample_rate)))


def noise_bursts(duration: float, sample_rate: int, rng, n_bursts: int = 6,
                 band_hz: Tuple[float, float] = (200.0, 7000.0),
                 burst_ms: Tuple[float, float] = (60.0, 250.0)) -> np.ndarray:
    """Sparse, speech-like test signal: band-limited noise bursts with soft edges."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    for _ in range(n_bursts):
        lo = rng.uniform(band_hz[0], band_hz[1] * 0.6)
        hi = min(band_hz[1], lo * rng.uniform(1.5, 4.0))
        spectrum = np.fft.rfft(rng.normal(size=n))
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        burst = np.fft.irfft(spectrum, n=n)
        length = int(rng.uniform(*burst_ms) * 1e-3 * sample_rate)
        start = int(rng.integers(0, max(1, n - length)))
        env = np.zeros(n)
        env[start:start + length] = np.hanning(length)
        out += burst * env * rng.uniform(0.5, 1.0)
    peak = np.max(np.abs(out))
    return out / peak * 0.5 if peak > 0 else out


def grid_directions(step: float = 2.0, az_range=AZ_RANGE, el_range=EL_RANGE) -> np.ndarray:
    az = np.arange(az_range[0], az_range[1] + 1e-9, step)
    el = np.arange(el_range[0], el_range[1] + 1e-9, step)
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.column_stack([A.ravel(), E.ravel()])


def decimate(n_points: int, grid_step: float, delta: float, seed: int = 0) -> np.ndarray:
    """Sorted random subset emulating a training set of sparsity ``delta``."""
    rng = np.random.default_rng(seed)
    keep = int(round(n_points * (grid_step / delta) ** 2))
    return np.sort(rng.choice(n_points, size=min(keep, n_points), replace=False))


def mean_cues(head, directions, seed: int = 0, duration: float = 1.0,
              band: BandConfig = BandConfig(), threshold_db: float = -40.0,
              noise_level: Optional[float] = None) -> np.ndarray:
    """Mean ILPD vector of a white-noise source rendered at each direction."""
    sr = head.params.sample_rate
    rng = np.random.default_rng(seed)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    Y = np.empty((directions.shape[0], band.dim))
    for i, direction in enumerate(directions):
        sig = white_noise(duration, sr, rng)
        scene = Scene([(tuple(direction), sig)], noise_level, int(rng.integers(2 ** 31)))
        left, right = stft(render_scene(head, scene, sr))
        obs = mean_ilpd(assemble_ilpd(interaural_cues(left, right, threshold_db), band))
        Y[i] = obs.y
    return Y


def build_training_grid(head, step: float = 2.0, seed: int = 0, *,
                        delta: Optional[float] = None, az_range=AZ_RANGE,
                        el_range=EL_RANGE, duration: float = 1.0,
                        band: BandConfig = BandConfig(), threshold_db: float = -40.0,
                        noise_level: Optional[float] = None) -> TrainingSet:
    """White-noise mean cues over a regular grid, optionally decimated to sparsity ``delta``."""
    for lo, hi, lim in ((*az_range, AZ_RANGE), (*el_range, EL_RANGE)):
        if lo < lim[0] or hi > lim[1]:
            raise ValueError(f"grid range {lo}..{hi} outside {lim}")
    X = grid_directions(step, az_range, el_range)
    if delta is not None and delta > step:
        X = X[decimate(X.shape[0], step, delta, seed)]
    return TrainingSet(X, mean_cues(head, X, seed, duration, band, threshold_db, noise_level))
