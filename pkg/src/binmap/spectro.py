"""Spectrograms, interaural cues and ILPD observation vectors.

Conventions
-----------
Frames are centered on multiples of the hop, the signal being zero-padded by
half a window on both sides, so a signal of ``n`` samples yields
``1 + n // hop`` frames (126 frames for 1 s at 16 kHz with an 8 ms hop).
The DC bin is kept separately from the ``F`` positive-frequency bins so that
resynthesis is exact; bin ``f`` (1-based) is centered on ``f * sr / n_fft`` Hz.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.io import wavfile

ILD = 0
IPD_RE = 1
IPD_IM = 2
CUE_NAMES = ("ILD", "IPD-re", "IPD-im")


@dataclass(frozen=True)
class AudioBuffer:
    samples_left: np.ndarray
    samples_right: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        left = np.asarray(self.samples_left, dtype=float)
        right = np.asarray(self.samples_right, dtype=float)
        if left.shape != right.shape or left.ndim != 1:
            raise ValueError("left and right channels must be 1-D with equal length")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples_left", left)
        object.__setattr__(self, "samples_right", right)

    @classmethod
    def mono(cls, samples, sample_rate: int = 16000) -> "AudioBuffer":
        samples = np.asarray(samples, dtype=float)
        return cls(samples, samples.copy(), sample_rate)

    def __len__(self) -> int:
        return self.samples_left.shape[0]

    def __add__(self, other: "AudioBuffer") -> "AudioBuffer":
        if other.sample_rate != self.sample_rate or len(other) != len(self):
            raise ValueError("cannot add buffers of different rate or length")
        return AudioBuffer(self.samples_left + other.samples_left,
                           self.samples_right + other.samples_right,
                           self.sample_rate)

    @property
    def stereo(self) -> np.ndarray:
        """Samples as an ``(n, 2)`` array."""
        return np.stack([self.samples_left, self.samples_right], axis=1)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Positive-frequency STFT coefficients, ``values`` has shape (F, T)."""
    values: np.ndarray
    dc: np.ndarray
    freq_resolution: float
    hop: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def masked(self, mask) -> "ComplexSpectrogram":
        """Apply a real (F, T) mask; the DC row follows the lowest bin."""
        mask = np.asarray(mask, dtype=float)
        if mask.shape != self.values.shape:
            raise ValueError(f"mask shape {mask.shape} != spectrogram shape {self.values.shape}")
        return ComplexSpectrogram(self.values * mask, self.dc * mask[0],
                                  self.freq_resolution, self.hop)

    def power(self) -> np.ndarray:
        return np.abs(self.values) ** 2


@dataclass(frozen=True)
class StftParams:
    window_ms: float = 64.0
    hop_ms: float = 8.0
    sample_rate: int = 16000

    @property
    def n_fft(self) -> int:
        return int(round(self.window_ms * 1e-3 * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * 1e-3 * self.sample_rate))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2

    @property
    def freq_resolution(self) -> float:
        return self.sample_rate / self.n_fft

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length

    def as_dict(self) -> dict:
        return {"window_ms": self.window_ms, "hop_ms": self.hop_ms,
                "sample_rate": self.sample_rate}


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frames(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = 1 + x.shape[0] // hop
    pad = n_fft // 2
    total = (n_frames - 1) * hop + n_fft
    padded = np.zeros(total)
    padded[pad:pad + x.shape[0]] = x
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, n_fft = frames.shape
    total = (n_frames - 1) * hop + n_fft
    if n_fft % hop:
        out = np.zeros(total)
        for t in range(n_frames):
            out[t * hop:t * hop + n_fft] += frames[t]
        return out
    per = n_fft // hop
    chunks = np.zeros((n_frames + per - 1, hop))
    for j in range(per):
        chunks[j:j + n_frames] += frames[:, j * hop:(j + 1) * hop]
    return chunks.ravel()


def stft_channel(x, params: StftParams = StftParams()) -> ComplexSpectrogram:
    x = np.asarray(x, dtype=float)
    n_fft, hop = params.n_fft, params.hop_length
    if x.shape[0] < n_fft:
        raise ValueError(f"signal of {x.shape[0]} samples is shorter than one window ({n_fft})")
    spec = np.fft.rfft(_frames(x, n_fft, hop) * hann(n_fft), axis=1).T
    return ComplexSpectrogram(spec[1:], spec[0], params.freq_resolution,
                              hop / params.sample_rate)


def istft_channel(spec: ComplexSpectrogram, length: int,
                  params: StftParams = StftParams()) -> np.ndarray:
    n_fft, hop = params.n_fft, params.hop_length
    full = np.vstack([spec.dc[None, :], spec.values])
    if full.shape[0] != n_fft // 2 + 1:
        raise ValueError("spectrogram bin count does not match STFT parameters")
    window = hann(n_fft)
    frames = np.fft.irfft(full.T, n=n_fft, axis=1) * window
    out = _overlap_add(frames, hop)
    wsum = _overlap_add(np.broadcast_to(window ** 2, frames.shape), hop)
    pad = n_fft // 2
    out = out[pad:pad + length]
    wsum = wsum[pad:pad + length]
    nonzero = wsum > 1e-10
    out[nonzero] /= wsum[nonzero]
    if out.shape[0] < length:
        out = np.concatenate([out, np.zeros(length - out.shape[0])])
    return out


def stft(audio: AudioBuffer, window_ms: float = 64.0, hop_ms: float = 8.0
         ) -> Tuple[ComplexSpectrogram, ComplexSpectrogram]:
    """Left and right spectrograms of a stereo buffer."""
    params = StftParams(window_ms, hop_ms, audio.sample_rate)
    return (stft_channel(audio.samples_left, params),
            stft_channel(audio.samples_right, params))


def istft(spec_left: ComplexSpectrogram, spec_right: ComplexSpectrogram,
          original_length: int, sample_rate: int = 16000,
          window_ms: float = 64.0, hop_ms: float = 8.0) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`."""
    if spec_left.shape != spec_right.shape:
        raise ValueError(f"channel shapes differ: {spec_left.shape} vs {spec_right.shape}")
    params = StftParams(window_ms, hop_ms, sample_rate)
    return AudioBuffer(istft_channel(spec_left, original_length, params),
                       istft_channel(spec_right, original_length, params),
                       sample_rate)


@dataclass(frozen=True)
class InterauralSpectrogram:
    """ILD ``alpha`` (F, T) in dB, IPD ``phi`` (F, T, 2) unit vectors, mask ``chi``."""
    alpha: np.ndarray
    phi: np.ndarray
    chi: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.chi.shape

    @property
    def missing_fraction(self) -> float:
        return 1.0 - float(self.chi.mean())


def interaural_cues(left: ComplexSpectrogram, right: ComplexSpectrogram,
                    power_threshold_db: float = -40.0) -> InterauralSpectrogram:
    """ILD/IPD spectrograms from the right/left ratio.

    A cell is available when both channel powers exceed ``power_threshold_db``
    relative to the largest power found in either spectrogram. Unavailable
    cells hold zeros.
    """
    sl, sr = left.values, right.values
    if sl.shape != sr.shape:
        raise ValueError(f"channel shapes differ: {sl.shape} vs {sr.shape}")
    pl, pr = np.abs(sl) ** 2, np.abs(sr) ** 2
    peak = max(pl.max(initial=0.0), pr.max(initial=0.0))
    floor = peak * 10.0 ** (power_threshold_db / 10.0)
    chi = (pl > floor) & (pr > floor) & (peak > 0)

    alpha = np.zeros(sl.shape)
    phi = np.zeros(sl.shape + (2,))
    ratio = sr[chi] / sl[chi]
    mag = np.abs(ratio)
    alpha[chi] = 20.0 * np.log10(mag)
    unit = ratio / mag
    phi[chi, 0] = unit.real
    phi[chi, 1] = unit.imag
    return InterauralSpectrogram(alpha, phi, chi)


@dataclass(frozen=True)
class BandConfig:
    """1-based inclusive bin ranges for the ILD and IPD parts of a cue vector."""
    ild_band: Tuple[int, int] = (1, 512)
    ipd_band: Tuple[int, int] = (20, 128)

    def __post_init__(self):
        for name in ("ild_band", "ipd_band"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo}..{hi}")

    @classmethod
    def from_hz(cls, ipd_lo_hz: float = 300.0, ipd_hi_hz: float = 2000.0,
                params: StftParams = StftParams()) -> "BandConfig":
        res = params.freq_resolution
        lo = int(np.ceil(ipd_lo_hz / res))
        hi = int(np.floor(ipd_hi_hz / res))
        return cls((1, params.n_bins), (lo, hi))

    def validate(self, n_bins: int) -> None:
        for name in ("ild_band", "ipd_band"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi > n_bins:
                raise ValueError(f"{name} {lo}..{hi} outside 1..{n_bins}")

    @property
    def ild_bins(self) -> np.ndarray:
        return np.arange(self.ild_band[0], self.ild_band[1] + 1)

    @property
    def ipd_bins(self) -> np.ndarray:
        return np.arange(self.ipd_band[0], self.ipd_band[1] + 1)

    @property
    def dim(self) -> int:
        return self.ild_bins.size + 2 * self.ipd_bins.size

    def dim_map(self) -> "DimMap":
        kinds = np.concatenate([np.full(self.ild_bins.size, ILD),
                                np.full(self.ipd_bins.size, IPD_RE),
                                np.full(self.ipd_bins.size, IPD_IM)])
        bins = np.concatenate([self.ild_bins, self.ipd_bins, self.ipd_bins])
        return DimMap(kinds, bins)

    def as_dict(self) -> dict:
        return {"ild_band": list(self.ild_band), "ipd_band": list(self.ipd_band)}


@dataclass(frozen=True)
class DimMap:
    """Cue kind and 1-based frequency bin of every cue-vector dimension."""
    kinds: np.ndarray
    bins: np.ndarray

    def __len__(self) -> int:
        return self.kinds.size

    def __getitem__(self, d: int) -> Tuple[str, int]:
        return CUE_NAMES[self.kinds[d]], int(self.bins[d])

    def index(self, kind: str, freq_bin: int) -> int:
        hits = np.flatnonzero((self.kinds == CUE_NAMES.index(kind)) & (self.bins == freq_bin))
        if hits.size != 1:
            raise KeyError((kind, freq_bin))
        return int(hits[0])

    def ild_dims(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == ILD)


@dataclass(frozen=True)
class IlpdObservation:
    y: np.ndarray
    avail: np.ndarray
    dim_map: DimMap = field(repr=False)

    @property
    def dim(self) -> int:
        return self.y.size


def ilpd_matrix(ispec: InterauralSpectrogram, band: BandConfig = BandConfig()
                ) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked cue vectors as ``(T, D)`` values and availability arrays."""
    n_bins = ispec.alpha.shape[0]
    band.validate(n_bins)
    ild = band.ild_bins - 1
    ipd = band.ipd_bins - 1
    y = np.concatenate([ispec.alpha[ild], ispec.phi[ipd, :, 0], ispec.phi[ipd, :, 1]]).T
    avail = np.concatenate([ispec.chi[ild], ispec.chi[ipd], ispec.chi[ipd]]).T
    return y, avail


def assemble_ilpd(ispec: InterauralSpectrogram, band: BandConfig = BandConfig()
                  ) -> List[IlpdObservation]:
    """One ILPD observation per frame: ILD over the ILD band, then IPD re/im."""
    y, avail = ilpd_matrix(ispec, band)
    dmap = band.dim_map()
    return [IlpdObservation(y[t], avail[t], dmap) for t in range(y.shape[0])]


def mean_ilpd(observations: Sequence[IlpdObservation]) -> IlpdObservation:
    """Per-dimension mean over the frames where that dimension is available."""
    if len(observations) == 0:
        raise ValueError("need at least one frame")
    y = np.stack([o.y for o in observations])
    avail = np.stack([o.avail for o in observations]).astype(bool)
    count = avail.sum(axis=0)
    total = np.where(avail, y, 0.0).sum(axis=0)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return IlpdObservation(mean, count > 0, observations[0].dim_map)


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit, 32-bit or float WAV as a stereo buffer in [-1, 1]."""
    rate, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(float) / float(np.iinfo(data.dtype).max + 1)
    else:
        data = data.astype(float)
    if data.ndim == 1:
        return AudioBuffer.mono(data, int(rate))
    if data.shape[1] != 2:
        raise ValueError(f"expected mono or stereo WAV, got {data.shape[1]} channels")
    return AudioBuffer(data[:, 0], data[:, 1], int(rate))


def write_wav(path, audio: AudioBuffer) -> None:
    wavfile.write(path, audio.sample_rate, audio.stereo.astype(np.float32))
