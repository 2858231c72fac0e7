"""Acoustic front-end: framing, (warped) mel cepstra, deltas, SDC, CMN and VAD.

Feature matrices are plain ``(T, D)`` float64 arrays, one row per frame.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.fft
from sklearn.base import BaseEstimator, TransformerMixin

logger = logging.getLogger(__name__)

LOG_FLOOR = np.finfo(np.float64).eps
VTLN_GRID = tuple(np.round(np.arange(0.80, 1.2001, 0.05), 2).tolist())


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray
    sample_rate_hz: int = 8000
    utt_id: str = ""

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))


@dataclass(frozen=True)
class FrontEndConfig:
    frame_len_ms: float = 20.0
    frame_shift_ms: float = 10.0
    dither_amplitude: float = 1.0 / 2 ** 15
    preemphasis_coeff: float = 0.97
    num_mel_bins: int = 23
    num_cepstra: int = 7
    low_freq_hz: float = 20.0
    high_freq_hz: float = 3800.0
    vtln_warp: float = 1.0
    use_energy: bool = True
    vtln_low_hz: float = 100.0
    vtln_high_hz: float = 3500.0

    def validate(self, sample_rate_hz: int) -> None:
        if not 0 < self.frame_shift_ms <= self.frame_len_ms:
            raise ValueError("need 0 < frame_shift_ms <= frame_len_ms")
        if not 1 <= self.num_cepstra <= self.num_mel_bins:
            raise ValueError("need 1 <= num_cepstra <= num_mel_bins")
        if not 0 <= self.low_freq_hz < self.high_freq_hz <= sample_rate_hz / 2:
            raise ValueError(
                f"need 0 <= low_freq_hz < high_freq_hz <= {sample_rate_hz / 2}")
        if self.vtln_warp <= 0:
            raise ValueError("vtln_warp must be positive")

    def frame_samples(self, sample_rate_hz: int):
        return (int(round(self.frame_len_ms * sample_rate_hz / 1000.0)),
                int(round(self.frame_shift_ms * sample_rate_hz / 1000.0)))

    def replace(self, **changes) -> "FrontEndConfig":
        return dataclasses.replace(self, **changes)


def sdc_frontend(**overrides) -> FrontEndConfig:
    """Static cepstra feeding the 7-1-3-7 SDC stack (energy in column 0)."""
    return FrontEndConfig(**overrides)


def mfcc_frontend(**overrides) -> FrontEndConfig:
    """19 cepstra plus log energy; 60-dim after deltas and accelerations."""
    return FrontEndConfig(**{"num_cepstra": 20, **overrides})


def highres_frontend(**overrides) -> FrontEndConfig:
    """40 mel bins, no cepstral truncation, 25 ms frames (network input)."""
    return FrontEndConfig(**{"frame_len_ms": 25.0, "num_mel_bins": 40,
                             "num_cepstra": 40, "use_energy": False, **overrides})


def vtln_frontend(**overrides) -> FrontEndConfig:
    """Unwarped static cepstra scored by the warp GMM."""
    return FrontEndConfig(**{"num_cepstra": 13, "use_energy": False, **overrides})


# --- framing ---------------------------------------------------------------

def num_frames(num_samples: int, frame_len: int, frame_shift: int) -> int:
    if num_samples < frame_len:
        return 0
    return (num_samples - frame_len) // frame_shift + 1


def frame_and_window(audio: AudioSegment, cfg: FrontEndConfig, seed: int = 0) -> np.ndarray:
    """Cut audio into dithered, pre-emphasised, Hamming-windowed frames.

    Returns a ``(T, frame_len)`` array with
    ``T = floor((len - frame_len) / shift) + 1``.
    """
    cfg.validate(audio.sample_rate_hz)
    frame_len, shift = cfg.frame_samples(audio.sample_rate_hz)
    n = audio.samples.size
    T = num_frames(n, frame_len, shift)
    if T < 1:
        raise ValueError(
            f"audio {audio.utt_id!r} too short: {n} samples < frame length {frame_len}")
    starts = np.arange(T)[:, None] * shift
    frames = audio.samples[starts + np.arange(frame_len)[None, :]]
    if cfg.dither_amplitude > 0:
        rng = np.random.default_rng(seed)
        frames = frames + rng.uniform(-cfg.dither_amplitude, cfg.dither_amplitude,
                                      size=frames.shape)
    if cfg.preemphasis_coeff != 0:
        prev = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
        frames = frames - cfg.preemphasis_coeff * prev
    return frames * np.hamming(frame_len)[None, :]


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    n_fft = 1 << int(np.ceil(np.log2(frames.shape[1])))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


# --- mel filterbank with VTLN ----------------------------------------------

def mel_scale(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


def vtln_warp_freq(freq, warp: float, low_freq: float, high_freq: float,
                   vtln_low: float, vtln_high: float):
    """Piecewise-linear frequency warp moving filter centres by ``warp``.

    Between the inflection points a frequency ``f`` maps to ``warp * f``;
    outer segments are linear so that ``low_freq`` and ``high_freq`` stay
    fixed.  Audio whose spectrum is compressed by a factor ``a`` is
    normalised by ``warp = a``.
    """
    freq = np.asarray(freq, dtype=np.float64)
    if warp == 1.0:
        return freq.copy()
    lo = vtln_low * max(1.0, 1.0 / warp)
    hi = vtln_high * min(1.0, 1.0 / warp)
    f_lo, f_hi = warp * lo, warp * hi
    out = warp * freq
    below = freq < lo
    above = freq > hi
    out = np.where(below, low_freq + (f_lo - low_freq) / (lo - low_freq) * (freq - low_freq), out)
    out = np.where(above, high_freq + (f_hi - high_freq) / (hi - high_freq) * (freq - high_freq), out)
    return np.where((freq < low_freq) | (freq > high_freq), freq, out)


def mel_filterbank(cfg: FrontEndConfig, sample_rate_hz: int, n_fft: int,
                   warp: Optional[float] = None) -> np.ndarray:
    """Triangular mel weights, ``(num_mel_bins, n_fft // 2 + 1)``."""
    warp = cfg.vtln_warp if warp is None else warp
    mel_lo, mel_hi = mel_scale(cfg.low_freq_hz), mel_scale(cfg.high_freq_hz)
    delta = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1)
    edges = mel_lo + delta * np.arange(cfg.num_mel_bins + 2)
    if warp != 1.0:
        hz = vtln_warp_freq(inverse_mel_scale(edges), warp, cfg.low_freq_hz,
                            cfg.high_freq_hz, cfg.vtln_low_hz, cfg.vtln_high_hz)
        edges = mel_scale(hz)
    fft_mel = mel_scale(np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft)[None, :]
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel - left) / (center - left)
    down = (right - fft_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def cepstra_from_power(power: np.ndarray, cfg: FrontEndConfig, sample_rate_hz: int,
                       log_energy: Optional[np.ndarray] = None,
                       warp: Optional[float] = None) -> np.ndarray:
    bad = ~np.isfinite(power).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite spectrum value in frame {int(np.argmax(bad))}")
    n_fft = 2 * (power.shape[1] - 1)
    fbank = power @ mel_filterbank(cfg, sample_rate_hz, n_fft, warp).T
    logmel = np.log(np.maximum(fbank, LOG_FLOOR))
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.num_cepstra]
    if cfg.use_energy:
        if log_energy is None:
            raise ValueError("use_energy requires per-frame log energy")
        ceps[:, 0] = log_energy
    return ceps


def compute_cepstra(frames: np.ndarray, cfg: FrontEndConfig,
                    sample_rate_hz: int = 8000) -> np.ndarray:
    """Power spectrum -> warped mel filterbank -> log -> DCT-II.

    Keeps ``cfg.num_cepstra`` coefficients; with ``use_energy`` the zeroth
    is replaced by the log frame energy.
    """
    cfg.validate(sample_rate_hz)
    frames = np.asarray(frames, dtype=np.float64)
    log_energy = np.log(np.maximum(np.sum(frames ** 2, axis=1), LOG_FLOOR))
    return cepstra_from_power(power_spectrum(frames), cfg, sample_rate_hz, log_energy)


def extract(audio: AudioSegment, cfg: FrontEndConfig, seed: int = 0) -> np.ndarray:
    """Audio straight to static cepstra."""
    return compute_cepstra(frame_and_window(audio, cfg, seed), cfg, audio.sample_rate_hz)


def estimate_vtln_warp(audio: AudioSegment, cfg: FrontEndConfig, warp_model,
                       grid: Sequence[float] = VTLN_GRID, seed: int = 0,
                       mask: Optional[np.ndarray] = None) -> float:
    """Pick the grid warp whose cepstra score highest under ``warp_model``.

    ``warp_model`` is any object with ``score_samples`` returning per-frame
    log-likelihoods (normally a :class:`lidkit.gmm.DiagGmm` trained on
    unwarped features).  Ties go to the warp nearest 1.0, then the smaller.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty warp grid")
    if any(not 0.8 <= w <= 1.2 for w in grid):
        raise ValueError("warps must lie in [0.8, 1.2]")
    frames = frame_and_window(audio, cfg, seed)
    power = power_spectrum(frames)
    log_energy = np.log(np.maximum(np.sum(frames ** 2, axis=1), LOG_FLOOR))
    scores = []
    for w in grid:
        ceps = cepstra_from_power(power, cfg, audio.sample_rate_hz, log_energy, warp=w)
        if mask is not None:
            ceps = ceps[np.asarray(mask, dtype=bool)[:len(ceps)]]
        scores.append(float(np.sum(warp_model.score_samples(ceps))))
    best = min(range(len(grid)), key=lambda i: (-scores[i], abs(grid[i] - 1.0), grid[i]))
    logger.debug("utt %s warp scores %s -> %s", audio.utt_id, scores, grid[best])
    return float(grid[best])


# --- dynamic features ------------------------------------------------------

def _clamped(T: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(T) + offset, 0, T - 1)


def _delta(feats: np.ndarray, window: int) -> np.ndarray:
    T = feats.shape[0]
    num = np.zeros_like(feats)
    for w in range(1, window + 1):
        num += w * (feats[_clamped(T, w)] - feats[_clamped(T, -w)])
    return num / (2.0 * sum(w * w for w in range(1, window + 1)))


def add_deltas(feats: np.ndarray, order: int = 2, window: int = 2) -> np.ndarray:
    """Append regression deltas (and accelerations for ``order=2``)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if window < 1:
        raise ValueError("window must be >= 1")
    feats = np.asarray(feats, dtype=np.float64)
    blocks = [feats]
    for _ in range(order):
        blocks.append(_delta(blocks[-1], window))
    return np.hstack(blocks)


def compute_sdc(static_feats: np.ndarray, n_static: int = 7, delta_spread: int = 1,
                block_shift: int = 3, num_blocks: int = 7) -> np.ndarray:
    """Shifted delta cepstra appended to the first ``n_static`` statics.

    Block ``i`` at frame ``t`` is ``c[t + i*P + d] - c[t + i*P - d]`` with
    indices clamped to the utterance.
    """
    static_feats = np.asarray(static_feats, dtype=np.float64)
    if static_feats.ndim != 2 or static_feats.shape[1] < n_static:
        raise ValueError(
            f"need at least {n_static} static columns, got shape {static_feats.shape}")
    c = static_feats[:, :n_static]
    T = c.shape[0]
    blocks = [c]
    for i in range(num_blocks):
        base = i * block_shift
        blocks.append(c[_clamped(T, base + delta_spread)] - c[_clamped(T, base - delta_spread)])
    return np.hstack(blocks)


# --- normalisation and VAD -------------------------------------------------

def sliding_cmn(feats: np.ndarray, window_s: float, frame_shift_s: float = 0.01,
                center: bool = True) -> np.ndarray:
    """Subtract a sliding per-dimension mean over ``window_s`` seconds.

    The window keeps its full width at the edges (it is shifted inwards);
    utterances no longer than the window get global mean subtraction.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    feats = np.asarray(feats, dtype=np.float64)
    T = feats.shape[0]
    W = max(1, int(round(window_s / frame_shift_s)))
    if T <= W:
        return feats - feats.mean(axis=0, keepdims=True)
    t = np.arange(T)
    start = t - W // 2 if center else t - W + 1
    start = np.clip(start, 0, T - W)
    csum = np.vstack([np.zeros((1, feats.shape[1])), np.cumsum(feats, axis=0)])
    means = (csum[start + W] - csum[start]) / W
    return feats - means


def energy_vad(feats: np.ndarray, threshold_offset: float = 0.0, context: int = 2,
               proportion: float = 0.6) -> np.ndarray:
    """Boolean speech mask from the log energy in column 0.

    A frame is a candidate when its energy exceeds the utterance mean plus
    ``threshold_offset``; it is kept when at least ``proportion`` of the
    frames within ``context`` of it are candidates.
    """
    if not 0 < proportion <= 1:
        raise ValueError("proportion must be in (0, 1]")
    if context < 0:
        raise ValueError("context must be >= 0")
    log_e = np.asarray(feats, dtype=np.float64)[:, 0]
    cand = (log_e > log_e.mean() + threshold_offset).astype(np.float64)
    T = cand.size
    csum = np.concatenate([[0.0], np.cumsum(cand)])
    lo = np.clip(np.arange(T) - context, 0, T)
    hi = np.clip(np.arange(T) + context + 1, 0, T)
    frac = (csum[hi] - csum[lo]) / (hi - lo)
    return frac >= proportion - 1e-12


# --- estimator wrappers ----------------------------------------------------

class _Stateless(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        return self

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class ShiftedDeltaCepstra(_Stateless):
    """Transformer form of :func:`compute_sdc` for one utterance matrix."""

    def __init__(self, n_static=7, delta_spread=1, block_shift=3, num_blocks=7):
        self.n_static = n_static
        self.delta_spread = delta_spread
        self.block_shift = block_shift
        self.num_blocks = num_blocks

    def transform(self, X):
        return compute_sdc(X, self.n_static, self.delta_spread, self.block_shift,
                           self.num_blocks)


class Deltas(_Stateless):
    def __init__(self, order=2, window=2):
        self.order = order
        self.window = window

    def transform(self, X):
        return add_deltas(X, self.order, self.window)


class SlidingCmn(_Stateless):
    def __init__(self, window_s=3.0, frame_shift_s=0.01, center=True):
        self.window_s = window_s
        self.frame_shift_s = frame_shift_s
        self.center = center

    def transform(self, X):
        return sliding_cmn(X, self.window_s, self.frame_shift_s, self.center)
