"""Synthetic multi-language corpora for desk-scale experiments.

Each language is a Markov chain over "phones" drawn from a shared
inventory.  A phone is rendered as three sinusoids at its formant
frequencies (random phase) plus white noise; languages differ in which
phones they use, how they sequence them and how they realise each
phone's formants.  Global phone 0 is silence (noise only).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .corpusio import ManifestRow, write_labels, write_manifest, write_wav

logger = logging.getLogger(__name__)

FRAME_SHIFT_S = 0.01
LABEL_FRAME_S = 0.025
SILENCE = 0


@dataclass
class SynthLanguageSpec:
    language_id: str
    phones: np.ndarray
    formants: np.ndarray
    transitions: np.ndarray
    mean_duration_frames: float
    noise_levels: np.ndarray
    tone_amplitudes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.phones = np.asarray(self.phones, dtype=np.int64)
        self.formants = np.asarray(self.formants, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.noise_levels = np.asarray(self.noise_levels, dtype=np.float64)
        K = self.phones.size
        if self.tone_amplitudes is None:
            self.tone_amplitudes = np.ones(K)
        self.tone_amplitudes = np.asarray(self.tone_amplitudes, dtype=np.float64)
        if self.formants.shape != (K, 3):
            raise ValueError(f"{self.language_id}: formants must be ({K}, 3)")
        if self.transitions.shape != (K, K):
            raise ValueError(f"{self.language_id}: transitions must be ({K}, {K})")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError(f"{self.language_id}: transition rows must sum to 1")
        if self.noise_levels.shape != (K,) or self.tone_amplitudes.shape != (K,):
            raise ValueError(f"{self.language_id}: per-phone vectors must have length {K}")

    def check_nyquist(self, sample_rate: int, max_warp: float = 1.0) -> None:
        top = float(self.formants.max()) * max_warp
        if top >= sample_rate / 2:
            raise ValueError(
                f"{self.language_id}: formant {top:.1f} Hz above Nyquist {sample_rate / 2} Hz")


def render_phone(formants: Sequence[float], n: int, sample_rate: int, rng,
                 noise_level: float = 0.0, amplitude: float = 1.0,
                 warp: float = 1.0) -> np.ndarray:
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    x = np.zeros(n)
    if amplitude:
        for f, ph in zip(formants, phase):
            x += amplitude * np.sin(2.0 * np.pi * f * warp * t + ph)
    if noise_level:
        x += noise_level * rng.standard_normal(n)
    return x


def synthesize_utterance(spec: SynthLanguageSpec, duration_s: float, sample_rate: int,
                         rng, speaker_warp: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Samples in [-0.5, 0.5] and the global phone id of every sample."""
    spec.check_nyquist(sample_rate, speaker_warp)
    n_total = int(round(duration_s * sample_rate))
    frame = int(round(FRAME_SHIFT_S * sample_rate))
    samples = np.zeros(n_total)
    phone_of = np.zeros(n_total, dtype=np.int64)
    K = spec.phones.size
    state = int(rng.integers(K))
    pos = 0
    while pos < n_total:
        dur = max(3, int(rng.poisson(spec.mean_duration_frames)))
        n = min(dur * frame, n_total - pos)
        samples[pos:pos + n] = render_phone(
            spec.formants[state], n, sample_rate, rng, spec.noise_levels[state],
            spec.tone_amplitudes[state], speaker_warp)
        phone_of[pos:pos + n] = spec.phones[state]
        pos += n
        state = int(rng.choice(K, p=spec.transitions[state]))
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples *= 0.5 / peak
    return samples, phone_of


def frame_labels(phone_of: np.ndarray, sample_rate: int,
                 frame_len_s: float = LABEL_FRAME_S) -> np.ndarray:
    """Phone at the centre of each analysis frame (10 ms shift)."""
    frame_len = int(round(frame_len_s * sample_rate))
    shift = int(round(FRAME_SHIFT_S * sample_rate))
    if phone_of.size < frame_len:
        return np.zeros(0, dtype=np.int64)
    T = (phone_of.size - frame_len) // shift + 1
    return phone_of[np.arange(T) * shift + frame_len // 2]


def default_language_specs(num_languages: int = 5, inventory: int = 64,
                           phones_per_language: int = 40, formant_jitter: float = 0.03,
                           mean_duration_frames: float = 8.0,
                           noise_range: Tuple[float, float] = (0.5, 1.2),
                           silence_prob: float = 0.05, seed: int = 0) -> List[SynthLanguageSpec]:
    """Random languages over a shared phone inventory.

    Phone 0 is silence.  Each language picks ``phones_per_language`` other
    phones, scales their prototype formants by its own factors
    ``1 + N(0, formant_jitter)`` and draws sparse Dirichlet transitions.
    """
    rng = np.random.default_rng(seed)
    proto = np.column_stack([rng.uniform(300, 900, inventory),
                             rng.uniform(900, 2300, inventory),
                             rng.uniform(2400, 3300, inventory)])
    specs = []
    for li in range(num_languages):
        chosen = np.sort(rng.choice(np.arange(1, inventory), size=phones_per_language,
                                    replace=False))
        phones = np.concatenate([[SILENCE], chosen])
        K = phones.size
        formants = proto[phones] * (1.0 + formant_jitter * rng.standard_normal((K, 3)))
        trans = rng.dirichlet(np.full(K, 0.3), size=K)
        np.fill_diagonal(trans, 0.0)
        trans[:, 0] = 0.0
        trans /= trans.sum(axis=1, keepdims=True)
        trans = (1.0 - silence_prob) * trans
        trans[:, 0] += silence_prob
        trans[0, 0] = 0.0
        trans[0] /= trans[0].sum()
        noise = rng.uniform(*noise_range, size=K)
        amps = np.ones(K)
        amps[0] = 0.0
        specs.append(SynthLanguageSpec(f"lang{li}", phones, formants, trans,
                                       mean_duration_frames, noise, amps))
    return specs


def synthesize_corpus(specs: Sequence[SynthLanguageSpec], utts_per_language: int,
                      durations: Sequence[float], out_dir, sample_rate: int = 8000,
                      seed: int = 0, prefix: str = "utt",
                      warp_range: Tuple[float, float] = (1.0, 1.0),
                      index_offset: int = 0) -> List[ManifestRow]:
    """Write WAV audio and per-frame label files; return manifest rows.

    Utterance ``i`` of language ``l`` gets duration ``durations[i % len]``
    and its own generator seeded from ``seed`` and the global utterance
    index, so corpora are reproducible and generation order-independent.
    """
    if not specs:
        raise ValueError("no languages given")
    for d in durations:
        if d not in (3, 10, 30):
            raise ValueError(f"duration {d} not in {{3, 10, 30}} s")
    for spec in specs:
        spec.check_nyquist(sample_rate, max(warp_range))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    index = index_offset
    for spec in specs:
        for i in range(utts_per_language):
            rng = np.random.default_rng([seed, index])
            duration = float(durations[i % len(durations)])
            warp = float(rng.uniform(*warp_range)) if warp_range[0] != warp_range[1] \
                else float(warp_range[0])
            samples, phone_of = synthesize_utterance(spec, duration, sample_rate, rng, warp)
            utt_id = f"{prefix}{index:06d}_{spec.language_id}"
            write_wav(out_dir / f"{utt_id}.wav", samples, sample_rate)
            write_labels(out_dir / f"{utt_id}.lab", frame_labels(phone_of, sample_rate))
            rows.append(ManifestRow(utt_id, f"{out_dir.name}/{utt_id}.wav",
                                    spec.language_id, duration))
            index += 1
    return rows


def write_corpus_manifest(path, rows: Sequence[ManifestRow]) -> None:
    write_manifest(path, rows)
