"""Score-informed NMF note separation and per-note MFCC features.

The magnitude spectrogram of a recording is factorized as S ~ W H with
one template column per piano key. W starts from a calibration render
covering all 88 keys, H starts from the aligned pianoroll, and both are
refined by Euclidean multiplicative updates. Each note's region of W
and H is then expanded into an F x 30 spectrogram patch and reduced to
a 13 x 30 MFCC matrix.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from .events import N_KEYS, PITCH_MAX, PITCH_MIN, NoteEvent, Performance
from .synth import SAMPLE_RATE

WINDOW = 2048
HOP = 512
N_MELS = 40
N_MFCC = 13
N_FRAMES = 30
MEL_FMIN = 30.0
LOG_FLOOR = 1e-10
NMF_DELTA = 1e-9
ACTIVATION_EPS = 1e-4
ACTIVATION_TAIL = 1.0  # seconds a key keeps ringing past note-off
TEMPLATE_FLOOR = 1e-6


@dataclass
class Spectrogram:
    """Non-negative magnitude STFT with its analysis parameters."""

    magnitudes: np.ndarray
    sr: int = SAMPLE_RATE
    hop: int = HOP
    window: int = WINDOW

    def __post_init__(self):
        if self.magnitudes.ndim != 2:
            raise ValueError("magnitudes must be 2-D")
        if self.magnitudes.shape[0] != self.window // 2 + 1:
            raise ValueError("row count must equal window/2 + 1")
        if np.any(self.magnitudes < 0):
            raise ValueError("magnitudes must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass
class NoteFeatures:
    """Model input for one note: 13 MFCC rows by 30 frames."""

    mfcc: np.ndarray
    note_id: str
    preset_id: int
    velocity_target: int

    def __post_init__(self):
        if self.mfcc.shape != (N_MFCC, N_FRAMES):
            raise ValueError(f"mfcc must be {N_MFCC}x{N_FRAMES}, "
                             f"got {self.mfcc.shape}")
        if not 0 <= self.preset_id <= 5:
            raise ValueError("preset_id must be 0..5")
        if not 1 <= self.velocity_target <= 127:
            raise ValueError("velocity_target must be 1..127")


def stft(wave: np.ndarray, sr: int = SAMPLE_RATE, window: int = WINDOW,
         hop: int = HOP) -> Spectrogram:
    """Hann-windowed magnitude STFT; frame t covers samples
    [t*hop, t*hop + window)."""
    wave = np.asarray(wave, dtype=float)
    if len(wave) < window:
        raise ValueError(f"waveform shorter than one window "
                         f"({len(wave)} < {window})")
    win = get_window("hann", window, fftbins=True)
    n_frames = 1 + (len(wave) - window) // hop
    frames = np.lib.stride_tricks.sliding_window_view(wave, window)[::hop][:n_frames]
    mags = np.abs(np.fft.rfft(frames * win, axis=1)).T
    return Spectrogram(magnitudes=mags, sr=sr, hop=hop, window=window)


def build_template(calibration_audio: np.ndarray, calibration_perf: Performance,
                   sr: int = SAMPLE_RATE, window: int = WINDOW,
                   hop: int = HOP) -> np.ndarray:
    """Average each key's in-note spectra from the calibration render.

    Column r is the mean magnitude spectrum over all frames falling
    inside notes of key r, floored at 1e-6 and scaled to unit L2 norm.
    Works note by note, so the full calibration spectrogram is never
    materialized.
    """
    covered = {n.pitch for n in calibration_perf.notes}
    missing = sorted(set(range(PITCH_MIN, PITCH_MAX + 1)) - covered)
    if missing:
        raise ValueError(f"calibration misses pitches {missing}")

    n_bins = window // 2 + 1
    sums = np.zeros((n_bins, N_KEYS))
    counts = np.zeros(N_KEYS)
    for note in calibration_perf.notes:
        start = int(round(note.onset * sr))
        end = int(round(note.offset * sr))
        segment = calibration_audio[start:min(end, len(calibration_audio))]
        if len(segment) < window:
            continue
        spec = stft(segment, sr, window, hop)
        sums[:, note.key_index] += spec.magnitudes.sum(axis=1)
        counts[note.key_index] += spec.n_frames
    short = sorted(PITCH_MIN + k for k in np.flatnonzero(counts == 0))
    if short:
        raise ValueError(f"calibration notes too short to analyze "
                         f"pitches {short}")
    template = sums / counts + TEMPLATE_FLOOR
    return template / np.linalg.norm(template, axis=0)


def init_activations(perf: Performance, n_frames: int, sr: int = SAMPLE_RATE,
                     hop: int = HOP) -> np.ndarray:
    """Pianoroll-based H: ones from onset to offset plus a 1 s decay
    tail, a small epsilon elsewhere."""
    h = np.full((N_KEYS, n_frames), ACTIVATION_EPS)
    for note in perf.notes:
        start = int(np.floor(note.onset * sr / hop))
        end = int(np.ceil((note.offset + ACTIVATION_TAIL) * sr / hop)) + 1
        start = max(0, min(start, n_frames))
        end = max(0, min(end, n_frames))
        h[note.key_index, start:end] = 1.0
    return h


def reconstruction_error(s: np.ndarray, w: np.ndarray, h: np.ndarray) -> float:
    """Frobenius norm of S - W H."""
    return float(np.linalg.norm(s - w @ h))


def nmf_update(s: np.ndarray, w: np.ndarray, h: np.ndarray,
               iterations: int = 100, delta: float = NMF_DELTA
               ) -> Tuple[np.ndarray, np.ndarray]:
    """Multiplicative updates for the Euclidean NMF objective.

    Per iteration H is updated first, then W with the fresh H; small
    delta terms guard the denominators. Non-negativity is preserved
    and the reconstruction error is non-increasing.
    """
    s = np.asarray(s, dtype=float)
    w = np.array(w, dtype=float)
    h = np.array(h, dtype=float)
    if w.shape[0] != s.shape[0] or h.shape[1] != s.shape[1] \
            or w.shape[1] != h.shape[0]:
        raise ValueError(f"shape mismatch: S {s.shape}, W {w.shape}, H {h.shape}")
    if np.any(s < 0) or np.any(w < 0) or np.any(h < 0):
        raise ValueError("NMF inputs must be non-negative")
    for _ in range(iterations):
        h *= (w.T @ s) / ((w.T @ w) @ h + delta)
        w *= (s @ h.T) / (w @ (h @ h.T) + delta)
    return w, h


def extract_note_spectrogram(w: np.ndarray, h: np.ndarray, note: NoteEvent,
                             sr: int = SAMPLE_RATE, hop: int = HOP,
                             frames: int = N_FRAMES) -> np.ndarray:
    """Outer product of a note's template column with its first
    activation frames, zero-padded to the requested width."""
    onset_frame = int(np.floor(note.onset * sr / hop))
    if onset_frame >= h.shape[1]:
        raise ValueError(f"note onset frame {onset_frame} beyond "
                         f"spectrogram length {h.shape[1]}")
    segment = h[note.key_index, onset_frame:onset_frame + frames]
    padded = np.zeros(frames)
    padded[:len(segment)] = segment
    return np.outer(w[:, note.key_index], padded)


def mel_filterbank(sr: int = SAMPLE_RATE, window: int = WINDOW,
                   n_mels: int = N_MELS, fmin: float = MEL_FMIN) -> np.ndarray:
    """Triangular mel filterbank matrix (n_mels x bins), peak 1."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = window // 2 + 1
    edges = from_mel(np.linspace(to_mel(fmin), to_mel(sr / 2), n_mels + 2))
    freqs = np.linspace(0.0, sr / 2, n_bins)
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def mfcc13(note_spec: np.ndarray, sr: int = SAMPLE_RATE,
           window: int = WINDOW) -> np.ndarray:
    """First 13 MFCCs of each column of an F x T magnitude patch.

    Mel filterbank on magnitudes, natural log with a 1e-10 floor, then
    an orthonormal DCT-II along the band axis.
    """
    note_spec = np.asarray(note_spec, dtype=float)
    if np.any(note_spec < 0):
        raise ValueError("note spectrogram must be non-negative")
    bank = mel_filterbank(sr, window)
    logmel = np.log(bank @ note_spec + LOG_FLOOR)
    return dct(logmel, type=2, norm="ortho", axis=0)[:N_MFCC]
