"""Deterministic additive piano synthesis under six acoustic presets.

Each preset pairs a velocity-to-gain map, a reverb, and one of two
instrument models. Rendering is a pure function of its inputs, so the
same performance and preset always produce a bit-identical waveform.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

from .events import PITCH_MAX, PITCH_MIN, Performance, NoteEvent

SAMPLE_RATE = 22050
PEAK_LEVEL = 0.891  # -1 dBFS
ATTACK_TIME = 0.005
RELEASE_TIME = 0.010
SUSTAIN_SPAN = 1.1  # decay multiplier is SUSTAIN_SPAN - gain, in (0.1, 1.1)


class VelocityMap(str, Enum):
    LINEAR = "linear"
    LOGARITHMIC = "logarithmic"


class ReverbKind(str, Enum):
    STUDIO = "studio"
    CATHEDRAL = "cathedral"


class InstrumentKind(str, Enum):
    INSTRUMENT_A = "instrument_a"
    INSTRUMENT_B = "instrument_b"


@dataclass(frozen=True)
class InstrumentProfile:
    """Additive-synthesis parameters for one virtual piano.

    partial_rolloff is in dB per partial step (negative);
    brightness_sensitivity couples gain to spectral tilt so louder notes
    keep more high-partial energy.
    """

    name: str
    inharmonicity: float
    partial_count: int
    partial_rolloff: float
    decay_rate_base: float
    brightness_sensitivity: float

    def __post_init__(self):
        if self.inharmonicity < 0:
            raise ValueError("inharmonicity must be non-negative")
        if self.partial_count < 8:
            raise ValueError("need at least 8 partials")


@dataclass(frozen=True)
class AcousticPreset:
    """One of the six synthetic acoustic contexts."""

    id: int
    velocity_map: VelocityMap
    reverb: ReverbKind
    instrument: InstrumentKind


@dataclass(frozen=True)
class ImpulseResponse:
    samples: np.ndarray
    rt60: float


INSTRUMENTS = {
    InstrumentKind.INSTRUMENT_A: InstrumentProfile(
        name="bright grand",
        inharmonicity=1.2e-4,
        partial_count=28,
        partial_rolloff=-4.0,
        decay_rate_base=4.5,
        brightness_sensitivity=3.2,
    ),
    InstrumentKind.INSTRUMENT_B: InstrumentProfile(
        name="mellow upright",
        inharmonicity=4.0e-4,
        partial_count=20,
        partial_rolloff=-6.5,
        decay_rate_base=6.0,
        brightness_sensitivity=5.2,
    ),
}

# a seventh instrument reserved for the key-template calibration render
CALIBRATION_PROFILE = InstrumentProfile(
    name="calibration",
    inharmonicity=2.5e-4,
    partial_count=24,
    partial_rolloff=-5.0,
    decay_rate_base=5.0,
    brightness_sensitivity=4.0,
)

PRESETS: Tuple[AcousticPreset, ...] = (
    AcousticPreset(0, VelocityMap.LINEAR, ReverbKind.STUDIO,
                   InstrumentKind.INSTRUMENT_A),
    AcousticPreset(1, VelocityMap.LOGARITHMIC, ReverbKind.STUDIO,
                   InstrumentKind.INSTRUMENT_A),
    AcousticPreset(2, VelocityMap.LOGARITHMIC, ReverbKind.CATHEDRAL,
                   InstrumentKind.INSTRUMENT_A),
    AcousticPreset(3, VelocityMap.LINEAR, ReverbKind.STUDIO,
                   InstrumentKind.INSTRUMENT_B),
    AcousticPreset(4, VelocityMap.LOGARITHMIC, ReverbKind.STUDIO,
                   InstrumentKind.INSTRUMENT_B),
    AcousticPreset(5, VelocityMap.LOGARITHMIC, ReverbKind.CATHEDRAL,
                   InstrumentKind.INSTRUMENT_B),
)

RT60 = {ReverbKind.STUDIO: 0.4, ReverbKind.CATHEDRAL: 2.5}
_REVERB_SEED = {ReverbKind.STUDIO: 101, ReverbKind.CATHEDRAL: 202}
_REVERB_WET = {ReverbKind.STUDIO: 0.25, ReverbKind.CATHEDRAL: 0.2}


def velocity_to_gain(velocity: int, vmap: VelocityMap) -> float:
    """Map a MIDI velocity 1..127 to an amplitude gain in (0, 1].

    Both maps are strictly increasing and reach 1.0 at velocity 127;
    the logarithmic one rises faster at low velocities.
    """
    if not 1 <= velocity <= 127:
        raise ValueError(f"velocity {velocity} outside 1..127")
    x = velocity / 127.0
    if vmap == VelocityMap.LINEAR:
        return x
    return math.log2(1.0 + x * 15.0) / 4.0


def midi_to_freq(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def impulse_response(kind: ReverbKind, sr: int = SAMPLE_RATE) -> ImpulseResponse:
    """Exponentially decaying seeded noise with a unit direct path."""
    rt60 = RT60[kind]
    n = int(math.ceil(rt60 * sr)) + 1
    rng = np.random.default_rng(_REVERB_SEED[kind])
    t = np.arange(n) / sr
    tail = rng.standard_normal(n) * np.exp(-t * math.log(1000.0) / rt60)
    ir = _REVERB_WET[kind] * tail
    ir[0] = 1.0
    ir /= np.linalg.norm(ir)
    return ImpulseResponse(samples=ir, rt60=rt60)


def render_note(pitch: int, velocity: int, duration: float,
                profile: InstrumentProfile, vmap: VelocityMap,
                sr: int = SAMPLE_RATE) -> np.ndarray:
    """Render one note as a sum of decaying inharmonic partials.

    Partial n sits at n*f0*sqrt(1 + B*n^2); its amplitude combines the
    velocity gain with a gain-dependent spectral tilt so that louder
    notes are brighter. Attack and release ramps avoid clicks.
    """
    if not PITCH_MIN <= pitch <= PITCH_MAX:
        raise ValueError(f"pitch {pitch} outside piano range "
                         f"{PITCH_MIN}..{PITCH_MAX}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    gain = velocity_to_gain(velocity, vmap)
    f0 = midi_to_freq(pitch)
    n_samples = int(round(duration * sr)) + int(round(RELEASE_TIME * sr))
    t = np.arange(n_samples) / sr
    out = np.zeros(n_samples)

    # effective rolloff stays negative: brightness_sensitivity < |rolloff|
    tilt_db = profile.partial_rolloff + profile.brightness_sensitivity * gain
    # harder strikes put more energy into the string and ring longer, so
    # the decay rate shrinks as the raw strike velocity rises; the preset
    # gain map only shapes amplitude and tilt, not the string physics
    decay = profile.decay_rate_base * (SUSTAIN_SPAN - velocity / 127.0)
    b = profile.inharmonicity
    for n in range(1, profile.partial_count + 1):
        fn = n * f0 * math.sqrt(1.0 + b * n * n)
        if fn >= sr / 2:
            break
        amp = gain * 10.0 ** (tilt_db * (n - 1) / 20.0)
        rate = decay * (1.0 + 0.05 * (n - 1))
        out += amp * np.exp(-rate * t) * np.sin(2.0 * math.pi * fn * t)

    attack = min(int(round(ATTACK_TIME * sr)), n_samples)
    release = min(int(round(RELEASE_TIME * sr)), n_samples)
    env = np.ones(n_samples)
    env[:attack] = np.arange(attack) / max(attack, 1)
    env[n_samples - release:] = np.minimum(
        env[n_samples - release:], np.linspace(1.0, 0.0, release)
    )
    return out * env


def render_performance(perf: Performance, preset: AcousticPreset,
                       sr: int = SAMPLE_RATE, normalize: bool = True) -> np.ndarray:
    """Mix per-note renders at their onsets and convolve with the reverb.

    The output peaks at 0.891 (-1 dBFS) unless normalize is False,
    which keeps the chain linear for superposition checks.
    """
    if not perf.notes:
        return np.zeros(0)
    onsets = [n.onset for n in perf.notes]
    if any(o < 0 for o in onsets):
        raise ValueError("negative note onset")
    if any(onsets[i] > onsets[i + 1] for i in range(len(onsets) - 1)):
        raise ValueError("notes must be sorted by onset")

    profile = INSTRUMENTS[preset.instrument]
    tail = int(round(RELEASE_TIME * sr))
    total = int(round(perf.duration * sr)) + tail
    dry = np.zeros(total)
    for note in perf.notes:
        wave = render_note(note.pitch, note.velocity, note.duration,
                           profile, preset.velocity_map, sr)
        start = int(round(note.onset * sr))
        end = min(start + len(wave), total)
        dry[start:end] += wave[:end - start]

    ir = impulse_response(preset.reverb, sr)
    wet = fftconvolve(dry, ir.samples)
    if normalize:
        peak = np.max(np.abs(wet))
        if peak > 0:
            wet = wet * (PEAK_LEVEL / peak)
    return wet


def render_calibration_sequence(sr: int = SAMPLE_RATE) -> Tuple[Performance, np.ndarray]:
    """All 88 keys at 4 velocities and 2 durations, on the calibration
    instrument with no reverb.

    Notes are isolated by at least 1.5 s of silence so that per-key
    spectra can be measured cleanly.
    """
    notes = []
    cursor = 0.0
    for pitch in range(PITCH_MIN, PITCH_MAX + 1):
        for velocity in (16, 48, 80, 112):
            for duration in (0.2, 1.0):
                notes.append(NoteEvent(pitch, cursor, cursor + duration, velocity))
                cursor += duration + 1.5
    perf = Performance(notes=notes, source_id="calibration")

    tail = int(round(RELEASE_TIME * sr))
    total = int(round(perf.duration * sr)) + tail
    out = np.zeros(total)
    for note in perf.notes:
        wave = render_note(note.pitch, note.velocity, note.duration,
                           CALIBRATION_PROFILE, VelocityMap.LINEAR, sr)
        start = int(round(note.onset * sr))
        end = min(start + len(wave), total)
        out[start:end] += wave[:end - start]
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out * (PEAK_LEVEL / peak)
    return perf, out


def write_wav(path, wave: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    """Write a mono 32-bit float RIFF WAV."""
    wavfile.write(path, sr, wave.astype(np.float32))


def read_wav(path) -> Tuple[int, np.ndarray]:
    sr, data = wavfile.read(path)
    return sr, np.asarray(data, dtype=np.float64)


def preset_by_id(preset_id: int) -> AcousticPreset:
    if not 0 <= preset_id < len(PRESETS):
        raise ValueError(f"no preset with id {preset_id}")
    return PRESETS[preset_id]
