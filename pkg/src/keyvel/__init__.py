"""Acoustics-specific piano velocity estimation at desk scale.

The package renders synthetic piano performances under six acoustic
presets, separates individual notes with score-informed NMF, extracts
per-note MFCC features, and trains a family of residual CNNs under four
encoder/performer strategies, ending in a nonparametric statistical
comparison of the strategies.
"""

__version__ = "0.1.0"

from .events import NoteEvent, Performance
from .synth import AcousticPreset, PRESETS
from .models import ModelConfig, enumerate_grid
from .training import StrategyKind, TrainPlan
from .evaluation import TrialResult

__all__ = [
    "NoteEvent",
    "Performance",
    "AcousticPreset",
    "PRESETS",
    "ModelConfig",
    "enumerate_grid",
    "StrategyKind",
    "TrainPlan",
    "TrialResult",
]
