"""Note events and performances, the symbolic ground truth."""

from dataclasses import dataclass, field
from typing import List

PITCH_MIN = 21
PITCH_MAX = 108
N_KEYS = PITCH_MAX - PITCH_MIN + 1
VELOCITY_MIN = 1
VELOCITY_MAX = 127


@dataclass(frozen=True)
class NoteEvent:
    """One piano note: pitch in the 88-key range, onset/offset in seconds."""

    pitch: int
    onset: float
    offset: float
    velocity: int

    def __post_init__(self):
        if not PITCH_MIN <= self.pitch <= PITCH_MAX:
            raise ValueError(f"pitch {self.pitch} outside piano range "
                             f"{PITCH_MIN}..{PITCH_MAX}")
        if not VELOCITY_MIN <= self.velocity <= VELOCITY_MAX:
            raise ValueError(f"velocity {self.velocity} outside "
                             f"{VELOCITY_MIN}..{VELOCITY_MAX}")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must exceed onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    @property
    def key_index(self) -> int:
        """Row index of this pitch in 88-key matrices (A0 = 0)."""
        return self.pitch - PITCH_MIN


@dataclass
class Performance:
    """An onset-sorted sequence of notes with a stable identifier."""

    notes: List[NoteEvent]
    source_id: str = ""

    def __post_init__(self):
        # keep notes onset-sorted; remaining fields break ties deterministically
        self.notes = sorted(
            self.notes, key=lambda n: (n.onset, n.pitch, n.offset, n.velocity)
        )

    def __len__(self) -> int:
        return len(self.notes)

    @property
    def duration(self) -> float:
        """Time of the last note offset (0 for an empty performance)."""
        if not self.notes:
            return 0.0
        return max(n.offset for n in self.notes)

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "notes": [
                {"pitch": n.pitch, "onset": n.onset,
                 "offset": n.offset, "velocity": n.velocity}
                for n in self.notes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Performance":
        notes = [NoteEvent(n["pitch"], n["onset"], n["offset"], n["velocity"])
                 for n in d["notes"]]
        return cls(notes=notes, source_id=d.get("source_id", ""))
