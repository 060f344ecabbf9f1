"""Standard MIDI File ingestion (format 0 and 1).

Hand-rolled reader covering the subset needed here: note-on/note-off
resolution, running status, tempo map conversion to seconds. Sequences
are merged across tracks into a single onset-sorted Performance.
"""

import warnings
from typing import List, Tuple

from .events import PITCH_MIN, PITCH_MAX, NoteEvent, Performance

DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 BPM)


class SMFParseError(ValueError):
    """Malformed MIDI data; carries the absolute byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SMFParseError(f"unexpected end of data reading {n} bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.read(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.read(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.read(4), "big")

    def varlen(self) -> int:
        """Variable-length quantity, at most 4 bytes."""
        value = 0
        for i in range(4):
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise SMFParseError("variable-length quantity exceeds 4 bytes", self.pos)


def _parse_track(reader: _Reader, track_index: int):
    """Return (notes_in_ticks, tempo_events, end_tick) for one MTrk chunk."""
    notes: List[Tuple[int, int, int, int]] = []  # (pitch, on_tick, off_tick, vel)
    tempos: List[Tuple[int, int]] = []  # (tick, usec_per_quarter)
    open_notes = {}  # (channel, pitch) -> list of (tick, velocity), FIFO
    tick = 0
    status = None
    end_of_track = False

    while not end_of_track:
        tick += reader.varlen()
        event_pos = reader.pos
        b = reader.u8()
        if b < 0x80:
            # running status: data byte of a repeated channel message
            if status is None:
                raise SMFParseError("data byte with no running status", event_pos)
            reader.pos -= 1
            b = status
        if b == 0xFF:
            meta_type = reader.u8()
            length = reader.varlen()
            payload = reader.read(length)
            status = None  # meta events cancel running status
            if meta_type == 0x2F:
                end_of_track = True
            elif meta_type == 0x51:
                if length != 3:
                    raise SMFParseError("tempo event with bad length", event_pos)
                tempos.append((tick, int.from_bytes(payload, "big")))
        elif b in (0xF0, 0xF7):
            length = reader.varlen()
            reader.read(length)
            status = None
        elif b >= 0xF0:
            raise SMFParseError(f"unsupported system message 0x{b:02x}", event_pos)
        else:
            status = b
            kind = b & 0xF0
            channel = b & 0x0F
            if kind in (0xC0, 0xD0):
                reader.u8()
                continue
            d1 = reader.u8()
            d2 = reader.u8()
            if kind == 0x90 and d2 > 0:
                open_notes.setdefault((channel, d1), []).append((tick, d2))
            elif kind == 0x80 or (kind == 0x90 and d2 == 0):
                pending = open_notes.get((channel, d1))
                if pending:
                    on_tick, vel = pending.pop(0)
                    notes.append((d1, on_tick, tick, vel))
                # note-off without a matching note-on is silently ignored

    for (channel, pitch), pending in sorted(open_notes.items()):
        for on_tick, vel in pending:
            warnings.warn(
                f"track {track_index}: note-on pitch {pitch} (channel "
                f"{channel}) never closed; closing at track end"
            )
            notes.append((pitch, on_tick, tick, vel))
    return notes, tempos, tick


def _tick_to_seconds_map(tempos: List[Tuple[int, int]], division: int):
    """Build tick -> seconds conversion from a merged tempo event list."""
    changes = sorted(tempos, key=lambda x: x[0])  # stable: same-tick file order kept
    segments = [(0, 0.0, DEFAULT_TEMPO)]  # (start_tick, start_seconds, usec_per_qn)
    seconds = 0.0
    last_tick = 0
    tempo = DEFAULT_TEMPO
    for tick, new_tempo in changes:
        seconds += (tick - last_tick) * tempo / (division * 1e6)
        last_tick = tick
        tempo = new_tempo
        segments.append((tick, seconds, tempo))

    def convert(tick: int) -> float:
        start_tick, start_seconds, usec = segments[0]
        for seg in segments:  # tempo maps are tiny, a scan is fine
            if seg[0] <= tick:
                start_tick, start_seconds, usec = seg
            else:
                break
        return start_seconds + (tick - start_tick) * usec / (division * 1e6)

    return convert


def parse_smf(data: bytes, source_id: str = "smf") -> List[Performance]:
    """Parse a format 0/1 Standard MIDI File into Performances.

    Tracks are merged, so the result holds a single Performance with
    note times in seconds. Note-on with velocity 0 counts as note-off;
    a note-on left open when its track ends is closed there with a
    warning. Notes outside the 88-key piano range and notes with zero
    duration are dropped with a warning.

    Raises:
        SMFParseError: on malformed chunks, with the byte offset.
    """
    reader = _Reader(data)
    if reader.read(4) != b"MThd":
        raise SMFParseError("missing MThd header", 0)
    header_len = reader.u32()
    if header_len < 6:
        raise SMFParseError("MThd chunk too short", 4)
    smf_format = reader.u16()
    n_tracks = reader.u16()
    division = reader.u16()
    reader.read(header_len - 6)
    if smf_format not in (0, 1):
        raise SMFParseError(f"unsupported SMF format {smf_format}", 8)
    if division & 0x8000:
        raise SMFParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise SMFParseError("zero ticks-per-quarter division", 12)

    all_notes = []
    all_tempos = []
    for t in range(n_tracks):
        chunk_pos = reader.pos
        chunk_id = reader.read(4)
        chunk_len = reader.u32()
        if chunk_id != b"MTrk":
            # unknown chunk types are skipped per the SMF specification
            reader.read(chunk_len)
            continue
        track_reader = _Reader(reader.data, reader.pos)
        track_end = reader.pos + chunk_len
        notes, tempos, _ = _parse_track(track_reader, t)
        if track_reader.pos > track_end:
            raise SMFParseError(f"track {t} events overran chunk length", chunk_pos)
        reader.pos = track_end
        all_notes.extend(notes)
        all_tempos.extend(tempos)

    convert = _tick_to_seconds_map(all_tempos, division)
    events = []
    for pitch, on_tick, off_tick, vel in all_notes:
        if not PITCH_MIN <= pitch <= PITCH_MAX:
            warnings.warn(f"dropping pitch {pitch} outside the piano range")
            continue
        onset, offset = convert(on_tick), convert(off_tick)
        if offset <= onset:
            warnings.warn(f"dropping zero-duration note at tick {on_tick}")
            continue
        events.append(NoteEvent(pitch, onset, offset, vel))
    return [Performance(notes=events, source_id=source_id)]
