"""Turn-taking event records shared by the generator and the analyzer."""

from __future__ import annotations

from dataclasses import dataclass, field

EVENT_KINDS = ("ipu", "pause", "gap", "overlap", "turn")
REPORT_KINDS = ("ipu", "pause", "gap", "overlap")


@dataclass(frozen=True, order=True)
class Event:
    """A half-open frame interval ``[start, end)``.

    ``channel`` is ``"a"``/``"b"`` for IPUs, turns and pauses (the pausing
    speaker), and ``None`` for gaps and overlaps, which belong to the pair.
    """

    kind: str
    start: int
    end: int
    channel: str | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad interval [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def to_record(self) -> dict:
        return {"kind": self.kind, "channel": self.channel, "start": self.start, "end": self.end}

    @classmethod
    def from_record(cls, rec: dict) -> "Event":
        return cls(rec["kind"], int(rec["start"]), int(rec["end"]), rec.get("channel"))


@dataclass
class EventTrace:
    n_frames: int
    frame_rate_hz: float
    events: list[Event] = field(default_factory=list)

    def canonical(self) -> list[Event]:
        return sorted(self.events, key=lambda e: (e.kind, e.channel or "", e.start, e.end))

    def of(self, kind: str, channel: str | None = None) -> list[Event]:
        return [e for e in self.canonical() if e.kind == kind and (channel is None or e.channel == channel)]

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def frames(self, kind: str) -> int:
        return sum(e.length for e in self.events if e.kind == kind)

    @property
    def minutes(self) -> float:
        return self.n_frames / self.frame_rate_hz / 60.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventTrace):
            return NotImplemented
        return (self.n_frames == other.n_frames and self.frame_rate_hz == other.frame_rate_hz
                and self.canonical() == other.canonical())

    def to_record(self) -> dict:
        return {"n_frames": self.n_frames, "frame_rate_hz": self.frame_rate_hz,
                "events": [e.to_record() for e in self.canonical()]}

    @classmethod
    def from_record(cls, rec: dict) -> "EventTrace":
        return cls(int(rec["n_frames"]), float(rec["frame_rate_hz"]),
                   [Event.from_record(e) for e in rec["events"]])


def group_turns(ipus: list[Event]) -> list[Event]:
    """Merge each speaker's consecutive IPUs into turns.

    Consecutive IPUs of one speaker stay in the same turn unless some IPU of
    the other speaker outlasts the earlier one and starts before the later one
    (the other speaker held the floor in between).  Backchannels lying wholly
    inside an IPU therefore do not split a turn.
    """
    turns = []
    for ch in ("a", "b"):
        own = sorted((e for e in ipus if e.channel == ch), key=lambda e: e.start)
        others = [e for e in ipus if e.channel != ch]
        cur = None
        prev_end = 0
        for ipu in own:
            if cur is not None and not any(o.end > prev_end and o.start < ipu.start for o in others):
                cur = Event("turn", cur.start, ipu.end, ch)
            else:
                if cur is not None:
                    turns.append(cur)
                cur = Event("turn", ipu.start, ipu.end, ch)
            prev_end = ipu.end
        if cur is not None:
            turns.append(cur)
    return turns
