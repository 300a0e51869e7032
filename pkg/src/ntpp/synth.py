"""Synthetic two-speaker dialogue corpora with exact ground-truth events.

Activity comes from a semi-Markov floor process.  The floor holder speaks an
IPU whose length is a shifted geometric draw; the IPU then ends in one of
four ways, drawn in this order:

* interruption (``interruption_rate``): the listener starts somewhere inside
  the IPU and the holder stops at most ``interruption_window`` frames later;
* overlapping hand-over (``overlap_rate``): the listener starts
  ``~mean_overlap`` frames before the holder's planned end;
* pause (``pause_rate``): both fall silent and the holder resumes;
* gap: both fall silent and the listener takes the floor.

Independently, with ``backchannel_rate`` the listener drops a short
(``backchannel_frames``) IPU fully inside the holder's solo stretch.

Every interval the process emits is at least ``min_event_frames`` long and
every single-channel silence between two IPUs of one speaker is at least that
long, so with ``min_event_frames`` equal to the analyzer's silence threshold
the analyzer recovers the ground truth exactly.  Voiced frames carry content
tokens from per-speaker order-k Markov chains; silent frames carry SIL.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codec import N_SPECIALS, SIL, DualTokenStream
from .errors import ProfileError
from .events import Event, EventTrace

CH = ("a", "b")


@dataclass(frozen=True)
class DialogueProfile:
    frame_rate_hz: float = 40.0
    mean_ipu: float = 48.0
    mean_pause: float = 14.0
    mean_gap: float = 14.0
    mean_overlap: float = 12.0
    overlap_rate: float = 0.2
    interruption_rate: float = 0.1
    backchannel_rate: float = 0.15
    pause_rate: float = 0.4
    interruption_window: int = 16
    backchannel_frames: int = 8
    min_event_frames: int = 8
    single_speaker: bool = False
    vocab: int = 32
    markov_order: int = 1
    concentration: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("overlap_rate", "interruption_rate", "backchannel_rate", "pause_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ProfileError(f"{name} must lie in [0, 1], got {v}")
        if self.frame_rate_hz <= 0:
            raise ProfileError("frame_rate_hz must be positive")
        if self.min_event_frames < 1 or self.backchannel_frames < 1:
            raise ProfileError("event lengths must be at least one frame")
        for name in ("mean_ipu", "mean_pause", "mean_gap", "mean_overlap"):
            if getattr(self, name) < self.min_event_frames:
                raise ProfileError(f"{name} ({getattr(self, name)}) is below min_event_frames "
                                   f"({self.min_event_frames})")
        if self.interruption_window < self.min_event_frames:
            raise ProfileError("interruption_window must be at least min_event_frames")
        if self.vocab < 1 or self.markov_order < 1 or self.concentration <= 0:
            raise ProfileError("vocab, markov_order and concentration must be positive")
        if self.vocab ** self.markov_order > 1_000_000:
            raise ProfileError("vocab ** markov_order is too large for a dense transition table")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Corpus:
    streams: list[DualTokenStream]
    traces: list[EventTrace]
    stats: Counter = field(default_factory=Counter)


# --- content model ---------------------------------------------------------------

def transition_tables(profile: DialogueProfile) -> np.ndarray:
    """Per-speaker order-k transition tables, shape ``(2, V**k, V)``."""
    rng = np.random.default_rng([profile.seed, 7919])
    V, k = profile.vocab, profile.markov_order
    return rng.dirichlet(np.full(V, profile.concentration), size=(2, V**k))


def _fill_content(active: np.ndarray, tables: np.ndarray, profile: DialogueProfile,
                  rng: np.random.Generator) -> np.ndarray:
    V, k = profile.vocab, profile.markov_order
    n_states = V**k
    cdf = np.cumsum(tables, axis=-1)
    out = np.full(active.shape, SIL, dtype=np.int64)
    for c in (0, 1):
        state = int(rng.integers(0, n_states))
        frames = np.flatnonzero(active[c])
        draws = rng.random(frames.size)
        for f, u in zip(frames, draws):
            row = cdf[c, state]
            tok = min(int(np.searchsorted(row, u * row[-1], side="right")), V - 1)
            out[c, f] = N_SPECIALS + tok
            state = (state * V + tok) % n_states
    return out


# --- activity process ------------------------------------------------------------

class _Process:
    def __init__(self, profile: DialogueProfile, T: int, rng: np.random.Generator):
        self.p = profile
        self.T = T
        self.rng = rng
        self.events: list[Event] = []
        self.stats = Counter()
        self.active = np.zeros((2, T), dtype=bool)

    def length(self, mean: float) -> int:
        m = self.p.min_event_frames
        prob = 1.0 / (mean - m + 1.0)
        return m + int(self.rng.geometric(prob)) - 1

    def emit(self, kind: str, start: int, end: int, channel: int | None = None) -> None:
        end = min(end, self.T)
        if start >= end:
            return
        self.events.append(Event(kind, start, end, None if channel is None else CH[channel]))
        if kind == "ipu":
            self.active[channel, start:end] = True

    def emit_silence(self, kind: str, start: int, end: int, channel: int | None) -> None:
        # silences touching the end of the recording are edge silences
        if end < self.T:
            self.emit(kind, start, end, channel)

    def run(self) -> None:
        p, rng = self.p, self.rng
        m = p.min_event_frames
        holder = 0 if p.single_speaker or rng.random() < 0.5 else 1
        start = int(rng.integers(0, int(p.mean_gap) + 1))
        last_end = [-(10**9), -(10**9)]
        min_len = m
        turn_start, turn_end = start, start

        while start < self.T:
            other = 1 - holder
            L = max(self.length(p.mean_ipu), min_len)
            if p.single_speaker:
                kind = "pause"
            elif rng.random() < p.interruption_rate:
                kind = "interruption"
            elif rng.random() < p.overlap_rate:
                kind = "overlap"
            elif rng.random() < p.pause_rate:
                kind = "pause"
            else:
                kind = "gap"
            want_bc = not p.single_speaker and rng.random() < p.backchannel_rate
            self.stats["ipu_decisions"] += 1
            self.stats[kind] += 1
            self.stats["backchannel"] += int(want_bc)

            ov = 0
            if kind == "interruption":
                ov = int(rng.integers(m, p.interruption_window + 1))
            elif kind == "overlap":
                ov = self.length(p.mean_overlap)

            # earliest frame at which the listener may start voicing
            earliest = max(start + m, last_end[other] + m)
            bc = None
            if want_bc:
                room = start + L - ov - m - p.backchannel_frames - earliest
                bs = earliest + int(rng.integers(0, max(room, 0) + 1))
                bc = (bs, bs + p.backchannel_frames)
                earliest = bc[1] + m
                L = max(L, earliest - start + ov)

            if kind == "interruption":
                latest = max(start + L - ov, earliest)
                onset = int(rng.integers(earliest, latest + 1))
                end = onset + ov
            elif kind == "overlap":
                L = max(L, earliest - start + ov)
                end = start + L
                onset = end - ov
            else:
                L = max(L, earliest - start)
                end = start + L
                onset = None

            self.emit("ipu", start, end, holder)
            turn_end = end
            last_end[holder] = end
            if bc is not None:
                self.emit("ipu", bc[0], bc[1], other)
                self.emit("overlap", bc[0], bc[1])
                self.emit("turn", bc[0], bc[1], other)
                last_end[other] = bc[1]

            if onset is not None:
                self.emit("overlap", onset, end)
                self.emit("turn", turn_start, turn_end, holder)
                holder, start, min_len = other, onset, ov + m
                turn_start = start
            elif kind == "pause":
                sil = self.length(p.mean_pause)
                self.emit_silence("pause", end, end + sil, holder)
                start, min_len = end + sil, m
            else:
                sil = self.length(p.mean_gap)
                self.emit_silence("gap", end, end + sil, None)
                self.emit("turn", turn_start, turn_end, holder)
                holder, start, min_len = other, end + sil, m
                turn_start = start

        if turn_start < turn_end:
            self.emit("turn", turn_start, turn_end, holder)


def silence_frames(silence_ms: float, frame_rate_hz: float) -> int:
    return max(1, int(round(silence_ms / 1000.0 * frame_rate_hz)))


def generate_one(profile: DialogueProfile, T: int, index: int = 0,
                 tables: np.ndarray | None = None) -> tuple[DualTokenStream, EventTrace, Counter]:
    rng = np.random.default_rng([profile.seed, index])
    proc = _Process(profile, T, rng)
    proc.run()
    tables = transition_tables(profile) if tables is None else tables
    tokens = _fill_content(proc.active, tables, profile, rng)
    stream = DualTokenStream(tokens[0][:, None], tokens[1][:, None], profile.frame_rate_hz)
    return stream, EventTrace(T, profile.frame_rate_hz, proc.events), proc.stats


def generate(profile: DialogueProfile, T: int, n_streams: int, silence_ms: float = 200.0) -> Corpus:
    """``n_streams`` independent dialogues of ``T`` frames each.

    Stream ``i`` depends only on ``(profile.seed, i)``.
    """
    threshold = silence_frames(silence_ms, profile.frame_rate_hz)
    if T < 2 * threshold:
        raise ProfileError(f"T={T} frames is shorter than twice the silence threshold ({threshold})")
    for name in ("mean_ipu", "mean_pause", "mean_gap", "mean_overlap"):
        if getattr(profile, name) > T:
            raise ProfileError(f"{name}={getattr(profile, name)} exceeds the stream length T={T}")
    if n_streams < 1:
        raise ProfileError("n_streams must be positive")
    tables = transition_tables(profile)
    corpus = Corpus([], [])
    for i in range(n_streams):
        s, tr, st = generate_one(profile, T, i, tables)
        corpus.streams.append(s)
        corpus.traces.append(tr)
        corpus.stats.update(st)
    return corpus


# --- RVQ lifting -----------------------------------------------------------------

def rvq_table(vocab: int, D: int, seed: int = 0) -> np.ndarray:
    """Deterministic depth expansion ``(N_SPECIALS + vocab, D)``; column 0 is the
    token itself, deeper columns a seeded hash into the content range."""
    rng = np.random.default_rng([seed, D, 104729])
    table = np.empty((N_SPECIALS + vocab, D), dtype=np.int64)
    table[:, 0] = np.arange(N_SPECIALS + vocab)
    table[:, 1:] = N_SPECIALS + rng.integers(0, vocab, size=(N_SPECIALS + vocab, D - 1))
    table[:N_SPECIALS, 1:] = np.arange(N_SPECIALS)[:, None]
    return table


def to_rvq(stream: DualTokenStream, D: int, vocab: int, seed: int = 0) -> DualTokenStream:
    if stream.depth != 1:
        raise ProfileError(f"to_rvq expects a depth-1 stream, got depth {stream.depth}")
    if D < 1:
        raise ProfileError("D must be at least 1")
    if D == 1:
        return stream
    if stream.max_token >= N_SPECIALS + vocab:
        raise ProfileError(f"stream token {stream.max_token} outside vocabulary of {vocab} content symbols")
    table = rvq_table(vocab, D, seed)
    return DualTokenStream(table[stream.a[:, 0]], table[stream.b[:, 0]], stream.frame_rate_hz)


def from_rvq(stream: DualTokenStream) -> DualTokenStream:
    """Invert :func:`to_rvq` (the first depth carries the original token)."""
    return DualTokenStream(stream.a[:, :1], stream.b[:, :1], stream.frame_rate_hz)
