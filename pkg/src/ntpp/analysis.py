"""Turn-taking statistics over dual-channel activity.

Segmentation works on voiced/silent frames (a frame is voiced when its
first-depth token is not SIL):

* IPUs: per channel, voiced runs merged across silences shorter than the
  threshold.  IPUs touching the stream edges still count.
* silences: maximal runs where *both* channels are silent, lie between two
  voiced frames, and sit inside no IPU.  A silence is a gap when the channels
  voiced just before it and just after it are disjoint, otherwise a pause of
  the channel that resumes.
* overlaps: maximal runs where both channels are voiced.
* turns: :func:`~ntpp.events.group_turns` over the IPUs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import SIL, DualTokenStream, swap_channels
from .errors import ReportError
from .events import REPORT_KINDS, Event, EventTrace, group_turns
from .streaming import channel_seeds, generate_free
from .synth import silence_frames

CH = ("a", "b")
METRICS = tuple(f"{k}_{m}" for k in REPORT_KINDS for m in ("occ", "dur"))


def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` runs of True in a 1-D boolean array."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(m[1:] != m[:-1])
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def activity(stream: DualTokenStream, sil_id: int = SIL) -> np.ndarray:
    """``(2, T)`` voiced mask."""
    return np.stack([stream.a[:, 0] != sil_id, stream.b[:, 0] != sil_id])


def merge_ipus(voiced: np.ndarray, threshold: int) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s, e in runs(voiced):
        if out and s - out[-1][1] < threshold:
            out[-1][1] = e
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def segment(stream: DualTokenStream, silence_ms: float = 200.0, sil_id: int = SIL) -> EventTrace:
    T, rate = stream.T, stream.frame_rate_hz
    threshold = silence_frames(silence_ms, rate)
    if silence_ms * rate / 1000.0 < 1.0 - 1e-9:
        raise ValueError(f"silence_ms={silence_ms} is shorter than one frame at {rate} Hz")
    events: list[Event] = []
    if T == 0:
        return EventTrace(0, rate, [])
    act = activity(stream, sil_id)
    covered = np.zeros(T, dtype=bool)
    ipus = []
    for c in (0, 1):
        for s, e in merge_ipus(act[c], threshold):
            ipus.append(Event("ipu", s, e, CH[c]))
            covered[s:e] = True
    events += ipus

    for s, e in runs(act[0] & act[1]):
        events.append(Event("overlap", s, e))

    for s, e in runs(~act[0] & ~act[1]):
        if s == 0 or e == T or covered[s:e].any():
            continue
        before = {c for c in (0, 1) if act[c, s - 1]}
        after = {c for c in (0, 1) if act[c, e]}
        if before & after:
            events.append(Event("pause", s, e, CH[min(before & after)]))
        else:
            events.append(Event("gap", s, e))

    events += group_turns(ipus)
    return EventTrace(T, rate, events)


# --- reports ---------------------------------------------------------------------

@dataclass
class EventReport:
    occurrences: dict[str, float]     # per minute
    duration: dict[str, float]        # seconds per minute
    turns: float = 0.0                # per minute
    minutes: float = 0.0

    def metrics(self) -> dict[str, float]:
        out = {f"{k}_occ": v for k, v in self.occurrences.items()}
        out.update({f"{k}_dur": v for k, v in self.duration.items()})
        return out

    def rows(self) -> list[dict]:
        rows = [{"metric": k, "occurrences_per_min": self.occurrences[k],
                 "duration_per_min": self.duration[k]} for k in REPORT_KINDS]
        rows.append({"metric": "turn", "occurrences_per_min": self.turns, "duration_per_min": ""})
        return rows

    def to_dict(self) -> dict:
        return {"minutes": self.minutes, "occurrences_per_min": self.occurrences,
                "duration_per_min": self.duration, "turns_per_min": self.turns}

    @classmethod
    def from_dict(cls, d: dict) -> "EventReport":
        try:
            return cls(dict(d["occurrences_per_min"]), dict(d["duration_per_min"]),
                       float(d.get("turns_per_min", 0.0)), float(d.get("minutes", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ReportError(f"malformed report: {exc}") from None


def report(traces: Sequence[EventTrace], minutes: float | None = None) -> EventReport:
    """Per-minute counts and cumulated durations over a set of traces."""
    if not traces:
        raise ReportError("report needs at least one trace")
    if minutes is None:
        minutes = sum(tr.minutes for tr in traces)
    if not minutes > 0:
        raise ReportError("total duration is zero")
    occ, dur = {}, {}
    for k in REPORT_KINDS:
        # integer frame totals per trace keep the result independent of event order
        occ[k] = sum(tr.count(k) for tr in traces) / minutes
        dur[k] = sum(tr.frames(k) / tr.frame_rate_hz for tr in traces) / minutes
    turns = sum(tr.count("turn") for tr in traces) / minutes
    return EventReport(occ, dur, turns, minutes)


@dataclass
class DeltaReport:
    values: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def max(self) -> float:
        return max(self.values.values())


def _check_metrics(x: dict, y: dict) -> None:
    if set(x) != set(y):
        raise ReportError(f"metric sets differ: {sorted(set(x) ^ set(y))}")


def signed_delta(gen: EventReport, ref: EventReport) -> dict[str, float]:
    g, r = gen.metrics(), ref.metrics()
    _check_metrics(g, r)
    if set(g) != set(METRICS):
        raise ReportError(f"expected metrics {list(METRICS)}, got {sorted(g)}")
    return {k: g[k] - r[k] for k in METRICS}


def delta(gen: EventReport, ref: EventReport) -> DeltaReport:
    """``|M(gen) - M(ref)|`` for every metric."""
    return DeltaReport({k: abs(v) for k, v in signed_delta(gen, ref).items()})


# --- generation-based evaluation -------------------------------------------------

def continuation_report(params, prompts: Sequence[DualTokenStream], frames: int,
                        temperature: float, seed: int = 0, swapped: bool = False,
                        silence_ms: float = 200.0) -> tuple[EventReport, list[DualTokenStream]]:
    """Continue every prompt by ``frames`` steps and report the continuations.

    Prompt ``k`` uses per-channel seeds derived from ``(seed, k)``; with
    ``swapped`` the prompt channels and the two seeds are both exchanged, so a
    channel-symmetric model produces exactly the swapped output.
    """
    outs, traces = [], []
    for k, prompt in enumerate(prompts):
        seeds = channel_seeds(seed, k)
        if swapped:
            prompt, seeds = swap_channels(prompt), seeds[::-1]
        gen = generate_free(params, prompt, frames, temperature, channel_seeds=seeds)
        cont = gen.crop(prompt.T, gen.T)
        outs.append(cont)
        traces.append(segment(cont, silence_ms))
    return report(traces), outs


@dataclass
class SwapResult:
    original: dict[str, float]
    swapped: dict[str, float]
    robustness: DeltaReport


def swap_eval(params, prompts: Sequence[DualTokenStream], reference: EventReport, frames: int,
              temperature: float = 0.9, seed: int = 0, silence_ms: float = 200.0) -> SwapResult:
    """``|dM_original - dM_swapped|`` with ``dM`` the signed difference of the
    continuation report from ``reference``."""
    rep_o, _ = continuation_report(params, prompts, frames, temperature, seed, False, silence_ms)
    rep_s, _ = continuation_report(params, prompts, frames, temperature, seed, True, silence_ms)
    d_o = signed_delta(rep_o, reference)
    d_s = signed_delta(rep_s, reference)
    return SwapResult(d_o, d_s, DeltaReport({k: abs(d_o[k] - d_s[k]) for k in METRICS}))


# --- writers ---------------------------------------------------------------------

def write_report_csv(path, rep: EventReport) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "occurrences_per_min", "duration_per_min"])
        w.writeheader()
        w.writerows(rep.rows())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def write_table_csv(path, rows: Sequence[dict], key: str) -> None:
    """One row per ``key`` value (temperature, say) with the eight metrics."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, *METRICS])
        for row in rows:
            vals = [row[key]] + [row[m] for m in METRICS]
            for v in vals[1:]:
                if not math.isfinite(v):
                    raise ReportError(f"non-finite metric in row {row[key]}")
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in vals])
