"""Run analytics computed from event logs: per-step runtimes and
overheads, per-run accounting, runtime distributions, and concurrency
timelines.

Overhead is defined strictly: a step's wall time minus the runtime the
provider measured for its action. Inter-step gaps are assigned to the
following step, so per-run overhead equals run wall time minus the sum
of provider runtimes exactly. Quantiles use linear interpolation
between order statistics (type 7).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import FabricError
from .storage import read_json, read_ndjson

PROVIDER_KINDS = ("transfer", "compute", "search", "review")


class IncompleteLog(FabricError):
    code = "IncompleteLog"


class TooFewSamples(FabricError):
    code = "TooFewSamples"


@dataclass(frozen=True)
class StepTiming:
    run_id: str
    step: str
    action_kind: str
    wall_s: float           # includes the gap since the previous step completed
    provider_runtime_s: float
    queue_wait_s: float | None = None

    @property
    def overhead_s(self) -> float:
        return self.wall_s - self.provider_runtime_s


@dataclass(frozen=True)
class RunSummary:
    run_id: str
    flow: str
    status: str
    runtime_s: float
    transfer_s: float
    compute_s: float
    search_s: float
    review_s: float
    oh_s: float
    started_at: float | None = None
    ended_at: float | None = None
    steps: tuple[StepTiming, ...] = ()

    @property
    def oh_pct(self) -> float:
        return 100.0 * self.oh_s / self.runtime_s if self.runtime_s else 0.0

    @property
    def provider_total_s(self) -> float:
        return self.transfer_s + self.compute_s + self.search_s + self.review_s


def _event_clock(events: list[dict]) -> list[float]:
    """Per-event instants for duration arithmetic: monotonic within one
    service epoch, wall-clock deltas across epochs (monotonic resets)."""
    instants: list[float] = []
    acc = 0.0
    prev_mono = prev_wall = None
    for ev in events:
        mono, wall = ev.get("mono"), ev.get("wall")
        if prev_mono is None:
            acc = 0.0
        elif mono is not None and prev_mono is not None and mono >= prev_mono:
            acc += mono - prev_mono
        elif wall is not None and prev_wall is not None:
            acc += max(0.0, wall - prev_wall)
        instants.append(acc)
        prev_mono, prev_wall = mono, wall
    return instants


def step_timings(run_id: str, events: list[dict]) -> list[StepTiming]:
    """Per-step wall/overhead with inter-step gaps charged to the step
    that follows them."""
    instants = _event_clock(events)
    timings: list[StepTiming] = []
    last_boundary = 0.0  # start of run (first event instant is 0)
    for ev, t in zip(events, instants):
        if ev["kind"] == "StepCompleted":
            detail = ev["detail"]
            timings.append(StepTiming(
                run_id=run_id,
                step=ev["step"],
                action_kind=detail.get("action_kind", ""),
                wall_s=t - last_boundary,
                provider_runtime_s=float(detail.get("runtime_s") or 0.0),
                queue_wait_s=detail.get("queue_wait_s"),
            ))
            last_boundary = t
    return timings


def summarize_run(header: dict, events: list[dict]) -> RunSummary:
    """Totals for one terminal run, recomputed from raw events."""
    terminal = next((e for e in events if e["kind"] in ("RunCompleted", "RunFailed", "RunCanceled")), None)
    if terminal is None:
        raise IncompleteLog(f"run {header.get('run_id')} has no terminal event")
    status = {"RunCompleted": "SUCCEEDED", "RunFailed": "FAILED", "RunCanceled": "CANCELED"}[terminal["kind"]]
    timings = step_timings(header.get("run_id", ""), events)
    sums = {k: 0.0 for k in PROVIDER_KINDS}
    for t in timings:
        if t.action_kind in sums:
            sums[t.action_kind] += t.provider_runtime_s
    runtime_s = float(terminal["detail"].get("runtime_s") or 0.0)
    if not runtime_s:
        instants = _event_clock(events)
        runtime_s = instants[-1] if instants else 0.0
    oh_s = runtime_s - sum(sums.values())
    return RunSummary(
        run_id=header.get("run_id", ""),
        flow=header.get("flow_title") or header.get("flow_id", ""),
        status=status,
        runtime_s=runtime_s,
        transfer_s=sums["transfer"], compute_s=sums["compute"],
        search_s=sums["search"], review_s=sums["review"],
        oh_s=oh_s,
        started_at=header.get("started_at"),
        ended_at=events[-1].get("wall") if events else None,
        steps=tuple(timings),
    )


def select_median_run(summaries: list[RunSummary]) -> RunSummary:
    """Lower median by runtime, run_id as the tiebreak."""
    if not summaries:
        raise TooFewSamples("no runs to select from")
    ordered = sorted(summaries, key=lambda s: (s.runtime_s, s.run_id))
    return ordered[(len(ordered) - 1) // 2]


def quantile(sorted_values: list[float], q: float) -> float:
    """Type-7 quantile (linear interpolation between order statistics)."""
    if not sorted_values:
        raise TooFewSamples("quantile of empty sample")
    if len(sorted_values) == 1:
        return float(sorted_values[0])
    pos = (len(sorted_values) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = pos - lo
    return sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac


def distribution_report(samples_by_group: dict[str, list[float]]) -> dict[str, dict[str, Any]]:
    """Quartiles with whiskers at 1.5x IQR and an outlier list per group;
    groups with fewer than 4 samples get a median-only entry."""
    report: dict[str, dict[str, Any]] = {}
    for group, values in samples_by_group.items():
        xs = sorted(float(v) for v in values)
        if not xs:
            continue
        if len(xs) < 4:
            report[group] = {"n": len(xs), "median": quantile(xs, 0.5), "partial": True}
            continue
        q1, med, q3 = quantile(xs, 0.25), quantile(xs, 0.5), quantile(xs, 0.75)
        iqr = q3 - q1
        lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inside = [x for x in xs if lo_fence <= x <= hi_fence]
        whisker_lo = min(inside) if inside else med
        whisker_hi = max(inside) if inside else med
        report[group] = {
            "n": len(xs), "q1": q1, "median": med, "q3": q3, "iqr": iqr,
            "whisker_lo": whisker_lo, "whisker_hi": whisker_hi,
            "outliers": [x for x in xs if x < lo_fence or x > hi_fence],
        }
    return report


def concurrency_timeline(intervals: list[tuple[float, float]], bucket_s: float) -> list[tuple[float, int]]:
    """Active-interval count per time bucket; an interval counts in every
    bucket it intersects."""
    if bucket_s <= 0:
        raise FabricError("bucket_s must be positive")
    spans = [(s, e) for s, e in intervals if e >= s]
    if not spans:
        return []
    t0 = min(s for s, _ in spans)
    t0 = t0 - (t0 % bucket_s)
    t_end = max(e for _, e in spans)
    out: list[tuple[float, int]] = []
    t = t0
    while t <= t_end:
        count = sum(1 for s, e in spans if s < t + bucket_s and e >= t)
        out.append((t, count))
        t += bucket_s
    return out


def histogram(values: Iterable[float], bins: int = 10) -> dict[str, Any]:
    xs = sorted(float(v) for v in values)
    if not xs:
        return {"edges": [], "counts": []}
    lo, hi = xs[0], xs[-1]
    if hi == lo:
        return {"edges": [lo, hi], "counts": [len(xs)]}
    width = (hi - lo) / bins
    edges = [lo + i * width for i in range(bins + 1)]
    counts = [0] * bins
    for x in xs:
        idx = min(int((x - lo) / width), bins - 1)
        counts[idx] += 1
    return {"edges": edges, "counts": counts}


def step_distributions(runs: list[tuple[dict, list[dict]]]) -> dict[str, dict[str, Any]]:
    """Per-step runtime and overhead samples across runs of one flow
    (the drill-down view: one histogram pair per step)."""
    per_step: dict[str, dict[str, list[float]]] = {}
    order: list[str] = []
    for header, events in runs:
        for t in step_timings(header.get("run_id", ""), events):
            if t.step not in per_step:
                per_step[t.step] = {"runtimes": [], "overheads": [], "kind": t.action_kind}
                order.append(t.step)
            per_step[t.step]["runtimes"].append(t.provider_runtime_s)
            per_step[t.step]["overheads"].append(t.overhead_s)
    return {step: {
        "kind": per_step[step]["kind"],
        "runtime_histogram": histogram(per_step[step]["runtimes"]),
        "overhead_histogram": histogram(per_step[step]["overheads"]),
        "runtimes": per_step[step]["runtimes"],
        "overheads": per_step[step]["overheads"],
    } for step in order}


# -- report emission --------------------------------------------------------------

TABLE1_COLUMNS = ("Experiment", "Runtime", "Transfer", "Compute", "Search", "OH", "%OH")


def table1_rows(summaries_by_flow: dict[str, list[RunSummary]]) -> list[list[str]]:
    """One row per flow for its median-runtime run, Table-1 column order."""
    rows = []
    for flow in sorted(summaries_by_flow):
        runs = [s for s in summaries_by_flow[flow] if s.status == "SUCCEEDED"]
        if not runs:
            continue
        s = select_median_run(runs)
        rows.append([flow, f"{s.runtime_s:.1f}", f"{s.transfer_s:.1f}", f"{s.compute_s:.1f}",
                     f"{s.search_s:.1f}", f"{s.oh_s:.1f}", f"{s.oh_pct:.1f}"])
    return rows


def render_tsv(columns: tuple[str, ...], rows: list[list[str]]) -> str:
    lines = ["\t".join(columns)]
    lines.extend("\t".join(str(c) for c in row) for row in rows)
    return "\n".join(lines) + "\n"


def load_runs_dir(runs_dir: Path) -> list[tuple[dict, list[dict]]]:
    """Load (header, events) pairs from a flows-service data directory."""
    runs_dir = Path(runs_dir)
    if (runs_dir / "runs").is_dir():
        runs_dir = runs_dir / "runs"
    out = []
    for header_path in sorted(runs_dir.glob("run-*.json")):
        header = read_json(header_path)
        if not header:
            continue
        events = read_ndjson(header_path.with_suffix(".events"))
        out.append((header, events))
    return out


def summaries_by_flow(runs: list[tuple[dict, list[dict]]],
                      flow_titles: dict[str, str] | None = None) -> dict[str, list[RunSummary]]:
    groups: dict[str, list[RunSummary]] = {}
    for header, events in runs:
        try:
            if flow_titles:
                title = (flow_titles.get(header.get("flow_id"))
                         or header.get("flow_title") or header.get("flow_id"))
                header = {**header, "flow_title": title}
            summary = summarize_run(header, events)
        except IncompleteLog:
            continue
        groups.setdefault(summary.flow, []).append(summary)
    return groups


def write_plot_data(path: Path, payload: dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
