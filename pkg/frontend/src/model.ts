// Pure view-model computations. Everything here derives from server data
// only; in particular the timeline bars use the event log's own clocks, never
// the browser clock.

import type { RunEvent, RunSummary } from "./api";

export interface StepBar {
  step: string;
  kind: string;
  wallS: number; // gap + provider runtime, charged to this step
  runtimeS: number;
  overheadS: number;
  failed: boolean;
  errorCode?: string;
  errorMessage?: string;
}

/** Per-event instants: monotonic deltas within a service epoch, wall deltas
 * across restarts (mirrors the server's accounting). */
function instants(events: RunEvent[]): number[] {
  const out: number[] = [];
  let acc = 0;
  let prevMono: number | null = null;
  let prevWall: number | null = null;
  for (const ev of events) {
    if (prevMono !== null && ev.mono >= prevMono) acc += ev.mono - prevMono;
    else if (prevWall !== null && ev.wall >= prevWall) acc += ev.wall - prevWall;
    out.push(acc);
    prevMono = ev.mono;
    prevWall = ev.wall;
  }
  return out;
}

export function stepBars(events: RunEvent[]): StepBar[] {
  const ts = instants(events);
  const bars: StepBar[] = [];
  let lastBoundary = 0;
  events.forEach((ev, i) => {
    if (ev.kind === "StepCompleted") {
      const runtime = Number(ev.detail.runtime_s ?? 0);
      const wall = ts[i] - lastBoundary;
      bars.push({
        step: ev.step,
        kind: String(ev.detail.action_kind ?? ""),
        wallS: wall,
        runtimeS: runtime,
        overheadS: Math.max(0, wall - runtime),
        failed: false,
      });
      lastBoundary = ts[i];
    } else if (ev.kind === "StepFailed") {
      const err = ev.detail.error ?? {};
      bars.push({
        step: ev.step,
        kind: "failed",
        wallS: ts[i] - lastBoundary,
        runtimeS: 0,
        overheadS: ts[i] - lastBoundary,
        failed: true,
        errorCode: String(err.code ?? "Unknown"),
        errorMessage: String(err.message ?? ""),
      });
      lastBoundary = ts[i];
    }
  });
  return bars;
}

export interface RunFilters {
  flow: string;
  status: string;
}

/** Client-side row filtering; the server already orders started_at desc. */
export function filterRuns(rows: RunSummary[], filters: RunFilters): RunSummary[] {
  return rows.filter(
    (r) =>
      (!filters.flow || r.flow_id === filters.flow) &&
      (!filters.status || r.status === filters.status),
  );
}

/** Merge a fresh page into the displayed rows without reordering rows the
 * operator is already looking at: existing rows update in place, new rows
 * prepend (the server sorts newest first). */
export function mergeRuns(shown: RunSummary[], fresh: RunSummary[]): RunSummary[] {
  const freshById = new Map(fresh.map((r) => [r.run_id, r]));
  const kept = shown.map((r) => freshById.get(r.run_id) ?? r);
  const known = new Set(shown.map((r) => r.run_id));
  const added = fresh.filter((r) => !known.has(r.run_id));
  return [...added, ...kept];
}

export function formatSeconds(s: number | null | undefined): string {
  if (s === null || s === undefined || Number.isNaN(s)) return "–";
  if (s < 0.001 && s > 0) return "<1ms";
  if (s < 1) return `${(s * 1000).toFixed(0)}ms`;
  if (s < 60) return `${s.toFixed(s < 10 ? 2 : 1)}s`;
  const m = Math.floor(s / 60);
  return `${m}m ${(s - m * 60).toFixed(0)}s`;
}

export function statusClass(status: string): string {
  return {
    ACTIVE: "badge-active",
    SUCCEEDED: "badge-ok",
    FAILED: "badge-failed",
    CANCELED: "badge-canceled",
  }[status] ?? "badge-unknown";
}

// -- review inbox state ------------------------------------------------------

export interface InboxItem {
  actionId: string;
  prompt: string;
  payloadRefs: string[];
  draft: string; // comment draft survives conflicts
  banner?: string;
}

export function mergeInbox(shown: InboxItem[], fresh: { action_id: string; prompt: string; payload_refs: string[] }[]): InboxItem[] {
  const drafts = new Map(shown.map((i) => [i.actionId, i]));
  return fresh.map((p) => {
    const prev = drafts.get(p.action_id);
    return {
      actionId: p.action_id,
      prompt: p.prompt,
      payloadRefs: p.payload_refs,
      draft: prev?.draft ?? "",
      banner: prev?.banner,
    };
  });
}

/** Outcome of a respond attempt, applied to the inbox list. */
export function applyVerdictOutcome(
  items: InboxItem[],
  actionId: string,
  outcome: { ok: true } | { ok: false; code: string; decidedBy?: string; message: string },
): InboxItem[] {
  if (outcome.ok) return items.filter((i) => i.actionId !== actionId);
  return items.map((i) => {
    if (i.actionId !== actionId) return i;
    const banner =
      outcome.code === "AlreadyDecided"
        ? `Already decided${outcome.decidedBy ? ` by ${outcome.decidedBy}` : ""}`
        : outcome.code === "UnknownAction"
          ? "Decided elsewhere; the run has already moved on"
          : `Error: ${outcome.message} (still actionable)`;
    return { ...i, banner }; // draft untouched
  });
}
