// HTML renderers: pure string templates over view models, so they are
// testable without a DOM.

import type { RunEvent, RunSummary, RunView } from "./api";
import { InboxItem, StepBar, formatSeconds, statusClass } from "./model";

export function esc(value: unknown): string {
  return String(value ?? "")
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

export function renderRunRows(rows: RunSummary[], flows: Map<string, string>): string {
  if (!rows.length) {
    return `<tr><td colspan="5" class="empty">no runs match the filters</td></tr>`;
  }
  return rows
    .map(
      (r) => `
    <tr class="run-row" data-run="${esc(r.run_id)}">
      <td class="mono"><a href="#/runs/${esc(r.run_id)}">${esc(r.run_id)}</a></td>
      <td>${esc(flows.get(r.flow_id) ?? r.flow_id)}</td>
      <td><span class="badge ${statusClass(r.status)}">${esc(r.status)}</span></td>
      <td>${esc(r.started_at ?? "")}</td>
      <td>${r.status === "ACTIVE" ? `<button class="cancel" data-run="${esc(r.run_id)}">cancel</button>` : ""}</td>
    </tr>`,
    )
    .join("");
}

export function renderTimeline(bars: StepBar[]): string {
  const total = bars.reduce((acc, b) => acc + b.wallS, 0) || 1;
  const rows = bars
    .map((b) => {
      const runtimePct = Math.max(0.5, (b.runtimeS / total) * 100);
      const overheadPct = Math.max(b.overheadS > 0 ? 0.5 : 0, (b.overheadS / total) * 100);
      return `
    <div class="step ${b.failed ? "step-failed" : ""}" data-step="${esc(b.step)}">
      <div class="step-label">${esc(b.step)} <span class="kind">${esc(b.kind)}</span></div>
      <div class="bar">
        <span class="seg overhead" style="width:${overheadPct.toFixed(2)}%" title="overhead ${esc(formatSeconds(b.overheadS))}"></span>
        <span class="seg runtime" style="width:${runtimePct.toFixed(2)}%" title="runtime ${esc(formatSeconds(b.runtimeS))}"></span>
      </div>
      <div class="step-times">${esc(formatSeconds(b.runtimeS))} + ${esc(formatSeconds(b.overheadS))} oh</div>
    </div>`;
    })
    .join("");
  return `<div class="timeline">${rows}</div>`;
}

export function renderErrorPanel(bars: StepBar[]): string {
  const failed = bars.filter((b) => b.failed);
  if (!failed.length) return "";
  return failed
    .map(
      (b) => `
    <div class="error-panel" data-step="${esc(b.step)}">
      <strong>${esc(b.step)}</strong> failed:
      <code class="error-code">${esc(b.errorCode)}</code>
      <span class="error-message">${esc(b.errorMessage)}</span>
    </div>`,
    )
    .join("");
}

export function renderEventList(events: RunEvent[]): string {
  return events
    .map(
      (ev) => `
    <tr class="ev-${esc(ev.kind)}">
      <td class="mono">${ev.seq}</td>
      <td class="mono">${esc(ev.ts)}</td>
      <td>${esc(ev.kind)}</td>
      <td>${esc(ev.step)}</td>
    </tr>`,
    )
    .join("");
}

export function renderRunHeader(view: RunView): string {
  const totals = view.totals ?? {};
  return `
    <h2 class="mono">${esc(view.run_id)}</h2>
    <span class="badge ${statusClass(view.status)}">${esc(view.status)}</span>
    <dl class="run-meta">
      <dt>flow</dt><dd class="mono">${esc(view.flow_id)}</dd>
      <dt>owner</dt><dd>${esc(view.owner)}</dd>
      <dt>started</dt><dd>${esc(view.started_at ?? "")}</dd>
      <dt>ended</dt><dd>${esc(view.ended_at ?? "running")}</dd>
      <dt>provider time</dt><dd>${esc(
        formatSeconds(Object.values(totals).reduce((a, b) => a + Number(b || 0), 0)),
      )}</dd>
    </dl>`;
}

export function renderInbox(items: InboxItem[]): string {
  if (!items.length) return `<p class="empty">Inbox empty: nothing awaiting review.</p>`;
  return items
    .map(
      (item) => `
    <div class="inbox-item" data-action="${esc(item.actionId)}">
      ${item.banner ? `<div class="banner">${esc(item.banner)}</div>` : ""}
      <div class="prompt">${esc(item.prompt)}</div>
      <ul class="refs">${item.payloadRefs.map((r) => `<li class="mono">${esc(r)}</li>`).join("")}</ul>
      <textarea class="comment" data-action="${esc(item.actionId)}"
        placeholder="comment">${esc(item.draft)}</textarea>
      <div class="verdict-buttons">
        <button class="approve" data-action="${esc(item.actionId)}">approve</button>
        <button class="reject" data-action="${esc(item.actionId)}">reject</button>
      </div>
    </div>`,
    )
    .join("");
}

export function renderLogin(error?: string): string {
  return `
    <div class="login">
      <h2>Fabric operator console</h2>
      <p>Paste a bearer token; it stays in memory only.</p>
      ${error ? `<div class="banner">${esc(error)}</div>` : ""}
      <input id="token-input" type="password" placeholder="token" />
      <button id="token-save">connect</button>
    </div>`;
}
