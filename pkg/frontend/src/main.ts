import { ApiError, FabricClient, RunEvent, RunSummary, withBackoff } from "./api";
import {
  InboxItem,
  applyVerdictOutcome,
  filterRuns,
  mergeInbox,
  mergeRuns,
  stepBars,
} from "./model";
import { Poller } from "./poller";
import {
  renderErrorPanel,
  renderEventList,
  renderInbox,
  renderLogin,
  renderRunHeader,
  renderRunRows,
  renderTimeline,
  esc,
} from "./render";

const app = document.getElementById("app")!;
const apiBase = (window as any).FABRIC_BASE ?? "";

let client: FabricClient | null = null;
let poller: Poller | null = null;

// view state
let shownRuns: RunSummary[] = [];
const flowTitles = new Map<string, string>();
let filters = { flow: "", status: "" };
let inboxItems: InboxItem[] = [];
let detailEvents: RunEvent[] = [];
let detailSeq = 0;

function setToken(token: string) {
  client = new FabricClient(apiBase, token);
}

function route(): { view: string; arg?: string } {
  const hash = location.hash.replace(/^#\/?/, "");
  if (hash.startsWith("runs/")) return { view: "run", arg: hash.slice(5) };
  if (hash === "inbox") return { view: "inbox" };
  return { view: "runs" };
}

function nav(): string {
  const r = route();
  return `
  <nav>
    <span class="brand">flowfabric</span>
    <a href="#/runs" class="${r.view === "runs" ? "active" : ""}">Runs</a>
    <a href="#/inbox" class="${r.view === "inbox" ? "active" : ""}">Review inbox</a>
  </nav>`;
}

function showLogin(error?: string) {
  poller?.stop();
  app.innerHTML = renderLogin(error);
  document.getElementById("token-save")!.addEventListener("click", () => {
    const input = document.getElementById("token-input") as HTMLInputElement;
    if (input.value.trim()) {
      setToken(input.value.trim());
      void render();
    }
  });
}

function authGuard(err: unknown): boolean {
  if (err instanceof ApiError && err.status === 401) {
    showLogin("Token rejected: " + err.message);
    return true;
  }
  return false;
}

async function refreshRuns() {
  if (!client) return;
  try {
    const [page, flows] = await Promise.all([
      withBackoff(() => client!.listRuns({ limit: 200 })),
      client.listFlows().catch(() => ({ flows: [] })),
    ]);
    for (const f of flows.flows) flowTitles.set(f.flow_id, f.title || f.flow_id);
    shownRuns = mergeRuns(shownRuns, page.runs);
    const body = document.getElementById("run-rows");
    if (body) body.innerHTML = renderRunRows(filterRuns(shownRuns, filters), flowTitles);
    const banner = document.getElementById("list-error");
    if (banner) banner.textContent = "";
  } catch (err) {
    if (authGuard(err)) return;
    const banner = document.getElementById("list-error");
    if (banner) banner.textContent = `refresh failed: ${String((err as Error).message)} (retrying)`;
  }
}

function showRuns() {
  app.innerHTML = `
    ${nav()}
    <section>
      <div class="toolbar">
        <select id="filter-status">
          <option value="">all statuses</option>
          ${["ACTIVE", "SUCCEEDED", "FAILED", "CANCELED"]
            .map((s) => `<option ${filters.status === s ? "selected" : ""}>${s}</option>`)
            .join("")}
        </select>
        <select id="filter-flow">
          <option value="">all flows</option>
          ${[...flowTitles.entries()]
            .map(
              ([id, title]) =>
                `<option value="${esc(id)}" ${filters.flow === id ? "selected" : ""}>${esc(title)}</option>`,
            )
            .join("")}
        </select>
        <span id="list-error" class="inline-error"></span>
      </div>
      <table class="runs">
        <thead><tr><th>run</th><th>flow</th><th>status</th><th>started</th><th></th></tr></thead>
        <tbody id="run-rows"></tbody>
      </table>
    </section>`;
  document.getElementById("filter-status")!.addEventListener("change", (e) => {
    filters = { ...filters, status: (e.target as HTMLSelectElement).value };
    void refreshRuns();
  });
  document.getElementById("filter-flow")!.addEventListener("change", (e) => {
    filters = { ...filters, flow: (e.target as HTMLSelectElement).value };
    void refreshRuns();
  });
  app.addEventListener("click", (e) => {
    const target = e.target as HTMLElement;
    if (target.classList.contains("cancel") && client) {
      void client.cancelRun(target.dataset.run!).then(() => refreshRuns());
    }
  });
  poller?.stop();
  poller = new Poller(refreshRuns, 2000);
  poller.start();
}

async function refreshDetail(runId: string) {
  if (!client) return;
  try {
    const [view, tail] = await Promise.all([
      client.getRun(runId),
      client.getEvents(runId, detailSeq),
    ]);
    if (tail.events.length) {
      detailEvents = [...detailEvents, ...tail.events];
      detailSeq = detailEvents[detailEvents.length - 1].seq;
    }
    const bars = stepBars(detailEvents);
    document.getElementById("run-header")!.innerHTML = renderRunHeader(view);
    document.getElementById("run-errors")!.innerHTML = renderErrorPanel(bars);
    document.getElementById("run-timeline")!.innerHTML = detailEvents.length
      ? renderTimeline(bars)
      : `<p class="empty">waiting for the first event…</p>`;
    document.getElementById("event-rows")!.innerHTML = renderEventList(detailEvents);
    if (view.status !== "ACTIVE") poller?.stop();
  } catch (err) {
    if (err instanceof ApiError && err.code === "UnknownRun") {
      app.innerHTML = `${nav()}<section><p class="empty">No run ${esc(runId)}.</p></section>`;
      poller?.stop();
      return;
    }
    authGuard(err);
  }
}

function showRunDetail(runId: string) {
  detailEvents = [];
  detailSeq = 0;
  app.innerHTML = `
    ${nav()}
    <section>
      <div id="run-header"></div>
      <div id="run-errors"></div>
      <h3>Step timeline <span class="hint">(solid = provider runtime, hatched = orchestration overhead)</span></h3>
      <div id="run-timeline"></div>
      <h3>Events</h3>
      <table class="events">
        <thead><tr><th>#</th><th>time</th><th>kind</th><th>step</th></tr></thead>
        <tbody id="event-rows"></tbody>
      </table>
    </section>`;
  poller?.stop();
  poller = new Poller(() => refreshDetail(runId), 2000);
  poller.start();
}

async function refreshInbox() {
  if (!client) return;
  try {
    const page = await client.inbox();
    inboxItems = mergeInbox(inboxItems, page.pending);
    syncInboxDom();
  } catch (err) {
    authGuard(err);
  }
}

function syncInboxDom() {
  const holder = document.getElementById("inbox-items");
  if (!holder) return;
  const drafts = new Map<string, string>();
  holder.querySelectorAll("textarea.comment").forEach((ta) => {
    drafts.set((ta as HTMLTextAreaElement).dataset.action!, (ta as HTMLTextAreaElement).value);
  });
  inboxItems = inboxItems.map((i) => ({ ...i, draft: drafts.get(i.actionId) ?? i.draft }));
  holder.innerHTML = renderInbox(inboxItems);
}

async function submitVerdict(actionId: string, decision: "approve" | "reject") {
  if (!client) return;
  const ta = document.querySelector(
    `textarea.comment[data-action="${actionId}"]`,
  ) as HTMLTextAreaElement | null;
  const comment = ta?.value ?? "";
  inboxItems = inboxItems.map((i) => (i.actionId === actionId ? { ...i, draft: comment } : i));
  try {
    await client.respond(actionId, decision, comment);
    inboxItems = applyVerdictOutcome(inboxItems, actionId, { ok: true });
  } catch (err) {
    if (authGuard(err)) return;
    const apiErr = err as ApiError;
    inboxItems = applyVerdictOutcome(inboxItems, actionId, {
      ok: false,
      code: apiErr.code ?? "NetworkError",
      decidedBy: apiErr.detail?.decided_by,
      message: apiErr.message,
    });
  }
  syncInboxDom();
}

function showInbox() {
  app.innerHTML = `
    ${nav()}
    <section>
      <h2>Review inbox</h2>
      <div id="inbox-items"></div>
    </section>`;
  app.addEventListener("click", (e) => {
    const target = e.target as HTMLElement;
    const actionId = target.dataset.action;
    if (!actionId) return;
    if (target.classList.contains("approve")) void submitVerdict(actionId, "approve");
    if (target.classList.contains("reject")) void submitVerdict(actionId, "reject");
  });
  poller?.stop();
  poller = new Poller(refreshInbox, 2000);
  poller.start();
}

async function render() {
  if (!client) {
    showLogin();
    return;
  }
  const r = route();
  if (r.view === "run" && r.arg) showRunDetail(r.arg);
  else if (r.view === "inbox") showInbox();
  else showRuns();
}

window.addEventListener("hashchange", () => void render());
document.addEventListener("visibilitychange", () => {
  if (!document.hidden) void poller?.tick();
});
void render();
