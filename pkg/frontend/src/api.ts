// Typed client for the fabric HTTP API. The UI is a pure consumer of these
// routes and keeps no state the server cannot reconstruct.

export interface RunSummary {
  run_id: string;
  flow_id: string;
  status: string;
  owner: string;
  started_at: string | null;
  ended_at: string | null;
  cursor: string | null;
}

export interface RunView extends RunSummary {
  input: Record<string, unknown>;
  state_doc: Record<string, unknown>;
  totals: Record<string, number>;
}

export interface RunEvent {
  seq: number;
  ts: string;
  wall: number;
  mono: number;
  kind: string;
  step: string;
  detail: Record<string, any>;
}

export interface ReviewRequest {
  action_id: string;
  prompt: string;
  payload_refs: string[];
  reviewers: string[];
  requested_at: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
    public detail: Record<string, any> = {},
  ) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class FabricClient {
  constructor(
    private baseUrl: string,
    private token: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.baseUrl + path, {
        method,
        headers: {
          Authorization: `Bearer ${this.token}`,
          ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
        },
        body: body !== undefined ? JSON.stringify(body) : undefined,
      });
    } catch (err) {
      throw new ApiError(0, "NetworkError", String(err));
    }
    let payload: any = {};
    try {
      payload = await resp.json();
    } catch {
      /* empty body */
    }
    if (!resp.ok) {
      const err = payload?.error ?? {};
      throw new ApiError(resp.status, err.code ?? "Internal", err.message ?? resp.statusText, err.detail ?? {});
    }
    return payload as T;
  }

  listRuns(params: { flow_id?: string; status?: string; limit?: number } = {}) {
    const q = new URLSearchParams();
    if (params.flow_id) q.set("flow_id", params.flow_id);
    if (params.status) q.set("status", params.status);
    q.set("limit", String(params.limit ?? 100));
    return this.call<{ runs: RunSummary[]; cursor: string | null }>("GET", `/runs?${q}`);
  }

  getRun(runId: string) {
    return this.call<RunView>("GET", `/runs/${runId}`);
  }

  getEvents(runId: string, afterSeq = 0) {
    const suffix = afterSeq ? `?after_seq=${afterSeq}` : "";
    return this.call<{ events: RunEvent[] }>("GET", `/runs/${runId}/events${suffix}`);
  }

  cancelRun(runId: string) {
    return this.call<RunView>("POST", `/runs/${runId}/cancel`);
  }

  listFlows() {
    return this.call<{ flows: { flow_id: string; title: string }[] }>("GET", "/flows");
  }

  inbox() {
    return this.call<{ pending: ReviewRequest[] }>("GET", "/providers/review/inbox");
  }

  respond(actionId: string, decision: "approve" | "reject", comment: string) {
    return this.call<{ status: string; details: Record<string, any> }>(
      "POST",
      `/providers/review/respond/${actionId}`,
      { decision, comment },
    );
  }
}

/** Retry with exponential backoff; used for transient list refreshes. */
export async function withBackoff<T>(
  op: () => Promise<T>,
  retries = 3,
  baseDelayMs = 500,
  sleep: (ms: number) => Promise<void> = (ms) => new Promise((r) => setTimeout(r, ms)),
): Promise<T> {
  let attempt = 0;
  for (;;) {
    try {
      return await op();
    } catch (err) {
      if (err instanceof ApiError && err.status === 401) throw err; // auth never retries
      if (attempt >= retries) throw err;
      await sleep(baseDelayMs * 2 ** attempt);
      attempt += 1;
    }
  }
}
