import { readFileSync } from "node:fs";
import { resolve } from "node:path";
import type { FetchLike, SocketLike } from "../src/api.js";
import type { ApiSchema, FrameMessage, StateMessage } from "../src/types.js";

/** The repo's schema snapshot; the server test pins /api/schema to it too. */
export const SNAPSHOT_PATH = resolve(
  process.cwd(),
  "..",
  "docs",
  "api_schema.json",
);
export const SNAPSHOT: ApiSchema = JSON.parse(
  readFileSync(SNAPSHOT_PATH, "utf8"),
);

export class FakeSocket implements SocketLike {
  onopen: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  closedByClient = false;

  close(): void {
    this.closedByClient = true;
  }

  open(): void {
    this.onopen?.();
  }

  deliver(message: object): void {
    this.onmessage?.({ data: JSON.stringify(message) });
  }

  drop(): void {
    this.onclose?.();
  }
}

export class FakeServer {
  sockets: FakeSocket[] = [];
  factory = (_url: string): SocketLike => {
    const socket = new FakeSocket();
    this.sockets.push(socket);
    return socket;
  };

  get latest(): FakeSocket {
    return this.sockets[this.sockets.length - 1];
  }
}

export interface Scripted {
  status: number;
  body: unknown;
}

export type RouteHandler = (body?: unknown) => Scripted;

/**
 * Fetch stub keyed by "METHOD /path" (query string stripped). Unmatched
 * requests fail loudly so tests cannot silently hit a wrong route.
 */
export function scriptedFetch(
  routes: Record<string, RouteHandler>,
): FetchLike & { calls: string[] } {
  const calls: string[] = [];
  const fetchFn = (async (url: string, init?: { method?: string; body?: string }) => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "").split("?")[0];
    const key = `${method} ${path}`;
    calls.push(key);
    const handler = routes[key];
    if (!handler) throw new Error(`unscripted route: ${key}`);
    const parsed = init?.body ? JSON.parse(init.body) : undefined;
    const { status, body } = handler(parsed);
    return {
      ok: status >= 200 && status < 300,
      status,
      json: async () => body,
      text: async () => JSON.stringify(body),
    };
  }) as FetchLike & { calls: string[] };
  fetchFn.calls = calls;
  return fetchFn;
}

export function createdSession(task: string, id = "session-0001") {
  return {
    status: 201,
    body: {
      version: 1,
      session_id: id,
      task,
      state: "Idle",
      closed: false,
      label: null,
      valid_verbs: ["Start"],
    },
  };
}

export function stateMsg(
  to: string,
  trigger: string,
  from = "Idle",
): StateMessage {
  return {
    type: "state",
    session_id: "session-0001",
    timestamp: 0,
    trigger,
    from,
    to,
    state: to,
    valid_verbs: [],
  };
}

export function frameMsg(
  timestep: number,
  overrides: Partial<FrameMessage> = {},
): FrameMessage {
  return {
    type: "frame",
    session_id: "session-0001",
    timestep,
    fsm_state: "Scooping",
    samples: { force_magnitude: 1.0 + timestep * 0.01, audio_energy: 0.2 },
    progress: null,
    log_likelihood: -0.5,
    svm_margin: -1.2,
    flagged: false,
    ...overrides,
  };
}

export function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Poll until `check` returns truthy or the deadline passes. */
export async function until(
  check: () => boolean,
  timeoutMs = 10000,
  stepMs = 2,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (check()) return;
    await sleep(stepMs);
  }
  throw new Error("condition not reached before timeout");
}
