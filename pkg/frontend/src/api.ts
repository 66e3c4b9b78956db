import type {
  ApiSchema,
  CommandAck,
  CreateSessionResponse,
  RecordSummary,
  SessionSummary,
  TelemetryMessage,
} from "./types.js";

/** Minimal WebSocket surface so tests and node clients can stand in. */
export interface SocketLike {
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export type FetchLike = (
  url: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
  },
) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
  text(): Promise<string>;
}>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public reason: string,
    public body: Record<string, unknown>,
  ) {
    super(`${status}: ${reason}`);
  }
}

async function errorFrom(response: {
  status: number;
  json(): Promise<unknown>;
}): Promise<ApiError> {
  let body: Record<string, unknown> = {};
  try {
    const parsed = await response.json();
    // FastAPI wraps handler-raised errors in {"detail": ...}.
    body =
      parsed && typeof parsed === "object"
        ? (((parsed as Record<string, unknown>).detail ?? parsed) as Record<
            string,
            unknown
          >)
        : {};
  } catch {
    body = {};
  }
  const reason =
    typeof body.reason === "string" ? body.reason : `HTTP ${response.status}`;
  return new ApiError(response.status, reason, body);
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike,
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path);
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; package_version: string }> {
    return this.get("/api/health");
  }

  schema(): Promise<ApiSchema> {
    return this.get("/api/schema");
  }

  createSession(body: Record<string, unknown>): Promise<CreateSessionResponse> {
    return this.post("/api/sessions", body);
  }

  listSessions(): Promise<{ sessions: SessionSummary[] }> {
    return this.get("/api/sessions");
  }

  command(sessionId: string, verb: string): Promise<CommandAck> {
    return this.post(`/api/sessions/${sessionId}/commands`, {
      version: 1,
      verb,
    });
  }

  listRecords(): Promise<{ records: RecordSummary[] }> {
    return this.get("/api/records");
  }

  telemetryUrl(sessionId: string): string {
    return (
      this.baseUrl.replace(/^http/, "ws") +
      `/api/sessions/${sessionId}/telemetry`
    );
  }
}

export type FeedStatus = "connecting" | "live" | "disconnected" | "closed";

const BACKOFF_MS = [500, 1000, 2000, 4000, 8000];

/**
 * Ordered telemetry subscription with reconnect.
 *
 * The server stream is an append-only log replayed from the start on every
 * connection, so after a drop the feed skips the prefix it has already
 * delivered; handlers therefore see each message exactly once, in log order,
 * across any number of reconnects.
 */
export class TelemetryFeed {
  private socket: SocketLike | null = null;
  private delivered = 0;
  private seenThisConnection = 0;
  private attempts = 0;
  private stopped = false;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private url: string,
    private factory: SocketFactory,
    private onMessage: (message: TelemetryMessage) => void,
    private onStatus: (status: FeedStatus) => void,
  ) {}

  connect(): void {
    if (this.stopped) return;
    this.onStatus("connecting");
    this.seenThisConnection = 0;
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.onopen = () => {
      this.attempts = 0;
      this.onStatus("live");
    };
    socket.onmessage = (ev) => {
      const message = JSON.parse(String(ev.data)) as TelemetryMessage;
      this.seenThisConnection += 1;
      if (this.seenThisConnection <= this.delivered) return; // replayed prefix
      this.delivered = this.seenThisConnection;
      if (message.type === "closed" || message.type === "error") {
        this.stopped = true;
      }
      this.onMessage(message);
      if (this.stopped) this.onStatus("closed");
    };
    socket.onclose = () => this.scheduleReconnect();
    socket.onerror = () => {
      // close() always follows in both browsers and ws; nothing to do here.
    };
  }

  private scheduleReconnect(): void {
    if (this.stopped || this.timer !== null) return;
    this.onStatus("disconnected");
    const delay = BACKOFF_MS[Math.min(this.attempts, BACKOFF_MS.length - 1)];
    this.attempts += 1;
    this.timer = setTimeout(() => {
      this.timer = null;
      this.connect();
    }, delay);
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
    if (this.socket !== null) {
      this.socket.onclose = null;
      this.socket.close();
    }
  }
}
