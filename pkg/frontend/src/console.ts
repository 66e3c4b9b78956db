import {
  ApiClient,
  ApiError,
  TelemetryFeed,
  type FeedStatus,
  type FetchLike,
  type SocketFactory,
} from "./api.js";
import { enabledVerbs, isEnabled, splitVerbs, verbLabel } from "./buttons.js";
import { LinePlot } from "./plots.js";
import { RollingSeries } from "./window.js";
import type { ApiSchema, TelemetryMessage } from "./types.js";

export interface ConsoleOptions {
  baseUrl: string;
  fetchFn?: FetchLike;
  socketFactory?: SocketFactory;
  /** Trailing plot window in timesteps; 300 = 30 s at the 10 Hz stream. */
  windowSteps?: number;
  /** Extra fields merged into the create-session request (seed, duration). */
  sessionExtras?: Record<string, unknown>;
}

const WINDOW_STEPS_DEFAULT = 300;

/**
 * Single-page operator console.
 *
 * Three command sections (task selection, action, evaluation) plus a live
 * panel: state badge, rolling plots, latched anomaly banner. All state shown
 * is derived from command acks and the telemetry stream; the console holds
 * no transition table of its own, so it cannot disagree with the server
 * about what a click would do.
 */
export class OperatorConsole {
  readonly client: ApiClient;
  private schema: ApiSchema;
  private options: ConsoleOptions;
  private socketFactory: SocketFactory;

  private root: HTMLElement | null = null;
  private verbButtons = new Map<string, HTMLButtonElement>();
  private taskButtons = new Map<string, HTMLButtonElement>();
  private badge!: HTMLElement;
  private banner!: HTMLElement;
  private connectionNote!: HTMLElement;
  private rejectionNote!: HTMLElement;
  private sessionNote!: HTMLElement;
  private actionLog!: HTMLElement;
  private recordsList!: HTMLElement;
  private plots: LinePlot[] = [];

  private feed: TelemetryFeed | null = null;
  private sessionId: string | null = null;
  private sessionTask: string | null = null;
  private fsmState: string | null = null;
  private sessionClosed = false;
  private pending = false;
  private connection: FeedStatus | null = null;
  private latched = false;
  private lastTimestep = -1;

  /** Frames rendered so far; the badge-latency test reads this. */
  framesRendered = 0;

  private channelSeries = new Map<string, RollingSeries>();
  private loglikSeries: RollingSeries;
  private marginSeries: RollingSeries;

  constructor(schema: ApiSchema, options: ConsoleOptions) {
    this.schema = schema;
    this.options = options;
    const fetchFn =
      options.fetchFn ?? (globalThis.fetch.bind(globalThis) as FetchLike);
    this.socketFactory =
      options.socketFactory ??
      ((url) => new WebSocket(url) as unknown as ReturnType<SocketFactory>);
    this.client = new ApiClient(options.baseUrl, fetchFn);
    const window = options.windowSteps ?? WINDOW_STEPS_DEFAULT;
    this.loglikSeries = new RollingSeries(window);
    this.marginSeries = new RollingSeries(window);
  }

  // ------------------------------------------------------------------ DOM

  mount(root: HTMLElement): void {
    this.root = root;
    root.innerHTML = "";

    const header = el("header", "console-header");
    this.badge = el("span", "state-badge", "state-badge");
    this.badge.textContent = "no session";
    this.sessionNote = el("span", "session-note", "session-note");
    this.connectionNote = el("span", "connection-note", "connection-banner");
    this.connectionNote.hidden = true;
    header.append(this.badge, this.sessionNote, this.connectionNote);
    root.append(header);

    this.banner = el("div", "anomaly-banner", "anomaly-banner");
    this.banner.textContent = "ANOMALY DETECTED - arm retracted, Resume when safe";
    this.banner.hidden = true;
    root.append(this.banner);

    const tasks = el("section", "section", "task-section");
    tasks.append(el("h2", "", "", "Task selection"));
    for (const task of this.schema.tasks) {
      const button = el("button", "task-button") as HTMLButtonElement;
      button.textContent = task;
      button.dataset.task = task;
      button.addEventListener("click", () => void this.startSession(task));
      this.taskButtons.set(task, button);
      tasks.append(button);
    }
    root.append(tasks);

    // Global verbs (SelectTask) are the task section, not command buttons.
    const commandVerbs = this.schema.verbs.filter(
      (verb) => !this.schema.global_verbs.includes(verb),
    );
    const { action, evaluation } = splitVerbs(commandVerbs);
    root.append(this.verbSection("action-section", "Action selection", action));
    root.append(
      this.verbSection("eval-section", "Evaluation", evaluation),
    );

    this.rejectionNote = el("div", "rejection-note", "rejection-note");
    this.rejectionNote.hidden = true;
    root.append(this.rejectionNote);

    this.actionLog = el("div", "action-log", "action-log");
    root.append(this.actionLog);

    const plotBox = el("div", "plots");
    const mk = (id: string, title: string) => {
      const canvas = el("canvas", "plot", id) as HTMLCanvasElement;
      canvas.width = 560;
      canvas.height = 120;
      plotBox.append(canvas);
      return new LinePlot(canvas, title);
    };
    this.plots = [
      mk("plot-channels", "channels"),
      mk("plot-loglik", "log-likelihood"),
      mk("plot-margin", "svm margin"),
    ];
    root.append(plotBox);

    const records = el("section", "section", "records-section");
    records.append(el("h2", "", "", "Records"));
    const refresh = el("button", "", "records-refresh") as HTMLButtonElement;
    refresh.textContent = "Refresh";
    refresh.addEventListener("click", () => void this.refreshRecords());
    this.recordsList = el("ul", "records-list", "records-list");
    records.append(refresh, this.recordsList);
    root.append(records);

    this.refreshControls();
    void this.refreshRecords();
  }

  private verbSection(
    id: string,
    title: string,
    verbs: string[],
  ): HTMLElement {
    const section = el("section", "section", id);
    section.append(el("h2", "", "", title));
    for (const verb of verbs) {
      const button = el("button", "verb-button") as HTMLButtonElement;
      button.textContent = verbLabel(verb);
      button.dataset.verb = verb;
      button.addEventListener("click", () => void this.sendCommand(verb));
      this.verbButtons.set(verb, button);
      section.append(button);
    }
    return section;
  }

  // ------------------------------------------------------------- commands

  async startSession(task: string): Promise<void> {
    if (this.pending || this.liveSession()) return;
    this.pending = true;
    this.refreshControls();
    try {
      const created = await this.client.createSession({
        version: 1,
        task,
        ...(this.options.sessionExtras ?? {}),
      });
      this.resetSession(created.session_id, task, created.state);
      this.feed = new TelemetryFeed(
        this.client.telemetryUrl(created.session_id),
        this.socketFactory,
        (message) => this.onTelemetry(message),
        (status) => this.onStatus(status),
      );
      this.feed.connect();
      this.clearNote();
    } catch (err) {
      this.showNote(err instanceof ApiError ? err.reason : String(err));
    } finally {
      this.pending = false;
      this.refreshControls();
    }
  }

  async sendCommand(verb: string): Promise<void> {
    if (!this.sessionId || this.pending || this.sessionClosed) return;
    if (!isEnabled(this.schema, this.fsmState, verb)) return;
    this.pending = true;
    this.refreshControls();
    try {
      const ack = await this.client.command(this.sessionId, verb);
      this.fsmState = ack.state;
      if (ack.trigger === "Resume") this.latched = false;
      for (const action of ack.actions) {
        const note = el("div", "action-entry");
        note.textContent =
          action.action +
          (typeof action.phase === "string" ? `: ${action.phase}` : "");
        this.actionLog.append(note);
      }
      this.clearNote();
    } catch (err) {
      // A 409 is the server refusing the trigger; state is untouched.
      this.showNote(err instanceof ApiError ? err.reason : String(err));
    } finally {
      this.pending = false;
      this.refreshControls();
    }
  }

  async refreshRecords(): Promise<void> {
    let records;
    try {
      records = (await this.client.listRecords()).records;
    } catch {
      return; // list stays stale while unreachable; banner already shows it
    }
    this.recordsList.innerHTML = "";
    for (const record of records) {
      const item = el("li", "record-entry");
      item.dataset.sessionId = record.session_id;
      item.dataset.label = record.label ?? "";
      item.textContent =
        `${record.session_id} ${record.task} ` +
        `${record.label ?? "unlabeled"}` +
        (record.flagged ? " [flagged]" : "");
      this.recordsList.append(item);
    }
  }

  // ------------------------------------------------------------ telemetry

  private onTelemetry(message: TelemetryMessage): void {
    switch (message.type) {
      case "state": {
        this.fsmState = message.to;
        if (message.trigger === "Resume") this.latched = false;
        break;
      }
      case "frame": {
        if (message.timestep <= this.lastTimestep) return;
        this.lastTimestep = message.timestep;
        for (const [name, value] of Object.entries(message.samples)) {
          let series = this.channelSeries.get(name);
          if (!series) {
            series = new RollingSeries(
              this.options.windowSteps ?? WINDOW_STEPS_DEFAULT,
            );
            this.channelSeries.set(name, series);
          }
          series.push(message.timestep, value);
        }
        if (message.log_likelihood !== null) {
          this.loglikSeries.push(message.timestep, message.log_likelihood);
        }
        if (message.svm_margin !== null) {
          this.marginSeries.push(message.timestep, message.svm_margin);
        }
        if (message.flagged) this.latched = true;
        this.framesRendered += 1;
        this.drawPlots();
        break;
      }
      case "closed": {
        this.sessionClosed = true;
        this.sessionNote.textContent =
          `${this.sessionTask} ${this.sessionId} closed: ` +
          (message.label ?? "unlabeled");
        void this.refreshRecords();
        break;
      }
      case "error": {
        this.showNote(message.reason);
        break;
      }
    }
    this.refreshControls();
  }

  private onStatus(status: FeedStatus): void {
    this.connection = status;
    if (status === "disconnected") {
      this.connectionNote.textContent = "disconnected, retrying";
      this.connectionNote.hidden = false;
    } else if (status === "connecting") {
      this.connectionNote.textContent = "connecting";
      this.connectionNote.hidden = false;
    } else {
      this.connectionNote.hidden = true;
    }
    this.refreshControls();
  }

  // ------------------------------------------------------------ rendering

  private refreshControls(): void {
    if (!this.root) return;
    this.badge.textContent = this.fsmState ?? "no session";
    this.badge.dataset.state = this.fsmState ?? "";
    this.banner.hidden = !this.latched;

    const commandable =
      this.liveSession() && this.connection === "live" && !this.pending;
    const enabled = commandable
      ? enabledVerbs(this.schema, this.fsmState)
      : [];
    for (const [verb, button] of this.verbButtons) {
      button.disabled = !enabled.includes(verb);
    }
    const canCreate = !this.pending && !this.liveSession();
    for (const button of this.taskButtons.values()) {
      button.disabled = !canCreate;
    }
    if (this.sessionId && !this.sessionClosed) {
      this.sessionNote.textContent = `${this.sessionTask} ${this.sessionId}`;
    } else if (!this.sessionId) {
      this.sessionNote.textContent = "";
    }
  }

  private drawPlots(): void {
    const channels = [...this.channelSeries.entries()].map(
      ([name, series]) => ({ name, points: series.snapshot() }),
    );
    this.plots[0]?.draw(channels);
    this.plots[1]?.draw([
      { name: "loglik", points: this.loglikSeries.snapshot() },
    ]);
    this.plots[2]?.draw([
      { name: "margin", points: this.marginSeries.snapshot() },
    ]);
  }

  private showNote(reason: string): void {
    this.rejectionNote.textContent = reason;
    this.rejectionNote.hidden = false;
  }

  private clearNote(): void {
    this.rejectionNote.hidden = true;
    this.rejectionNote.textContent = "";
  }

  // -------------------------------------------------------------- helpers

  private liveSession(): boolean {
    return this.sessionId !== null && !this.sessionClosed;
  }

  private resetSession(id: string, task: string, state: string): void {
    this.feed?.stop();
    this.sessionId = id;
    this.sessionTask = task;
    this.fsmState = state;
    this.sessionClosed = false;
    this.latched = false;
    this.lastTimestep = -1;
    this.framesRendered = 0;
    this.connection = null;
    this.channelSeries.clear();
    this.loglikSeries.clear();
    this.marginSeries.clear();
    this.actionLog.innerHTML = "";
  }

  // ------------------------------------------------------- test accessors

  get state(): string | null {
    return this.fsmState;
  }

  get anomalyLatched(): boolean {
    return this.latched;
  }

  get connectionStatus(): FeedStatus | null {
    return this.connection;
  }

  get closed(): boolean {
    return this.sessionClosed;
  }

  get session(): string | null {
    return this.sessionId;
  }

  channelPoints(name: string): { t: number; v: number }[] {
    return this.channelSeries.get(name)?.snapshot() ?? [];
  }

  loglikPoints(): { t: number; v: number }[] {
    return this.loglikSeries.snapshot();
  }

  marginPoints(): { t: number; v: number }[] {
    return this.marginSeries.snapshot();
  }

  dispose(): void {
    this.feed?.stop();
  }
}

function el(
  tag: string,
  className = "",
  id = "",
  text = "",
): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (id) node.id = id;
  if (text) node.textContent = text;
  return node;
}
