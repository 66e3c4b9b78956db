/** Payload shapes of the feedmon service API (see ../docs/api.md). */

export interface ApiSchema {
  version: number;
  states: string[];
  tasks: string[];
  verbs: string[];
  global_verbs: string[];
  verb_triggers: Record<string, unknown>;
  button_enable: Record<string, string[]>;
  endpoints: Record<string, { method: string; path: string }>;
  telemetry: {
    message_types: string[];
    frame_fields: string[];
    state_fields: string[];
  };
  rejection: { status: number; fields: string[] };
}

export interface SessionSummary {
  session_id: string;
  task: string;
  state: string;
  closed: boolean;
  label: string | null;
}

export interface CreateSessionResponse extends SessionSummary {
  valid_verbs: string[];
}

export interface CommandAck {
  accepted: true;
  session_id: string;
  verb: string;
  trigger: string;
  state: string;
  actions: ({ action: string } & Record<string, unknown>)[];
  valid_verbs: string[];
}

export interface RecordSummary {
  session_id: string;
  task: string;
  label: string | null;
  completed: boolean;
  flagged: boolean;
  n_phases: number;
}

export interface StateMessage {
  type: "state";
  session_id: string;
  timestamp: number;
  trigger: string;
  from: string;
  to: string;
  state: string;
  valid_verbs: string[];
}

export interface FrameMessage {
  type: "frame";
  session_id: string;
  timestep: number;
  fsm_state: string;
  samples: Record<string, number>;
  progress: number[] | null;
  log_likelihood: number | null;
  svm_margin: number | null;
  flagged: boolean;
}

export interface ClosedMessage {
  type: "closed";
  session_id: string;
  label: string | null;
}

export interface ErrorMessage {
  type: "error";
  reason: string;
}

export type TelemetryMessage =
  | StateMessage
  | FrameMessage
  | ClosedMessage
  | ErrorMessage;

/** Server refusal of a command: HTTP 409 with the untouched state. */
export interface Rejection {
  reason: string;
  state?: string;
}
