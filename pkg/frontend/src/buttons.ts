import type { ApiSchema } from "./types.js";

/**
 * The enable rule is the server's own trigger-validity table, served at
 * /api/schema and snapshotted in ../docs/api_schema.json. The console never
 * simulates transitions; it only reads this table at the current state.
 */
export function enabledVerbs(schema: ApiSchema, state: string | null): string[] {
  if (state === null) return [];
  return schema.button_enable[state] ?? [];
}

export function isEnabled(
  schema: ApiSchema,
  state: string | null,
  verb: string,
): boolean {
  return enabledVerbs(schema, state).includes(verb);
}

/** Action section holds the motion verbs; evaluation holds the labels. */
export function splitVerbs(verbs: string[]): {
  action: string[];
  evaluation: string[];
} {
  return {
    action: verbs.filter((v) => !v.startsWith("Feedback")),
    evaluation: verbs.filter((v) => v.startsWith("Feedback")),
  };
}

export function verbLabel(verb: string): string {
  return verb.startsWith("Feedback") ? verb.slice("Feedback".length) : verb;
}
