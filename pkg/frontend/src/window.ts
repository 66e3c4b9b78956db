export interface Point {
  t: number;
  v: number;
}

/**
 * Rolling plot buffer keyed by telemetry timestep.
 *
 * Keeps the trailing `windowSteps` timesteps (300 = 30 s at the simulator's
 * 10 Hz); anything older is dropped on push, so the buffer never grows with
 * session length.
 */
export class RollingSeries {
  private points: Point[] = [];

  constructor(private windowSteps: number) {}

  push(t: number, v: number): void {
    this.points.push({ t, v });
    const cutoff = t - this.windowSteps + 1;
    let start = 0;
    while (start < this.points.length && this.points[start].t < cutoff) {
      start += 1;
    }
    if (start > 0) this.points = this.points.slice(start);
  }

  snapshot(): Point[] {
    return this.points.slice();
  }

  get length(): number {
    return this.points.length;
  }

  clear(): void {
    this.points = [];
  }
}
