import type { Point } from "./window.js";

const COLORS = ["#2563eb", "#dc2626", "#059669", "#d97706"];

// jsdom throws (and logs) on getContext; skip the probe entirely there.
const HEADLESS_DOM =
  typeof navigator !== "undefined" && /jsdom/i.test(navigator.userAgent);

/**
 * Plain polyline plot on a 2D canvas, one colored line per series.
 *
 * jsdom has no 2D context, so rendering silently no-ops there; tests assert
 * on the series buffers instead of pixels.
 */
export class LinePlot {
  private ctx: CanvasRenderingContext2D | null;

  constructor(
    private canvas: HTMLCanvasElement,
    private title: string,
  ) {
    try {
      this.ctx = HEADLESS_DOM ? null : canvas.getContext("2d");
    } catch {
      this.ctx = null; // headless DOM without canvas support
    }
  }

  draw(series: { name: string; points: Point[] }[]): void {
    const ctx = this.ctx;
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = "#374151";
    ctx.font = "12px sans-serif";
    ctx.fillText(this.title, 6, 14);

    const all = series.flatMap((s) => s.points);
    if (all.length < 2) return;
    let tMin = Infinity;
    let tMax = -Infinity;
    let vMin = Infinity;
    let vMax = -Infinity;
    for (const p of all) {
      if (p.t < tMin) tMin = p.t;
      if (p.t > tMax) tMax = p.t;
      if (p.v < vMin) vMin = p.v;
      if (p.v > vMax) vMax = p.v;
    }
    if (tMax === tMin) tMax = tMin + 1;
    if (vMax === vMin) {
      vMax += 0.5;
      vMin -= 0.5;
    }
    const px = (t: number) => 4 + ((t - tMin) / (tMax - tMin)) * (width - 8);
    const py = (v: number) =>
      height - 6 - ((v - vMin) / (vMax - vMin)) * (height - 26);

    series.forEach((s, i) => {
      if (s.points.length < 2) return;
      ctx.strokeStyle = COLORS[i % COLORS.length];
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      s.points.forEach((p, j) => {
        if (j === 0) ctx.moveTo(px(p.t), py(p.v));
        else ctx.lineTo(px(p.t), py(p.v));
      });
      ctx.stroke();
      ctx.fillStyle = ctx.strokeStyle;
      ctx.fillText(s.name, 6 + 90 * i, height - 8);
    });
  }
}
