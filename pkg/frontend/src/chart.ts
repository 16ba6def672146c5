// Dependency-free SVG line chart with vertical tune markers.

import type { SeriesView } from "./types.js";

export interface ChartOptions {
  width?: number;
  height?: number;
  padding?: number;
}

function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderChart(view: SeriesView, options: ChartOptions = {}): string {
  const width = options.width ?? 640;
  const height = options.height ?? 220;
  const pad = options.padding ?? 34;
  if (!view.points.length) {
    return (
      `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `class="chart empty"><text x="${width / 2}" y="${height / 2}" ` +
      `text-anchor="middle" class="placeholder">no data yet</text></svg>`
    );
  }
  const ts = view.points.map((p) => p[0]);
  const vs = view.points.map((p) => p[1]);
  const tMin = Math.min(...ts);
  const tMax = Math.max(...ts);
  const vMin = Math.min(...vs);
  const vMax = Math.max(...vs);
  const tSpan = tMax - tMin || 1;
  const vSpan = vMax - vMin || 1;
  const x = (t: number) => pad + ((t - tMin) / tSpan) * (width - 2 * pad);
  const y = (v: number) => height - pad - ((v - vMin) / vSpan) * (height - 2 * pad);
  const path = view.points
    .map(([t, v], i) => `${i ? "L" : "M"}${x(t).toFixed(1)},${y(v).toFixed(1)}`)
    .join(" ");
  const markers = view.annotations
    .filter((a) => a.tStep >= tMin && a.tStep <= tMax)
    .map((a) => {
      const mx = x(a.tStep).toFixed(1);
      const label = escapeXml(`t=${a.tStep} ${a.summary}`);
      return (
        `<line class="tune-marker" data-tuning="${escapeXml(a.tuningId)}" ` +
        `x1="${mx}" y1="${pad}" x2="${mx}" y2="${height - pad}">` +
        `<title>${label}</title></line>`
      );
    })
    .join("");
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" class="chart">` +
    `<text x="${pad}" y="16" class="title">${escapeXml(view.metric)}</text>` +
    `<text x="${pad}" y="${height - pad + 16}" class="axis">${tMin}</text>` +
    `<text x="${width - pad}" y="${height - pad + 16}" text-anchor="end" class="axis">${tMax}</text>` +
    `<text x="4" y="${y(vMax) + 4}" class="axis">${vMax}</text>` +
    `<text x="4" y="${y(vMin) + 4}" class="axis">${vMin}</text>` +
    `<path class="line" d="${path}" fill="none"/>` +
    markers +
    `</svg>`
  );
}
