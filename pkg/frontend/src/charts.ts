// CSV artifact parsing and dependency-free SVG chart rendering. Charts
// draw the server's numbers verbatim; axes auto-scale only.

export interface XY {
  x: number;
  y: number;
}

export function parseCurveCsv(text: string): XY[] {
  const rows = text.trim().split("\n");
  const out: XY[] = [];
  for (const row of rows.slice(1)) {
    const cells = row.split(",");
    if (cells.length < 2) continue;
    const x = Number(cells[0]);
    const y = Number(cells[1]);
    if (Number.isFinite(x) && Number.isFinite(y)) out.push({ x, y });
  }
  return out;
}

export function parseSpectrumCsv(text: string): XY[] {
  return parseCurveCsv(text); // energy_kev,counts has the same shape
}

export interface ChartOptions {
  width?: number;
  height?: number;
  stroke?: string;
  xLabel?: string;
  yLabel?: string;
  highlight?: [number, number] | null;
}

function scale(
  points: XY[],
  width: number,
  height: number,
  pad: number,
): { toX(x: number): number; toY(y: number): number; xMin: number; xMax: number } {
  let xMin = Infinity;
  let xMax = -Infinity;
  let yMin = 0;
  let yMax = -Infinity;
  for (const p of points) {
    xMin = Math.min(xMin, p.x);
    xMax = Math.max(xMax, p.x);
    yMin = Math.min(yMin, p.y);
    yMax = Math.max(yMax, p.y);
  }
  if (!Number.isFinite(xMin)) {
    xMin = 0;
    xMax = 1;
  }
  if (!Number.isFinite(yMax) || yMax === yMin) yMax = yMin + 1;
  const sx = (width - 2 * pad) / (xMax - xMin || 1);
  const sy = (height - 2 * pad) / (yMax - yMin);
  return {
    toX: (x) => pad + (x - xMin) * sx,
    toY: (y) => height - pad - (y - yMin) * sy,
    xMin,
    xMax,
  };
}

export function lineChartSvg(
  series: { points: XY[]; stroke: string; label?: string }[],
  opts: ChartOptions = {},
): string {
  const width = opts.width ?? 640;
  const height = opts.height ?? 220;
  const pad = 28;
  const all = series.flatMap((s) => s.points);
  const sc = scale(all, width, height, pad);
  const parts: string[] = [
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${width} ${height}" class="chart">`,
  ];
  if (opts.highlight) {
    const [h0, h1] = opts.highlight;
    const x0 = sc.toX(Math.max(h0, sc.xMin));
    const x1 = sc.toX(Math.min(h1, sc.xMax));
    parts.push(
      `<rect x="${x0.toFixed(1)}" y="${pad}" width="${(x1 - x0).toFixed(1)}"` +
        ` height="${height - 2 * pad}" fill="#ffe9a8" />`,
    );
  }
  parts.push(
    `<line x1="${pad}" y1="${height - pad}" x2="${width - pad}" y2="${height - pad}" stroke="#999"/>`,
    `<line x1="${pad}" y1="${pad}" x2="${pad}" y2="${height - pad}" stroke="#999"/>`,
  );
  for (const s of series) {
    if (s.points.length === 0) continue;
    const d = s.points
      .map(
        (p, i) =>
          `${i === 0 ? "M" : "L"}${sc.toX(p.x).toFixed(1)},${sc.toY(p.y).toFixed(1)}`,
      )
      .join(" ");
    parts.push(`<path d="${d}" fill="none" stroke="${s.stroke}" stroke-width="1.5"/>`);
  }
  if (opts.xLabel) {
    parts.push(
      `<text x="${width / 2}" y="${height - 4}" font-size="11" text-anchor="middle">${opts.xLabel}</text>`,
    );
  }
  if (opts.yLabel) {
    parts.push(
      `<text x="10" y="${height / 2}" font-size="11" text-anchor="middle" transform="rotate(-90 10 ${height / 2})">${opts.yLabel}</text>`,
    );
  }
  parts.push("</svg>");
  return parts.join("");
}

export function trendChartSvg(
  points: { x: number; y: number; pass: boolean }[],
  opts: ChartOptions = {},
): string {
  const width = opts.width ?? 480;
  const height = opts.height ?? 180;
  const pad = 28;
  const sc = scale(points, width, height, pad);
  const parts = [
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${width} ${height}" class="chart">`,
    `<line x1="${pad}" y1="${height - pad}" x2="${width - pad}" y2="${height - pad}" stroke="#999"/>`,
  ];
  for (const p of points) {
    parts.push(
      `<circle cx="${sc.toX(p.x).toFixed(1)}" cy="${sc.toY(p.y).toFixed(1)}" r="4" ` +
        `fill="${p.pass ? "#2c7" : "#c33"}"><title>${p.y.toFixed(1)} cps</title></circle>`,
    );
  }
  parts.push("</svg>");
  return parts.join("");
}

export function curveSliceWindow(points: XY[], win: [number, number]): XY[] {
  return points.filter((p) => p.x >= win[0] && p.x <= win[1]);
}
