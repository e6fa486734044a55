/** Minimal hand-rolled SVG box-plot renderer (no DOM, no canvas). */

import { BoxStats } from "./stats.js";

export interface RenderOptions {
  title: string;
  oracle: number | null;
  deterministic: number | null;
}

const WIDTH = 760;
const HEIGHT = 420;
const MARGIN = { top: 42, right: 24, bottom: 64, left: 72 };
const COLORS = ["#4878b0", "#d1615d", "#6aa56e", "#857aab", "#c8963e"];

function fmt(x: number): string {
  return Number.isInteger(x) ? String(x) : x.toPrecision(6);
}

function niceTicks(lo: number, hi: number, n = 6): number[] {
  const span = hi - lo || 1;
  const step = Math.pow(10, Math.floor(Math.log10(span / n)));
  const candidates = [step, 2 * step, 5 * step, 10 * step];
  const chosen = candidates.find((s) => span / s <= n) ?? 10 * step;
  const ticks: number[] = [];
  for (let v = Math.ceil(lo / chosen) * chosen; v <= hi + 1e-12; v += chosen) {
    ticks.push(v);
  }
  return ticks;
}

export function renderSvg(groups: BoxStats[], opts: RenderOptions): string {
  const values: number[] = [];
  for (const g of groups) {
    values.push(g.whiskerLow, g.whiskerHigh, ...g.outliers);
  }
  if (opts.oracle !== null) values.push(opts.oracle);
  if (opts.deterministic !== null) values.push(opts.deterministic);
  let lo = Math.min(...values);
  let hi = Math.max(...values);
  const pad = 0.06 * (hi - lo || 1);
  lo -= pad;
  hi += pad;

  const plotW = WIDTH - MARGIN.left - MARGIN.right;
  const plotH = HEIGHT - MARGIN.top - MARGIN.bottom;
  const y = (v: number) => MARGIN.top + plotH * (1 - (v - lo) / (hi - lo));
  const slot = plotW / groups.length;
  const xMid = (i: number) => MARGIN.left + slot * (i + 0.5);
  const boxW = Math.min(46, slot * 0.6);

  const methods = [...new Set(groups.map((g) => g.method))];
  const color = (m: string) => COLORS[methods.indexOf(m) % COLORS.length];

  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${WIDTH}" height="${HEIGHT}" viewBox="0 0 ${WIDTH} ${HEIGHT}" font-family="sans-serif">`,
  );
  parts.push(`<rect width="${WIDTH}" height="${HEIGHT}" fill="white"/>`);
  parts.push(
    `<text x="${WIDTH / 2}" y="24" text-anchor="middle" font-size="16">log-normalizing-constant estimates: ${opts.title}</text>`,
  );

  for (const tick of niceTicks(lo, hi)) {
    const ty = y(tick);
    parts.push(
      `<line x1="${MARGIN.left}" y1="${ty}" x2="${WIDTH - MARGIN.right}" y2="${ty}" stroke="#eeeeee"/>`,
      `<text x="${MARGIN.left - 8}" y="${ty + 4}" text-anchor="end" font-size="11">${fmt(tick)}</text>`,
    );
  }
  parts.push(
    `<line x1="${MARGIN.left}" y1="${MARGIN.top}" x2="${MARGIN.left}" y2="${HEIGHT - MARGIN.bottom}" stroke="#333"/>`,
    `<line x1="${MARGIN.left}" y1="${HEIGHT - MARGIN.bottom}" x2="${WIDTH - MARGIN.right}" y2="${HEIGHT - MARGIN.bottom}" stroke="#333"/>`,
    `<text x="20" y="${MARGIN.top + plotH / 2}" font-size="12" transform="rotate(-90 20 ${MARGIN.top + plotH / 2})" text-anchor="middle">log Z estimate</text>`,
  );

  groups.forEach((g, i) => {
    const cx = xMid(i);
    const c = color(g.method);
    const half = boxW / 2;
    parts.push(
      `<line x1="${cx}" y1="${y(g.whiskerLow)}" x2="${cx}" y2="${y(g.q1)}" stroke="${c}"/>`,
      `<line x1="${cx}" y1="${y(g.q3)}" x2="${cx}" y2="${y(g.whiskerHigh)}" stroke="${c}"/>`,
      `<line x1="${cx - half / 2}" y1="${y(g.whiskerLow)}" x2="${cx + half / 2}" y2="${y(g.whiskerLow)}" stroke="${c}"/>`,
      `<line x1="${cx - half / 2}" y1="${y(g.whiskerHigh)}" x2="${cx + half / 2}" y2="${y(g.whiskerHigh)}" stroke="${c}"/>`,
      `<rect x="${cx - half}" y="${y(g.q3)}" width="${boxW}" height="${Math.max(
        y(g.q1) - y(g.q3),
        0.5,
      )}" fill="${c}" fill-opacity="0.35" stroke="${c}"/>`,
      `<line x1="${cx - half}" y1="${y(g.median)}" x2="${cx + half}" y2="${y(g.median)}" stroke="${c}" stroke-width="2"/>`,
    );
    for (const o of g.outliers) {
      parts.push(`<circle cx="${cx}" cy="${y(o)}" r="2.4" fill="none" stroke="${c}"/>`);
    }
    parts.push(
      `<text x="${cx}" y="${HEIGHT - MARGIN.bottom + 16}" text-anchor="middle" font-size="11">N=${g.n}</text>`,
      `<text x="${cx}" y="${HEIGHT - MARGIN.bottom + 32}" text-anchor="middle" font-size="10" fill="${c}">${g.method}</text>`,
    );
  });

  if (opts.oracle !== null) {
    parts.push(
      `<line x1="${MARGIN.left}" y1="${y(opts.oracle)}" x2="${WIDTH - MARGIN.right}" y2="${y(
        opts.oracle,
      )}" stroke="#222" stroke-dasharray="8 5"/>`,
      `<text x="${WIDTH - MARGIN.right}" y="${y(opts.oracle) - 5}" text-anchor="end" font-size="10">reference</text>`,
    );
  }
  if (opts.deterministic !== null) {
    parts.push(
      `<line x1="${MARGIN.left}" y1="${y(opts.deterministic)}" x2="${WIDTH - MARGIN.right}" y2="${y(
        opts.deterministic,
      )}" stroke="#555" stroke-dasharray="2 4"/>`,
      `<text x="${WIDTH - MARGIN.right}" y="${y(opts.deterministic) + 12}" text-anchor="end" font-size="10">deterministic approx</text>`,
    );
  }
  parts.push("</svg>");
  return parts.join("\n") + "\n";
}
