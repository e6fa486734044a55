/** Grouped box-plot figure assembly: statistics sidecar plus SVG text.
 *
 * Everything is a pure function of the parsed inputs, so repeated invocation
 * is byte-identical and the statistics can be tested without touching pixels.
 */

import { BoxStats, boxStats } from "./stats.js";
import { Meta, ResultRow } from "./csv.js";
import { renderSvg } from "./svg.js";

export class EmptyGroupError extends Error {
  constructor(group: string) {
    super(`no result rows for group ${group}`);
    this.name = "EmptyGroupError";
  }
}

export interface Figure {
  svg: string;
  sidecar: {
    experiment: string;
    groups: BoxStats[];
    oracle: number | null;
    deterministicEstimate: number | null;
  };
  warnings: string[];
}

export interface FigureOptions {
  oracleLine?: boolean; // draw the dashed oracle line when available
}

export function buildFigure(
  rows: ResultRow[],
  oracleFromResults: number | null,
  meta: Meta | null,
  options: FigureOptions = {},
): Figure {
  const warnings: string[] = [];
  if (rows.length === 0) throw new EmptyGroupError("(all)");

  const byGroup = new Map<string, number[]>();
  for (const row of rows) {
    const key = `${row.method}|${row.n}`;
    const bucket = byGroup.get(key) ?? [];
    bucket.push(row.logZHat);
    byGroup.set(key, bucket);
  }
  if (meta?.methods && meta?.nParticles) {
    for (const method of meta.methods) {
      for (const n of meta.nParticles) {
        if (!byGroup.has(`${method}|${n}`)) {
          throw new EmptyGroupError(`method=${method}, N=${n}`);
        }
      }
    }
  }

  const methods = [...new Set(rows.map((r) => r.method))].sort();
  const ns = [...new Set(rows.map((r) => r.n))].sort((a, b) => a - b);
  const groups: BoxStats[] = [];
  for (const method of methods) {
    for (const n of ns) {
      const values = byGroup.get(`${method}|${n}`);
      if (values) groups.push(boxStats(method, n, values));
    }
  }

  const oracle = meta?.oracle ?? oracleFromResults;
  const wantOracle = options.oracleLine ?? true;
  if (wantOracle && oracle === null) {
    warnings.push("no oracle value available; dashed reference line omitted");
  }
  const deterministic = meta?.deterministicEstimate ?? null;
  const svg = renderSvg(groups, {
    title: rows[0].experiment,
    oracle: wantOracle ? oracle : null,
    deterministic,
  });
  return {
    svg,
    sidecar: {
      experiment: rows[0].experiment,
      groups,
      oracle,
      deterministicEstimate: deterministic,
    },
    warnings,
  };
}
