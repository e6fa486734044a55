/** plot --results FILE [--oracle-line] [--out PATH]
 *
 * Reads a results CSV (plus its .meta.json sidecar when present), writes the
 * box-plot figure as SVG and a box-statistics sidecar next to it.
 */

import { readFileSync, writeFileSync, existsSync } from "node:fs";
import { parseArgs } from "node:util";

import { parseMeta, parseResults } from "./csv.js";
import { EmptyGroupError, buildFigure } from "./figure.js";

export function main(argv: string[]): number {
  let args;
  try {
    args = parseArgs({
      args: argv,
      options: {
        results: { type: "string" },
        out: { type: "string" },
        "oracle-line": { type: "boolean", default: true },
      },
    });
  } catch (err) {
    process.stderr.write(`argument error: ${(err as Error).message}\n`);
    return 2;
  }
  const resultsPath = args.values.results;
  if (!resultsPath) {
    process.stderr.write("usage: plot --results FILE [--oracle-line] [--out PATH]\n");
    return 2;
  }
  try {
    const results = parseResults(readFileSync(resultsPath, "utf8"));
    const metaPath = `${resultsPath}.meta.json`;
    const meta = existsSync(metaPath)
      ? parseMeta(readFileSync(metaPath, "utf8"))
      : null;
    const figure = buildFigure(results.rows, results.oracle, meta, {
      oracleLine: args.values["oracle-line"],
    });
    for (const warning of figure.warnings) {
      process.stderr.write(`warning: ${warning}\n`);
    }
    const out = args.values.out ?? resultsPath.replace(/\.csv$/, "") + ".svg";
    writeFileSync(out, figure.svg);
    const sidecarPath = out.replace(/\.[a-z]+$/, "") + ".boxstats.json";
    writeFileSync(sidecarPath, JSON.stringify(figure.sidecar, null, 1) + "\n");
    process.stdout.write(`${out}\n${sidecarPath}\n`);
    return 0;
  } catch (err) {
    if (err instanceof EmptyGroupError) {
      process.stderr.write(`${err.message}\n`);
      return 2;
    }
    process.stderr.write(`failure: ${(err as Error).message}\n`);
    return 3;
  }
}

process.exitCode = main(process.argv.slice(2));
