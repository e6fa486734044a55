/** Readers for the runner's results/summary files and metadata sidecars.
 *
 * The formats are fixed and field values never contain commas or quoting, so
 * a plain split is exact. Lines starting with '#' are timestamp comments.
 */

export interface ResultRow {
  experiment: string;
  method: string;
  twist: string;
  n: number;
  rep: number;
  seed: string;
  logZHat: number;
}

export interface ResultsFile {
  rows: ResultRow[];
  oracle: number | null;
}

export interface SummaryRow {
  method: string;
  n: number;
  count: number;
  mean: number;
  stdev: number | null;
  median: number;
}

export interface Meta {
  oracle: number | null;
  oracleMethod: string | null;
  deterministicEstimate: number | null;
  methods: string[] | null;
  nParticles: number[] | null;
}

function splitCsv(text: string): string[][] {
  return text
    .split(/\r?\n/)
    .filter((line) => line.length > 0 && !line.startsWith("#"))
    .map((line) => line.split(","));
}

export function parseResults(text: string): ResultsFile {
  const lines = splitCsv(text);
  if (lines.length === 0) throw new Error("results file has no header");
  const header = lines[0];
  const col = (name: string) => {
    const i = header.indexOf(name);
    if (i < 0) throw new Error(`results file missing column ${name}`);
    return i;
  };
  const c = {
    experiment: col("experiment"),
    method: col("method"),
    twist: col("twist"),
    n: col("N"),
    rep: col("rep"),
    seed: col("seed"),
    logZ: col("log_Z_hat"),
  };
  const rows: ResultRow[] = [];
  let oracle: number | null = null;
  for (const cells of lines.slice(1)) {
    if (cells[c.method] === "oracle") {
      oracle = Number(cells[c.logZ]);
      continue;
    }
    rows.push({
      experiment: cells[c.experiment],
      method: cells[c.method],
      twist: cells[c.twist],
      n: Number(cells[c.n]),
      rep: Number(cells[c.rep]),
      seed: cells[c.seed],
      logZHat: Number(cells[c.logZ]),
    });
  }
  return { rows, oracle };
}

export function parseSummary(text: string): SummaryRow[] {
  const lines = splitCsv(text);
  const header = lines[0];
  const idx = (name: string) => header.indexOf(name);
  return lines.slice(1).map((cells) => ({
    method: cells[idx("method")],
    n: Number(cells[idx("N")]),
    count: Number(cells[idx("count")]),
    mean: Number(cells[idx("mean")]),
    stdev: cells[idx("stdev")] === "" ? null : Number(cells[idx("stdev")]),
    median: Number(cells[idx("median")]),
  }));
}

export function parseMeta(text: string): Meta {
  const doc = JSON.parse(text);
  const config = doc.config ?? {};
  return {
    oracle: doc.oracle ?? null,
    oracleMethod: doc.oracle_method ?? null,
    deterministicEstimate: doc.deterministic_estimate ?? null,
    methods: config.methods ?? null,
    nParticles: config.n_particles ?? null,
  };
}
