/** Box-plot statistics matching the Python summarizer's conventions. */

export interface BoxStats {
  method: string;
  n: number;
  count: number;
  mean: number;
  median: number;
  q1: number;
  q3: number;
  whiskerLow: number;
  whiskerHigh: number;
  outliers: number[];
}

/** Linear-interpolation quantile of an unsorted sample (numpy's default). */
export function quantile(values: number[], q: number): number {
  if (values.length === 0) throw new Error("quantile of empty sample");
  const sorted = [...values].sort((a, b) => a - b);
  const pos = (sorted.length - 1) * q;
  const lo = Math.floor(pos);
  const hi = Math.ceil(pos);
  if (lo === hi) return sorted[lo];
  return sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
}

export function median(values: number[]): number {
  return quantile(values, 0.5);
}

export function mean(values: number[]): number {
  return values.reduce((a, b) => a + b, 0) / values.length;
}

/** Median, quartiles, and whiskers at 1.5 IQR clamped to the data. */
export function boxStats(method: string, n: number, values: number[]): BoxStats {
  const q1 = quantile(values, 0.25);
  const q3 = quantile(values, 0.75);
  const iqr = q3 - q1;
  const loFence = q1 - 1.5 * iqr;
  const hiFence = q3 + 1.5 * iqr;
  const inside = values.filter((v) => v >= loFence && v <= hiFence);
  const whiskerLow = inside.length ? Math.min(...inside) : q1;
  const whiskerHigh = inside.length ? Math.max(...inside) : q3;
  return {
    method,
    n,
    count: values.length,
    mean: mean(values),
    median: median(values),
    q1,
    q3,
    whiskerLow,
    whiskerHigh,
    outliers: values.filter((v) => v < loFence || v > hiFence).sort((a, b) => a - b),
  };
}
