/** Minimal SVG line-chart geometry (pure functions; DOM-free). */

export interface Series {
  label: string;
  values: Array<number | null>;
  color: string;
}

export interface ChartLayout {
  width: number;
  height: number;
  padLeft: number;
  padRight: number;
  padTop: number;
  padBottom: number;
}

export const DEFAULT_LAYOUT: ChartLayout = {
  width: 640,
  height: 260,
  padLeft: 56,
  padRight: 16,
  padTop: 12,
  padBottom: 28,
};

export interface Scale {
  min: number;
  max: number;
  toPixel(value: number): number;
}

export function linearScale(min: number, max: number, pixelA: number, pixelB: number): Scale {
  const span = max - min || 1;
  return {
    min,
    max,
    toPixel: (v: number) => pixelA + ((v - min) / span) * (pixelB - pixelA),
  };
}

export function valueExtent(seriesList: Series[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const s of seriesList) {
    for (const v of s.values) {
      if (v === null || Number.isNaN(v)) continue;
      lo = Math.min(lo, v);
      hi = Math.max(hi, v);
    }
  }
  if (!Number.isFinite(lo)) return [0, 1];
  if (lo === hi) return [lo - 1, hi + 1];
  const pad = (hi - lo) * 0.08;
  return [lo - pad, hi + pad];
}

/** SVG path over (index, value) points; null values break the line. */
export function seriesPath(
  values: Array<number | null>,
  x: Scale,
  y: Scale,
): string {
  const parts: string[] = [];
  let pen = false;
  values.forEach((v, i) => {
    if (v === null || Number.isNaN(v)) {
      pen = false;
      return;
    }
    const cmd = pen ? "L" : "M";
    parts.push(`${cmd}${x.toPixel(i).toFixed(2)},${y.toPixel(v).toFixed(2)}`);
    pen = true;
  });
  return parts.join(" ");
}

export function axisTicks(min: number, max: number, count = 5): number[] {
  if (count < 2) return [min, max];
  const step = (max - min) / (count - 1);
  return Array.from({ length: count }, (_, i) => min + i * step);
}
