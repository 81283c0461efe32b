import { describe, expect, it } from "vitest";

import { axisTicks, linearScale, seriesPath, valueExtent } from "../src/chart.js";

describe("chart geometry", () => {
  it("linear scale maps endpoints to the pixel range", () => {
    const s = linearScale(0, 10, 50, 250);
    expect(s.toPixel(0)).toBe(50);
    expect(s.toPixel(10)).toBe(250);
    expect(s.toPixel(5)).toBe(150);
  });

  it("value extent pads and survives constant series", () => {
    const [lo, hi] = valueExtent([{ label: "a", values: [2, 2, 2], color: "#000" }]);
    expect(lo).toBeLessThan(2);
    expect(hi).toBeGreaterThan(2);
    const [l2, h2] = valueExtent([{ label: "a", values: [null, null], color: "#000" }]);
    expect(l2).toBe(0);
    expect(h2).toBe(1);
  });

  it("series path breaks at nulls", () => {
    const x = linearScale(0, 3, 0, 300);
    const y = linearScale(0, 1, 100, 0);
    const d = seriesPath([0, 1, null, 0.5], x, y);
    const moves = d.split(" ").filter((c) => c.startsWith("M"));
    expect(moves.length).toBe(2); // pen lifts once at the null
  });

  it("axis ticks span the range inclusively", () => {
    const ticks = axisTicks(0, 8, 5);
    expect(ticks[0]).toBe(0);
    expect(ticks[ticks.length - 1]).toBe(8);
    expect(ticks.length).toBe(5);
  });
});
