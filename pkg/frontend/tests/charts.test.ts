import { describe, expect, it } from "vitest";

import { heatColor, heatmapModel, lineGeometry, metricSeries } from "../src/charts.js";
import type { MatrixRow, RoundMetrics } from "../src/types.js";

function round(r: number, ba: number): RoundMetrics {
  return {
    round: r,
    aggregate: {
      global_val_balanced_accuracy: ba,
      global_val_sensitivity: ba + 0.01,
      global_val_specificity: ba - 0.01,
    },
  };
}

function cell(model: string, site: string, ba: number | null, auc: number | null = ba): MatrixRow {
  return {
    model_site: model,
    test_site: site,
    tp: 1, fp: 1, tn: 1, fn: 1,
    sensitivity: ba, specificity: ba, balanced_accuracy: ba,
    accuracy: ba ?? 0.5, roc_auc: auc,
  };
}

describe("metric series", () => {
  it("produces a 20-point line for a 20-round federation", () => {
    const rounds = Array.from({ length: 20 }, (_, i) => round(i + 1, 0.5 + i * 0.01));
    const series = metricSeries(rounds);
    expect(series).toHaveLength(3);
    for (const line of series) {
      expect(line.points).toHaveLength(20);
      expect(line.points[0].round).toBe(1);
      expect(line.points[19].round).toBe(20);
    }
  });

  it("sorts shuffled rounds and skips rounds lacking the metric", () => {
    const rounds = [round(3, 0.6), round(1, 0.5), { round: 2, aggregate: {} } as RoundMetrics];
    const [ba] = metricSeries(rounds);
    expect(ba.points.map((p) => p.round)).toEqual([1, 3]);
  });

  it("yields empty lines for an empty series (placeholder case)", () => {
    expect(metricSeries([]).every((s) => s.points.length === 0)).toBe(true);
  });
});

describe("heatmap model", () => {
  it("builds 64 cells for an 8x8 matrix", () => {
    const sites = ["s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8"];
    const rows: MatrixRow[] = [];
    for (const model of sites) {
      for (const site of sites) {
        rows.push(cell(model, site, 0.7));
      }
    }
    const model = heatmapModel(rows);
    expect(model.models).toHaveLength(8);
    expect(model.sites).toHaveLength(8);
    expect(model.cells).toHaveLength(64);
  });

  it("marks single-class cells as undefined with a distinct label", () => {
    const model = heatmapModel([cell("m", "a", 0.8), cell("m", "b", null, null)]);
    const undefinedCell = model.cells.find((c) => c.site === "b")!;
    expect(undefinedCell.value).toBeNull();
    expect(undefinedCell.label).toContain("undefined");
    const definedCell = model.cells.find((c) => c.site === "a")!;
    expect(definedCell.value).toBe(0.8);
  });

  it("fills missing (model, site) pairs as undefined instead of crashing", () => {
    const model = heatmapModel([cell("m1", "a", 0.6), cell("m2", "b", 0.7)]);
    expect(model.cells).toHaveLength(4);
    expect(model.cells.filter((c) => c.value === null)).toHaveLength(2);
  });
});

describe("colors and geometry", () => {
  it("maps balanced accuracy to a monotone green scale above 0.5", () => {
    expect(heatColor(0)).toMatch(/^rgb\(/);
    expect(heatColor(1)).toBe("rgb(35,134,84)");
    expect(heatColor(0.5)).toBe("rgb(60,65,75)");
  });

  it("scales points into the canvas and clamps values to [0,1]", () => {
    const [line] = metricSeries([round(1, 0.0), round(2, 1.0)]).slice(0, 1);
    const geometry = lineGeometry([line], 400, 200, 20);
    expect(geometry.polylines[0].points).toHaveLength(2);
    const [[x1, y1], [x2, y2]] = geometry.polylines[0].points;
    expect(x1).toBe(20);
    expect(x2).toBe(380);
    expect(y1).toBeGreaterThan(y2); // higher value sits higher on screen
    expect(geometry.yTicks).toHaveLength(5);
  });
});
