import { describe, expect, it } from "vitest";

import type { AssociationTable } from "../src/api.js";
import { chartGroups } from "../src/chart.js";

const TABLE: AssociationTable = {
  categories: ["mild", "moderate", "high"],
  rows: [
    { au_id: 25, category: "mild", present_count: 3, denominator: 8, percentage: 37.5 },
    { au_id: 25, category: "moderate", present_count: 0, denominator: 0, percentage: null },
    { au_id: 25, category: "high", present_count: 2, denominator: 2, percentage: 100.0 },
    { au_id: 43, category: "mild", present_count: 1, denominator: 8, percentage: 12.5 },
    { au_id: 43, category: "moderate", present_count: 0, denominator: 0, percentage: null },
    { au_id: 43, category: "high", present_count: 0, denominator: 2, percentage: 0.0 },
  ],
};

describe("chartGroups", () => {
  it("passes payload values through exactly", () => {
    const groups = chartGroups(TABLE);
    expect(groups.map((g) => g.category)).toEqual(["mild", "moderate", "high"]);
    const mild = groups[0];
    expect(mild.bars.map((b) => [b.auId, b.percentage, b.presentCount, b.denominator])).toEqual([
      [25, 37.5, 3, 8],
      [43, 12.5, 1, 8],
    ]);
    // every (au, category) cell of the payload appears in exactly one bar
    const seen = groups.flatMap((g) => g.bars.map((b) => `${b.auId}/${g.category}/${b.percentage}`));
    const expected = TABLE.rows.map((r) => `${r.au_id}/${r.category}/${r.percentage}`);
    expect(seen.sort()).toEqual(expected.sort());
  });

  it("labels empty cells and formats percentages to one decimal", () => {
    const groups = chartGroups(TABLE);
    expect(groups[1].bars[0].label).toBe("no frames");
    expect(groups[0].bars[0].label).toBe("37.5% (3/8)");
    expect(groups[2].bars[1].label).toBe("0.0% (0/2)");
  });

  it("handles the zero-data state", () => {
    const empty: AssociationTable = { categories: ["mild", "moderate", "high"], rows: [] };
    expect(chartGroups(empty).every((g) => g.bars.length === 0)).toBe(true);
  });
});
