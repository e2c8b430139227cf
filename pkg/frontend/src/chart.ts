// Association table -> grouped bar chart data. Values pass through
// untouched so the chart always equals the API payload.
import type { AssociationTable } from "./api.js";

export interface Bar {
  auId: number;
  percentage: number | null;
  presentCount: number;
  denominator: number;
  label: string;
}

export interface ChartGroup {
  category: string;
  bars: Bar[];
}

export function chartGroups(table: AssociationTable): ChartGroup[] {
  return table.categories.map((category) => ({
    category,
    bars: table.rows
      .filter((row) => row.category === category)
      .map((row) => ({
        auId: row.au_id,
        percentage: row.percentage,
        presentCount: row.present_count,
        denominator: row.denominator,
        label:
          row.percentage === null
            ? "no frames"
            : `${row.percentage.toFixed(1)}% (${row.present_count}/${row.denominator})`,
      })),
  }));
}
