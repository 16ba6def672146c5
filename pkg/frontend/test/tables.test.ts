import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";
import {
  TUNINGS_HEADERS,
  impactCells,
  impactHeaders,
  renderOverheadTable,
  renderTuningsTable,
  tuningsCells,
} from "../src/tables.js";
import type { ImpactPayload, TuningRow } from "../src/types.js";

const GOLDEN_PATH = fileURLToPath(
  new URL("../../tests/golden/tunings_bob.txt", import.meta.url)
);

// the same six tunings the fixture seeds and the CLI golden file pins
const SIX_TUNINGS: TuningRow[] = [
  { tuning_id: "1", t_step: 1401, attribute: "flow_initial_linear_solver_tolerance", old_value: 1e-8, new_value: 1e-6 },
  { tuning_id: "2", t_step: 1474, attribute: "minimum_linear_solver_tolerance", old_value: 1e-8, new_value: 1e-6 },
  { tuning_id: "3", t_step: 1484, attribute: "flow_initial_linear_solver_tolerance", old_value: 1e-6, new_value: 1e-4 },
  { tuning_id: "4", t_step: 1755, attribute: "max_linear_iterations", old_value: 500, new_value: 300 },
  { tuning_id: "5", t_step: 10061, attribute: "amr/c_fraction", old_value: 0.01, new_value: 0.05 },
  { tuning_id: "6", t_step: 10128, attribute: "max_linear_iterations", old_value: 300, new_value: 200 },
];

function parseGolden(): { headers: string[]; rows: string[][] } {
  const lines = readFileSync(GOLDEN_PATH, "utf-8").trimEnd().split("\n");
  const split = (line: string) => line.trim().split(/\s{2,}/);
  return { headers: split(lines[0]), rows: lines.slice(1).map(split) };
}

describe("tunings table", () => {
  it("matches the CLI golden rows cell for cell", () => {
    const golden = parseGolden();
    expect(TUNINGS_HEADERS).toEqual(golden.headers);
    expect(tuningsCells(SIX_TUNINGS)).toEqual(golden.rows);
  });

  it("renders one table row per tuned attribute", () => {
    const html = renderTuningsTable(SIX_TUNINGS);
    expect(html.match(/<tr>/g)).toHaveLength(7); // header + 6
    expect(html).toContain("<td>1e-8</td>");
    expect(html).toContain("<td>amr/c_fraction</td>");
  });
});

describe("impact table", () => {
  const payload: ImpactPayload = {
    window: 10,
    rows: [
      {
        tuning_id: "1",
        t_step: 1401,
        metrics: {
          elapsed_ms: { before: 17300, after: 18500 },
          linear_iters: { before: 2030, after: 2000 },
        },
        partial_before: false,
        partial_after: true,
      },
    ],
  };

  it("labels elapsed time in seconds like the CLI", () => {
    const headers = impactHeaders(payload);
    expect(headers).toContain("Avg Time (s) Bef");
    expect(headers).toContain("Avg linear_iters Aft");
    expect(headers[headers.length - 1]).toBe("Partial");
  });

  it("scales elapsed to seconds and flags partial windows", () => {
    const cells = impactCells(payload)[0];
    expect(cells).toContain("17.3");
    expect(cells).toContain("18.5");
    expect(cells[cells.length - 1]).toBe("after");
  });
});

describe("overhead table", () => {
  it("renders the component rows plus the total", () => {
    const html = renderOverheadTable({
      components: {
        comp: { seconds: 1407967.18, percent: 98.18 },
        prov: { seconds: 4259.18, percent: 0.3 },
        ext: { seconds: 21367.6, percent: 1.49 },
        s_point: { seconds: 473.24, percent: 0.03 },
        s_action: { seconds: 2.44, percent: 1.7e-5 },
      },
      total_seconds: 1434069.64,
      overhead_seconds: 26102.46,
    });
    expect(html).toContain("<td>comp</td>");
    expect(html).toContain("98.18%");
    expect(html).toContain("1.7e-5%");
    expect(html).toContain("<td>c(Df)</td>");
    expect(html).toContain("100%");
  });
});
