// Console round trip against a live annotation service: submit labels
// through the console controller, confirm the stored document, the
// progress increment, and that the chart equals the association payload.
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { chartGroups } from "../src/chart.js";
import { ConsoleController } from "../src/controller.js";
import { ConsoleState } from "../src/state.js";

const PORT = 18731 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;

const SETUP_PY = `
import sys
from datetime import datetime, timedelta, timezone
import numpy as np
from aupipe.data import FrameRecord, PainReport, save_manifest, save_pain_reports
from aupipe.imgio import write_image

root = sys.argv[1]
t0 = datetime(2022, 3, 1, 12, 0, tzinfo=timezone.utc)
rng = np.random.default_rng(0)
frames = []
for i in range(3):
    path = f"{root}/frame{i}.png"
    write_image(path, rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
    frames.append(FrameRecord(f"frame{i}", "p1", t0 + timedelta(minutes=5 * i), path))
save_manifest(f"{root}/manifest.csv", frames)
save_pain_reports(f"{root}/reports.csv", [PainReport("p1", t0, dvprs=3)])
`;

let workdir: string;
let server: ChildProcess | undefined;

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 30_000;
  let lastError: unknown;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${BASE}/api/progress`);
      if (response.ok) {
        return;
      }
    } catch (err) {
      lastError = err;
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
  throw new Error(`annotation service did not come up: ${lastError}`);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "aupipe-console-"));
  execFileSync("python3", ["-c", SETUP_PY, workdir]);
  server = spawn(
    "python3",
    [
      "-m",
      "aupipe.cli",
      "serve",
      "--manifest", join(workdir, "manifest.csv"),
      "--annotations", join(workdir, "annotations.jsonl"),
      "--reports", join(workdir, "reports.csv"),
      "--host", "127.0.0.1",
      "--port", String(PORT),
    ],
    { stdio: "ignore" },
  );
  await waitForServer();
});

afterAll(() => {
  server?.kill();
  rmSync(workdir, { recursive: true, force: true });
});

describe("console round trip", () => {
  const api = new ApiClient(BASE);
  const state = new ConsoleState();
  const controller = new ConsoleController(api, state);

  it("loads the first frame with the full AU schema", async () => {
    state.setAnnotator("console-user");
    await controller.loadNext();
    expect(state.status).toBe("annotating");
    expect(state.frame?.frame_id).toBe("frame0");
    expect(state.frame?.au_schema.map((e) => e.au_id)).toEqual([
      4, 6, 7, 9, 10, 12, 20, 24, 25, 26, 27, 43,
    ]);
    const image = await fetch(api.imageUrl("frame0"));
    expect(image.status).toBe(200);
    expect(image.headers.get("content-type")).toBe("image/png");
  });

  it("submits working labels and auto-advances", async () => {
    state.toggle(25);
    state.toggle(43);
    state.setIntensity(43, 1);
    const before = (await api.progress()).annotators["console-user"] ?? 0;

    const status = await controller.submit();
    expect(status).toBe(201);
    expect(state.frame?.frame_id).toBe("frame1"); // advanced
    expect(state.working).toEqual({}); // fresh labels for the new frame

    // stored document is retrievable from the journal the service writes
    const journal = readFileSync(join(workdir, "annotations.jsonl"), "utf-8").trim();
    const doc = JSON.parse(journal.split("\n").at(-1)!);
    expect(doc.frame_id).toBe("frame0");
    expect(doc.annotator_id).toBe("console-user");
    expect(doc.labels).toEqual({ "25": { present: true }, "43": { present: true, intensity: 1 } });

    // progress incremented server-side and in console state
    expect(state.progress?.annotators["console-user"]).toBe(before + 1);
    expect(state.progress?.consolidated_frames).toBe(1);
  });

  it("upserts on resubmission of the same frame", async () => {
    const result = await api.submit({
      frame_id: "frame0",
      annotator_id: "console-user",
      labels: { "25": { present: true } },
    });
    expect(result.status).toBe(200); // updated, not created
    expect(result.doc.labels).toEqual({ "25": { present: true } });
  });

  it("renders the association chart from the exact API payload", async () => {
    const payload = await api.association();
    const groups = chartGroups(payload);
    const flattened = groups.flatMap((group) =>
      group.bars.map((bar) => ({
        au_id: bar.auId,
        category: group.category,
        present_count: bar.presentCount,
        denominator: bar.denominator,
        percentage: bar.percentage,
      })),
    );
    const expected = [...payload.rows].sort(
      (a, b) => a.au_id - b.au_id || a.category.localeCompare(b.category),
    );
    const actual = [...flattened].sort(
      (a, b) => a.au_id - b.au_id || a.category.localeCompare(b.category),
    );
    expect(actual).toEqual(expected);

    // the one labeled frame sits within an hour of the mild report
    const mild25 = payload.rows.find((r) => r.au_id === 25 && r.category === "mild");
    expect(mild25).toEqual({
      au_id: 25,
      category: "mild",
      present_count: 1,
      denominator: 1,
      percentage: 100.0,
    });
  });

  it("reports an empty queue with 204 semantics after all frames are done", async () => {
    for (let i = 0; i < 2; i++) {
      state.toggle(26);
      const status = await controller.submit();
      expect(status).toBe(201);
    }
    expect(state.status).toBe("done");
    expect(state.frame).toBeNull();
  });
});
