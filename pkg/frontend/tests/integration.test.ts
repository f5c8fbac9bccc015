/** End-to-end round trip against the real session service: a recorded
 * browser session (2 positive + 1 negative stroke on the demo scene)
 * exports a mask bit-identical to a headless CLI replay of its stroke log,
 * and overlay-off frames equal rgb frames pixel-exact.
 *
 * Requires the python package (`pip install -e .`) on PATH; the suite skips
 * itself cleanly when python or the package is unavailable.
 */

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ViewerController } from "../src/viewer.js";
import type { CameraJson } from "../src/types.js";

const PORT = 7912;
const BASE = `http://127.0.0.1:${PORT}`;
const REPO_ROOT = join(__dirname, "..", "..");

function pythonAvailable(): boolean {
  const r = spawnSync("python3", ["-c", "import isrf"], { timeout: 30000 });
  return r.status === 0;
}

const HAVE_PYTHON = pythonAvailable();

function runCli(args: string[], cwd: string): void {
  const r = spawnSync("python3", ["-m", "isrf.cli", ...args], {
    cwd,
    timeout: 180000,
    encoding: "utf8",
  });
  if (r.status !== 0) {
    throw new Error(`isrf ${args[0]} failed: ${r.stderr}\n${r.stdout}`);
  }
}

/** Project a world point through the client camera to image pixel coords. */
function project(cam: CameraJson, p: [number, number, number]): [number, number] {
  const m = cam.camera_to_world;
  const rel = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
  const pc = [
    m[0][0] * rel[0] + m[1][0] * rel[1] + m[2][0] * rel[2],
    m[0][1] * rel[0] + m[1][1] * rel[1] + m[2][1] * rel[2],
    m[0][2] * rel[0] + m[1][2] * rel[1] + m[2][2] * rel[2],
  ];
  return [
    Math.round((cam.fx * pc[0]) / pc[2] + cam.cx - 0.5),
    Math.round((cam.fy * pc[1]) / pc[2] + cam.cy - 0.5),
  ];
}

describe.skipIf(!HAVE_PYTHON)("browser-session round trip (criterion 11)", () => {
  let server: ChildProcess | null = null;
  let work: string;

  beforeAll(async () => {
    work = mkdtempSync(join(tmpdir(), "isrf-ui-"));
    const spec = {
      seed: 3,
      resolution: [20, 20, 20],
      image_size: [48, 48],
      n_train: 2,
      n_test: 0,
      primitives: [
        { kind: "sphere", center: [-0.45, 0.05, 0.0], size: 0.34, albedo: [0.85, 0.3, 0.25], object_id: "sphere" },
        { kind: "box", center: [0.45, -0.05, 0.0], size: [0.55, 0.5, 0.5], albedo: [0.25, 0.45, 0.85], object_id: "box" },
      ],
    };
    writeFileSync(join(work, "spec.json"), JSON.stringify(spec));
    runCli(["synth", "--spec", join(work, "spec.json"), "--out", join(work, "ds")], work);

    server = spawn(
      "python3",
      ["-m", "isrf.cli", "serve", "--listen", `127.0.0.1:${PORT}`],
      { cwd: REPO_ROOT, env: { ...process.env, ISRF_SCENE_ROOT: work }, stdio: "ignore" },
    );
    const api = new ApiClient(BASE);
    for (let tries = 0; tries < 120; tries++) {
      if (await api.healthz()) return;
      await new Promise((r) => setTimeout(r, 500));
    }
    throw new Error("service did not come up");
  }, 240000);

  afterAll(() => {
    server?.kill();
  });

  it("exported mask is bit-identical to the headless replay; overlay-off frames equal rgb", async () => {
    const viewer = new ViewerController(new ApiClient(BASE), {
      imageWidth: 96,
      imageHeight: 96,
      brushRadius: 3,
      params: { kmeans_seed: 0 },
    });
    // view from +z so the two objects sit side by side (the default azimuth
    // looks down the x axis, where the sphere occludes the box)
    viewer.orbit.azimuth = Math.PI / 2;
    viewer.orbit.elevation = 0.1;
    await viewer.open("ds/gt_scene");

    // before any stroke: overlay frames equal rgb frames pixel-exact
    viewer.overlay = false;
    const rgbFrame = await viewer.refreshFrame();
    viewer.overlay = true;
    const overlayEmpty = await viewer.refreshFrame();
    expect(rgbFrame).not.toBeNull();
    expect(Buffer.from(overlayEmpty!).equals(Buffer.from(rgbFrame!))).toBe(true);

    // recorded session: positive on the sphere, positive + negative on the box
    const cam = viewer.cameraJson();
    const sphere = project(cam, [-0.45, 0.05, 0.0]);
    const box = project(cam, [0.45, -0.05, 0.0]);
    const line = (c: [number, number]): [number, number][] => [
      [c[0] - 2, c[1]],
      [c[0] + 2, c[1]],
    ];
    viewer.polarity = "positive";
    const s1 = await viewer.submitStroke(line(sphere));
    expect(s1.mask_stats.popcount).toBeGreaterThan(0);
    await viewer.submitStroke(line(box));
    viewer.polarity = "negative";
    await viewer.submitStroke(line(box));
    expect(viewer.exportReplayLog().strokes).toHaveLength(3);

    // after strokes the overlay differs from rgb, and an overlay-off frame
    // still equals a direct rgb request byte for byte
    viewer.overlay = true;
    const overlayOn = await viewer.refreshFrame();
    viewer.overlay = false;
    const rgbAfter = await viewer.refreshFrame();
    expect(Buffer.from(overlayOn!).equals(Buffer.from(rgbAfter!))).toBe(false);
    const direct = await viewer.api.fetchFrame(
      viewer.sceneId!,
      viewer.cameraJson(),
      "rgb",
      viewer.sessionId!,
    );
    expect(Buffer.from(rgbAfter!).equals(Buffer.from(direct!))).toBe(true);

    const uiMask = Buffer.from(await viewer.exportMask());
    expect(uiMask.length).toBe(Math.ceil((20 * 20 * 20) / 8));

    writeFileSync(join(work, "replay.json"), JSON.stringify(viewer.exportReplayLog()));
    runCli(
      ["segment", "--scene", join(work, "ds", "gt_scene"),
       "--strokes", join(work, "replay.json"), "--out", join(work, "mask.bits")],
      work,
    );
    const cliMask = readFileSync(join(work, "mask.bits"));
    expect(uiMask.equals(cliMask)).toBe(true);
  }, 240000);
});
