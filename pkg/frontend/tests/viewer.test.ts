import { describe, expect, it } from "vitest";

import { ApiClient, FetchLike } from "../src/api.js";
import { BusyError, ViewerController } from "../src/viewer.js";
import type { MutationStats } from "../src/types.js";

const STATS: MutationStats = {
  voxels_added_or_removed: 5,
  iterations: 2,
  mask_stats: { popcount: 5, total: 100 },
};

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

interface Gate {
  open: () => void;
  promise: Promise<void>;
}

function gate(): Gate {
  let open!: () => void;
  const promise = new Promise<void>((r) => {
    open = r;
  });
  return { open, promise };
}

function sessionFetch(options: { strokeGate?: Gate; failKind?: string } = {}): FetchLike {
  return async (url, init) => {
    if (url.endsWith("/scenes")) return jsonResponse({ scene_id: "scene-1" });
    if (url.endsWith("/sessions")) return jsonResponse({ session_id: "session-1" });
    if (url.includes("/stroke")) {
      if (options.strokeGate) await options.strokeGate.promise;
      if (options.failKind) {
        return jsonResponse({ kind: options.failKind, message: "x" }, 422);
      }
      return jsonResponse(STATS);
    }
    if (url.includes("/grow") || url.includes("/undo")) return jsonResponse(STATS);
    if (url.includes("/mask")) return new Response(new Uint8Array([7, 7]).buffer);
    if (url.includes("/frame")) return new Response(new Uint8Array([1]).buffer);
    throw new Error(`unexpected ${init?.method} ${url}`);
  };
}

async function openViewer(fetchImpl: FetchLike): Promise<ViewerController> {
  const viewer = new ViewerController(new ApiClient("http://x", fetchImpl), {
    imageWidth: 96,
    imageHeight: 96,
  });
  await viewer.open("demo");
  return viewer;
}

describe("single-writer mutation gate", () => {
  it("a second stroke while one is processing is rejected, never concurrent", async () => {
    const g = gate();
    const viewer = await openViewer(sessionFetch({ strokeGate: g }));
    const first = viewer.submitStroke([[1, 1]]);
    expect(viewer.busy).toBe(true);
    await expect(viewer.submitStroke([[2, 2]])).rejects.toBeInstanceOf(BusyError);
    g.open();
    await first;
    expect(viewer.busy).toBe(false);
    // now the gate is free again
    await viewer.submitStroke([[2, 2]]);
    expect(viewer.exportReplayLog().strokes).toHaveLength(2);
  });
});

describe("stroke log and undo", () => {
  it("successful strokes are recorded; undo pops them", async () => {
    const viewer = await openViewer(sessionFetch());
    await viewer.submitStroke([[1, 1], [2, 2]]);
    viewer.polarity = "negative";
    await viewer.submitStroke([[3, 3]]);
    const log = viewer.exportReplayLog();
    expect(log.version).toBe(1);
    expect(log.strokes).toHaveLength(2);
    expect(log.strokes[0].polarity).toBe("positive");
    expect(log.strokes[1].polarity).toBe("negative");
    expect(log.strokes[1].polyline).toEqual([[3, 3]]);
    expect(log.strokes[0].camera.width).toBe(96);

    expect(viewer.canUndo).toBe(true);
    await viewer.undoLast();
    expect(viewer.exportReplayLog().strokes).toHaveLength(1);
    await viewer.undoLast();
    expect(viewer.canUndo).toBe(false);
    await expect(viewer.undoLast()).rejects.toThrow("nothing to undo");
  });

  it("undoing a grow entry keeps the stroke log intact", async () => {
    const viewer = await openViewer(sessionFetch());
    await viewer.submitStroke([[1, 1]]);
    await viewer.growMore(2);
    expect(viewer.canUndo).toBe(true);
    await viewer.undoLast(); // removes the grow, not the stroke
    expect(viewer.exportReplayLog().strokes).toHaveLength(1);
    await viewer.undoLast();
    expect(viewer.exportReplayLog().strokes).toHaveLength(0);
  });

  it("a rejected stroke is not recorded and keeps the path for retry", async () => {
    const viewer = await openViewer(sessionFetch({ failKind: "empty_selection" }));
    await expect(viewer.submitStroke([[4, 5]])).rejects.toMatchObject({
      kind: "empty_selection",
    });
    expect(viewer.exportReplayLog().strokes).toHaveLength(0);
    expect(viewer.canUndo).toBe(false);
    expect(viewer.pendingStroke).toEqual([[4, 5]]);
  });
});

describe("frames", () => {
  it("overlay toggle switches the requested mode", async () => {
    const urls: string[] = [];
    const fetchImpl: FetchLike = async (url, init) => {
      urls.push(url);
      return sessionFetch()(url, init);
    };
    const viewer = await openViewer(fetchImpl);
    viewer.overlay = false;
    await viewer.refreshFrame();
    viewer.overlay = true;
    await viewer.refreshFrame();
    const frames = urls.filter((u) => u.includes("/frame"));
    expect(frames[0]).toContain("mode=rgb");
    expect(frames[1]).toContain("mode=mask_overlay");
    expect(frames[1]).toContain("session=session-1");
  });
});
