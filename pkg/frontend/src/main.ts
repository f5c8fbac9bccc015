/** Browser wiring: canvas display, pointer-drawn brush strokes with an
 * immediate client-side preview (cleared and replaced by the authoritative
 * server overlay), orbit controls, grow/undo/export buttons, and toasts. */

import { ApiClient, ApiError } from "./api.js";
import { pathToPolyline, Viewport } from "./stroke.js";
import { BusyError, ViewerController } from "./viewer.js";

const IMAGE_W = 192;
const IMAGE_H = 192;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function toast(message: string, isError = true): void {
  const box = el<HTMLDivElement>("toast");
  box.textContent = message;
  box.className = isError ? "toast error" : "toast";
  box.style.opacity = "1";
  setTimeout(() => (box.style.opacity = "0"), 4000);
}

async function start(): Promise<void> {
  const api = new ApiClient(window.location.origin);
  const viewer = new ViewerController(api, {
    imageWidth: IMAGE_W,
    imageHeight: IMAGE_H,
  });
  const canvas = el<HTMLCanvasElement>("view");
  canvas.width = IMAGE_W;
  canvas.height = IMAGE_H;
  const ctx = canvas.getContext("2d")!;
  const statsBox = el<HTMLDivElement>("stats");

  let drawing = false;
  let path: Array<[number, number]> = [];

  function viewport(): Viewport {
    const rect = canvas.getBoundingClientRect();
    return {
      cssWidth: rect.width,
      cssHeight: rect.height,
      imageWidth: IMAGE_W,
      imageHeight: IMAGE_H,
    };
  }

  async function refresh(): Promise<void> {
    try {
      const bytes = await viewer.refreshFrame();
      if (bytes === null) return; // superseded by a newer request
      const blob = new Blob([bytes], { type: "image/png" });
      const bitmap = await createImageBitmap(blob);
      ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
    } catch (e) {
      toast(e instanceof ApiError ? `${e.kind}: ${e.message}` : String(e));
    }
  }

  function showStats(): void {
    const s = viewer.lastStats;
    if (s) {
      statsBox.textContent =
        `changed ${s.voxels_added_or_removed} voxels in ${s.iterations} iterations; ` +
        `mask ${s.mask_stats.popcount}/${s.mask_stats.total}`;
    }
    el<HTMLButtonElement>("undo").disabled = !viewer.canUndo;
  }

  canvas.addEventListener("pointerdown", (ev) => {
    drawing = true;
    path = [[ev.offsetX, ev.offsetY]];
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!drawing) return;
    path.push([ev.offsetX, ev.offsetY]);
    // immediate local brush feedback; the server overlay replaces it
    ctx.fillStyle = viewer.polarity === "positive" ? "rgba(0,200,0,0.6)" : "rgba(220,0,0,0.6)";
    const vp = viewport();
    ctx.beginPath();
    ctx.arc(
      (ev.offsetX * canvas.width) / vp.cssWidth,
      (ev.offsetY * canvas.height) / vp.cssHeight,
      viewer.brushRadius,
      0,
      2 * Math.PI,
    );
    ctx.fill();
  });
  canvas.addEventListener("pointerup", async () => {
    if (!drawing) return;
    drawing = false;
    const polyline = pathToPolyline(path, viewport());
    if (polyline.length === 0) return;
    el<HTMLDivElement>("busy").style.visibility = "visible";
    try {
      await viewer.submitStroke(polyline);
      showStats();
    } catch (e) {
      if (e instanceof BusyError) {
        toast("previous stroke still processing");
      } else if (e instanceof ApiError && e.kind === "empty_selection") {
        toast("stroke hit empty space; path kept, adjust the view and retry");
      } else {
        toast(String(e));
      }
    } finally {
      el<HTMLDivElement>("busy").style.visibility = "hidden";
      await refresh();
    }
  });

  // orbit with the secondary mouse button or shift-drag
  let orbiting = false;
  let last: [number, number] = [0, 0];
  canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());
  canvas.addEventListener("pointerdown", (ev) => {
    if (ev.button === 2 || ev.shiftKey) {
      orbiting = true;
      drawing = false;
      last = [ev.clientX, ev.clientY];
    }
  });
  window.addEventListener("pointermove", (ev) => {
    if (!orbiting) return;
    viewer.orbit.azimuth += (ev.clientX - last[0]) * 0.01;
    viewer.orbit.elevation += (ev.clientY - last[1]) * 0.01;
    last = [ev.clientX, ev.clientY];
  });
  window.addEventListener("pointerup", async () => {
    if (orbiting) {
      orbiting = false;
      await refresh();
    }
  });
  canvas.addEventListener("wheel", async (ev) => {
    ev.preventDefault();
    viewer.orbit.radius *= ev.deltaY > 0 ? 1.1 : 0.9;
    await refresh();
  });

  el<HTMLButtonElement>("polarity").addEventListener("click", (ev) => {
    viewer.polarity = viewer.polarity === "positive" ? "negative" : "positive";
    (ev.target as HTMLButtonElement).textContent =
      viewer.polarity === "positive" ? "brush: positive" : "brush: negative";
  });
  el<HTMLButtonElement>("overlay").addEventListener("click", async (ev) => {
    viewer.overlay = !viewer.overlay;
    (ev.target as HTMLButtonElement).textContent =
      viewer.overlay ? "overlay: on" : "overlay: off";
    await refresh();
  });
  el<HTMLButtonElement>("grow").addEventListener("click", async () => {
    try {
      await viewer.growMore(2);
      showStats();
      await refresh();
    } catch (e) {
      toast(String(e));
    }
  });
  el<HTMLButtonElement>("undo").addEventListener("click", async () => {
    try {
      await viewer.undoLast();
      showStats();
      await refresh();
    } catch (e) {
      toast(String(e));
    }
  });
  el<HTMLButtonElement>("export").addEventListener("click", async () => {
    try {
      const bytes = await viewer.exportMask();
      const a = document.createElement("a");
      a.href = URL.createObjectURL(new Blob([bytes]));
      a.download = "mask.bits";
      a.click();
      const log = document.createElement("a");
      log.href = URL.createObjectURL(
        new Blob([JSON.stringify(viewer.exportReplayLog(), null, 1)]),
      );
      log.download = "replay.json";
      log.click();
    } catch (e) {
      toast(String(e));
    }
  });
  el<HTMLButtonElement>("open").addEventListener("click", async () => {
    const path = el<HTMLInputElement>("scene-path").value;
    try {
      await viewer.open(path);
      toast(`opened ${path}`, false);
      await refresh();
    } catch (e) {
      toast(e instanceof ApiError ? `${e.kind}: ${e.message}` : String(e));
    }
  });
}

window.addEventListener("DOMContentLoaded", () => {
  void start();
});
