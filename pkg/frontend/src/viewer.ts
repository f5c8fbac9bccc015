/** DOM-free viewer logic: orbit/brush/overlay state, the single-writer
 * mutation gate, the recorded stroke log, and frame refresh plumbing.
 *
 * Invariants: the client never computes masks (every displayed mask state is
 * a server render); at most one mutating request is in flight; the recorded
 * stroke log replayed headlessly reproduces the exported mask bit-exactly.
 */

import { ApiClient, ApiError } from "./api.js";
import { clampOrbit, DEFAULT_ORBIT, orbitCamera, OrbitState } from "./camera.js";
import type {
  CameraJson,
  GrowParams,
  MutationStats,
  Polarity,
  ReplayLog,
  StrokeRecord,
} from "./types.js";

export class BusyError extends Error {
  constructor() {
    super("a mutation is already in flight");
  }
}

export interface ViewerOptions {
  imageWidth: number;
  imageHeight: number;
  brushRadius?: number;
  params?: GrowParams;
}

export class ViewerController {
  readonly api: ApiClient;
  orbit: OrbitState = { ...DEFAULT_ORBIT };
  brushRadius: number;
  polarity: Polarity = "positive";
  overlay = true;
  params: GrowParams;
  imageWidth: number;
  imageHeight: number;

  sceneId: string | null = null;
  sessionId: string | null = null;
  lastStats: MutationStats | null = null;
  /** preserved on empty_selection so the user can retry the same path */
  pendingStroke: [number, number][] | null = null;

  private mutationInFlight = false;
  private strokeLog: StrokeRecord[] = [];
  /** mirror of the server-side history entry kinds, for undo bookkeeping */
  private historyKinds: Array<"stroke" | "grow"> = [];

  constructor(api: ApiClient, opts: ViewerOptions) {
    this.api = api;
    this.imageWidth = opts.imageWidth;
    this.imageHeight = opts.imageHeight;
    this.brushRadius = opts.brushRadius ?? 4;
    this.params = opts.params ?? { kmeans_seed: 0 };
  }

  get busy(): boolean {
    return this.mutationInFlight;
  }

  async open(scenePath: string): Promise<void> {
    this.sceneId = await this.api.openScene(scenePath);
    this.sessionId = await this.api.openSession(this.sceneId);
    this.strokeLog = [];
    this.historyKinds = [];
  }

  cameraJson(): CameraJson {
    this.orbit = clampOrbit(this.orbit);
    return orbitCamera(this.orbit, this.imageWidth, this.imageHeight);
  }

  /** Frame for the current state; null when superseded by a newer request. */
  async refreshFrame(): Promise<ArrayBuffer | null> {
    if (!this.sceneId) throw new Error("no scene open");
    const mode = this.overlay ? "mask_overlay" : "rgb";
    return this.api.fetchFrame(
      this.sceneId,
      this.cameraJson(),
      mode,
      this.sessionId ?? undefined,
    );
  }

  private async mutate<T>(fn: () => Promise<T>): Promise<T> {
    if (this.mutationInFlight) throw new BusyError();
    this.mutationInFlight = true;
    try {
      return await fn();
    } finally {
      this.mutationInFlight = false;
    }
  }

  /** Submit a stroke over the given integer image pixels.  On success the
   * record joins the replay log; empty_selection keeps the path for retry. */
  async submitStroke(polyline: [number, number][]): Promise<MutationStats> {
    if (!this.sessionId) throw new Error("no session open");
    const record: StrokeRecord = {
      camera: this.cameraJson(),
      polyline,
      radius: this.brushRadius,
      polarity: this.polarity,
      params: this.params,
    };
    try {
      const stats = await this.mutate(() =>
        this.api.postStroke(this.sessionId as string, record),
      );
      this.strokeLog.push(record);
      this.historyKinds.push("stroke");
      this.lastStats = stats;
      this.pendingStroke = null;
      return stats;
    } catch (e) {
      if (e instanceof ApiError && e.kind === "empty_selection") {
        this.pendingStroke = polyline;
      }
      throw e;
    }
  }

  async growMore(extraIters: number): Promise<MutationStats> {
    if (!this.sessionId) throw new Error("no session open");
    const stats = await this.mutate(() =>
      this.api.grow(this.sessionId as string, extraIters),
    );
    this.historyKinds.push("grow");
    this.lastStats = stats;
    return stats;
  }

  get canUndo(): boolean {
    return this.historyKinds.length > 0;
  }

  async undoLast(): Promise<MutationStats> {
    if (!this.sessionId) throw new Error("no session open");
    if (!this.canUndo) throw new Error("nothing to undo");
    const stats = await this.mutate(() => this.api.undo(this.sessionId as string));
    const kind = this.historyKinds.pop();
    if (kind === "stroke") {
      this.strokeLog.pop();
    }
    this.lastStats = stats;
    return stats;
  }

  async exportMask(): Promise<ArrayBuffer> {
    if (!this.sessionId) throw new Error("no session open");
    return this.api.exportMask(this.sessionId);
  }

  /** The headless-replay file for everything this session applied. */
  exportReplayLog(): ReplayLog {
    return { version: 1, strokes: [...this.strokeLog] };
  }
}
