/** Thin typed client for the session service.  All mask state lives on the
 * server; this module only moves JSON, PNG bytes, and mask bytes. */

import type {
  CameraJson,
  FrameMode,
  MutationStats,
  StrokeRecord,
} from "./types.js";

export class ApiError extends Error {
  kind: string;
  status: number;

  constructor(status: number, kind: string, message: string) {
    super(message);
    this.kind = kind;
    this.status = status;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function toApiError(res: Response): Promise<ApiError> {
  let kind = "http_error";
  let message = res.statusText;
  try {
    const body = (await res.json()) as { kind?: string; message?: string };
    kind = body.kind ?? kind;
    message = body.message ?? message;
  } catch {
    /* non-JSON error body */
  }
  return new ApiError(res.status, kind, message);
}

export class ApiClient {
  private base: string;
  private fetchImpl: FetchLike;
  /** monotonically increasing frame request id for stale-response discard */
  private frameSeq = 0;

  constructor(base: string, fetchImpl?: FetchLike) {
    this.base = base.replace(/\/$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchImpl(`${this.base}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) throw await toApiError(res);
    return (await res.json()) as T;
  }

  async openScene(path: string): Promise<string> {
    const r = await this.postJson<{ scene_id: string }>("/scenes", { path });
    return r.scene_id;
  }

  async openSession(sceneId: string): Promise<string> {
    const r = await this.postJson<{ session_id: string }>("/sessions", {
      scene_id: sceneId,
    });
    return r.session_id;
  }

  frameUrl(
    sceneId: string,
    camera: CameraJson,
    mode: FrameMode,
    sessionId?: string,
  ): string {
    const params = new URLSearchParams({
      cam: JSON.stringify(camera),
      mode,
    });
    if (sessionId) params.set("session", sessionId);
    return `${this.base}/scenes/${sceneId}/frame?${params.toString()}`;
  }

  /** Fetch a frame; returns null if a newer frame request was issued while
   * this one was in flight (stale responses are discarded, not shown). */
  async fetchFrame(
    sceneId: string,
    camera: CameraJson,
    mode: FrameMode,
    sessionId?: string,
  ): Promise<ArrayBuffer | null> {
    const seq = ++this.frameSeq;
    const res = await this.fetchImpl(this.frameUrl(sceneId, camera, mode, sessionId));
    if (!res.ok) throw await toApiError(res);
    const bytes = await res.arrayBuffer();
    return seq === this.frameSeq ? bytes : null;
  }

  async postStroke(sessionId: string, stroke: StrokeRecord): Promise<MutationStats> {
    return this.postJson<MutationStats>(`/sessions/${sessionId}/stroke`, stroke);
  }

  async grow(sessionId: string, extraIters: number): Promise<MutationStats> {
    return this.postJson<MutationStats>(`/sessions/${sessionId}/grow`, {
      extra_iters: extraIters,
    });
  }

  async undo(sessionId: string): Promise<MutationStats> {
    return this.postJson<MutationStats>(`/sessions/${sessionId}/undo`, {});
  }

  async exportMask(sessionId: string): Promise<ArrayBuffer> {
    const res = await this.fetchImpl(`${this.base}/sessions/${sessionId}/mask`);
    if (!res.ok) throw await toApiError(res);
    return res.arrayBuffer();
  }

  async healthz(): Promise<boolean> {
    try {
      const res = await this.fetchImpl(`${this.base}/healthz`);
      return res.ok;
    } catch {
      return false;
    }
  }
}
