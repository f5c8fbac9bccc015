/** Wire types shared with the HTTP session service. */

export interface CameraJson {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  camera_to_world: number[][];
}

export interface GrowParams {
  sigma_phi?: number;
  sigma_s?: number;
  tau?: number;
  max_iters?: number;
  k?: number;
  seed_threshold?: number | null;
  kmeans_seed?: number;
}

export type Polarity = "positive" | "negative";

export interface StrokeRecord {
  camera: CameraJson;
  polyline: [number, number][];
  radius: number;
  polarity: Polarity;
  params?: GrowParams;
}

/** On-disk replay log; replaying it headlessly reproduces the mask. */
export interface ReplayLog {
  version: 1;
  strokes: StrokeRecord[];
}

export interface MaskStats {
  popcount: number;
  total: number;
}

export interface MutationStats {
  voxels_added_or_removed: number;
  iterations: number;
  mask_stats: MaskStats;
}

export type FrameMode = "rgb" | "feature" | "depth" | "alpha" | "mask_overlay";
