/** Orbit-camera math producing the server's pinhole convention:
 * +z forward, +x right, +y down, pixel centers at half-integer coords. */

import type { CameraJson } from "./types.js";

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  /** radians around the world y axis */
  azimuth: number;
  /** radians above the horizontal plane (positive looks down, since +y is down) */
  elevation: number;
  fovDeg: number;
}

export const DEFAULT_ORBIT: OrbitState = {
  target: [0, 0, 0],
  radius: 2.6,
  azimuth: Math.PI,
  elevation: 0.15,
  fovDeg: 50,
};

function sub(a: number[], b: number[]): number[] {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: number[], b: number[]): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function norm(a: number[]): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function scale(a: number[], s: number): number[] {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function orbitEye(s: OrbitState): [number, number, number] {
  const ce = Math.cos(s.elevation);
  return [
    s.target[0] + s.radius * ce * Math.cos(s.azimuth),
    s.target[1] - s.radius * Math.sin(s.elevation),
    s.target[2] + s.radius * ce * Math.sin(s.azimuth),
  ];
}

/** Camera-to-world with +z toward the target (columns right, down, forward, eye). */
export function lookAt(
  eye: number[],
  target: number[],
  up: number[] = [0, 1, 0],
): number[][] {
  let fwd = sub(target, eye);
  fwd = scale(fwd, 1 / norm(fwd));
  let upv = up;
  if (Math.abs(fwd[0] * upv[0] + fwd[1] * upv[1] + fwd[2] * upv[2]) > 0.999) {
    upv = [1, 0, 0];
  }
  let right = cross(fwd, upv);
  right = scale(right, 1 / norm(right));
  const down = cross(fwd, right);
  return [
    [right[0], down[0], fwd[0], eye[0]],
    [right[1], down[1], fwd[1], eye[1]],
    [right[2], down[2], fwd[2], eye[2]],
    [0, 0, 0, 1],
  ];
}

export function orbitCamera(s: OrbitState, width: number, height: number): CameraJson {
  const f = (0.5 * width) / Math.tan(((s.fovDeg * Math.PI) / 180) / 2);
  return {
    fx: f,
    fy: f,
    cx: width / 2,
    cy: height / 2,
    width,
    height,
    camera_to_world: lookAt(orbitEye(s), s.target),
  };
}

/** Guards the ViewerState invariant: parameters always yield a valid pinhole. */
export function clampOrbit(s: OrbitState): OrbitState {
  const lim = Math.PI / 2 - 0.01;
  return {
    ...s,
    radius: Math.min(Math.max(s.radius, 0.2), 50),
    elevation: Math.min(Math.max(s.elevation, -lim), lim),
    fovDeg: Math.min(Math.max(s.fovDeg, 10), 120),
  };
}
