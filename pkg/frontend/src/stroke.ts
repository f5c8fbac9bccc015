/** Pointer-path handling: canvas CSS coordinates map to exact integer image
 * pixel coordinates (the server rasterizes the brush; the client never
 * computes masks). */

export interface Viewport {
  cssWidth: number;
  cssHeight: number;
  imageWidth: number;
  imageHeight: number;
}

/** One pointer sample in CSS pixels -> integer image pixel (u, v). */
export function toImagePixel(
  cssX: number,
  cssY: number,
  vp: Viewport,
): [number, number] {
  const u = Math.floor((cssX * vp.imageWidth) / vp.cssWidth);
  const v = Math.floor((cssY * vp.imageHeight) / vp.cssHeight);
  return [
    Math.min(Math.max(u, 0), vp.imageWidth - 1),
    Math.min(Math.max(v, 0), vp.imageHeight - 1),
  ];
}

/** Map a whole pointer path, dropping consecutive duplicate pixels. */
export function pathToPolyline(
  path: Array<[number, number]>,
  vp: Viewport,
): [number, number][] {
  const out: [number, number][] = [];
  for (const [x, y] of path) {
    const p = toImagePixel(x, y, vp);
    const last = out[out.length - 1];
    if (!last || last[0] !== p[0] || last[1] !== p[1]) {
      out.push(p);
    }
  }
  return out;
}
