/** Canvas pixel -> serving-resolution image pixel. */

export interface ImagePoint {
  x: number;
  y: number;
}

export function mapCanvasToImage(
  cx: number,
  cy: number,
  displayScale: number,
  width: number,
  height: number,
): ImagePoint {
  if (displayScale <= 0) throw new Error("displayScale must be positive");
  const x = clamp(Math.floor(cx / displayScale), 0, width - 1);
  const y = clamp(Math.floor(cy / displayScale), 0, height - 1);
  return { x, y };
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}
