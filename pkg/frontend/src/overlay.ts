/**
 * Pure pixel-buffer compositing: mask tint, detection box outlines, and
 * per-box overlap badges. Operates on RGBA Uint8ClampedArray buffers so it
 * is testable without a canvas; main.ts blits the result into ImageData.
 */

import type { DecodedMask } from "./irle.js";
import type { Box, DetectionDto, ReportDto } from "./api.js";

export interface Color {
  r: number;
  g: number;
  b: number;
}

export const MASK_TINT: Color = { r: 255, g: 80, b: 60 };
export const OK_BOX: Color = { r: 90, g: 220, b: 90 };
export const LOW_BOX: Color = { r: 255, g: 60, b: 60 };
export const CLINICIAN_BOX: Color = { r: 80, g: 150, b: 255 };
export const DRAFT_BOX: Color = { r: 255, g: 210, b: 40 };
export const BACKGROUND: Color = { r: 28, g: 28, b: 32 };

export const CLINICIAN_LABEL = "clinician";

export function neutralBase(width: number, height: number): Uint8ClampedArray {
  const buf = new Uint8ClampedArray(width * height * 4);
  for (let p = 0; p < width * height; p++) {
    buf[4 * p] = BACKGROUND.r;
    buf[4 * p + 1] = BACKGROUND.g;
    buf[4 * p + 2] = BACKGROUND.b;
    buf[4 * p + 3] = 255;
  }
  return buf;
}

export function compositeMask(
  base: Uint8ClampedArray,
  width: number,
  height: number,
  mask: DecodedMask,
  tint: Color = MASK_TINT,
  alpha = 0.45,
): Uint8ClampedArray {
  if (mask.width !== width || mask.height !== height) {
    throw new Error(`mask is ${mask.width}x${mask.height}, buffer is ${width}x${height}`);
  }
  if (base.length !== width * height * 4) {
    throw new Error(`buffer length ${base.length} does not match ${width}x${height} RGBA`);
  }
  const out = new Uint8ClampedArray(base);
  const keep = 1 - alpha;
  for (let p = 0; p < width * height; p++) {
    if (!mask.data[p]) continue;
    const i = 4 * p;
    out[i] = Math.round(keep * out[i] + alpha * tint.r);
    out[i + 1] = Math.round(keep * out[i + 1] + alpha * tint.g);
    out[i + 2] = Math.round(keep * out[i + 2] + alpha * tint.b);
    out[i + 3] = 255;
  }
  return out;
}

/** Outline a half-open box in place; the outline lies inside the box. */
export function drawBoxOutline(
  buf: Uint8ClampedArray,
  width: number,
  height: number,
  box: Box,
  color: Color,
  thickness = 1,
): void {
  const x0 = Math.max(0, box.x0);
  const y0 = Math.max(0, box.y0);
  const x1 = Math.min(width, box.x1);
  const y1 = Math.min(height, box.y1);
  if (x1 <= x0 || y1 <= y0) return;
  const t = Math.max(1, thickness);

  const put = (x: number, y: number) => {
    const i = 4 * (y * width + x);
    buf[i] = color.r;
    buf[i + 1] = color.g;
    buf[i + 2] = color.b;
    buf[i + 3] = 255;
  };

  for (let y = y0; y < Math.min(y0 + t, y1); y++) {
    for (let x = x0; x < x1; x++) put(x, y);
  }
  for (let y = Math.max(y1 - t, y0); y < y1; y++) {
    for (let x = x0; x < x1; x++) put(x, y);
  }
  for (let x = x0; x < Math.min(x0 + t, x1); x++) {
    for (let y = y0; y < y1; y++) put(x, y);
  }
  for (let x = Math.max(x1 - t, x0); x < x1; x++) {
    for (let y = y0; y < y1; y++) put(x, y);
  }
}

/** Low-overlap highlighting wins over the clinician color. */
export function boxColor(index: number, detection: DetectionDto, lowBoxes: readonly number[]): Color {
  if (lowBoxes.includes(index)) return LOW_BOX;
  if (detection.label === CLINICIAN_LABEL) return CLINICIAN_BOX;
  return OK_BOX;
}

/** Per-box overlap badge text, keyed by detection index. */
export function overlapBadges(report: ReportDto | null): Map<number, string> {
  const badges = new Map<number, string>();
  if (!report) return badges;
  for (const [index, overlap] of report.per_box_overlap) {
    badges.set(index, `O=${overlap.toFixed(2)}`);
  }
  return badges;
}

export interface FrameInput {
  image: Uint8ClampedArray | null;
  width: number;
  height: number;
  mask: DecodedMask | null;
  detections: readonly DetectionDto[];
  lowBoxes: readonly number[];
  draftBox: Box | null;
}

export function renderFrame(input: FrameInput): Uint8ClampedArray {
  const { width, height } = input;
  let buf = input.image ? new Uint8ClampedArray(input.image) : neutralBase(width, height);
  if (input.mask) {
    buf = compositeMask(buf, width, height, input.mask);
  }
  input.detections.forEach((det, i) => {
    drawBoxOutline(buf, width, height, det.box, boxColor(i, det, input.lowBoxes));
  });
  if (input.draftBox) {
    drawBoxOutline(buf, width, height, input.draftBox, DRAFT_BOX);
  }
  return buf;
}
