/**
 * Pointer-drag to half-open box. Coordinates are box edges in image pixel
 * space: dragging from (120,40) to (300,200) yields exactly
 * {x0:120, y0:40, x1:300, y1:200}, so what the clinician draws is what the
 * service receives, with no off-by-one adjustment anywhere.
 */

import type { Box } from "./api.js";

export interface DragState {
  readonly startX: number;
  readonly startY: number;
  readonly curX: number;
  readonly curY: number;
}

export function beginDrag(x: number, y: number): DragState {
  return { startX: x, startY: y, curX: x, curY: y };
}

export function updateDrag(state: DragState, x: number, y: number): DragState {
  return { ...state, curX: x, curY: y };
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

/** Normalized live rectangle for preview; may be degenerate while dragging. */
export function dragRect(state: DragState): Box {
  return {
    x0: Math.min(state.startX, state.curX),
    y0: Math.min(state.startY, state.curY),
    x1: Math.max(state.startX, state.curX),
    y1: Math.max(state.startY, state.curY),
  };
}

/**
 * Finish a drag: clamp edges to the canvas and reject degenerate boxes.
 * Edge coordinates may legitimately equal width/height (half-open).
 */
export function endDrag(state: DragState, width: number, height: number): Box | null {
  const raw = dragRect(state);
  const box = {
    x0: clamp(Math.round(raw.x0), 0, width),
    y0: clamp(Math.round(raw.y0), 0, height),
    x1: clamp(Math.round(raw.x1), 0, width),
    y1: clamp(Math.round(raw.y1), 0, height),
  };
  if (box.x1 <= box.x0 || box.y1 <= box.y0) return null;
  return box;
}
