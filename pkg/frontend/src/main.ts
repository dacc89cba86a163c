/**
 * DOM glue for the clinician review UI. Everything stateful lives in
 * SessionController; this file only wires browser events to controller
 * actions and repaints the canvas from the view model.
 *
 * The service never stores or serves images, so the uploaded frame is kept
 * client-side here. Loading an existing session by id renders the mask and
 * boxes over a neutral background instead.
 */

import { ApiClient } from "./api.js";
import { SessionController, isTerminalState, type SessionView } from "./controller.js";
import { beginDrag, dragRect, endDrag, updateDrag, type DragState } from "./boxdraw.js";
import { overlapBadges, renderFrame, LOW_BOX, OK_BOX } from "./overlay.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const apiBase = (window as unknown as { IRSIS_API_URL?: string }).IRSIS_API_URL ?? "";
const api = new ApiClient(apiBase);
const controller = new SessionController(api);

const canvas = el<HTMLCanvasElement>("viewport");
const ctx = canvas.getContext("2d");
if (!ctx) throw new Error("2d canvas context unavailable");

const fileInput = el<HTMLInputElement>("image-file");
const queryInput = el<HTMLInputElement>("query");
const createBtn = el<HTMLButtonElement>("create");
const sessionInput = el<HTMLInputElement>("session-id");
const loadBtn = el<HTMLButtonElement>("load");
const stepBtn = el<HTMLButtonElement>("step");
const acceptBtn = el<HTMLButtonElement>("accept");
const rejectBtn = el<HTMLButtonElement>("reject");
const correctionInput = el<HTMLInputElement>("correction");
const submitBtn = el<HTMLButtonElement>("submit-feedback");
const clearBtn = el<HTMLButtonElement>("clear-draft");
const slider = el<HTMLInputElement>("iteration");
const sliderLabel = el<HTMLSpanElement>("iteration-label");
const stateLabel = el<HTMLSpanElement>("session-state");
const errorBox = el<HTMLDivElement>("error");

// Uploaded frame, client-side only (RGBA, matching the overlay buffers).
let imageRgba: Uint8ClampedArray | null = null;
let imageW = 0;
let imageH = 0;
let drag: DragState | null = null;

async function fileToBase64(file: File): Promise<string> {
  const bytes = new Uint8Array(await file.arrayBuffer());
  let bin = "";
  for (let i = 0; i < bytes.length; i += 1) bin += String.fromCharCode(bytes[i]);
  return btoa(bin);
}

async function fileToPixels(file: File): Promise<void> {
  const bitmap = await createImageBitmap(file);
  const off = document.createElement("canvas");
  off.width = bitmap.width;
  off.height = bitmap.height;
  const octx = off.getContext("2d");
  if (!octx) throw new Error("2d canvas context unavailable");
  octx.drawImage(bitmap, 0, 0);
  imageW = bitmap.width;
  imageH = bitmap.height;
  imageRgba = new Uint8ClampedArray(octx.getImageData(0, 0, imageW, imageH).data);
}

function canvasPoint(ev: PointerEvent): { x: number; y: number } {
  const r = canvas.getBoundingClientRect();
  return {
    x: ((ev.clientX - r.left) / r.width) * canvas.width,
    y: ((ev.clientY - r.top) / r.height) * canvas.height,
  };
}

function paint(view: SessionView): void {
  const w = view.mask ? view.mask.width : imageW || 160;
  const h = view.mask ? view.mask.height : imageH || 120;
  canvas.width = w;
  canvas.height = h;

  const base = imageRgba && imageW === w && imageH === h ? imageRgba : null;
  const draftBox =
    view.draft && view.draft.kind === "box_prompt"
      ? view.draft.box
      : drag
        ? dragRect(drag)
        : null;
  const rgba = renderFrame({
    width: w,
    height: h,
    image: base,
    mask: view.mask,
    detections: view.detections,
    lowBoxes: view.lowBoxes,
    draftBox,
  });

  const frame = ctx!.createImageData(w, h);
  frame.data.set(rgba);
  ctx!.putImageData(frame, 0, 0);

  // Per-box overlap badges next to each detection's top-left corner.
  const badges = overlapBadges(view.report);
  ctx!.font = "10px monospace";
  view.detections.forEach((det, i) => {
    const text = badges.get(i);
    if (!text) return;
    const low = view.lowBoxes.includes(i);
    const c = low ? LOW_BOX : OK_BOX;
    ctx!.fillStyle = `rgb(${c.r},${c.g},${c.b})`;
    ctx!.fillText(text, det.box.x0 + 2, Math.max(10, det.box.y0 - 2));
  });
}

function sync(view: SessionView): void {
  const loaded = view.sessionId !== null;
  const terminal = isTerminalState(view.state);
  createBtn.disabled = view.busy;
  loadBtn.disabled = view.busy;
  stepBtn.disabled = view.busy || !loaded || terminal;
  acceptBtn.disabled = view.busy || !loaded || terminal;
  rejectBtn.disabled = view.busy || !loaded || terminal;
  submitBtn.disabled = view.busy || !loaded || view.draft === null;
  clearBtn.disabled = view.busy || view.draft === null;
  slider.disabled = view.busy || view.iterations === 0;

  slider.max = String(Math.max(0, view.iterations - 1));
  slider.value = String(Math.max(0, view.iteration));
  sliderLabel.textContent =
    view.iterations > 0 ? `iteration ${view.iteration} / ${view.iterations - 1}` : "no iterations";
  stateLabel.textContent = loaded ? `${view.sessionId} [${view.state}]` : "no session";
  errorBox.textContent = view.error ?? "";
  errorBox.style.display = view.error ? "block" : "none";

  paint(view);
}

controller.onChange(sync);

createBtn.addEventListener("click", () => {
  void (async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    try {
      await fileToPixels(file);
    } catch {
      errorBox.textContent = `${file.name} could not be decoded as an image`;
      errorBox.style.display = "block";
      return;
    }
    const ok = await controller.createSession({
      image_png_b64: await fileToBase64(file),
      query: queryInput.value || "surgical instrument",
    });
    if (ok) sessionInput.value = controller.view().sessionId ?? "";
  })();
});

loadBtn.addEventListener("click", () => {
  const id = sessionInput.value.trim();
  if (id) void controller.loadSession(id);
});

stepBtn.addEventListener("click", () => void controller.runStep());
acceptBtn.addEventListener("click", () => void controller.accept());
rejectBtn.addEventListener("click", () => void controller.reject());
submitBtn.addEventListener("click", () => void controller.submitDraft());
clearBtn.addEventListener("click", () => controller.clearDraft());

correctionInput.addEventListener("change", () => controller.setCorrection(correctionInput.value));

slider.addEventListener("change", () => void controller.selectIteration(Number(slider.value)));

canvas.addEventListener("pointerdown", (ev) => {
  if (controller.view().busy) return;
  const p = canvasPoint(ev);
  drag = beginDrag(p.x, p.y);
  canvas.setPointerCapture(ev.pointerId);
});

canvas.addEventListener("pointermove", (ev) => {
  if (!drag) return;
  const p = canvasPoint(ev);
  drag = updateDrag(drag, p.x, p.y);
  paint(controller.view());
});

canvas.addEventListener("pointerup", (ev) => {
  if (!drag) return;
  const p = canvasPoint(ev);
  const box = endDrag(updateDrag(drag, p.x, p.y), canvas.width, canvas.height);
  drag = null;
  canvas.releasePointerCapture(ev.pointerId);
  if (box) controller.drawBox(box);
  else paint(controller.view());
});

sync(controller.view());
