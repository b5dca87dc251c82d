/**
 * Browser app: upload a grayscale image (optional ground truth), place
 * positive clicks with the left button and negative ones with the right,
 * watch the refined mask overlay after every click. A sparkline tracks
 * per-click dice when ground truth was uploaded.
 */

import { HttpTransport } from "./api.js";
import { bytesToBase64, encodePgm } from "./pgm.js";
import {
  freshSession,
  resetSession,
  submitClick,
  undoLast,
  ApiError,
  UiSession,
} from "./session.js";

const serverInput = document.getElementById("server") as HTMLInputElement;
const imageInput = document.getElementById("image-file") as HTMLInputElement;
const gtInput = document.getElementById("gt-file") as HTMLInputElement;
const uploadButton = document.getElementById("upload") as HTMLButtonElement;
const undoButton = document.getElementById("undo") as HTMLButtonElement;
const resetButton = document.getElementById("reset") as HTMLButtonElement;
const canvas = document.getElementById("view") as HTMLCanvasElement;
const sparkCanvas = document.getElementById("spark") as HTMLCanvasElement;
const clickBadge = document.getElementById("click-count") as HTMLSpanElement;
const dscBadge = document.getElementById("dsc") as HTMLSpanElement;
const toastBox = document.getElementById("toast") as HTMLDivElement;

let session: UiSession | null = null;
let baseImage: ImageData | null = null; // serving-resolution grayscale

function transport(): HttpTransport {
  return new HttpTransport(serverInput.value.replace(/\/$/, ""));
}

function toast(message: string) {
  toastBox.textContent = message;
  toastBox.classList.add("show");
  setTimeout(() => toastBox.classList.remove("show"), 4000);
}

async function fileToGray(file: File): Promise<{ gray: Uint8Array; width: number; height: number }> {
  const bitmap = await createImageBitmap(file);
  const off = document.createElement("canvas");
  off.width = bitmap.width;
  off.height = bitmap.height;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const rgba = ctx.getImageData(0, 0, off.width, off.height).data;
  const gray = new Uint8Array(off.width * off.height);
  for (let i = 0; i < gray.length; i++) {
    const o = i * 4;
    gray[i] = Math.round(0.299 * rgba[o] + 0.587 * rgba[o + 1] + 0.114 * rgba[o + 2]);
  }
  return { gray, width: off.width, height: off.height };
}

function pickScale(servingSize: number): number {
  for (const s of [8, 4, 2]) {
    if (servingSize * s <= 768) return s;
  }
  return 1;
}

async function upload() {
  const file = imageInput.files?.[0];
  if (!file) {
    toast("choose an image first");
    return;
  }
  const payload: Record<string, string> = {};
  const img = await fileToGray(file);
  payload.image_pgm_b64 = bytesToBase64(encodePgm(img.gray, img.width, img.height));
  const gtFile = gtInput.files?.[0];
  if (gtFile) {
    const gt = await fileToGray(gtFile);
    payload.gt_pgm_b64 = bytesToBase64(encodePgm(gt.gray, gt.width, gt.height));
  }
  const resp = await transport().post("/v1/sessions", payload);
  if (resp.status >= 400) {
    toast(`upload failed: ${resp.body?.error ?? resp.status}`);
    return;
  }
  const { session_id, width, height } = resp.body;
  session = freshSession(session_id, width, height, pickScale(width));
  baseImage = rescaleToServing(img, width, height);
  render();
  toast(`session ready (${width}x${height})`);
}

function rescaleToServing(
  img: { gray: Uint8Array; width: number; height: number },
  width: number,
  height: number,
): ImageData {
  // nearest-pixel preview; the server does its own resampling for inference
  const out = new ImageData(width, height);
  for (let y = 0; y < height; y++) {
    const sy = Math.min(img.height - 1, Math.floor((y * img.height) / height));
    for (let x = 0; x < width; x++) {
      const sx = Math.min(img.width - 1, Math.floor((x * img.width) / width));
      const v = img.gray[sy * img.width + sx];
      const o = (y * width + x) * 4;
      out.data[o] = out.data[o + 1] = out.data[o + 2] = v;
      out.data[o + 3] = 255;
    }
  }
  return out;
}

function render() {
  if (!session || !baseImage) return;
  const scale = session.displayScale;
  canvas.width = session.width * scale;
  canvas.height = session.height * scale;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;

  const off = document.createElement("canvas");
  off.width = session.width;
  off.height = session.height;
  off.getContext("2d")!.putImageData(baseImage, 0, 0);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);

  if (session.mask) {
    const overlay = new ImageData(session.width, session.height);
    for (let i = 0; i < session.mask.data.length; i++) {
      if (session.mask.data[i]) {
        const o = i * 4;
        overlay.data[o] = 80;
        overlay.data[o + 1] = 200;
        overlay.data[o + 2] = 255;
        overlay.data[o + 3] = 128; // 50% alpha
      }
    }
    const moff = document.createElement("canvas");
    moff.width = session.width;
    moff.height = session.height;
    moff.getContext("2d")!.putImageData(overlay, 0, 0);
    ctx.drawImage(moff, 0, 0, canvas.width, canvas.height);
  }

  for (const c of session.clicks) {
    ctx.beginPath();
    ctx.arc((c.x + 0.5) * scale, (c.y + 0.5) * scale, Math.max(3, scale), 0, Math.PI * 2);
    ctx.fillStyle = c.polarity === "positive" ? "#27c93f" : "#ff5f56";
    ctx.fill();
    ctx.strokeStyle = "#00000088";
    ctx.stroke();
  }

  clickBadge.textContent = String(session.clicks.length);
  const last = session.dscHistory[session.dscHistory.length - 1];
  dscBadge.textContent = last === undefined ? "–" : last.toFixed(4);
  renderSparkline();
  undoButton.disabled = session.clicks.length === 0;
}

function renderSparkline() {
  const ctx = sparkCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, sparkCanvas.width, sparkCanvas.height);
  if (!session || session.dscHistory.length === 0) return;
  const w = sparkCanvas.width;
  const h = sparkCanvas.height;
  ctx.strokeStyle = "#4aa3ff";
  ctx.lineWidth = 2;
  ctx.beginPath();
  session.dscHistory.forEach((v, i) => {
    const x = session!.dscHistory.length === 1 ? w / 2 : (i / (session!.dscHistory.length - 1)) * (w - 8) + 4;
    const y = h - 4 - v * (h - 8);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

async function onCanvasClick(ev: MouseEvent, polarity: "positive" | "negative") {
  ev.preventDefault();
  if (!session) {
    toast("upload an image first");
    return;
  }
  if (session.inFlight) return; // one click in flight per session
  const rect = canvas.getBoundingClientRect();
  const before = session;
  session = { ...session, inFlight: true };
  try {
    session = await submitClick(before, ev.clientX - rect.left, ev.clientY - rect.top, polarity, transport());
  } catch (e) {
    session = before; // failed request leaves history untouched
    if (e instanceof ApiError && e.status === 404) {
      toast("session expired on the server: please re-upload");
    } else {
      toast(`click failed: ${e instanceof Error ? e.message : e}`);
    }
  }
  render();
}

async function onUndo() {
  if (!session || session.clicks.length === 0) return;
  const before = session;
  try {
    session = await undoLast(session, transport());
  } catch (e) {
    session = before;
    toast(`undo failed: ${e instanceof Error ? e.message : e}`);
  }
  render();
}

async function onReset() {
  if (!session) return;
  const before = session;
  try {
    session = await resetSession(session, transport());
  } catch (e) {
    session = before;
    toast(`reset failed: ${e instanceof Error ? e.message : e}`);
  }
  render();
}

uploadButton.addEventListener("click", () => void upload().catch((e) => toast(String(e))));
canvas.addEventListener("click", (ev) => void onCanvasClick(ev, "positive"));
canvas.addEventListener("contextmenu", (ev) => void onCanvasClick(ev, "negative"));
undoButton.addEventListener("click", () => void onUndo());
resetButton.addEventListener("click", () => void onReset());
