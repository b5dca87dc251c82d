/**
 * Client-side session state and the transitions the UI performs against
 * the service. Every transition returns a NEW state object; on any
 * transport or server failure the caller's state is untouched, so failed
 * requests can never corrupt the local click history.
 */

import { decodeRle, DecodedMask } from "./rle.js";
import { mapCanvasToImage } from "./coords.js";

export type Polarity = "positive" | "negative";

export interface ClickRecord {
  x: number;
  y: number;
  polarity: Polarity;
}

export interface UiSession {
  sessionId: string;
  width: number;
  height: number;
  displayScale: number;
  clicks: ClickRecord[];
  mask: DecodedMask | null;
  dscHistory: number[];
  inFlight: boolean;
}

export interface TransportResponse {
  status: number;
  body: any;
}

/** Minimal HTTP seam so tests can script responses. */
export interface Transport {
  post(path: string, body: unknown): Promise<TransportResponse>;
  delete(path: string): Promise<TransportResponse>;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message?: string,
  ) {
    super(message ?? code);
  }
}

export class StateSyncError extends Error {}

interface ClickResponseBody {
  mask_rle: string;
  click_count: number;
  dsc?: number;
}

export function freshSession(sessionId: string, width: number, height: number, displayScale: number): UiSession {
  return {
    sessionId,
    width,
    height,
    displayScale,
    clicks: [],
    mask: null,
    dscHistory: [],
    inFlight: false,
  };
}

function raiseOnError(resp: TransportResponse): void {
  if (resp.status >= 400) {
    throw new ApiError(resp.status, resp.body?.error ?? "UNKNOWN", resp.body?.message);
  }
}

function withMaskResponse(session: UiSession, clicks: ClickRecord[], body: ClickResponseBody): UiSession {
  if (body.click_count !== clicks.length) {
    throw new StateSyncError(`server reports ${body.click_count} clicks, local history has ${clicks.length}`);
  }
  const mask = decodeRle(body.mask_rle);
  if (mask.width !== session.width || mask.height !== session.height) {
    throw new StateSyncError(`mask ${mask.width}x${mask.height} != serving ${session.width}x${session.height}`);
  }
  const dscHistory =
    body.dsc === undefined ? session.dscHistory.slice(0, clicks.length) : [...session.dscHistory.slice(0, clicks.length - 1), body.dsc];
  return { ...session, clicks, mask, dscHistory, inFlight: false };
}

/** Map a canvas point, POST the click, decode the mask into a new state. */
export async function submitClick(
  session: UiSession,
  canvasX: number,
  canvasY: number,
  polarity: Polarity,
  transport: Transport,
): Promise<UiSession> {
  if (session.inFlight) throw new StateSyncError("a click is already in flight");
  const point = mapCanvasToImage(canvasX, canvasY, session.displayScale, session.width, session.height);
  const click: ClickRecord = { ...point, polarity };
  const resp = await transport.post(`/v1/sessions/${session.sessionId}/clicks`, click);
  raiseOnError(resp);
  return withMaskResponse(session, [...session.clicks, click], resp.body as ClickResponseBody);
}

/** Ask the service to drop the last click (it replays the prefix). */
export async function undoLast(session: UiSession, transport: Transport): Promise<UiSession> {
  if (session.clicks.length === 0) throw new StateSyncError("nothing to undo");
  const resp = await transport.post(`/v1/sessions/${session.sessionId}/undo`, {});
  raiseOnError(resp);
  return withMaskResponse(session, session.clicks.slice(0, -1), resp.body as ClickResponseBody);
}

export async function resetSession(session: UiSession, transport: Transport): Promise<UiSession> {
  const resp = await transport.post(`/v1/sessions/${session.sessionId}/reset`, {});
  raiseOnError(resp);
  return { ...session, clicks: [], mask: null, dscHistory: [], inFlight: false };
}
