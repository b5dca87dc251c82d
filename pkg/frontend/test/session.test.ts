import assert from "node:assert/strict";
import { test } from "node:test";

import {
  ApiError,
  freshSession,
  resetSession,
  StateSyncError,
  submitClick,
  Transport,
  TransportResponse,
  undoLast,
  UiSession,
} from "../src/session.js";

function fullMaskRle(h: number, w: number): string {
  return `${h},${w}|0,${h * w}`;
}

/** Scripted transport: shifts one canned response per request. */
class MockTransport implements Transport {
  readonly log: { path: string; body: unknown }[] = [];

  constructor(private responses: TransportResponse[]) {}

  async post(path: string, body: unknown): Promise<TransportResponse> {
    this.log.push({ path, body });
    const next = this.responses.shift();
    if (!next) throw new Error("mock transport exhausted");
    return next;
  }

  async delete(path: string): Promise<TransportResponse> {
    return this.post(path, undefined);
  }
}

function snapshot(s: UiSession): string {
  return JSON.stringify(s);
}

test("successful click appends history and decodes the mask", async () => {
  const session = freshSession("abc", 8, 8, 2);
  const transport = new MockTransport([
    { status: 200, body: { mask_rle: fullMaskRle(8, 8), click_count: 1, dsc: 0.75 } },
  ]);
  const next = await submitClick(session, 5, 5, "positive", transport);
  assert.equal(next.clicks.length, 1);
  assert.deepEqual(next.clicks[0], { x: 2, y: 2, polarity: "positive" });
  assert.equal(next.mask?.data[0], 1);
  assert.deepEqual(next.dscHistory, [0.75]);
  assert.deepEqual(transport.log[0].path, "/v1/sessions/abc/clicks");
  // original state untouched
  assert.equal(session.clicks.length, 0);
  assert.equal(session.mask, null);
});

test("http failure leaves the session exactly as it was", async () => {
  const base = freshSession("abc", 8, 8, 1);
  const withOne = await submitClick(
    base,
    3,
    3,
    "positive",
    new MockTransport([{ status: 200, body: { mask_rle: fullMaskRle(8, 8), click_count: 1 } }]),
  );
  const before = snapshot(withOne);
  const failing = new MockTransport([
    { status: 404, body: { error: "SESSION_NOT_FOUND", message: "expired" } },
  ]);
  await assert.rejects(submitClick(withOne, 1, 1, "negative", failing), (e: unknown) => {
    assert.ok(e instanceof ApiError);
    assert.equal(e.status, 404);
    assert.equal(e.code, "SESSION_NOT_FOUND");
    return true;
  });
  assert.equal(snapshot(withOne), before, "failed request must not mutate local history");
});

test("click-count drift from the server is detected", async () => {
  const session = freshSession("abc", 4, 4, 1);
  const transport = new MockTransport([
    { status: 200, body: { mask_rle: fullMaskRle(4, 4), click_count: 5 } },
  ]);
  await assert.rejects(submitClick(session, 0, 0, "positive", transport), StateSyncError);
});

test("mask dimension drift is detected", async () => {
  const session = freshSession("abc", 4, 4, 1);
  const transport = new MockTransport([
    { status: 200, body: { mask_rle: fullMaskRle(8, 8), click_count: 1 } },
  ]);
  await assert.rejects(submitClick(session, 0, 0, "positive", transport), StateSyncError);
});

test("in-flight sessions refuse a second click", async () => {
  const session = { ...freshSession("abc", 4, 4, 1), inFlight: true };
  await assert.rejects(submitClick(session, 0, 0, "positive", new MockTransport([])), StateSyncError);
});

test("undo shrinks history by one and replays the prefix mask", async () => {
  let s = freshSession("abc", 4, 4, 1);
  const t = new MockTransport([
    { status: 200, body: { mask_rle: fullMaskRle(4, 4), click_count: 1, dsc: 0.5 } },
    { status: 200, body: { mask_rle: "4,4|0,8", click_count: 2, dsc: 0.8 } },
    { status: 200, body: { mask_rle: fullMaskRle(4, 4), click_count: 1, dsc: 0.5 } },
  ]);
  s = await submitClick(s, 0, 0, "positive", t);
  s = await submitClick(s, 1, 1, "negative", t);
  assert.deepEqual(s.dscHistory, [0.5, 0.8]);
  s = await undoLast(s, t);
  assert.equal(s.clicks.length, 1);
  assert.deepEqual(s.dscHistory, [0.5]);
  assert.equal(s.mask?.data.every((v) => v === 1), true);
  assert.equal(t.log[2].path, "/v1/sessions/abc/undo");
});

test("undo with empty history refuses locally", async () => {
  await assert.rejects(undoLast(freshSession("abc", 4, 4, 1), new MockTransport([])), StateSyncError);
});

test("reset clears clicks, mask and dsc history", async () => {
  let s = freshSession("abc", 4, 4, 1);
  const t = new MockTransport([
    { status: 200, body: { mask_rle: fullMaskRle(4, 4), click_count: 1 } },
    { status: 204, body: null },
  ]);
  s = await submitClick(s, 0, 0, "positive", t);
  s = await resetSession(s, t);
  assert.equal(s.clicks.length, 0);
  assert.equal(s.mask, null);
  assert.deepEqual(s.dscHistory, []);
});

test("reset failure propagates and preserves state", async () => {
  let s = freshSession("abc", 4, 4, 1);
  const t = new MockTransport([
    { status: 200, body: { mask_rle: fullMaskRle(4, 4), click_count: 1 } },
    { status: 409, body: { error: "CONCURRENT_MODIFICATION" } },
  ]);
  s = await submitClick(s, 0, 0, "positive", t);
  const before = snapshot(s);
  await assert.rejects(resetSession(s, t), ApiError);
  assert.equal(snapshot(s), before);
});
