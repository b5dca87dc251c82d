"""Stateful HTTP/JSON inference service: sessions, clicks, masks.

One session owns one interactive segmentation sequence. Requests within a
session are serialized by a per-session lock (a losing concurrent writer
gets 409); sessions idle past the TTL are evicted. Masks travel as
run-length-encoded strings over the row-major flattening.
"""

from __future__ import annotations

import base64
import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import tensor as T
from .backbone import PemedModel, load_checkpoint
from .engine import InteractiveSession, binarize
from .errors import OutOfBoundsClickError, PemedError
from .harness import dsc
from .prompts import Click, load_image
from .tensor import Tensor

DEFAULT_TTL_MINUTES = 30.0
DEFAULT_MAX_BODY = 8 * 1024 * 1024


# -- mask RLE ----------------------------------------------------------------


def encode_mask_rle(mask: np.ndarray) -> str:
    """`H,W|start,len;...` runs of 1-pixels over the row-major flat mask."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    h, w = m.shape
    flat = m.reshape(-1).astype(bool)
    edges = np.flatnonzero(np.diff(np.concatenate(([False], flat, [False])).astype(np.int8)))
    starts, ends = edges[::2], edges[1::2]
    runs = ";".join(f"{s},{e - s}" for s, e in zip(starts, ends))
    return f"{h},{w}|{runs}"


def decode_mask_rle(s: str) -> np.ndarray:
    """Inverse of encode_mask_rle; raises ValueError on malformed input."""
    header, _, runs = s.partition("|")
    h, w = (int(v) for v in header.split(","))
    flat = np.zeros(h * w, dtype=np.uint8)
    if runs:
        for run in runs.split(";"):
            start, length = (int(v) for v in run.split(","))
            if start < 0 or length <= 0 or start + length > h * w:
                raise ValueError(f"run {run!r} out of range")
            flat[start : start + length] = 1
    return flat.reshape(h, w)


# -- session store -------------------------------------------------------------


@dataclass
class SessionRecord:
    session_id: str
    session: InteractiveSession
    created_at: float
    last_active: float
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    def __init__(self, ttl_seconds: float):
        self.ttl = ttl_seconds
        self._records: dict[str, SessionRecord] = {}
        self._guard = threading.Lock()

    def create(self, session: InteractiveSession) -> SessionRecord:
        record = SessionRecord(
            session_id=secrets.token_hex(16),
            session=session,
            created_at=time.monotonic(),
            last_active=time.monotonic(),
        )
        with self._guard:
            self._records[record.session_id] = record
        return record

    def get(self, session_id: str) -> SessionRecord | None:
        with self._guard:
            record = self._records.get(session_id)
            if record is None:
                return None
            if time.monotonic() - record.last_active > self.ttl:
                del self._records[session_id]
                return None
            return record

    def delete(self, session_id: str) -> bool:
        with self._guard:
            return self._records.pop(session_id, None) is not None

    def sweep(self):
        now = time.monotonic()
        with self._guard:
            dead = [k for k, r in self._records.items() if now - r.last_active > self.ttl]
            for k in dead:
                del self._records[k]

    def __len__(self):
        with self._guard:
            return len(self._records)


# -- request handling -----------------------------------------------------------


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str = ""):
        super().__init__(message or code)
        self.status = status
        self.code = code


def _resize_map(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[1] == size and arr.shape[2] == size:
        return arr
    with T.no_grad():
        return T.bilinear_upsample(Tensor(arr), (size, size)).numpy()


class PemedService:
    """Transport-independent request handlers; the HTTP layer is a shim."""

    def __init__(self, model: PemedModel, ttl_minutes: float = DEFAULT_TTL_MINUTES, max_body: int = DEFAULT_MAX_BODY):
        self.model = model
        self.store = SessionStore(ttl_seconds=ttl_minutes * 60.0)
        self.max_body = max_body
        self.checkpoint_id = getattr(model, "checkpoint_id", "unsaved")

    # each handler: (payload dict) -> (status, body dict | None)

    def healthz(self) -> tuple[int, dict]:
        return 200, {"status": "ok", "checkpoint_id": self.checkpoint_id}

    def create_session(self, payload: dict) -> tuple[int, dict]:
        image = self._decode_payload_image(payload, "image")
        gt_img = self._decode_payload_image(payload, "gt", optional=True)
        size = self.model.config.input_size
        image = _resize_map(image, size)
        gt = None
        if gt_img is not None:
            gt = _resize_map(gt_img, size)[0] >= 0.5
        record = self.store.create(InteractiveSession(self.model, image, gt=gt))
        return 200, {"session_id": record.session_id, "height": size, "width": size}

    def add_click(self, session_id: str, payload: dict) -> tuple[int, dict]:
        record = self._record(session_id)
        if not record.lock.acquire(blocking=False):
            raise ApiError(409, "CONCURRENT_MODIFICATION", "session busy with another request")
        try:
            click = self._parse_click(payload)
            try:
                mask = record.session.add_click(click)
            except OutOfBoundsClickError as e:
                raise ApiError(400, e.code, str(e)) from None
            record.last_active = time.monotonic()
            return 200, self._mask_response(record, mask)
        finally:
            record.lock.release()

    def undo(self, session_id: str) -> tuple[int, dict]:
        record = self._record(session_id)
        if not record.lock.acquire(blocking=False):
            raise ApiError(409, "CONCURRENT_MODIFICATION", "session busy with another request")
        try:
            session = record.session
            if session.state is None or session.state.t == 0:
                raise ApiError(400, "NOTHING_TO_UNDO", "no clicks recorded")
            # recurrence cannot be rolled back in place: replay all but the last
            clicks = [Click(c.x, c.y, c.polarity) for c in session.state.clicks[:-1]]
            mask = session.replay(clicks)
            record.last_active = time.monotonic()
            return 200, self._mask_response(record, mask)
        finally:
            record.lock.release()

    def reset(self, session_id: str) -> tuple[int, None]:
        record = self._record(session_id)
        if not record.lock.acquire(blocking=False):
            raise ApiError(409, "CONCURRENT_MODIFICATION", "session busy with another request")
        try:
            record.session.reset()
            record.last_active = time.monotonic()
            return 204, None
        finally:
            record.lock.release()

    def delete(self, session_id: str) -> tuple[int, None]:
        if not self.store.delete(session_id):
            raise ApiError(404, "SESSION_NOT_FOUND", session_id)
        return 204, None

    # -- helpers ---------------------------------------------------------

    def _record(self, session_id: str) -> SessionRecord:
        record = self.store.get(session_id)
        if record is None:
            raise ApiError(404, "SESSION_NOT_FOUND", session_id)
        return record

    def _mask_response(self, record: SessionRecord, mask: np.ndarray) -> dict:
        binary = binarize(mask)
        body = {
            "mask_rle": encode_mask_rle(binary),
            "click_count": record.session.click_count,
        }
        if record.session.gt is not None:
            body["dsc"] = dsc(binary[0], record.session.gt)
        return body

    def _parse_click(self, payload: dict) -> Click:
        try:
            x, y = int(payload["x"]), int(payload["y"])
            polarity = payload["polarity"]
        except (KeyError, TypeError, ValueError) as e:
            raise ApiError(400, "BAD_REQUEST", f"click payload invalid: {e}") from None
        if polarity not in ("positive", "negative"):
            raise ApiError(400, "BAD_REQUEST", f"bad polarity {polarity!r}")
        return Click(x=x, y=y, polarity=polarity)

    def _decode_payload_image(self, payload: dict, prefix: str, optional: bool = False):
        for key, fmt in ((f"{prefix}_pgm_b64", "PGM"), (f"{prefix}_png_b64", "PNG8")):
            if key in payload:
                try:
                    raw = base64.b64decode(payload[key], validate=True)
                except (ValueError, TypeError) as e:
                    raise ApiError(400, "DECODE_ERROR", f"{key}: bad base64: {e}") from None
                try:
                    return load_image(raw, fmt).numpy()
                except PemedError as e:
                    raise ApiError(400, e.code, f"{key}: {e}") from None
        if optional:
            return None
        raise ApiError(400, "BAD_REQUEST", f"missing {prefix}_pgm_b64 or {prefix}_png_b64")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "pemed"

    def log_message(self, fmt, *args):  # route through quiet flag
        if not getattr(self.server, "quiet", True):
            super().log_message(fmt, *args)

    @property
    def service(self) -> PemedService:
        return self.server.service

    def _send(self, status: int, body: dict | None):
        data = b"" if body is None else json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        if data:
            self.wfile.write(data)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.service.max_body:
            raise ApiError(413, "PAYLOAD_TOO_LARGE", f"{length} bytes > {self.service.max_body}")
        raw = self.rfile.read(length) if length else b"{}"
        try:
            payload = json.loads(raw or b"{}")
        except ValueError as e:
            raise ApiError(400, "BAD_JSON", str(e)) from None
        if not isinstance(payload, dict):
            raise ApiError(400, "BAD_JSON", "object body required")
        return payload

    def _route(self, method: str):
        self.service.store.sweep()
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        try:
            if method == "GET" and parts == ["v1", "healthz"]:
                return self._send(*self.service.healthz())
            if method == "POST" and parts == ["v1", "sessions"]:
                return self._send(*self.service.create_session(self._read_json()))
            if len(parts) >= 3 and parts[:2] == ["v1", "sessions"]:
                sid = parts[2]
                if method == "DELETE" and len(parts) == 3:
                    return self._send(*self.service.delete(sid))
                if method == "POST" and len(parts) == 4:
                    action = parts[3]
                    if action == "clicks":
                        return self._send(*self.service.add_click(sid, self._read_json()))
                    if action == "reset":
                        return self._send(*self.service.reset(sid))
                    if action == "undo":
                        return self._send(*self.service.undo(sid))
            raise ApiError(404, "NOT_FOUND", self.path)
        except ApiError as e:
            self._send(e.status, {"error": e.code, "message": str(e)})
        except Exception as e:  # defensive: never leak a stack trace as a hang
            self._send(500, {"error": "INTERNAL", "message": str(e)})

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")

    def do_DELETE(self):
        self._route("DELETE")


def make_server(service: PemedService, host: str = "127.0.0.1", port: int = 0, quiet: bool = True) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _Handler)
    server.service = service
    server.quiet = quiet
    return server


def serve(checkpoint_path, host: str = "0.0.0.0", port: int = 8000, ttl_minutes: float = DEFAULT_TTL_MINUTES):
    model = load_checkpoint(checkpoint_path)
    service = PemedService(model, ttl_minutes=ttl_minutes)
    server = make_server(service, host, port, quiet=False)
    print(f"serving checkpoint {service.checkpoint_id} on {host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
