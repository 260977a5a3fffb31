"""Stub HTTP server exposing a :class:`BackendSet` (normally the mocks) over the wire protocol."""

from __future__ import annotations

import contextlib
import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..errors import BackendError, ProtocolError
from . import wire

log = logging.getLogger(__name__)


def _navigate(backends, body):
    emb = body.get("embedding")
    heat = backends.navigator.navigate(
        wire.decode_image(body["thumbnail"]),
        wire.decode_mask(body["mask"]),
        None if emb is None else wire.decode_floats(emb),
    )
    return wire.encode_heatmap(heat)


def _embed(backends, body):
    if "text" in body:
        vec = backends.embedder.embed_text(body["text"])
    elif "patch" in body:
        vec = backends.embedder.embed_patch(wire.decode_patch(body["patch"]))
    else:
        raise ProtocolError("embed request needs 'text' or 'patch'")
    return wire.encode_floats(np.asarray(vec, dtype=np.float64))


def _rephrase(backends, body):
    if backends.rephraser is None:
        raise BackendError("no rephraser configured")
    return backends.rephraser.rephrase(body["text"])


ROUTES = {
    "navigate": _navigate,
    "describe": lambda b, body: b.describer.describe(wire.decode_patch(body["patch"])),
    "embed": _embed,
    "triage": lambda b, body: float(b.triage.score(wire.decode_grid(body["grid"]))),
    "diagnose": lambda b, body: b.diagnoser.diagnose(body["prompt"]),
    "rephrase": _rephrase,
}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Headers and body go out in separate writes; without TCP_NODELAY each
    # response waits on the client's delayed ACK (~40 ms).
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status, envelope):
        data = json.dumps(envelope).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        try:
            self.wfile.write(data)
        except (BrokenPipeError, ConnectionResetError):
            # The client gave up (timeout) before the answer was ready.
            log.debug("client left before the response to %s", self.path)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        if self.server.delay:
            time.sleep(self.server.delay)
        parts = self.path.strip("/").split("/")
        if len(parts) != 2 or parts[0] != "v1" or parts[1] not in ROUTES:
            self._send(404, {"ok": False, "result": None,
                             "error": {"type": "ProtocolError", "message": f"no route {self.path}"}})
            return
        try:
            body = json.loads(raw)
            if not isinstance(body, dict):
                raise ProtocolError("request body must be a JSON object")
            result = ROUTES[parts[1]](self.server.backends, body)
        except BackendError as exc:
            self._send(200, {"ok": False, "result": None,
                             "error": {"type": type(exc).__name__, "message": str(exc)}})
        except (KeyError, TypeError, ValueError) as exc:
            self._send(400, {"ok": False, "result": None,
                             "error": {"type": "ProtocolError", "message": f"bad request: {exc!r}"}})
        except Exception as exc:  # surfaced to the client as a retryable 5xx
            log.exception("backend failure on %s", self.path)
            self._send(500, {"ok": False, "result": None,
                             "error": {"type": "BackendError", "message": str(exc)}})
        else:
            self._send(200, {"ok": True, "result": result, "error": None})


class StubServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, backends, host="127.0.0.1", port=0, delay=0.0):
        super().__init__((host, port), _Handler)
        self.backends = backends
        self.delay = float(delay)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


@contextlib.contextmanager
def running_server(backends, host="127.0.0.1", port=0, delay=0.0):
    """Serve ``backends`` from a background thread for the duration of the block."""
    server = StubServer(backends, host, port, delay)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
        thread.join()
