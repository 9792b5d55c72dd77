"""Threaded TCP server speaking the log-probability wire protocol.

One handler thread per connection, one request in flight per connection.
Each message is a single JSON line.  On connect the server sends::

    {"op":"hello","protocol":1,"vocab_size":V,"bos_id":b,"eos_id":e,"newline_id":n}

and then answers ``{"op":"logprobs",...}`` requests with either a
``{"req_id":..,"logprobs":[...]}`` response (exactly V entries, token-id
ascending, -inf serialized as the string "-inf") or
``{"req_id":..,"error":...}``.  Unparseable lines close the connection.
"""
from __future__ import annotations

import json
import math
import socketserver
import threading

from .backend import BackendError

PROTOCOL_VERSION = 1


def encode_logprobs(values):
    out = []
    for v in values:
        v = float(v)
        if v == float("-inf"):
            out.append("-inf")
        elif math.isfinite(v):
            out.append(v)
        else:
            raise ValueError(f"backend produced unserializable log-probability {v!r}")
    return out


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        hello = {
            "op": "hello",
            "protocol": PROTOCOL_VERSION,
            "vocab_size": server.backend.vocab_size,
            "bos_id": server.backend.bos_id,
            "eos_id": server.backend.eos_id,
            "newline_id": server.backend.newline_id,
        }
        if server.backend.max_connections is not None:
            hello["max_connections"] = server.backend.max_connections
        self._send(hello)
        for raw in self.rfile:
            try:
                req = json.loads(raw)
            except json.JSONDecodeError:
                return  # unparseable: close the connection
            if not isinstance(req, dict):
                return
            req_id = req.get("req_id")
            if not isinstance(req_id, int):
                return
            try:
                self._send({"req_id": req_id, "logprobs": self._answer(req)})
            except BackendError as e:
                self._send({"req_id": req_id, "error": str(e)})
            except Exception as e:  # defensive: never take the server down
                self._send({"req_id": req_id, "error": f"internal error: {e}"})

    def _answer(self, req):
        if req.get("op") != "logprobs":
            raise BackendError(f"unsupported op {req.get('op')!r}")
        head = req.get("head")
        if head not in ("cond", "uncond", "lm"):
            raise BackendError(f"unsupported head {head!r}")
        backend = self.server.backend
        with self.server.backend_lock:
            values = backend.logprobs(head, req.get("prefix"), req.get("conditioning"))
        values = list(values)
        if len(values) != backend.vocab_size:
            raise BackendError(
                f"backend returned {len(values)} entries, expected {backend.vocab_size}")
        return encode_logprobs(values)

    def _send(self, obj):
        self.wfile.write(json.dumps(obj).encode("utf-8") + b"\n")
        self.wfile.flush()


class ScorerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, backend):
        super().__init__(address, _Handler)
        self.backend = backend
        # Backends declaring single-connection mode get their calls
        # serialized behind one lock; thread-safe backends run concurrently.
        if backend.max_connections == 1:
            self.backend_lock = threading.Lock()
        else:
            self.backend_lock = _NullLock()

    def handle_error(self, request, client_address):
        import sys
        exc = sys.exc_info()[1]
        if isinstance(exc, (BrokenPipeError, ConnectionResetError)):
            return  # clients hanging up mid-response are routine
        super().handle_error(request, client_address)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def serve(backend, listen="127.0.0.1:0", announce=print):
    """Run the server until interrupted; announces the bound endpoint."""
    host, sep, port = listen.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"listen address must look like host:port, got {listen!r}")
    server = ScorerServer((host, int(port)), backend)
    if announce:
        announce(f"listening on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
