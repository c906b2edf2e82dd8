"""Request/response messaging shared by every service: newline-delimited
canonical-JSON envelopes over TCP, plus an in-process transport with the
same call contract so integration tests run without sockets.

An envelope is {"id","op","body","version"}; the id is echoed verbatim in
the response, and an unknown op yields a structured error, never a dropped
connection. Frames are capped at 1 MiB including the trailing newline.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable
from urllib.parse import parse_qs, urlsplit

from .canonical import canonical_bytes, parse

MAX_FRAME = 1 << 20  # bytes, newline included
PROTOCOL_VERSION = 1


class WireError(Exception):
    pass


class FrameTooLarge(WireError):
    pass


class ProtocolError(WireError):
    pass


class ServiceError(Exception):
    """Application-level failure carried in a response body as {"error": ...}."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Envelope:
    id: str
    op: str
    body: Any
    version: int = PROTOCOL_VERSION

    @classmethod
    def request(cls, op: str, body: Any) -> "Envelope":
        return cls(id=str(uuid.uuid4()), op=op, body=body)

    def reply(self, body: Any) -> "Envelope":
        return Envelope(id=self.id, op=self.op, body=body)


def encode_frame(envelope: Envelope) -> bytes:
    try:
        payload = canonical_bytes(
            {
                "id": envelope.id,
                "op": envelope.op,
                "body": envelope.body,
                "version": envelope.version,
            }
        )
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"unencodable envelope body: {exc}") from exc
    frame = payload + b"\n"
    if len(frame) > MAX_FRAME:
        raise FrameTooLarge(f"frame is {len(frame)} bytes, limit {MAX_FRAME}")
    return frame


def _envelope_from_obj(obj: Any) -> Envelope:
    if not isinstance(obj, dict):
        raise ProtocolError("envelope is not a JSON object")
    for name in ("id", "op", "version"):
        if name not in obj:
            raise ProtocolError(f"envelope is missing required field {name!r}")
    if "body" not in obj:
        raise ProtocolError("envelope is missing required field 'body'")
    if not isinstance(obj["id"], str) or not isinstance(obj["op"], str):
        raise ProtocolError("envelope id and op must be strings")
    if not isinstance(obj["version"], int) or isinstance(obj["version"], bool):
        raise ProtocolError("envelope version must be an integer")
    return Envelope(id=obj["id"], op=obj["op"], body=obj["body"], version=obj["version"])


def decode_frame(data: bytes) -> Envelope:
    """Decode exactly one frame (trailing newline optional)."""
    if len(data) > MAX_FRAME:
        raise FrameTooLarge(f"frame is {len(data)} bytes, limit {MAX_FRAME}")
    line = data.rstrip(b"\n")
    if b"\n" in line:
        raise ProtocolError("more than one frame in input")
    try:
        obj = parse(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    return _envelope_from_obj(obj)


def decode_frames(data: bytes) -> list[Envelope]:
    """Decode a buffer of concatenated frames, in order."""
    out = []
    for line in data.split(b"\n"):
        if line:
            out.append(decode_frame(line))
    return out


class Dispatcher:
    """Routes envelopes to per-op handlers, mapping failures to error bodies."""

    def __init__(self, handlers: dict[str, Callable[[Any], Any]]):
        self._handlers = dict(handlers)

    @property
    def ops(self) -> tuple[str, ...]:
        return tuple(sorted(self._handlers))

    def handle(self, envelope: Envelope) -> Envelope:
        handler = self._handlers.get(envelope.op)
        if handler is None:
            return envelope.reply(_error_body("UnknownOp", f"unsupported op {envelope.op!r}"))
        try:
            return envelope.reply(handler(envelope.body))
        except ServiceError as exc:
            return envelope.reply(_error_body(exc.code, exc.message))
        except Exception as exc:  # never leak a traceback over the wire
            return envelope.reply(_error_body("Internal", f"{type(exc).__name__}: {exc}"))


def _error_body(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


# ---------------------------------------------------------------------------
# In-process transport

_local_lock = threading.Lock()
_local_endpoints: dict[str, Dispatcher] = {}

LOCAL_PREFIX = "local:"


def register_local(name: str, dispatcher: Dispatcher) -> str:
    """Expose a dispatcher under "local:<name>"; returns the endpoint string."""
    with _local_lock:
        if name in _local_endpoints:
            raise ValueError(f"local endpoint {name!r} already registered")
        _local_endpoints[name] = dispatcher
    return LOCAL_PREFIX + name


def unregister_local(name: str) -> None:
    with _local_lock:
        _local_endpoints.pop(name, None)


def _local_call(name: str, envelope: Envelope, timeout: float) -> Envelope:
    with _local_lock:
        dispatcher = _local_endpoints.get(name)
    if dispatcher is None:
        raise ConnectionRefusedError(f"no local endpoint {name!r}")
    result: list[Envelope] = []

    def run():
        result.append(dispatcher.handle(envelope))

    worker = threading.Thread(target=run, daemon=True)
    worker.start()
    worker.join(timeout)
    if worker.is_alive():
        raise TimeoutError(f"local endpoint {name!r} did not answer within {timeout}s")
    if not result:
        raise ProtocolError(f"local endpoint {name!r} produced no response")
    return result[0]


# ---------------------------------------------------------------------------
# TCP transport

class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                line = self.rfile.readline(MAX_FRAME + 1)
            except (ConnectionError, OSError):
                return
            if not line:
                return
            if len(line) > MAX_FRAME:
                self._reply(Envelope(id="", op="", body=_error_body("FrameTooLarge", "frame exceeds 1 MiB")))
                return  # cannot resync inside an oversize line; drop the connection
            try:
                envelope = decode_frame(line)
            except WireError as exc:
                self._reply(Envelope(id="", op="", body=_error_body("ProtocolError", str(exc))))
                continue
            self._reply(self.server.dispatcher.handle(envelope))  # type: ignore[attr-defined]

    def _reply(self, envelope: Envelope) -> None:
        try:
            frame = encode_frame(envelope)
        except WireError as exc:  # handler returned something unserializable
            frame = encode_frame(envelope.reply(_error_body("Internal", str(exc))))
        try:
            self.wfile.write(frame)
            self.wfile.flush()
        except (ConnectionError, OSError):
            pass


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class WireServer:
    """A threaded TCP frame server bound to one dispatcher.

    Handles concurrent connections; requests pipelined on one connection get
    their responses in arrival order, matched by envelope id.
    """

    def __init__(self, dispatcher: Dispatcher, host: str = "127.0.0.1", port: int = 0):
        self._server = _TcpServer((host, port), _FrameHandler)
        self._server.dispatcher = dispatcher  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> "WireServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "WireServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _read_frame(sock: socket.socket, deadline: float) -> bytes:
    buf = bytearray()
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError("timed out waiting for response frame")
        sock.settimeout(remaining)
        try:
            chunk = sock.recv(65536)
        except socket.timeout as exc:
            raise TimeoutError("timed out waiting for response frame") from exc
        if not chunk:
            raise ProtocolError("connection closed before a full frame arrived")
        buf.extend(chunk)
        if len(buf) > MAX_FRAME:
            raise FrameTooLarge("response frame exceeds 1 MiB")
        if buf.endswith(b"\n"):
            return bytes(buf)


def call(endpoint: str, envelope: Envelope, timeout: float = 5.0) -> Envelope:
    """Send one envelope and return the correlated response.

    Raises TimeoutError, ConnectionRefusedError, or ProtocolError (id
    mismatch, malformed response). Endpoints are "host:port" or "local:name".
    """
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    if endpoint.startswith(LOCAL_PREFIX):
        response = _local_call(endpoint[len(LOCAL_PREFIX):], envelope, timeout)
    else:
        host, _, port_text = endpoint.rpartition(":")
        if not host or not port_text.isdigit():
            raise ValueError(f"endpoint must be host:port or local:name, got {endpoint!r}")
        deadline = time.monotonic() + timeout
        try:
            with socket.create_connection((host, int(port_text)), timeout=timeout) as sock:
                sock.sendall(encode_frame(envelope))
                response = decode_frame(_read_frame(sock, deadline))
        except socket.timeout as exc:
            raise TimeoutError(f"no response from {endpoint} within {timeout}s") from exc
    if response.id != envelope.id:
        raise ProtocolError(f"response id {response.id!r} does not match request {envelope.id!r}")
    return response


def request(endpoint: str, op: str, body: Any, timeout: float = 5.0) -> Any:
    """Convenience wrapper: fresh correlation id, error bodies raised as ServiceError."""
    response = call(endpoint, Envelope.request(op, body), timeout=timeout)
    if isinstance(response.body, dict) and "error" in response.body:
        err = response.body["error"]
        raise ServiceError(str(err.get("code", "Unknown")), str(err.get("message", "")))
    return response.body


# ---------------------------------------------------------------------------
# Policy URIs

POLICY_SCHEME = "pdp"
CONSENSUS_KINDS = ("majority", "unanimous", "threshold")


@dataclass(frozen=True)
class PolicyUri:
    """pdp://<ep1,ep2,...>/<policy_id>?consensus=majority|unanimous|threshold-k"""

    endpoints: tuple[str, ...]
    policy_id: str
    consensus: str = "majority"
    threshold: int | None = None

    def render(self) -> str:
        kind = f"threshold-{self.threshold}" if self.consensus == "threshold" else self.consensus
        return f"{POLICY_SCHEME}://{','.join(self.endpoints)}/{self.policy_id}?consensus={kind}"

    def __str__(self) -> str:
        return self.render()


def parse_policy_uri(text: str) -> PolicyUri:
    parts = urlsplit(text)
    if parts.scheme != POLICY_SCHEME:
        raise ValueError(f"policy URI must use the {POLICY_SCHEME!r} scheme, got {parts.scheme!r}")
    endpoints = tuple(e for e in parts.netloc.split(",") if e)
    if not endpoints:
        raise ValueError("policy URI has no replica endpoints")
    policy_id = parts.path.lstrip("/")
    if not policy_id or "/" in policy_id:
        raise ValueError("policy URI path must be a single non-empty policy id segment")
    query = parse_qs(parts.query)
    raw = query.get("consensus", ["majority"])[-1]
    threshold = None
    if raw.startswith("threshold-"):
        consensus = "threshold"
        try:
            threshold = int(raw[len("threshold-"):])
        except ValueError:
            raise ValueError(f"bad threshold in consensus parameter {raw!r}") from None
        if not 1 <= threshold <= len(endpoints):
            raise ValueError(
                f"threshold {threshold} out of range for {len(endpoints)} endpoint(s)"
            )
    elif raw in ("majority", "unanimous"):
        consensus = raw
    else:
        raise ValueError(f"unknown consensus rule {raw!r}")
    return PolicyUri(endpoints=endpoints, policy_id=policy_id, consensus=consensus, threshold=threshold)
