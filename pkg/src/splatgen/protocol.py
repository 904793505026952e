"""Denoiser wire protocol: framing, client, and a loopback test server.

Frame layout (all integers little-endian):
  magic "GGDS" | version u8 = 1 | msg type u8 | payload length u32 | payload
Message types: 1 request, 2 response, 3 error.

Request payload: t u32 | alpha_bar f64 | rank u8 | dims u32 each | flags u8
(bit0 disparity follows, bit1 text follows) | latent f32 row-major |
[disparity f32, spatial dims of the latent] | [text: u32 length + UTF-8].
Response payload: rank u8 | dims u32 each | eps f32 row-major.
Error payload: u32 length + UTF-8 message.

The client keeps exactly one request in flight per connection; open more
connections for concurrency.
"""

from __future__ import annotations

import shlex
import socket
import struct
import subprocess
import threading

import numpy as np

MAGIC = b"GGDS"
VERSION = 1
MSG_REQUEST = 1
MSG_RESPONSE = 2
MSG_ERROR = 3
HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 1 << 30


class ProtocolError(RuntimeError):
    """Base for every wire-level failure."""


class ConnectError(ProtocolError):
    pass


class RequestTimeout(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class ShapeMismatchError(ProtocolError):
    pass


class FrameError(ProtocolError):
    """Malformed or truncated frame."""


class ServerError(ProtocolError):
    """Error frame returned by the peer."""


# ---------------------------------------------------------------------------
# framing


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_header(raw: bytes):
    if len(raw) != HEADER.size:
        raise FrameError(f"short frame header: {len(raw)} bytes")
    magic, version, msg_type, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(
            f"protocol version {version}, expected {VERSION}")
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise FrameError(f"unknown message type {msg_type}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} exceeds limit")
    return msg_type, length


def encode_request(latent: np.ndarray, t: int, alpha_bar: float,
                   disparity: np.ndarray | None = None,
                   text: str | None = None) -> bytes:
    latent = np.ascontiguousarray(latent, dtype="<f4")
    if latent.ndim < 1 or latent.ndim > 255:
        raise ValueError("latent rank out of range")
    flags = (1 if disparity is not None else 0) | (2 if text is not None else 0)
    parts = [struct.pack("<Id", int(t), float(alpha_bar)),
             struct.pack("<B", latent.ndim),
             struct.pack(f"<{latent.ndim}I", *latent.shape),
             struct.pack("<B", flags),
             latent.tobytes()]
    if disparity is not None:
        disparity = np.ascontiguousarray(disparity, dtype="<f4")
        if disparity.shape != latent.shape[:2]:
            raise ValueError(
                f"disparity {disparity.shape} does not match latent spatial "
                f"dims {latent.shape[:2]}")
        parts.append(disparity.tobytes())
    if text is not None:
        enc = text.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)) + enc)
    return b"".join(parts)


def decode_request(payload: bytes):
    """Returns (t, alpha_bar, latent, disparity | None, text | None)."""
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise FrameError("truncated request payload")
        out = payload[off:off + n]
        off += n
        return out

    t, alpha_bar = struct.unpack("<Id", take(12))
    rank = take(1)[0]
    if rank < 1:
        raise FrameError("zero-rank tensor")
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    flags = take(1)[0]
    count = int(np.prod(dims))
    latent = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
    disparity = None
    if flags & 1:
        if rank < 2:
            raise FrameError("disparity flag on a rank-1 latent")
        hw = dims[0] * dims[1]
        disparity = np.frombuffer(take(4 * hw), dtype="<f4").reshape(dims[:2])
    text = None
    if flags & 2:
        (tlen,) = struct.unpack("<I", take(4))
        text = take(tlen).decode("utf-8")
    if off != len(payload):
        raise FrameError(f"{len(payload) - off} trailing bytes in request")
    return int(t), float(alpha_bar), latent.astype(np.float64), \
        None if disparity is None else disparity.astype(np.float64), text


def encode_response(eps: np.ndarray) -> bytes:
    eps = np.ascontiguousarray(eps, dtype="<f4")
    return struct.pack("<B", eps.ndim) \
        + struct.pack(f"<{eps.ndim}I", *eps.shape) + eps.tobytes()


def decode_response(payload: bytes) -> np.ndarray:
    if len(payload) < 1:
        raise FrameError("empty response payload")
    rank = payload[0]
    need = 1 + 4 * rank
    if len(payload) < need:
        raise FrameError("truncated response dims")
    dims = struct.unpack(f"<{rank}I", payload[1:need])
    count = int(np.prod(dims))
    if len(payload) != need + 4 * count:
        raise FrameError(
            f"response payload {len(payload)} bytes, expected {need + 4 * count}")
    return np.frombuffer(payload[need:], dtype="<f4").reshape(dims) \
        .astype(np.float64)


def encode_error(message: str) -> bytes:
    enc = message.encode("utf-8")
    return struct.pack("<I", len(enc)) + enc


def decode_error(payload: bytes) -> str:
    if len(payload) < 4:
        raise FrameError("truncated error payload")
    (n,) = struct.unpack("<I", payload[:4])
    if len(payload) != 4 + n:
        raise FrameError("error payload length mismatch")
    return payload[4:].decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# transports


class _SocketTransport:
    def __init__(self, host: str, port: int, timeout: float):
        self.timeout = timeout
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectError(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)

    def send(self, data: bytes):
        try:
            self.sock.sendall(data)
        except socket.timeout as exc:
            raise RequestTimeout("send timed out") from exc
        except OSError as exc:
            raise ConnectError(f"connection lost: {exc}") from exc

    def recv_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except socket.timeout as exc:
                raise RequestTimeout(
                    f"timed out waiting for {n - got} of {n} bytes") from exc
            except OSError as exc:
                raise ConnectError(f"connection lost: {exc}") from exc
            if not chunk:
                raise FrameError("connection closed mid-frame")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class _StdioTransport:
    """Speaks the protocol over a child process's stdin/stdout."""

    def __init__(self, command: str, timeout: float):
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(
                shlex.split(command), stdin=subprocess.PIPE,
                stdout=subprocess.PIPE)
        except OSError as exc:
            raise ConnectError(f"cannot spawn {command!r}: {exc}") from exc

    def send(self, data: bytes):
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ConnectError(f"server process pipe closed: {exc}") from exc

    def recv_exact(self, n: int) -> bytes:
        out = self.proc.stdout.read(n)
        if out is None or len(out) < n:
            raise FrameError("server process closed mid-frame")
        return out

    def close(self):
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5.0)
        except subprocess.TimeoutExpired:
            self.proc.kill()


def _open_transport(endpoint: str, timeout: float):
    if endpoint.startswith("stdio:"):
        return _StdioTransport(endpoint[len("stdio:"):], timeout)
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ConnectError(
            f"endpoint {endpoint!r} is neither host:port nor stdio:<command>")
    return _SocketTransport(host or "127.0.0.1", int(port), timeout)


# ---------------------------------------------------------------------------
# client


class RemoteDenoiser:
    """Wire-protocol denoiser client; satisfies the denoiser interface."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._transport = None
        self._lock = threading.Lock()

    def connect(self):
        if self._transport is None:
            self._transport = _open_transport(self.endpoint, self.timeout)
        return self

    def close(self):
        if self._transport is not None:
            self._transport.close()
            self._transport = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def predict(self, latent: np.ndarray, t: int, alpha_bar: float,
                disparity: np.ndarray | None = None,
                text: str | None = None) -> np.ndarray:
        latent = np.asarray(latent)
        with self._lock:  # one in-flight request per connection
            self.connect()
            payload = encode_request(latent, t, alpha_bar, disparity, text)
            self._transport.send(encode_frame(MSG_REQUEST, payload))
            msg_type, length = decode_header(
                self._transport.recv_exact(HEADER.size))
            body = self._transport.recv_exact(length)
        if msg_type == MSG_ERROR:
            raise ServerError(decode_error(body))
        if msg_type != MSG_RESPONSE:
            raise FrameError(f"unexpected message type {msg_type} in reply")
        eps = decode_response(body)
        if eps.shape != latent.shape:
            raise ShapeMismatchError(
                f"response dims {eps.shape}, expected {latent.shape}")
        return eps


def remote_eps(endpoint: str, request) -> np.ndarray:
    """One-shot request against `endpoint` for a DenoiserRequest bundle."""
    t = request.latent.t
    with RemoteDenoiser(endpoint) as client:
        return client.predict(request.latent.data, t, request.schedule.at(t),
                              request.disparity, request.text)


# ---------------------------------------------------------------------------
# loopback server (test plumbing; the production server lives elsewhere)


def serve_stream(read_exact, write, denoiser):
    """Answer frames until EOF. Malformed frames get error frames; the
    connection stays open for recoverable faults."""
    while True:
        try:
            raw = read_exact(HEADER.size)
        except EOFError:
            return
        try:
            msg_type, length = decode_header(raw)
            body = read_exact(length)
        except EOFError:
            return
        except ProtocolError as exc:
            write(encode_frame(MSG_ERROR, encode_error(str(exc))))
            continue
        if msg_type != MSG_REQUEST:
            write(encode_frame(MSG_ERROR,
                               encode_error(f"unexpected message type {msg_type}")))
            continue
        try:
            t, alpha_bar, latent, disparity, text = decode_request(body)
            eps = denoiser.predict(latent, t, alpha_bar, disparity, text)
            write(encode_frame(MSG_RESPONSE, encode_response(eps)))
        except Exception as exc:
            write(encode_frame(MSG_ERROR, encode_error(str(exc))))


class LoopbackServer:
    """Threaded TCP server wrapping any denoiser, for in-process tests."""

    def __init__(self, denoiser, host: str = "127.0.0.1"):
        self.denoiser = denoiser
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, 0))
        self.sock.listen(8)
        self.host, self.port = self.sock.getsockname()
        self._threads = []
        self._accept_thread = None
        self._closing = False

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def _client_loop(self, conn):
        def read_exact(n):
            chunks = []
            got = 0
            while got < n:
                chunk = conn.recv(n - got)
                if not chunk:
                    raise EOFError
                chunks.append(chunk)
                got += len(chunk)
            return b"".join(chunks)

        try:
            serve_stream(read_exact, conn.sendall, self.denoiser)
        except OSError:
            pass
        finally:
            conn.close()

    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            th = threading.Thread(target=self._client_loop, args=(conn,),
                                  daemon=True)
            th.start()
            self._threads.append(th)

    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._closing = True
        try:
            self.sock.close()
        except OSError:
            pass
