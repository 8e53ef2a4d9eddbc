"""Remote inference: a length-prefixed binary protocol over TCP, a threaded
server that runs the full pipeline and persists results, and a client.

Frame layout: magic "BSN1", msg_type u8, payload_len u32, then the payload.
All wire integers (lengths, ids, dims, pixels) are big-endian; the RAW16
files written by storage keep their own little-endian pixel convention.
"""

from __future__ import annotations

import dataclasses
import datetime
import os
import socket
import socketserver
import struct
import threading
import time
from pathlib import Path

import numpy as np

from .imagecore import PIXEL_MAX, Image, write_raw16
from .trainer import Checkpoint, full_pipeline_infer

PROTOCOL_MAGIC = b"BSN1"

MSG_OPTIMIZE_REQUEST = 1
MSG_OPTIMIZE_RESPONSE = 2
MSG_ERROR = 3
MSG_PING = 4
MSG_PONG = 5

STATUS_OK = 0
STATUS_PROTOCOL_ERROR = 1
STATUS_UNSUPPORTED = 2
STATUS_INFERENCE_FAILED = 3

# Generous ceiling on payload size (a 8192x8192 16-bit frame plus headers).
MAX_PAYLOAD = 32 + 2 * 8192 * 8192

_HEADER = struct.Struct(">4sBI")


class ProtocolError(Exception):
    """Malformed frame; the message names the offending byte offset."""


class ServerError(Exception):
    """An Error frame received from the server."""

    def __init__(self, status: int, message: str):
        super().__init__(f"server error (status {status}): {message}")
        self.status = status
        self.server_message = message


@dataclasses.dataclass(frozen=True)
class OptimizeRequest:
    request_id: int
    image: Image
    bit_depth: int = 16


@dataclasses.dataclass(frozen=True)
class OptimizeResponse:
    request_id: int
    status: int
    inference_micros: int
    image: Image
    bit_depth: int = 16


@dataclasses.dataclass(frozen=True)
class ErrorMessage:
    status: int
    message: str


@dataclasses.dataclass(frozen=True)
class Ping:
    pass


@dataclasses.dataclass(frozen=True)
class Pong:
    pass


Message = OptimizeRequest | OptimizeResponse | ErrorMessage | Ping | Pong


def _pixels_to_wire(image: Image) -> bytes:
    return image.to_u16().astype(">u2").tobytes()


def _pixels_from_wire(data: bytes, width: int, height: int, base_offset: int) -> Image:
    expected = 2 * width * height
    if len(data) != expected:
        raise ProtocolError(
            f"pixel block at offset {base_offset} holds {len(data)} bytes, "
            f"expected {expected} for {width}x{height}")
    arr = np.frombuffer(data, dtype=">u2").reshape(height, width)
    return Image(arr.astype(np.float64))


def encode_frame(msg: Message) -> bytes:
    if isinstance(msg, Ping):
        mtype, payload = MSG_PING, b""
    elif isinstance(msg, Pong):
        mtype, payload = MSG_PONG, b""
    elif isinstance(msg, ErrorMessage):
        mtype = MSG_ERROR
        payload = struct.pack(">B3x", msg.status) + msg.message.encode()
    elif isinstance(msg, OptimizeRequest):
        mtype = MSG_OPTIMIZE_REQUEST
        img = msg.image
        payload = struct.pack(">QIIB3x", msg.request_id, img.width, img.height,
                              msg.bit_depth) + _pixels_to_wire(img)
    elif isinstance(msg, OptimizeResponse):
        mtype = MSG_OPTIMIZE_RESPONSE
        img = msg.image
        payload = struct.pack(">QB3xQIIB3x", msg.request_id, msg.status,
                              msg.inference_micros, img.width, img.height,
                              msg.bit_depth) + _pixels_to_wire(img)
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return _HEADER.pack(PROTOCOL_MAGIC, mtype, len(payload)) + payload


def _parse_payload(mtype: int, payload: bytes) -> Message:
    """Payload starts at byte offset 9 of the frame; offsets in errors are
    frame-absolute."""
    base = _HEADER.size
    if mtype == MSG_PING:
        if payload:
            raise ProtocolError(f"ping carries {len(payload)} payload bytes at offset {base}")
        return Ping()
    if mtype == MSG_PONG:
        if payload:
            raise ProtocolError(f"pong carries {len(payload)} payload bytes at offset {base}")
        return Pong()
    if mtype == MSG_ERROR:
        if len(payload) < 4:
            raise ProtocolError(f"error payload truncated at offset {base}")
        status = payload[0]
        return ErrorMessage(status=status, message=payload[4:].decode(errors="replace"))
    if mtype == MSG_OPTIMIZE_REQUEST:
        if len(payload) < 20:
            raise ProtocolError(f"request payload truncated at offset {base}")
        request_id, width, height, bit_depth = struct.unpack(">QIIB3x", payload[:20])
        if width < 1 or height < 1:
            raise ProtocolError(f"invalid dims {width}x{height} at offset {base + 8}")
        image = _pixels_from_wire(payload[20:], width, height, base + 20)
        return OptimizeRequest(request_id=request_id, image=image, bit_depth=bit_depth)
    if mtype == MSG_OPTIMIZE_RESPONSE:
        if len(payload) < 32:
            raise ProtocolError(f"response payload truncated at offset {base}")
        request_id, status, micros, width, height, bit_depth = struct.unpack(
            ">QB3xQIIB3x", payload[:32])
        if width < 1 or height < 1:
            raise ProtocolError(f"invalid dims {width}x{height} at offset {base + 20}")
        image = _pixels_from_wire(payload[32:], width, height, base + 32)
        return OptimizeResponse(request_id=request_id, status=status,
                                inference_micros=micros, image=image,
                                bit_depth=bit_depth)
    raise ProtocolError(f"unknown message type {mtype} at offset 4")


def decode_frame(data: bytes) -> Message:
    """Decode one complete frame; rejects bad magic, unknown type, and any
    length mismatch, naming the byte offset."""
    if len(data) < _HEADER.size:
        raise ProtocolError(f"frame truncated at offset {len(data)}")
    magic, mtype, plen = _HEADER.unpack_from(data)
    if magic != PROTOCOL_MAGIC:
        raise ProtocolError(f"bad magic {magic!r} at offset 0")
    if mtype not in (MSG_OPTIMIZE_REQUEST, MSG_OPTIMIZE_RESPONSE, MSG_ERROR,
                     MSG_PING, MSG_PONG):
        raise ProtocolError(f"unknown message type {mtype} at offset 4")
    if len(data) != _HEADER.size + plen:
        raise ProtocolError(
            f"declared payload {plen} at offset 5 but frame holds "
            f"{len(data) - _HEADER.size}")
    return _parse_payload(mtype, data[_HEADER.size:])


# ---------------------------------------------------------------------------
# Stream framing


def _recv_exact(rfile, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    buf = b""
    while len(buf) < n:
        chunk = rfile.read(n - len(buf))
        if not chunk:
            return None if not buf else buf
        buf += chunk
    return buf


def read_frame(rfile) -> Message | None:
    """Read one frame from a stream; None on EOF before any bytes.

    Raises ProtocolError on bad magic, unknown type, oversized declared
    length, or mid-frame EOF; after these the stream position is unreliable,
    so callers should close the connection.
    """
    header = _recv_exact(rfile, _HEADER.size)
    if header is None:
        return None
    if len(header) < _HEADER.size:
        raise ProtocolError(f"frame truncated at offset {len(header)}")
    magic, mtype, plen = _HEADER.unpack_from(header)
    if magic != PROTOCOL_MAGIC:
        raise ProtocolError(f"bad magic {magic!r} at offset 0")
    if mtype not in (MSG_OPTIMIZE_REQUEST, MSG_OPTIMIZE_RESPONSE, MSG_ERROR,
                     MSG_PING, MSG_PONG):
        raise ProtocolError(f"unknown message type {mtype} at offset 4")
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload {plen} exceeds limit at offset 5")
    payload = b"" if plen == 0 else _recv_exact(rfile, plen)
    if plen and (payload is None or len(payload) < plen):
        got = 0 if payload is None else len(payload)
        raise ProtocolError(f"frame truncated at offset {_HEADER.size + got}")
    return _parse_payload(mtype, payload)


# ---------------------------------------------------------------------------
# Storage


def _atomic_write_raw16(image: Image, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_raw16(image, tmp)
    os.rename(tmp, path)


_storage_lock = threading.Lock()


def store_result(request: OptimizeRequest, response: OptimizeResponse,
                 storage_root, day: datetime.date | None = None) -> tuple[Path, Path]:
    """Persist the raw and optimized images as RAW16 under
    storage_root/YYYY-MM-DD/req_<id>_{raw,opt}[.n].bsr. Never overwrites:
    on collision both files get the same next numeric suffix. Writes are
    write-temp-then-rename."""
    day = day or datetime.date.today()
    folder = Path(storage_root) / day.isoformat()
    folder.mkdir(parents=True, exist_ok=True)
    with _storage_lock:
        n = 0
        while True:
            tag = "" if n == 0 else f".{n}"
            raw_path = folder / f"req_{request.request_id}_raw{tag}.bsr"
            opt_path = folder / f"req_{request.request_id}_opt{tag}.bsr"
            if not raw_path.exists() and not opt_path.exists():
                break
            n += 1
        _atomic_write_raw16(request.image, raw_path)
        _atomic_write_raw16(response.image, opt_path)
    return raw_path, opt_path


# ---------------------------------------------------------------------------
# Server


class InferenceServer(socketserver.ThreadingTCPServer):
    """Concurrent connections; inference itself runs under a bounded worker
    slot (default 1, serializing model access since parameters are shared
    read-only). Malformed but correctly framed messages get an Error frame
    and the connection stays usable; unframeable input gets an Error frame
    and the connection closes."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, checkpoint: Checkpoint, bind_address: tuple[str, int],
                 storage_root, workers: int = 1):
        self.checkpoint = checkpoint
        self.storage_root = Path(storage_root)
        self.inference_slot = threading.Semaphore(max(1, workers))
        super().__init__(bind_address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]


class _Handler(socketserver.StreamRequestHandler):
    def _send(self, msg: Message) -> None:
        self.wfile.write(encode_frame(msg))
        self.wfile.flush()

    def _handle_request(self, req: OptimizeRequest) -> None:
        server: InferenceServer = self.server
        if req.bit_depth != 16:
            self._send(ErrorMessage(STATUS_UNSUPPORTED,
                                    f"unsupported bit depth {req.bit_depth}"))
            return
        try:
            with server.inference_slot:
                t0 = time.perf_counter()
                optimized = full_pipeline_infer(req.image, server.checkpoint)
                micros = int((time.perf_counter() - t0) * 1e6)
        except Exception as exc:
            self._send(ErrorMessage(STATUS_INFERENCE_FAILED, f"inference failed: {exc}"))
            return
        response = OptimizeResponse(request_id=req.request_id, status=STATUS_OK,
                                    inference_micros=micros, image=optimized)
        store_result(req, response, server.storage_root)
        self._send(response)

    def handle(self) -> None:
        while True:
            try:
                msg = read_frame(self.rfile)
            except ProtocolError as exc:
                # Framing is unreliable now; report and drop the connection.
                try:
                    self._send(ErrorMessage(STATUS_PROTOCOL_ERROR, str(exc)))
                except OSError:
                    pass
                return
            except OSError:
                return
            if msg is None:
                return
            try:
                if isinstance(msg, Ping):
                    self._send(Pong())
                elif isinstance(msg, OptimizeRequest):
                    self._handle_request(msg)
                else:
                    self._send(ErrorMessage(
                        STATUS_PROTOCOL_ERROR,
                        f"unexpected message type {type(msg).__name__}"))
            except OSError:
                return


def serve(checkpoint: Checkpoint, bind_address: tuple[str, int], storage_root,
          workers: int = 1) -> InferenceServer:
    """Build and start a server in a background thread; returns the running
    server (use .address for the bound port, .shutdown() to stop)."""
    server = InferenceServer(checkpoint, bind_address, storage_root, workers)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


# ---------------------------------------------------------------------------
# Client


def client_optimize(img: Image, server_address: tuple[str, int],
                    timeout: float = 30.0,
                    request_id: int | None = None) -> tuple[Image, int, int]:
    """Send one image for optimization; returns (optimized image,
    round_trip_micros, inference_micros). Raises ServerError when the server
    answers with an Error frame, ProtocolError on framing violations, and
    the usual socket errors when the server is unreachable."""
    if request_id is None:
        request_id = int.from_bytes(os.urandom(8), "big") >> 1
    request = OptimizeRequest(request_id=request_id, image=img)
    t0 = time.perf_counter()
    with socket.create_connection(server_address, timeout=timeout) as sock:
        rfile = sock.makefile("rb")
        sock.sendall(encode_frame(request))
        reply = read_frame(rfile)
    round_trip = int((time.perf_counter() - t0) * 1e6)
    if reply is None:
        raise ProtocolError("connection closed before a response arrived")
    if isinstance(reply, ErrorMessage):
        raise ServerError(reply.status, reply.message)
    if not isinstance(reply, OptimizeResponse):
        raise ProtocolError(f"unexpected reply type {type(reply).__name__}")
    if reply.request_id != request_id:
        raise ProtocolError(
            f"response correlates to request {reply.request_id}, sent {request_id}")
    if reply.status != STATUS_OK:
        raise ServerError(reply.status, "optimize failed")
    return reply.image, round_trip, reply.inference_micros
