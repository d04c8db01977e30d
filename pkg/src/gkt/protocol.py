"""Wire messages for the feature/logit exchange and the transports carrying them.

Frame layout (all integers little-endian)::

    magic "GKT1" | type u8 | body length u64 | body

Tensors are encoded as ``rank u8 | dims u32[rank] | float32 payload`` and
label vectors as ``count u32 | labels u32[count]``.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

MAGIC = b"GKT1"
HEADER = struct.Struct("<4sBQ")
DEFAULT_MAX_MESSAGE_BYTES = 1 << 30
# Upper bound on elements in a single decoded tensor.
MAX_TENSOR_ELEMENTS = 1 << 32


class ErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    TRUNCATED = 2
    UNKNOWN_TYPE = 3
    DIMENSION_OVERFLOW = 4
    MALFORMED = 5
    OVERSIZED = 6
    DISCONNECTED = 7
    TIMEOUT = 8
    DESYNC = 9
    HANDSHAKE = 10


class ProtocolError(Exception):
    code = ErrorCode.MALFORMED

    def __init__(self, message: str):
        super().__init__(message)


class BadMagicError(ProtocolError):
    code = ErrorCode.BAD_MAGIC


class TruncatedError(ProtocolError):
    code = ErrorCode.TRUNCATED


class UnknownTypeError(ProtocolError):
    code = ErrorCode.UNKNOWN_TYPE


class DimensionOverflowError(ProtocolError):
    code = ErrorCode.DIMENSION_OVERFLOW


class MalformedMessageError(ProtocolError):
    code = ErrorCode.MALFORMED


class OversizedMessageError(ProtocolError):
    code = ErrorCode.OVERSIZED


class PeerDisconnectedError(ProtocolError):
    code = ErrorCode.DISCONNECTED


class TransportTimeoutError(ProtocolError):
    code = ErrorCode.TIMEOUT


class ProtocolDesyncError(ProtocolError):
    code = ErrorCode.DESYNC


class HandshakeError(ProtocolError):
    code = ErrorCode.HANDSHAKE


class MessageType(enum.IntEnum):
    HELLO = 1
    ROUND_BEGIN = 2
    BYE = 3
    ERROR = 4
    CLIENT_UPLOAD = 5
    SERVER_DOWNLOAD = 6
    EVAL_REPORT = 7


# -- messages ------------------------------------------------------------------

def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        return a.shape == b.shape and a.tobytes() == b.tobytes()
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


class Message:
    """Base for wire messages; equality is bitwise on array fields."""

    type: MessageType

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None


@dataclass(eq=False)
class Hello(Message):
    client_id: int
    model_hash: bytes = b"\0" * 32
    type = MessageType.HELLO


@dataclass(eq=False)
class RoundBegin(Message):
    round: int
    seed: int = 0
    type = MessageType.ROUND_BEGIN


@dataclass(eq=False)
class Bye(Message):
    type = MessageType.BYE


@dataclass(eq=False)
class ErrorMessage(Message):
    code: int
    text: str = ""
    type = MessageType.ERROR


@dataclass(eq=False)
class UploadBatch(Message):
    b_idx: int
    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray


@dataclass(eq=False)
class ClientUpload(Message):
    client_id: int
    round: int
    batches: list = field(default_factory=list)
    type = MessageType.CLIENT_UPLOAD

    @property
    def num_samples(self) -> int:
        return sum(len(b.labels) for b in self.batches)


@dataclass(eq=False)
class DownloadBatch(Message):
    b_idx: int
    logits: np.ndarray


@dataclass(eq=False)
class ServerDownload(Message):
    client_id: int
    round: int
    batches: list = field(default_factory=list)
    type = MessageType.SERVER_DOWNLOAD


@dataclass(eq=False)
class EvalReport(Message):
    """Client-side round summary: training losses plus test-set features.

    Carries what the coordinator needs to score the client's deployed model
    (extractor + server) without seeing raw images. Not part of the
    feature/logit exchange.
    """

    client_id: int
    round: int
    train_ce: float = 0.0
    train_kd: float = 0.0
    num_train: int = 0
    features: list = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    type = MessageType.EVAL_REPORT


# -- invariants ----------------------------------------------------------------

def _check_batches(batches, kind: str) -> None:
    last = -1
    for b in batches:
        if b.b_idx <= last:
            raise MalformedMessageError(f"{kind}: b_idx must be strictly increasing, got {b.b_idx} after {last}")
        last = b.b_idx
    if kind == "upload" and len(batches) > 1:
        ref = np.shape(batches[0].features)[1:]
        for b in batches:
            n = len(b.labels)
            if np.shape(b.features)[1:] != ref:
                raise MalformedMessageError(f"upload batch {b.b_idx}: feature shape differs from batch 0")
            if np.shape(b.features)[0] != n or np.shape(b.logits)[0] != n:
                raise MalformedMessageError(f"upload batch {b.b_idx}: features/logits/labels row counts differ")
        sizes = [len(b.labels) for b in batches]
        if any(s != sizes[0] for s in sizes[:-1]) or sizes[-1] > sizes[0]:
            raise MalformedMessageError("upload: only the last batch may be smaller")


def validate(message: Message) -> None:
    if isinstance(message, ClientUpload):
        _check_batches(message.batches, "upload")
    elif isinstance(message, ServerDownload):
        _check_batches(message.batches, "download")


# -- encoding ------------------------------------------------------------------

def _tensor_size(shape) -> int:
    return 1 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def _put_tensor(out: list, arr) -> None:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise MalformedMessageError(f"tensor rank {arr.ndim} exceeds 255")
    out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _put_labels(out: list, labels) -> None:
    labels = np.asarray(labels)
    out.append(struct.pack("<I", len(labels)))
    out.append(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def _put_str(out: list, text: str) -> None:
    raw = text.encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)


def _body(message: Message) -> list:
    out: list = []
    if isinstance(message, Hello):
        if len(message.model_hash) != 32:
            raise MalformedMessageError("model hash must be 32 bytes")
        out.append(struct.pack("<I", message.client_id))
        out.append(bytes(message.model_hash))
    elif isinstance(message, RoundBegin):
        out.append(struct.pack("<IQ", message.round, message.seed))
    elif isinstance(message, Bye):
        pass
    elif isinstance(message, ErrorMessage):
        out.append(struct.pack("<H", message.code))
        _put_str(out, message.text)
    elif isinstance(message, ClientUpload):
        out.append(struct.pack("<III", message.client_id, message.round, len(message.batches)))
        for b in message.batches:
            out.append(struct.pack("<I", b.b_idx))
            _put_tensor(out, b.features)
            _put_tensor(out, b.logits)
            _put_labels(out, b.labels)
    elif isinstance(message, ServerDownload):
        out.append(struct.pack("<III", message.client_id, message.round, len(message.batches)))
        for b in message.batches:
            out.append(struct.pack("<I", b.b_idx))
            _put_tensor(out, b.logits)
    elif isinstance(message, EvalReport):
        out.append(struct.pack("<IIddI", message.client_id, message.round, message.train_ce, message.train_kd,
                               message.num_train))
        out.append(struct.pack("<I", len(message.features)))
        for f in message.features:
            _put_tensor(out, f)
        _put_labels(out, message.labels)
    else:
        raise UnknownTypeError(f"cannot encode {type(message).__name__}")
    return out


def encode(message: Message) -> bytes:
    validate(message)
    body = b"".join(_body(message))
    return HEADER.pack(MAGIC, int(message.type), len(body)) + body


def measure_bytes(message: Message) -> int:
    """On-wire size of ``message``, computed from shapes without encoding it."""
    n = 0
    if isinstance(message, Hello):
        n = 4 + 32
    elif isinstance(message, RoundBegin):
        n = 12
    elif isinstance(message, ErrorMessage):
        n = 2 + 4 + len(message.text.encode("utf-8"))
    elif isinstance(message, ClientUpload):
        n = 12
        for b in message.batches:
            n += 4 + _tensor_size(np.shape(b.features)) + _tensor_size(np.shape(b.logits)) + 4 + 4 * len(b.labels)
    elif isinstance(message, ServerDownload):
        n = 12 + sum(4 + _tensor_size(np.shape(b.logits)) for b in message.batches)
    elif isinstance(message, EvalReport):
        n = 28 + 4 + sum(_tensor_size(np.shape(f)) for f in message.features) + 4 + 4 * len(message.labels)
    elif not isinstance(message, Bye):
        raise UnknownTypeError(f"cannot size {type(message).__name__}")
    return HEADER.size + n


def payload_bytes(message: Message) -> int:
    """Feature bytes of an upload, or soft-label (logit) bytes of a download."""
    if isinstance(message, ClientUpload):
        return sum(4 * int(np.prod(np.shape(b.features))) for b in message.batches)
    if isinstance(message, ServerDownload):
        return sum(4 * int(np.prod(np.shape(b.logits))) for b in message.batches)
    return 0


class _Reader:
    def __init__(self, buf: bytes, max_tensor_elements: int):
        self.buf = memoryview(buf)
        self.pos = 0
        self.max_elements = max_tensor_elements

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"body truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = 1
        for d in dims:
            count *= d
        if count > self.max_elements:
            raise DimensionOverflowError(f"tensor dims {dims} describe {count} elements, limit {self.max_elements}")
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)

    def labels(self) -> np.ndarray:
        (n,) = self.unpack("<I")
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.uint32)

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessageError(f"invalid utf-8 text: {exc}") from None


def decode_header(header: bytes, max_message_bytes: int = DEFAULT_MAX_MESSAGE_BYTES) -> tuple[int, int]:
    if len(header) < HEADER.size:
        raise TruncatedError(f"header truncated: {len(header)} of {HEADER.size} bytes")
    magic, mtype, length = HEADER.unpack(header[:HEADER.size])
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if mtype not in MessageType._value2member_map_:
        raise UnknownTypeError(f"unknown message type {mtype}")
    if length > max_message_bytes:
        raise OversizedMessageError(f"message body of {length} bytes exceeds cap {max_message_bytes}")
    return mtype, length


def decode(data: bytes, max_message_bytes: int = DEFAULT_MAX_MESSAGE_BYTES) -> Message:
    mtype, length = decode_header(data, max_message_bytes)
    body = data[HEADER.size:]
    if len(body) < length:
        raise TruncatedError(f"body truncated: header says {length} bytes, got {len(body)}")
    if len(body) > length:
        raise MalformedMessageError(f"{len(body) - length} trailing bytes after body")
    r = _Reader(body, min(MAX_TENSOR_ELEMENTS, max_message_bytes // 4))
    mtype = MessageType(mtype)
    if mtype == MessageType.HELLO:
        (cid,) = r.unpack("<I")
        msg = Hello(cid, bytes(r.take(32)))
    elif mtype == MessageType.ROUND_BEGIN:
        msg = RoundBegin(*r.unpack("<IQ"))
    elif mtype == MessageType.BYE:
        msg = Bye()
    elif mtype == MessageType.ERROR:
        (code,) = r.unpack("<H")
        msg = ErrorMessage(code, r.string())
    elif mtype == MessageType.CLIENT_UPLOAD:
        cid, rnd, nb = r.unpack("<III")
        batches = []
        for _ in range(nb):
            (b_idx,) = r.unpack("<I")
            batches.append(UploadBatch(b_idx, r.tensor(), r.tensor(), r.labels()))
        msg = ClientUpload(cid, rnd, batches)
    elif mtype == MessageType.SERVER_DOWNLOAD:
        cid, rnd, nb = r.unpack("<III")
        batches = []
        for _ in range(nb):
            (b_idx,) = r.unpack("<I")
            batches.append(DownloadBatch(b_idx, r.tensor()))
        msg = ServerDownload(cid, rnd, batches)
    else:
        cid, rnd, ce, kd, ntrain = r.unpack("<IIddI")
        (nf,) = r.unpack("<I")
        feats = [r.tensor() for _ in range(nf)]
        msg = EvalReport(cid, rnd, ce, kd, ntrain, feats, r.labels())
    if r.pos != len(body):
        raise MalformedMessageError(f"{len(body) - r.pos} unread bytes in {mtype.name} body")
    validate(msg)
    return msg


# -- transports ----------------------------------------------------------------

class Connection:
    """Reliable, ordered, message-oriented endpoint.

    Both transports move encoded frames, so byte counts and decoded messages
    are identical whichever one is used.
    """

    def __init__(self, max_message_bytes: int = DEFAULT_MAX_MESSAGE_BYTES, timeout: Optional[float] = None):
        self.max_message_bytes = max_message_bytes
        self.timeout = timeout
        self.bytes_sent = 0
        self.bytes_received = 0

    def _encode_checked(self, message: Message) -> bytes:
        frame = encode(message)
        if len(frame) - HEADER.size > self.max_message_bytes:
            raise OversizedMessageError(f"message body of {len(frame) - HEADER.size} bytes exceeds cap")
        return frame

    def send(self, message: Message) -> int:
        frame = self._encode_checked(message)
        self.send_frame(frame)
        self.bytes_sent += len(frame)
        return len(frame)

    def recv(self, timeout: Optional[float] = None) -> Message:
        frame = self.recv_frame(self.timeout if timeout is None else timeout)
        self.bytes_received += len(frame)
        return decode(frame, self.max_message_bytes)

    def send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv_frame(self, timeout: Optional[float]) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class InProcessConnection(Connection):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, **kw):
        super().__init__(**kw)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise PeerDisconnectedError("connection closed")
        self._outbox.put(frame)

    def recv_frame(self, timeout):
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeoutError(f"no message within {timeout}s") from None
        if frame is _CLOSED:
            self._inbox.put(_CLOSED)
            raise PeerDisconnectedError("peer closed the connection")
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inprocess_pair(**kw) -> tuple[InProcessConnection, InProcessConnection]:
    a, b = queue.Queue(), queue.Queue()
    return InProcessConnection(a, b, **kw), InProcessConnection(b, a, **kw)


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()

    def send_frame(self, frame: bytes) -> None:
        try:
            with self._send_lock:
                self.sock.sendall(frame)
        except OSError as exc:
            raise PeerDisconnectedError(f"send failed: {exc}") from None

    def _read_exact(self, n: int, started: bool) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise TransportTimeoutError("timed out waiting for data") from None
            except OSError as exc:
                raise PeerDisconnectedError(f"receive failed: {exc}") from None
            if not chunk:
                if not started and got == 0:
                    raise PeerDisconnectedError("peer closed the connection")
                raise TruncatedError(f"connection closed after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
            started = True
        return b"".join(chunks)

    def recv_frame(self, timeout):
        self.sock.settimeout(timeout)
        header = self._read_exact(HEADER.size, started=False)
        _, length = decode_header(header, self.max_message_bytes)
        return header + self._read_exact(length, started=True)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, backlog: int = 64, **conn_kw):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(backlog)
        self.conn_kw = conn_kw

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def accept(self, timeout: Optional[float] = None) -> TcpConnection:
        self.sock.settimeout(timeout)
        try:
            sock, _ = self.sock.accept()
        except socket.timeout:
            raise TransportTimeoutError("no client connected in time") from None
        sock.settimeout(None)
        return TcpConnection(sock, **self.conn_kw)

    def close(self) -> None:
        self.sock.close()


def tcp_connect(host: str, port: int, timeout: Optional[float] = 10.0, **kw) -> TcpConnection:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise PeerDisconnectedError(f"cannot connect to {host}:{port}: {exc}") from None
    sock.settimeout(None)
    return TcpConnection(sock, **kw)
