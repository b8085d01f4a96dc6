"""Binary frame layout for the coefficient-transmitting protocol.

Frame = magic "SOWP" (4) + version u16 + type u8 + flags u8 + body_len u32 +
body. All integers little-endian; coefficients travel as f32 while core math
stays f64. Reads are bounded and length-prefixed; a frame never makes the
receiver allocate more than MAX_BODY bytes.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ProtocolError

MAGIC = b"SOWP"
PROTOCOL_VERSION = 1
HEADER_LEN = 12  # magic + version + type + flags + body_len
MAX_BODY = 64 * 1024 * 1024

T_HELLO = 1
T_HANDSHAKE = 2
T_INFER_REQ = 3
T_INFER_RESP = 4
T_ERROR = 5

E_MALFORMED = 1
E_INCOMPATIBLE = 2
E_BAD_SPLIT = 3
E_OVERSIZE = 4
E_INTERNAL = 5


def pack_frame(ftype: int, body: bytes, flags: int = 0, version: int = PROTOCOL_VERSION) -> bytes:
    if len(body) > MAX_BODY:
        raise ProtocolError(f"body of {len(body)} bytes exceeds cap")
    return MAGIC + struct.pack("<HBBI", version, ftype, flags, len(body)) + body


def parse_header(header: bytes):
    """(version, type, flags, body_len) from the 12 fixed header bytes."""
    if len(header) != HEADER_LEN:
        raise ProtocolError(f"short header: {len(header)} bytes")
    if header[:4] != MAGIC:
        raise ProtocolError(f"bad magic {header[:4]!r}")
    version, ftype, flags, body_len = struct.unpack("<HBBI", header[4:])
    if body_len > MAX_BODY:
        raise ProtocolError(f"declared body of {body_len} bytes exceeds cap")
    return version, ftype, flags, body_len


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.body):
            raise ProtocolError("body truncated")
        out = self.body[self.off : self.off + n]
        self.off += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f32s(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)

    def done(self):
        if self.off != len(self.body):
            raise ProtocolError(f"{len(self.body) - self.off} trailing bytes")


@dataclass
class SplitInfo:
    split_index: int
    n: int
    m: int
    singular_values: np.ndarray  # k = min(m, n) values
    basis_rows: np.ndarray  # (k, n), right-singular vectors

    @property
    def k(self):
        return self.singular_values.shape[0]


@dataclass
class Handshake:
    protocol_version: int
    splits: dict  # split_index -> SplitInfo
    profile_rows: list = field(default_factory=list)  # (split_index, fraction, drop)


def encode_handshake(hs: Handshake) -> bytes:
    parts = [struct.pack("<H", len(hs.splits))]
    for si in sorted(hs.splits):
        info = hs.splits[si]
        parts.append(struct.pack("<HIII", info.split_index, info.n, info.m, info.k))
        parts.append(np.asarray(info.singular_values, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(info.basis_rows, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(hs.profile_rows)))
    for si, fraction, drop in hs.profile_rows:
        parts.append(struct.pack("<Hff", si, fraction, drop))
    return pack_frame(T_HANDSHAKE, b"".join(parts), version=hs.protocol_version)


def decode_handshake(version: int, body: bytes) -> Handshake:
    rd = _Reader(body)
    n_splits = rd.u16()
    splits = {}
    for _ in range(n_splits):
        si = rd.u16()
        n = rd.u32()
        m = rd.u32()
        k = rd.u32()
        if k > min(m, n) or n == 0:
            raise ProtocolError(f"split {si}: inconsistent sizes n={n} m={m} k={k}")
        svals = rd.f32s(k)
        if np.any(np.diff(svals) > 0):
            raise ProtocolError(f"split {si}: singular values not sorted")
        rows = rd.f32s(k * n).reshape(k, n)
        splits[si] = SplitInfo(si, n, m, svals, rows)
    n_rows = rd.u32()
    profile = []
    for _ in range(n_rows):
        si = rd.u16()
        fraction, drop = struct.unpack("<ff", rd.take(8))
        profile.append((si, fraction, drop))
    rd.done()
    return Handshake(protocol_version=version, splits=splits, profile_rows=profile)


@dataclass
class InferRequest:
    split_index: int
    m_prime: int
    request_id: int
    coefficients: np.ndarray  # m_prime values, singular-value order


def encode_infer_request(req: InferRequest) -> bytes:
    if len(req.coefficients) != req.m_prime:
        raise ProtocolError("coefficient count != m_prime")
    body = struct.pack("<HIQ", req.split_index, req.m_prime, req.request_id)
    body += np.asarray(req.coefficients, dtype="<f4").tobytes()
    return pack_frame(T_INFER_REQ, body)


def decode_infer_request(body: bytes) -> InferRequest:
    rd = _Reader(body)
    si = rd.u16()
    m_prime = rd.u32()
    request_id = rd.u64()
    if len(body) - rd.off != 4 * m_prime:
        raise ProtocolError(f"expected {4 * m_prime} coefficient bytes, got {len(body) - rd.off}")
    coeffs = rd.f32s(m_prime)
    rd.done()
    if not np.all(np.isfinite(coeffs)):
        raise ProtocolError("non-finite coefficients")
    return InferRequest(si, m_prime, request_id, coeffs)


@dataclass
class InferResponse:
    request_id: int
    predicted: int
    probabilities: np.ndarray


def encode_infer_response(resp: InferResponse) -> bytes:
    body = struct.pack(
        "<QII", resp.request_id, resp.predicted, len(resp.probabilities)
    ) + np.asarray(resp.probabilities, dtype="<f4").tobytes()
    return pack_frame(T_INFER_RESP, body)


def decode_infer_response(body: bytes) -> InferResponse:
    rd = _Reader(body)
    request_id = rd.u64()
    predicted = rd.u32()
    count = rd.u32()
    probs = rd.f32s(count)
    rd.done()
    if abs(float(probs.sum()) - 1.0) > 1e-5:
        raise ProtocolError(f"probabilities sum to {probs.sum()}")
    if count and int(probs.argmax()) != predicted:
        raise ProtocolError("predicted class is not the argmax")
    return InferResponse(request_id, predicted, probs)


def encode_error(code: int, message: str) -> bytes:
    return pack_frame(T_ERROR, struct.pack("<H", code) + message.encode("utf-8"))


def decode_error(body: bytes):
    rd = _Reader(body)
    code = rd.u16()
    return code, rd.body[rd.off :].decode("utf-8", errors="replace")


def read_frame(sock):
    """Read one frame from a socket; returns (version, type, flags, body).
    Raises ProtocolError on malformed data, EOFError on clean close.
    """
    header = _recv_exact(sock, HEADER_LEN)
    version, ftype, flags, body_len = parse_header(header)
    body = _recv_exact(sock, body_len)
    return version, ftype, flags, body


def _recv_exact(sock, count):
    chunks = []
    got = 0
    while got < count:
        chunk = sock.recv(min(65536, count - got))
        if not chunk:
            if got == 0 and not chunks:
                raise EOFError("connection closed")
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
