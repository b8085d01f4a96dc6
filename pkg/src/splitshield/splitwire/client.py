"""Client runtime: runs the local layers, obfuscates with the transported
basis, ships coefficient prefixes, and picks configurations off the server's
accuracy profile.
"""

import socket
import time

import numpy as np

from ..errors import Incompatible, NoFeasibleConfig, ProtocolError
from ..nn.model import run_layers, split
from ..obfuscator import budget_trim
from . import frames

MODE_FREE = "free"
MODE_TOPM = "topm"
MODE_BUDGET = "budget"

RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.1


class ClientSession:
    """One connection: handshake state plus a single-in-flight request slot."""

    def __init__(self, host, port, model=None, retry_delays=None):
        self.host = host
        self.port = port
        self.model = model
        self.sock = None
        self.handshake = None
        self._next_request_id = 1
        if retry_delays is None:
            retry_delays = [RETRY_BASE_DELAY * (2**i) for i in range(RETRY_ATTEMPTS - 1)]
        self.retry_delays = list(retry_delays)

    def connect(self):
        self.sock = socket.create_connection((self.host, self.port), timeout=30)
        self.sock.sendall(frames.pack_frame(frames.T_HELLO, b""))
        version, ftype, _, body = frames.read_frame(self.sock)
        if ftype == frames.T_ERROR:
            code, message = frames.decode_error(body)
            if code == frames.E_INCOMPATIBLE:
                raise Incompatible(message)
            raise ProtocolError(message)
        if ftype != frames.T_HANDSHAKE:
            raise ProtocolError(f"expected handshake, got frame type {ftype}")
        self.handshake = frames.decode_handshake(version, body)
        return self

    def close(self):
        if self.sock is not None:
            self.sock.close()
            self.sock = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def obfuscate(self, x, split_index, mode, param=None):
        """Local feature pass + coefficient selection with the transported
        basis. Returns (coefficient prefix, m_prime, comm_floats).
        """
        if self.handshake is None or split_index not in self.handshake.splits:
            raise ProtocolError(f"split {split_index} not offered by server")
        info = self.handshake.splits[split_index]
        mc, _, _ = split(self.model, split_index)
        z = run_layers(mc, x[None] if x.ndim == len(self.model.input_shape) else x)
        flat = z.reshape(z.shape[0], -1)[0]
        if flat.shape[0] != info.n:
            raise ProtocolError(f"feature length {flat.shape[0]} != advertised n {info.n}")
        alpha = info.basis_rows @ flat  # k coefficients, f64 math on f32 basis
        if mode == MODE_FREE:
            m_prime = info.k
            prefix = alpha
        elif mode == MODE_TOPM:
            m_prime = int(param)
            if not 0 <= m_prime <= info.k:
                raise ProtocolError(f"m_prime {m_prime} outside [0, {info.k}]")
            prefix = alpha[:m_prime]
        elif mode == MODE_BUDGET:
            alpha_prime, m_prime, _, _ = budget_trim(alpha, info.singular_values, float(param))
            prefix = alpha_prime[:m_prime]
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return prefix, m_prime, float(m_prime)

    def infer(self, x, split_index, mode, param=None):
        """Obfuscate locally, transmit the prefix, return the server response."""
        prefix, m_prime, _ = self.obfuscate(x, split_index, mode, param)
        req = frames.InferRequest(
            split_index=split_index,
            m_prime=m_prime,
            request_id=self._next_request_id,
            coefficients=prefix,
        )
        self._next_request_id += 1
        payload = frames.encode_infer_request(req)
        body = self._exchange(payload)
        resp = frames.decode_infer_response(body)
        if resp.request_id != req.request_id:
            raise ProtocolError("response for a different request")
        return resp

    def _exchange(self, payload):
        last_error = None
        for attempt in range(len(self.retry_delays) + 1):
            try:
                if self.sock is None:
                    self.connect()
                self.sock.sendall(payload)
                _, ftype, _, body = frames.read_frame(self.sock)
                if ftype == frames.T_ERROR:
                    code, message = frames.decode_error(body)
                    raise ProtocolError(f"server error {code}: {message}")
                if ftype != frames.T_INFER_RESP:
                    raise ProtocolError(f"unexpected frame type {ftype}")
                return body
            except (OSError, EOFError) as exc:
                last_error = exc
                self.close()
                if attempt < len(self.retry_delays):
                    time.sleep(self.retry_delays[attempt])
        raise ConnectionError(f"gave up after {len(self.retry_delays) + 1} attempts") from last_error


def client_choose(profile_rows, max_drop, max_split=None):
    """Pick (split_index, keep_fraction) from accuracy-profile rows.

    Among rows with drop <= max_drop (and split <= max_split when the client
    declares a compute ceiling), prefers the deepest split, then the smallest
    keep fraction.
    """
    feasible = [
        (si, fraction, drop)
        for si, fraction, drop in profile_rows
        if drop <= max_drop and (max_split is None or si <= max_split)
    ]
    if not feasible:
        raise NoFeasibleConfig(f"no profile row with drop <= {max_drop}")
    feasible.sort(key=lambda row: (-row[0], row[1]))
    best = feasible[0]
    return best[0], best[1]
