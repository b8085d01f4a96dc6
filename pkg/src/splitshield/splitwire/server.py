"""Inference server: hosts the server-side layers, the per-split SVD bases,
and the accuracy profile. Never sees raw features; only coefficient prefixes
arrive, and only m' and timing are logged.
"""

import logging
import socketserver
import threading
import time

import numpy as np

from ..nn.model import load_checkpoint, run_layers, split, split_basis
from . import frames

log = logging.getLogger("splitshield.serve")


class _SplitState:
    def __init__(self, info, ms_layers, boundary_shape, basis_v):
        self.info = info
        self.ms_layers = ms_layers
        self.boundary_shape = boundary_shape
        self.basis_v = basis_v  # (n, k) f64 columns for reconstruction


class InferenceServer:
    """TCP server answering handshake and inference frames.

    Bases and weights are computed at startup and never mutated afterwards;
    connections are handled on daemon threads.
    """

    def __init__(self, model, bind_address=("127.0.0.1", 0), profile_rows=None,
                 split_indices=None):
        self.model = model
        self.profile_rows = list(profile_rows or [])
        self.splits = {}
        for si in split_indices or range(1, model.n_splits + 1):
            basis = split_basis(model, si)
            _, ms, _ = split(model, si)
            k = min(basis.m, basis.n)
            info = frames.SplitInfo(
                split_index=si,
                n=basis.n,
                m=basis.m,
                singular_values=basis.s[:k].copy(),
                basis_rows=basis.v[:, :k].T.copy(),
            )
            self.splits[si] = _SplitState(
                info, ms, model.shape_at_boundary(si), basis.v[:, :k].copy()
            )
        self._handshake = frames.encode_handshake(
            frames.Handshake(
                protocol_version=frames.PROTOCOL_VERSION,
                splits={si: st.info for si, st in self.splits.items()},
                profile_rows=self.profile_rows,
            )
        )
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer._serve_connection(self.request)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = Server(bind_address, Handler)
        self.address = self._tcp.server_address
        self._thread = None

    @classmethod
    def from_checkpoint(cls, path, bind_address=("127.0.0.1", 0), profile_rows=None):
        model, _ = load_checkpoint(path)
        return cls(model, bind_address=bind_address, profile_rows=profile_rows)

    def start(self):
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _serve_connection(self, sock):
        while True:
            try:
                version, ftype, _, body = frames.read_frame(sock)
            except EOFError:
                return
            except frames.ProtocolError as exc:
                self._safe_send(sock, frames.encode_error(frames.E_MALFORMED, str(exc)))
                return
            try:
                if not self._dispatch(sock, version, ftype, body):
                    return
            except frames.ProtocolError as exc:
                # In-contract protocol violations keep the connection alive.
                self._safe_send(sock, frames.encode_error(frames.E_MALFORMED, str(exc)))
            except Exception:
                log.exception("internal error")
                self._safe_send(sock, frames.encode_error(frames.E_INTERNAL, "internal error"))
                return

    def _dispatch(self, sock, version, ftype, body) -> bool:
        if ftype == frames.T_HELLO:
            if version != frames.PROTOCOL_VERSION:
                self._safe_send(
                    sock,
                    frames.encode_error(
                        frames.E_INCOMPATIBLE, f"server speaks version {frames.PROTOCOL_VERSION}"
                    ),
                )
                return False
            self._safe_send(sock, self._handshake)
            return True
        if ftype == frames.T_INFER_REQ:
            self._handle_infer(sock, body)
            return True
        self._safe_send(sock, frames.encode_error(frames.E_MALFORMED, f"unexpected type {ftype}"))
        return False

    def _handle_infer(self, sock, body):
        started = time.perf_counter()
        req = frames.decode_infer_request(body)
        state = self.splits.get(req.split_index)
        if state is None:
            self._safe_send(
                sock, frames.encode_error(frames.E_BAD_SPLIT, f"no split {req.split_index}")
            )
            return
        if req.m_prime > state.info.k:
            self._safe_send(
                sock,
                frames.encode_error(
                    frames.E_OVERSIZE, f"m_prime {req.m_prime} exceeds {state.info.k}"
                ),
            )
            return
        zprime = state.basis_v[:, : req.m_prime] @ req.coefficients
        x = zprime.reshape((1,) + state.boundary_shape)
        probs = run_layers(state.ms_layers, x, train=False)[0]
        resp = frames.InferResponse(
            request_id=req.request_id,
            predicted=int(probs.argmax()),
            probabilities=probs,
        )
        self._safe_send(sock, frames.encode_infer_response(resp))
        log.info(
            "infer split=%d m_prime=%d elapsed_ms=%.2f",
            req.split_index,
            req.m_prime,
            1e3 * (time.perf_counter() - started),
        )

    @staticmethod
    def _safe_send(sock, data):
        try:
            sock.sendall(data)
        except OSError:
            pass
