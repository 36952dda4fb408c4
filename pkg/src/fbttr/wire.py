"""Wire protocol for federated training.

Frame layout: 4-byte magic ``FBTP``, 1-byte version (0x01), 1-byte message
kind, 4-byte little-endian payload length, then the payload.  Every
payload starts with u32 round and u32 client id; the remaining fields are
kind-specific, with shapes always preceding data and every f64 array
preceded by a 4-byte element count.

Payloads intentionally carry only aggregate quantities: cores, factor
matrices, response loadings, scalar coefficients, residual norms and
sample counts.  Raw data tensors, residuals and per-sample score vectors
never appear in any message.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .binio import Reader, TruncatedError, Writer

MAGIC = b"FBTP"
VERSION = 1
HEADER_LEN = 10

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_LEN",
    "WireError",
    "MessageKind",
    "ErrorCode",
    "Hello",
    "AceReport",
    "HyperAssign",
    "BlockUpdate",
    "GlobalBlock",
    "DeflateAck",
    "Done",
    "ProtocolErrorInfo",
    "Message",
    "encode_message",
    "decode_message",
    "frame_length",
]


class WireError(ValueError):
    pass


class MessageKind(IntEnum):
    HELLO = 1
    ACE_REPORT = 2
    HYPER_ASSIGN = 3
    BLOCK_UPDATE = 4
    GLOBAL_BLOCK = 5
    DEFLATE_ACK = 6
    DONE = 7
    ERROR = 8


class ErrorCode(IntEnum):
    RETRY_ROUND = 1
    DECOMPOSITION_FAILED = 2
    PROTOCOL_VIOLATION = 3
    ABORT = 4


@dataclass
class Hello:
    """Roster entry from a client, or the training configuration echoed back."""

    sample_count: int = 0
    feature_shape: tuple = ()
    n_responses: int = 0
    max_blocks: int = 0
    epsilon: float = 0.0
    snr_values: tuple = ()
    tau_values: tuple = ()


@dataclass
class AceReport:
    skip: bool
    snr: float = 0.0
    tau: float = 0.0
    bic: float = 0.0
    ranks: tuple = ()


@dataclass
class HyperAssign:
    snr: float
    tau: float
    target_ranks: tuple


@dataclass
class BlockUpdate:
    skip: bool
    n_samples: int
    core: Optional[np.ndarray] = None
    score_core: Optional[np.ndarray] = None
    factors: list = field(default_factory=list)
    q: Optional[np.ndarray] = None
    d: float = 0.0


@dataclass
class GlobalBlock:
    core: np.ndarray
    score_core: np.ndarray
    factors: list
    q: np.ndarray
    d: float


@dataclass
class DeflateAck:
    e_norm: float
    f_norm: float
    deflated: bool = True


@dataclass
class Done:
    blocks_extracted: int = 0


@dataclass
class ProtocolErrorInfo:
    code: int
    detail: str


@dataclass
class Message:
    kind: MessageKind
    round: int
    client_id: int
    payload: object = None


def _write_payload(w: Writer, msg: Message) -> None:
    p = msg.payload
    k = msg.kind
    if k == MessageKind.HELLO:
        w.u32(p.sample_count)
        w.u32(len(p.feature_shape))
        for s in p.feature_shape:
            w.u32(s)
        w.u32(p.n_responses)
        w.u32(p.max_blocks)
        w.f64(p.epsilon)
        w.array(np.asarray(p.snr_values, dtype=np.float64))
        w.array(np.asarray(p.tau_values, dtype=np.float64))
    elif k == MessageKind.ACE_REPORT:
        w.u8(1 if p.skip else 0)
        w.f64(p.snr)
        w.f64(p.tau)
        w.f64(p.bic)
        w.u32(len(p.ranks))
        for r in p.ranks:
            w.u32(r)
    elif k == MessageKind.HYPER_ASSIGN:
        w.f64(p.snr)
        w.f64(p.tau)
        w.u32(len(p.target_ranks))
        for r in p.target_ranks:
            w.u32(r)
    elif k == MessageKind.BLOCK_UPDATE:
        w.u8(1 if p.skip else 0)
        w.u32(p.n_samples)
        if not p.skip:
            w.tensor(p.core)
            w.tensor(p.score_core)
            w.u32(len(p.factors))
            for f in p.factors:
                w.matrix(f)
            w.matrix(p.q)
            w.f64(p.d)
    elif k == MessageKind.GLOBAL_BLOCK:
        w.tensor(p.core)
        w.tensor(p.score_core)
        w.u32(len(p.factors))
        for f in p.factors:
            w.matrix(f)
        w.matrix(p.q)
        w.f64(p.d)
    elif k == MessageKind.DEFLATE_ACK:
        w.f64(p.e_norm)
        w.f64(p.f_norm)
        w.u8(1 if p.deflated else 0)
    elif k == MessageKind.DONE:
        w.u32(p.blocks_extracted if p else 0)
    elif k == MessageKind.ERROR:
        w.u32(p.code)
        w.string(p.detail)
    else:
        raise WireError(f"unknown message kind {k}")


def _read_payload(r: Reader, kind: MessageKind):
    if kind == MessageKind.HELLO:
        sample_count = r.u32()
        n_modes = r.u32()
        feature_shape = tuple(r.u32() for _ in range(n_modes))
        n_responses = r.u32()
        max_blocks = r.u32()
        epsilon = r.f64()
        snr_values = tuple(r.array().tolist())
        tau_values = tuple(r.array().tolist())
        return Hello(sample_count, feature_shape, n_responses, max_blocks,
                     epsilon, snr_values, tau_values)
    if kind == MessageKind.ACE_REPORT:
        skip = bool(r.u8())
        snr, tau, bic = r.f64(), r.f64(), r.f64()
        ranks = tuple(r.u32() for _ in range(r.u32()))
        return AceReport(skip, snr, tau, bic, ranks)
    if kind == MessageKind.HYPER_ASSIGN:
        snr, tau = r.f64(), r.f64()
        ranks = tuple(r.u32() for _ in range(r.u32()))
        return HyperAssign(snr, tau, ranks)
    if kind == MessageKind.BLOCK_UPDATE:
        skip = bool(r.u8())
        n_samples = r.u32()
        if skip:
            return BlockUpdate(skip=True, n_samples=n_samples)
        core = r.tensor()
        score_core = r.tensor()
        factors = [r.matrix() for _ in range(r.u32())]
        q = r.matrix()
        d = r.f64()
        return BlockUpdate(False, n_samples, core, score_core, factors, q, d)
    if kind == MessageKind.GLOBAL_BLOCK:
        core = r.tensor()
        score_core = r.tensor()
        factors = [r.matrix() for _ in range(r.u32())]
        q = r.matrix()
        d = r.f64()
        return GlobalBlock(core, score_core, factors, q, d)
    if kind == MessageKind.DEFLATE_ACK:
        return DeflateAck(r.f64(), r.f64(), bool(r.u8()))
    if kind == MessageKind.DONE:
        return Done(r.u32())
    if kind == MessageKind.ERROR:
        return ProtocolErrorInfo(r.u32(), r.string())
    raise WireError(f"unknown message kind {kind}")


def encode_message(msg: Message) -> bytes:
    body = Writer()
    body.u32(msg.round)
    body.u32(msg.client_id)
    _write_payload(body, msg)
    payload = body.getvalue()
    head = Writer()
    head.raw(MAGIC)
    head.u8(VERSION)
    head.u8(int(msg.kind))
    head.u32(len(payload))
    return head.getvalue() + payload


def frame_length(header: bytes) -> int:
    """Total frame length implied by a 10-byte frame header."""
    if len(header) < HEADER_LEN:
        raise WireError("short header")
    if header[:4] != MAGIC:
        raise WireError(f"bad magic {header[:4]!r}")
    if header[4] != VERSION:
        raise WireError(f"unsupported version {header[4]}")
    return HEADER_LEN + int.from_bytes(header[6:10], "little")


def decode_message(data: bytes) -> Message:
    if len(data) < HEADER_LEN:
        raise WireError("frame too short")
    if data[:4] != MAGIC:
        raise WireError(f"bad magic {data[:4]!r}")
    if data[4] != VERSION:
        raise WireError(f"unsupported version {data[4]}")
    try:
        kind = MessageKind(data[5])
    except ValueError as e:
        raise WireError(f"unknown message kind {data[5]}") from e
    payload_len = int.from_bytes(data[6:10], "little")
    if HEADER_LEN + payload_len != len(data):
        raise WireError(f"frame length mismatch: header says {payload_len}, have {len(data) - HEADER_LEN}")
    r = Reader(data, pos=HEADER_LEN)
    try:
        rnd = r.u32()
        client_id = r.u32()
        payload = _read_payload(r, kind)
    except TruncatedError as e:
        raise WireError(str(e)) from e
    if not r.exhausted():
        raise WireError("trailing bytes in frame")
    return Message(kind=kind, round=rnd, client_id=client_id, payload=payload)
