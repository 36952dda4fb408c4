"""Binary model container, identical bytes on every platform.

Layout (all integers little-endian):

    magic               8 bytes  b"FBTTRv01"
    order               u32      number of predictor modes incl. samples
    n_responses         u32
    n_blocks            u32
    input_shape         u32 * (order - 1)
    flags               u8       bit0 normalization, bit1 trace
    [normalization]     arrays x_mean, x_std (feature-shaped, flattened
                        row-major), y_mean, y_std
    blocks              per block:
                          core tensor, score_core tensor,
                          u32 n_factors, factor matrices,
                          q matrix, d f64,
                          u8 has_t, [t array]
    w matrix, z matrix
    [trace]             u32 count, then (e, f) f64 pairs

Encoding of arrays, matrices and tensors follows :mod:`fbttr.binio`.
"""

from __future__ import annotations

from .binio import Reader, TruncatedError, Writer
from .bttr import Block, BttrModel, NormStats

MAGIC = b"FBTTRv01"

__all__ = ["MAGIC", "ModelFormatError", "model_to_bytes", "model_from_bytes", "save_model", "load_model"]


class ModelFormatError(ValueError):
    pass


def model_to_bytes(model: BttrModel) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    order = len(model.input_shape) + 1
    w.u32(order)
    w.u32(model.n_responses)
    w.u32(model.n_blocks)
    for s in model.input_shape:
        w.u32(s)
    flags = (1 if model.normalization is not None else 0) | (2 if model.trace is not None else 0)
    w.u8(flags)
    if model.normalization is not None:
        ns = model.normalization
        w.array(ns.x_mean)
        w.array(ns.x_std)
        w.array(ns.y_mean)
        w.array(ns.y_std)
    for b in model.blocks:
        w.tensor(b.core)
        w.tensor(b.score_core)
        w.u32(len(b.factors))
        for f in b.factors:
            w.matrix(f)
        w.matrix(b.q)
        w.f64(b.d)
        w.u8(1 if b.t is not None else 0)
        if b.t is not None:
            w.array(b.t)
    w.matrix(model.w)
    w.matrix(model.z)
    if model.trace is not None:
        w.u32(len(model.trace))
        for e, f in model.trace:
            w.f64(e)
            w.f64(f)
    return w.getvalue()


def model_from_bytes(data: bytes) -> BttrModel:
    if data[:8] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:8]!r}")
    r = Reader(data, pos=8)
    try:
        order = r.u32()
        n_responses = r.u32()
        n_blocks = r.u32()
        input_shape = tuple(r.u32() for _ in range(order - 1))
        flags = r.u8()
        normalization = None
        if flags & 1:
            feat = input_shape if input_shape else (1,)
            x_mean = r.array().reshape(feat)
            x_std = r.array().reshape(feat)
            y_mean = r.array()
            y_std = r.array()
            normalization = NormStats(x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std)
        blocks = []
        for _ in range(n_blocks):
            core = r.tensor()
            score_core = r.tensor()
            n_factors = r.u32()
            factors = [r.matrix() for _ in range(n_factors)]
            q = r.matrix()
            d = r.f64()
            t = r.array().reshape(-1, 1) if r.u8() else None
            blocks.append(Block(core=core, factors=factors, q=q, d=d, score_core=score_core, t=t))
        w = r.matrix()
        z = r.matrix()
        trace = None
        if flags & 2:
            count = r.u32()
            trace = [(r.f64(), r.f64()) for _ in range(count)]
    except TruncatedError as e:
        raise ModelFormatError(str(e)) from e
    if not r.exhausted():
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes")
    if n_responses != z.shape[1]:
        raise ModelFormatError("response count mismatch")
    return BttrModel(blocks=blocks, w=w, z=z, input_shape=input_shape,
                     normalization=normalization, trace=trace)


def save_model(model: BttrModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> BttrModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
