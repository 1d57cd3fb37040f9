"""Low-rank adapters for frozen dense weights.

A weight ``W0`` of shape ``d x k`` is adapted as ``W0 + B @ A`` with
``B: d x r`` (zero at init) and ``A: r x k``. Only ``A`` and ``B`` are
trained and shipped.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .micro_nn import OptimizerState, ShapeError


@dataclass
class LowRankAdapter:
    layer_id: int
    B: np.ndarray  # d x r
    A: np.ndarray  # r x k

    def __post_init__(self):
        d, r = self.B.shape
        r2, k = self.A.shape
        if r != r2:
            raise ShapeError(f"B is {self.B.shape} but A is {self.A.shape}")
        if r < 1 or r > min(d, k):
            raise ValueError(f"rank {r} outside [1, min({d}, {k})]")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self):
        return self.B.shape[0], self.A.shape[1]

    def num_params(self) -> int:
        d, k = self.shape
        return self.rank * (d + k)

    def delta(self) -> np.ndarray:
        return self.B @ self.A

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.layer_id, self.B.copy(), self.A.copy())


def init_adapter(d: int, k: int, rank: int, rng: np.random.Generator,
                 layer_id: int = 0) -> LowRankAdapter:
    if rank < 1 or rank > min(d, k):
        raise ValueError(f"rank {rank} too large for a {d}x{k} layer")
    A = rng.normal(0.0, np.sqrt(1.0 / rank), size=(rank, k))
    return LowRankAdapter(layer_id, np.zeros((d, rank)), A)


def merge(W0: np.ndarray, adapter: Optional[LowRankAdapter]) -> np.ndarray:
    """``W0 + B @ A`` as a new array. A zero ``B`` returns an exact copy of ``W0``."""
    if adapter is None:
        return W0.copy()
    if W0.shape != adapter.shape:
        raise ShapeError(f"base weight {W0.shape} vs adapter {adapter.shape}")
    if not adapter.B.any():
        return W0.copy()
    return W0 + adapter.B @ adapter.A


def adapter_grads(adapter: LowRankAdapter, grad_W: np.ndarray):
    """Chain rule through ``W = W0 + B A``: returns (dL/dB, dL/dA)."""
    if grad_W.shape != adapter.shape:
        raise ShapeError(f"gradient {grad_W.shape} vs adapter {adapter.shape}")
    return grad_W @ adapter.A.T, adapter.B.T @ grad_W


def adapter_grad_step(W0: np.ndarray, adapter: LowRankAdapter, grad_W: np.ndarray,
                      opt: OptimizerState) -> LowRankAdapter:
    """One optimizer step on (B, A) given dL/dW for the merged weight. ``W0`` is only read."""
    if grad_W.shape != W0.shape:
        raise ShapeError(f"gradient {grad_W.shape} vs base {W0.shape}")
    gB, gA = adapter_grads(adapter, grad_W)
    B, A = opt.update([adapter.B, adapter.A], [gB, gA])
    return LowRankAdapter(adapter.layer_id, B, A)


# ----------------------------------------------------------------------------- payload

@dataclass
class AdapterPayload:
    """What a client uploads once: adapters, prompt embeddings, class counts."""

    client_id: int
    adapters: Dict[int, LowRankAdapter]
    prompts: Dict[int, np.ndarray] = field(default_factory=dict)  # class -> embedding
    class_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def byte_size(self) -> int:
        return payload_bytes(self)


def payload_bytes(payload: AdapterPayload) -> int:
    adapters = 8 * sum(a.num_params() for a in payload.adapters.values())
    embeddings = 8 * sum(np.asarray(v).size for v in payload.prompts.values())
    return adapters + embeddings


_HEADER = struct.Struct("<IIII")


def dumps_adapters(adapters: Dict[int, LowRankAdapter]) -> bytes:
    """Binary form: u32 count, then per adapter a u32 record length followed by
    (layer id, d, k, r) as u32 and row-major A then B as little-endian float64."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(adapters)))
    for layer_id in sorted(adapters):
        a = adapters[layer_id]
        d, k = a.shape
        body = (_HEADER.pack(a.layer_id, d, k, a.rank)
                + a.A.astype("<f8").tobytes(order="C")
                + a.B.astype("<f8").tobytes(order="C"))
        buf.write(struct.pack("<I", len(body)))
        buf.write(body)
    return buf.getvalue()


def loads_adapters(data: bytes) -> Dict[int, LowRankAdapter]:
    (count,) = struct.unpack_from("<I", data, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layer_id, d, k, r = _HEADER.unpack_from(data, pos)
        expected = _HEADER.size + 8 * r * (d + k)
        if length != expected:
            raise ValueError(f"corrupt adapter record: length {length}, expected {expected}")
        off = pos + _HEADER.size
        A = np.frombuffer(data, "<f8", r * k, off).reshape(r, k).astype(np.float64)
        B = np.frombuffer(data, "<f8", d * r, off + 8 * r * k).reshape(d, r).astype(np.float64)
        out[layer_id] = LowRankAdapter(layer_id, B, A)
        pos += length
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after adapter records")
    return out


def adapters_to_json(adapters: Dict[int, LowRankAdapter]) -> str:
    doc = {str(i): {"d": a.shape[0], "k": a.shape[1], "r": a.rank,
                    "A": a.A.tolist(), "B": a.B.tolist()}
           for i, a in sorted(adapters.items())}
    return json.dumps(doc, indent=1)


def adapters_from_json(text: str) -> Dict[int, LowRankAdapter]:
    doc = json.loads(text)
    return {int(i): LowRankAdapter(int(i), np.array(v["B"], dtype=np.float64).reshape(v["d"], v["r"]),
                                   np.array(v["A"], dtype=np.float64).reshape(v["r"], v["k"]))
            for i, v in doc.items()}

