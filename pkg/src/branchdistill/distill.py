"""Training objectives and multi-teacher aggregation.

The hard-label term is a per-position negative log-likelihood evaluated at
temperature 1. The distillation term softens aggregated teacher logits and
student logits with the same temperature, takes the start and end
cross-entropies, averages over the batch, and scales by temperature^2 so
its gradient magnitude stays comparable across temperatures. Teachers are
combined by a per-teacher weighted sum of their raw logits; weights are
either fixed at 1/K or derived per instance from the entropy (impurity) of
each teacher's predicted distribution.

Teacher logits are always consumed from a precomputed store, never
recomputed during student training. The store is a binary container per
teacher: a JSON header, length-prefixed records, and an appended
sample-id -> offset index for random access.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import (
    IncompleteLogits,
    InvalidConfig,
    InvalidLabel,
    InvalidParameter,
    ShapeError,
)
from .numerics import LOG_FLOOR, cross_entropy, entropy, softmax_temperature

STORE_VERSION = 1


@dataclass(frozen=True)
class TeacherWeights:
    """Per-teacher mixing weights for the start and end heads."""

    start: np.ndarray
    end: np.ndarray

    def validate(self) -> None:
        for head in (self.start, self.end):
            w = np.asarray(head, dtype=np.float64)
            if np.any(w < 0.0):
                raise InvalidParameter("teacher weights must be non-negative")
            if abs(w.sum() - 1.0) > 1e-9:
                raise InvalidParameter("teacher weights must sum to 1")


@dataclass(frozen=True)
class LogitRecord:
    sample_id: str
    teacher_id: str
    z_s: np.ndarray
    z_e: np.ndarray

    def validate(self, max_len: int) -> None:
        for name, z in (("z_s", self.z_s), ("z_e", self.z_e)):
            if z.shape != (max_len,):
                raise ShapeError(f"{name} has shape {z.shape}, expected ({max_len},)")
            if not np.all(np.isfinite(z)):
                raise InvalidParameter(f"{name} contains non-finite values")


@dataclass(frozen=True)
class LossBreakdown:
    nll: float
    kd: float
    total: float
    tau: float
    lambda1: float
    lambda2: float


def fixed_weights(k: int) -> TeacherWeights:
    """Uniform 1/K weights for both heads."""
    if k < 1:
        raise InvalidConfig(f"need at least one teacher, got {k}")
    w = np.full(k, 1.0 / k)
    return TeacherWeights(start=w, end=w.copy())


def impurity_weights(per_teacher_logits, sign: int = 1) -> np.ndarray:
    """Per-instance teacher weights from prediction entropy.

    Each teacher's logits are softened at temperature 1; the entropy of the
    resulting distribution is the teacher's impurity, and the weights are the
    softmax of ``sign * impurity``. The default sign (+1) favours
    higher-entropy teachers; sign=-1 favours the more confident ones.
    """
    logits = [np.asarray(z, dtype=np.float64) for z in per_teacher_logits]
    if not logits:
        raise InvalidConfig("need at least one teacher")
    length = logits[0].shape
    for z in logits:
        if z.shape != length:
            raise ShapeError("teacher logit lengths differ")
    if sign not in (1, -1):
        raise InvalidParameter(f"sign must be +1 or -1, got {sign}")
    impurities = np.array([entropy(softmax_temperature(z, 1.0)) for z in logits])
    return softmax_temperature(sign * impurities, 1.0)


def aggregate_logits(records, weights: TeacherWeights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of per-teacher start/end logits, in record order."""
    records = list(records)
    if not records:
        raise IncompleteLogits("no teacher records to aggregate")
    weights.validate()
    ws = np.asarray(weights.start, dtype=np.float64)
    we = np.asarray(weights.end, dtype=np.float64)
    if len(records) != ws.shape[0] or len(records) != we.shape[0]:
        raise IncompleteLogits(
            f"{len(records)} teacher records for {ws.shape[0]} weights"
        )
    length = records[0].z_s.shape
    for r in records:
        if r.z_s.shape != length or r.z_e.shape != length:
            raise ShapeError("teacher logit lengths differ")
    z_s = np.zeros(length)
    z_e = np.zeros(length)
    for w_s, w_e, record in zip(ws, we, records):
        z_s += w_s * record.z_s
        z_e += w_e * record.z_e
    return z_s, z_e


def nll_loss(p_s, p_e, gold_start: int, gold_end: int) -> float:
    """-(ln p_s[gold_start] + ln p_e[gold_end]) for one instance."""
    p_s = np.asarray(p_s, dtype=np.float64)
    p_e = np.asarray(p_e, dtype=np.float64)
    if not (0 <= gold_start < p_s.shape[-1]) or not (0 <= gold_end < p_e.shape[-1]):
        raise InvalidLabel(
            f"gold indices ({gold_start}, {gold_end}) outside length {p_s.shape[-1]}"
        )
    return float(
        -(np.log(max(p_s[gold_start], LOG_FLOOR)) + np.log(max(p_e[gold_end], LOG_FLOOR)))
    )


def kd_loss(teacher_z_s, teacher_z_e, student_z_s, student_z_e, tau: float) -> float:
    """Distillation loss for one instance: softened cross-entropies times tau^2."""
    if not tau > 0.0:
        raise InvalidParameter(f"temperature must be positive, got {tau}")
    p_s = softmax_temperature(teacher_z_s, tau)
    p_e = softmax_temperature(teacher_z_e, tau)
    q_s = softmax_temperature(student_z_s, tau)
    q_e = softmax_temperature(student_z_e, tau)
    return (cross_entropy(p_s, q_s) + cross_entropy(p_e, q_e)) * tau * tau


def total_loss(nll: float, kd: float, lambda1: float = 0.5, lambda2: float = 0.5,
               tau: float = 1.0) -> LossBreakdown:
    """Weighted combination of the hard-label and distillation terms."""
    if lambda1 < 0.0 or lambda2 < 0.0:
        raise InvalidParameter("loss weights must be non-negative")
    return LossBreakdown(
        nll=float(nll),
        kd=float(kd),
        total=lambda1 * float(nll) + lambda2 * float(kd),
        tau=tau,
        lambda1=lambda1,
        lambda2=lambda2,
    )


# ---------------------------------------------------------------------------
# Differentiable batch objectives
# ---------------------------------------------------------------------------


def batch_nll(result, gold_start: np.ndarray, gold_end: np.ndarray) -> nm.Tensor:
    """Mean hard-label loss over a batch, at temperature 1, as a graph node."""
    logp_s = nm.log_softmax_last(result.z_s_t, 1.0)
    logp_e = nm.log_softmax_last(result.z_e_t, 1.0)
    picked = nm.add(nm.pick_last(logp_s, gold_start), nm.pick_last(logp_e, gold_end))
    return nm.mul(nm.mean_all(picked), -1.0)


def batch_kd(result, teacher_p_s: np.ndarray, teacher_p_e: np.ndarray, tau: float) -> nm.Tensor:
    """Mean distillation loss over a batch, scaled by tau^2 after averaging."""
    if not tau > 0.0:
        raise InvalidParameter(f"temperature must be positive, got {tau}")
    logq_s = nm.log_softmax_last(result.z_s_t, tau)
    logq_e = nm.log_softmax_last(result.z_e_t, tau)
    ce = nm.add(
        nm.mul(nm.sum_last(nm.mul(logq_s, teacher_p_s)), -1.0),
        nm.mul(nm.sum_last(nm.mul(logq_e, teacher_p_e)), -1.0),
    )
    return nm.mul(nm.mean_all(ce), tau * tau)


# ---------------------------------------------------------------------------
# Logit store
# ---------------------------------------------------------------------------


def write_logit_store(path, teacher_id: str, max_len: int, records) -> None:
    """Write all records for one teacher, then append the random-access index."""
    records = list(records)
    header = {
        "format_version": STORE_VERSION,
        "teacher_id": teacher_id,
        "max_len": max_len,
        "count": len(records),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    index: dict[str, int] = {}
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for record in records:
            record.validate(max_len)
            if record.sample_id in index:
                raise InvalidConfig(f"duplicate sample id {record.sample_id!r} in store")
            index[record.sample_id] = fh.tell()
            sid = record.sample_id.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(record.z_s.astype("<f8").tobytes())
            fh.write(record.z_e.astype("<f8").tobytes())
        index_pos = fh.tell()
        index_blob = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
        fh.write(struct.pack("<I", len(index_blob)))
        fh.write(index_blob)
        fh.write(struct.pack("<Q", index_pos))


class LogitStore:
    """Random-access reader over one teacher's precomputed logits."""

    def __init__(self, path):
        self.path = Path(path)
        with self.path.open("rb") as fh:
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            if header.get("format_version") != STORE_VERSION:
                raise InvalidConfig(f"unsupported logit store version in {path}")
            self.teacher_id: str = header["teacher_id"]
            self.max_len: int = int(header["max_len"])
            self.count: int = int(header["count"])
            fh.seek(-8, 2)
            (index_pos,) = struct.unpack("<Q", fh.read(8))
            fh.seek(index_pos)
            (index_len,) = struct.unpack("<I", fh.read(4))
            self._index: dict[str, int] = json.loads(fh.read(index_len).decode("utf-8"))
        if len(self._index) != self.count:
            raise InvalidConfig(f"logit store {path} index does not match its count")

    def sample_ids(self) -> list[str]:
        return sorted(self._index)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def get(self, sample_id: str) -> LogitRecord:
        offset = self._index.get(sample_id)
        if offset is None:
            raise IncompleteLogits(
                f"teacher {self.teacher_id!r} has no logits for sample {sample_id!r}"
            )
        with self.path.open("rb") as fh:
            fh.seek(offset)
            (sid_len,) = struct.unpack("<I", fh.read(4))
            sid = fh.read(sid_len).decode("utf-8")
            z_s = np.frombuffer(fh.read(8 * self.max_len), dtype="<f8").copy()
            z_e = np.frombuffer(fh.read(8 * self.max_len), dtype="<f8").copy()
        record = LogitRecord(sample_id=sid, teacher_id=self.teacher_id, z_s=z_s, z_e=z_e)
        record.validate(self.max_len)
        return record

    def load_all(self) -> dict[str, LogitRecord]:
        return {sid: self.get(sid) for sid in self.sample_ids()}
