"""Edge-to-cloud simulation and the binary record format.

Record layout (little-endian)::

    offset  size  field
    0       4     magic b"DDC1"
    4       1     version (1)
    5       4     segment_id  uint32
    9       2     cg          uint16
    11      4     latent_len  uint32
    15      4     predicted_error float32
    19      4*n   latent payload, float32

Records are self-delimiting, so a stream is plain concatenation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codec import MultiLevelCodec
from .core import BoundConfig, CompressedRecord, Segment, average_cg
from .evaluation import EvalReport, cce_quartiles, classification_metrics, violation_rate
from .policy import select_dynamic
from .tasks import PEAK_TOLERANCE, extract_peaks, peak_envelope, peak_f1
from .training import weighted_task_loss

MAGIC = b"DDC1"
VERSION = 1
HEADER = struct.Struct("<4sBIHIf")
HEADER_SIZE = HEADER.size  # 19


class WireFormatError(ValueError):
    pass


class BadMagicError(WireFormatError):
    pass


class VersionMismatchError(WireFormatError):
    pass


class TruncatedPayloadError(WireFormatError):
    pass


def serialize(record: CompressedRecord) -> bytes:
    latent = np.ascontiguousarray(record.latent, dtype="<f4")
    header = HEADER.pack(MAGIC, VERSION, record.segment_id, record.cg, latent.size,
                         np.float32(record.predicted_error))
    return header + latent.tobytes()


def _read_one(buf: memoryview, offset: int) -> tuple[CompressedRecord, int]:
    if len(buf) - offset < HEADER_SIZE:
        raise TruncatedPayloadError(f"truncated header at byte {offset}")
    magic, version, seg_id, cg, n, err = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {bytes(magic)!r} at byte {offset}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported record version {version} (expected {VERSION})")
    start = offset + HEADER_SIZE
    end = start + 4 * n
    if len(buf) < end:
        raise TruncatedPayloadError(f"record {seg_id}: payload needs {4 * n} bytes, {len(buf) - start} available")
    latent = np.frombuffer(buf[start:end], dtype="<f4").astype(np.float32)
    return CompressedRecord(seg_id, cg, latent, err), end


def deserialize(data: bytes) -> CompressedRecord:
    """Decode exactly one record; trailing bytes are an error."""
    rec, end = _read_one(memoryview(data), 0)
    if end != len(data):
        raise WireFormatError(f"{len(data) - end} trailing bytes after record")
    return rec


def read_stream(data: bytes) -> list[CompressedRecord]:
    buf, offset, out = memoryview(data), 0, []
    while offset < len(buf):
        rec, offset = _read_one(buf, offset)
        out.append(rec)
    return out


def write_stream(records: Iterable[bytes], path) -> int:
    blob = b"".join(records)
    Path(path).write_bytes(blob)
    return len(blob)


# -- edge -------------------------------------------------------------------


EDGE_LOG_FIELDS = ("segment_id", "cg", "predicted_error", "fallback")


@dataclass
class EdgeResult:
    wire: list
    log: list

    @property
    def avg_cg(self) -> float:
        return average_cg([row["cg"] for row in self.log])


def run_edge(segments: Sequence[Segment], codec: MultiLevelCodec, bound: float) -> EdgeResult:
    """Encode every level, pick one with the predictive policy, serialize it.

    Takes no task models: the edge never sees cloud-side feedback.
    """
    wire, rows = [], []
    for seg in segments:
        try:
            entries = codec.encode_all(seg.samples)
        except ValueError as exc:
            raise ValueError(f"segment {seg.id}: {exc}") from exc
        sel = select_dynamic([(lv, err) for lv, _, err in entries], bound, codec.level_specs_, seg.id)
        latent = next(z for lv, z, _ in entries if lv == sel.chosen)
        rec = CompressedRecord(seg.id, sel.chosen.cg, latent, sel.predicted_error)
        wire.append(serialize(rec))
        rows.append({"segment_id": seg.id, "cg": rec.cg, "predicted_error": rec.predicted_error,
                     "fallback": sel.fallback_used})
    return EdgeResult(wire, rows)


# -- cloud ------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    label: int | None = None
    peaks: np.ndarray | None = None


def ground_truth_for(segments: Sequence[Segment]) -> dict[int, GroundTruth]:
    return {s.id: GroundTruth(s.label, s.peak_positions) for s in segments}


def run_cloud(records, codec: MultiLevelCodec, tasks: Mapping, ground_truth: Mapping[int, GroundTruth],
              bound: float, weights: BoundConfig = BoundConfig()) -> tuple[EvalReport, list[dict]]:
    """Decode records, run the tasks, and measure task error against ground truth.

    Returns the aggregate report and one row per segment, ordered by id.
    """
    recs = [deserialize(r) if isinstance(r, (bytes, bytearray)) else r for r in records]
    if not recs:
        raise ValueError("no records")
    configured = {lv.cg for lv in codec.level_specs_}
    recs = sorted(recs, key=lambda r: r.segment_id)
    rows = []
    for rec in recs:
        if rec.segment_id not in ground_truth:
            raise KeyError(f"unknown segment_id {rec.segment_id}")
        if rec.cg not in configured:
            raise ValueError(f"record {rec.segment_id}: cg={rec.cg} not in checkpoint levels {sorted(configured)}")
        gt = ground_truth[rec.segment_id]
        x_hat = codec.decode_record(rec)[None, :]
        losses, row = {}, {"segment_id": rec.segment_id, "cg": rec.cg, "predicted_error": rec.predicted_error}
        if "hr_classify" in tasks and gt.label is not None:
            losses["hr_classify"] = float(tasks["hr_classify"].loss_per_segment(x_hat, [gt.label])[0])
            row["predicted_class"] = int(tasks["hr_classify"].predict(x_hat)[0])
            row["label"] = gt.label
        if "rr_peaks" in tasks and gt.peaks is not None:
            model = tasks["rr_peaks"]
            env_hat = model.predict(x_hat)[0]
            env = peak_envelope(gt.peaks, codec.M, model.sigma_env)
            losses["rr_peaks"] = float(model.loss_per_segment(x_hat, env[None, :])[0])
            row["peak_f1"] = peak_f1(extract_peaks(env_hat), gt.peaks, PEAK_TOLERANCE)[2]
        row.update({f"loss_{k}": v for k, v in losses.items()})
        row["measured_error"] = float(weighted_task_loss(losses, weights.task_weights))
        rows.append(row)

    measured = [r["measured_error"] for r in rows]
    report = EvalReport(
        avg_cg=average_cg([r["cg"] for r in rows]),
        effective_loss=float(np.mean(measured)),
        violation_rate=violation_rate(measured, bound),
        n_segments=len(rows),
        bound=float(bound),
        policy="dynamic",
        n_fallback=sum(r["cg"] == 1 for r in rows),
    )
    labelled = [r for r in rows if "label" in r]
    if labelled:
        m = classification_metrics([r["predicted_class"] for r in labelled], [r["label"] for r in labelled])
        report.macro_precision, report.macro_recall, report.macro_f1 = (
            m["macro_precision"], m["macro_recall"], m["macro_f1"])
        report.per_class = m["per_class"]
        by_level: dict[int, list] = {}
        for r in labelled:
            by_level.setdefault(r["cg"], []).append(r["loss_hr_classify"])
        report.cce_quartiles = cce_quartiles({cg: v for cg, v in by_level.items() if len(v) >= 4})
    with_peaks = [r["peak_f1"] for r in rows if "peak_f1" in r]
    if with_peaks:
        report.peak_f1 = float(np.mean(with_peaks))
    return report, rows
