"""Persisted per-step, per-exit logit streams.

Binary layout (little-endian, no padding):

    magic "ACDS" | version u16 | mode u8 | vocab_size u32
    n_exits u16 | exit ids u16 * n_exits
    per record: step u32 | has_choice u8 | (choice u32 if has_choice)
                | n_exits * (vocab_size * f32)

Streams are either teacher-forced traces (one record per position of a fixed
text) or interactive step traces; the mode byte distinguishes them.  Reading
is sequential and bounded-memory: one record is held at a time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .contrast import AcdConfig, acd_distribution_from_logits, softmax

MAGIC = b"ACDS"
VERSION = 1

MODE_TEACHER_FORCED = 0
MODE_INTERACTIVE = 1

DTYPE_F32 = 0  # the only dtype in v1; f16 reserved


class StreamFormatError(ValueError):
    """Base class for malformed-stream errors; carries a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(StreamFormatError):
    pass


class UnsupportedVersionError(StreamFormatError):
    pass


class TruncatedRecordError(StreamFormatError):
    def __init__(self, message: str, offset: int, step_index: int):
        super().__init__(f"{message} (after {step_index} complete records)", offset)
        self.step_index = step_index


class StreamExhausted(Exception):
    """Raised by replay providers once every recorded step has been consumed."""


@dataclass(frozen=True)
class StreamHeader:
    vocab_size: int
    exit_ids: tuple[int, ...]
    mode: int = MODE_TEACHER_FORCED
    version: int = VERSION
    dtype: int = DTYPE_F32

    def __post_init__(self) -> None:
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if not self.exit_ids:
            raise ValueError("at least one exit id is required")
        if list(self.exit_ids) != sorted(set(self.exit_ids)):
            raise ValueError("exit ids must be sorted ascending and unique")
        if self.mode not in (MODE_TEACHER_FORCED, MODE_INTERACTIVE):
            raise ValueError(f"unknown mode {self.mode}")


@dataclass
class StepRecord:
    step: int
    logits: dict[int, np.ndarray] = field(default_factory=dict)
    chosen_token: int | None = None

    def validate_against(self, header: StreamHeader) -> None:
        if sorted(self.logits.keys()) != list(header.exit_ids):
            raise ValueError(
                f"record {self.step} exits {sorted(self.logits)} do not match "
                f"header exits {list(header.exit_ids)}"
            )
        for exit_id, arr in self.logits.items():
            if arr.shape != (header.vocab_size,):
                raise ValueError(
                    f"record {self.step} exit {exit_id}: expected "
                    f"{header.vocab_size} logits, got {arr.shape}"
                )


_HEADER_FMT = "<4sHBIH"


def write_stream(
    header: StreamHeader, records: Iterable[StepRecord], sink: BinaryIO
) -> int:
    """Serialize header and records to ``sink``; returns bytes written.

    Each record is validated before any of its bytes hit the sink.
    """
    written = 0
    buf = struct.pack(
        _HEADER_FMT, MAGIC, header.version, header.mode, header.vocab_size,
        len(header.exit_ids),
    )
    buf += struct.pack(f"<{len(header.exit_ids)}H", *header.exit_ids)
    sink.write(buf)
    written += len(buf)

    for record in records:
        record.validate_against(header)
        parts = [struct.pack("<IB", record.step, 1 if record.chosen_token is not None else 0)]
        if record.chosen_token is not None:
            parts.append(struct.pack("<I", record.chosen_token))
        for exit_id in header.exit_ids:
            arr = np.ascontiguousarray(record.logits[exit_id], dtype="<f4")
            parts.append(arr.tobytes())
        blob = b"".join(parts)
        sink.write(blob)
        written += len(blob)
    return written


def _read_exact(source: BinaryIO, n: int, offset: int, step_index: int | None) -> bytes:
    data = source.read(n)
    if len(data) != n:
        if step_index is None:
            raise StreamFormatError("truncated header", offset)
        raise TruncatedRecordError("truncated record", offset, step_index)
    return data


def read_stream(source: BinaryIO) -> tuple[StreamHeader, Iterator[StepRecord]]:
    """Parse the header eagerly, then yield records one at a time."""
    offset = 0
    head = source.read(struct.calcsize(_HEADER_FMT))
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagicError("bad magic", 0)
    if len(head) != struct.calcsize(_HEADER_FMT):
        raise StreamFormatError("truncated header", len(head))
    _, version, mode, vocab_size, n_exits = struct.unpack(_HEADER_FMT, head)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    offset += len(head)

    ids_blob = _read_exact(source, 2 * n_exits, offset, None)
    exit_ids = struct.unpack(f"<{n_exits}H", ids_blob)
    offset += len(ids_blob)
    header = StreamHeader(vocab_size=vocab_size, exit_ids=tuple(exit_ids), mode=mode)

    def records() -> Iterator[StepRecord]:
        pos = offset
        count = 0
        while True:
            first = source.read(5)
            if not first:
                return
            if len(first) != 5:
                raise TruncatedRecordError("truncated record", pos, count)
            step, has_choice = struct.unpack("<IB", first)
            pos += 5
            chosen = None
            if has_choice:
                blob = _read_exact(source, 4, pos, count)
                chosen = struct.unpack("<I", blob)[0]
                pos += 4
            logits: dict[int, np.ndarray] = {}
            for exit_id in header.exit_ids:
                blob = _read_exact(source, 4 * vocab_size, pos, count)
                logits[exit_id] = np.frombuffer(blob, dtype="<f4").copy()
                pos += 4 * vocab_size
            count += 1
            yield StepRecord(step=step, logits=logits, chosen_token=chosen)

    return header, records()


class ReplayProvider:
    """DistributionProvider over a recorded stream.

    Step selection is by context growth: the first call pins the base context
    length, and each extra token in later contexts advances one record.  This
    keeps beam search (several same-length calls per step) aligned.
    """

    def __init__(
        self,
        header: StreamHeader,
        records: Iterable[StepRecord],
        acd: AcdConfig | None = None,
    ):
        if acd is not None:
            for exit_id in (acd.expert_exit, acd.amateur_exit):
                if exit_id not in header.exit_ids:
                    raise ValueError(
                        f"exit {exit_id} not present in stream "
                        f"(available: {list(header.exit_ids)})"
                    )
        self.header = header
        self.acd = acd
        self._records = list(records)
        self._base_len: int | None = None
        self.expert_exit = acd.expert_exit if acd else max(header.exit_ids)

    def __len__(self) -> int:
        return len(self._records)

    def record_at(self, step: int) -> StepRecord:
        return self._records[step]

    def __call__(self, context) -> np.ndarray:
        if self._base_len is None:
            self._base_len = len(context)
        step = len(context) - self._base_len
        if step < 0 or step >= len(self._records):
            raise StreamExhausted(f"no record for step {step}")
        record = self._records[step]
        if self.acd is None:
            return softmax(record.logits[self.expert_exit])
        return acd_distribution_from_logits(
            record.logits[self.acd.expert_exit],
            record.logits[self.acd.amateur_exit],
            self.acd.alpha,
        )
