"""Writer for the ACDS logit-stream binary format.

Layout (all integers little-endian):

    header: magic "ACDS" | version u16 | mode u8 | vocab_size u32
            | n_exits u16 | exit ids, u16 each
    record: step u32 | has_choice u8 | [chosen token u32 if has_choice]
            | per exit id, vocab_size float32 logits

Mode 0 is teacher-forced, mode 1 interactive.  This is an independent
implementation of the format; conformance against the consuming engine's
reader is covered by the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"ACDS"
VERSION = 1
MODE_TEACHER_FORCED = 0
MODE_INTERACTIVE = 1


@dataclass
class StreamStep:
    step: int
    logits: dict[int, np.ndarray] = field(default_factory=dict)
    chosen_token: int | None = None


def write_acds(
    sink: BinaryIO,
    mode: int,
    vocab_size: int,
    exit_ids: tuple[int, ...],
    steps: Iterable[StreamStep],
) -> int:
    if mode not in (MODE_TEACHER_FORCED, MODE_INTERACTIVE):
        raise ValueError(f"unknown mode {mode}")
    if list(exit_ids) != sorted(set(exit_ids)):
        raise ValueError("exit ids must be sorted ascending and unique")
    written = 0
    head = struct.pack("<4sHBIH", MAGIC, VERSION, mode, vocab_size, len(exit_ids))
    head += struct.pack(f"<{len(exit_ids)}H", *exit_ids)
    sink.write(head)
    written += len(head)
    for step in steps:
        if sorted(step.logits) != list(exit_ids):
            raise ValueError(
                f"step {step.step}: exits {sorted(step.logits)} do not match "
                f"{list(exit_ids)}"
            )
        has_choice = step.chosen_token is not None
        blob = struct.pack("<IB", step.step, int(has_choice))
        if has_choice:
            blob += struct.pack("<I", step.chosen_token)
        for exit_id in exit_ids:
            arr = np.ascontiguousarray(step.logits[exit_id], dtype="<f4")
            if arr.shape != (vocab_size,):
                raise ValueError(
                    f"step {step.step} exit {exit_id}: expected {vocab_size} "
                    f"logits, got {arr.shape}"
                )
            blob += arr.tobytes()
        sink.write(blob)
        written += len(blob)
    return written
