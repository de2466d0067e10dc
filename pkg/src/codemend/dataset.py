"""Instruction-tuning records, sequence packing, and grouped splits.

Each function pair fans out into up to five records across four tasks:

    identify   code -> "yes" (vulnerable) or "no" (repaired)
    repair     vulnerable code -> repaired code
    describe   vulnerable code -> prose description of the flaw
    comment    description -> short commit comment (1-3 lines)

A packed sequence is [BOS] instruction "\\n" input [SEP] output [EOS].
When a record overflows the length budget the input is truncated from the
left; the output is never cut (an output that cannot fit at all is a data
error). Records from the same pair carry a shared pair_id so splits can keep
a vulnerability's variants in one partition.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum

from .corpus import FunctionPair
from .errors import DataError, ValidationError
from .tokenizer import BOS_ID, EOS_ID, SEP_ID, TokenizerModel


class Task(str, Enum):
    IDENTIFY = "identify"
    REPAIR = "repair"
    DESCRIBE = "describe"
    COMMENT = "comment"


DEFAULT_INSTRUCTIONS: dict[Task, list[str]] = {
    Task.IDENTIFY: [
        "Does the following C function contain a security vulnerability? Answer yes or no.",
        "Is this C code vulnerable? Reply with yes or no.",
        "Check the function below for a security flaw and answer yes or no.",
        "Decide whether the given C function is exploitable. Respond yes or no.",
        "Answer yes if the following function has a vulnerability, otherwise no.",
    ],
    Task.REPAIR: [
        "Rewrite the following vulnerable C function so the flaw is fixed.",
        "Produce a repaired version of this C function.",
        "Fix the security vulnerability in the code below and output the full function.",
        "Patch the flaw in the following function and return the corrected code.",
    ],
    Task.DESCRIBE: [
        "Describe the security vulnerability in the following C function and how to address it.",
        "Explain what is wrong with this code from a security standpoint.",
        "Summarize the flaw in the function below and suggest the fix direction.",
        "What vulnerability does the following function contain? Describe it briefly.",
    ],
    Task.COMMENT: [
        "Condense the vulnerability description below into a short commit comment.",
        "Write a brief code review comment for the following vulnerability report.",
        "Turn this vulnerability description into a one-to-three line fix comment.",
        "Summarize the following flaw description as a terse commit message.",
    ],
}


@dataclass
class InstructRecord:
    task: Task
    instruction: str
    input: str
    output: str
    pair_id: int | None = None

    def validate(self) -> None:
        if not self.instruction.strip():
            raise ValidationError("record has empty instruction")
        if not self.input.strip():
            raise ValidationError("record has empty input")
        if not self.output:
            raise ValidationError("record has empty output")
        if self.task == Task.IDENTIFY and self.output not in ("yes", "no"):
            raise ValidationError(
                f"identify output must be 'yes' or 'no', got {self.output!r}"
            )
        if self.task == Task.COMMENT and not (1 <= len(self.output.splitlines()) <= 3):
            raise ValidationError("comment output must be 1-3 lines")


@dataclass
class BuildReport:
    per_task: dict[str, int] = field(default_factory=dict)
    skipped_no_fix: int = 0
    skipped_no_description: int = 0
    skipped_no_comment: int = 0


def build_records(
    pairs: list[FunctionPair],
    seed_instructions: dict[Task, list[str]] | None = None,
    seed: int = 0,
) -> tuple[list[InstructRecord], BuildReport]:
    """Fan pairs out into instruction records, sampling one instruction
    phrasing per record. Deterministic in (pairs, seed)."""
    instructions = seed_instructions or DEFAULT_INSTRUCTIONS
    for task in Task:
        if not instructions.get(task):
            raise DataError(f"no seed instructions for task {task.value}")
    rng = random.Random(seed)
    records: list[InstructRecord] = []
    report = BuildReport(per_task={t.value: 0 for t in Task})

    def emit(task: Task, input_text: str, output_text: str, pair_id: int) -> None:
        rec = InstructRecord(
            task=task,
            instruction=rng.choice(instructions[task]),
            input=input_text,
            output=output_text,
            pair_id=pair_id,
        )
        rec.validate()
        records.append(rec)
        report.per_task[task.value] += 1

    for pid, pair in enumerate(pairs):
        emit(Task.IDENTIFY, pair.vulnerable_code, "yes", pid)
        if pair.repaired_code is not None:
            emit(Task.IDENTIFY, pair.repaired_code, "no", pid)
            emit(Task.REPAIR, pair.vulnerable_code, pair.repaired_code, pid)
        else:
            report.skipped_no_fix += 1
        if pair.description is not None:
            emit(Task.DESCRIBE, pair.vulnerable_code, pair.description, pid)
        else:
            report.skipped_no_description += 1
        if pair.description is not None and pair.comment is not None:
            emit(Task.COMMENT, pair.description, pair.comment, pid)
        else:
            report.skipped_no_comment += 1
    return records, report


@dataclass
class PackedSequence:
    """Token ids for one record plus a per-position scoring mask.

    ids[0] is BOS; input tokens follow, then SEP, then q output tokens and
    EOS. loss_mask[j] says whether position j is scored as a prediction
    target. p and q count input and output tokens respectively, so
    len(ids) == p + q + 3.
    """

    ids: list[int]
    p: int
    q: int
    loss_mask: list[bool]


def pack_sequence(
    record: InstructRecord,
    tokenizer: TokenizerModel,
    max_len: int,
    mask_inputs: bool = False,
) -> PackedSequence:
    """Tokenize one record into a training sequence of at most max_len ids.

    With mask_inputs=False every position after BOS is scored (full-sequence
    language modeling); with mask_inputs=True only the output tokens and EOS
    are scored. The input segment is left-truncated to fit; the output
    segment never is."""
    input_ids = tokenizer.encode(record.instruction + "\n" + record.input)
    output_ids = tokenizer.encode(record.output)
    if not output_ids:
        raise DataError("record output encodes to zero tokens")
    budget = max_len - 3 - len(output_ids)
    if budget < 0:
        raise DataError(
            f"output of {len(output_ids)} tokens cannot fit in max_len {max_len}"
        )
    if len(input_ids) > budget:
        input_ids = input_ids[len(input_ids) - budget :]
    p, q = len(input_ids), len(output_ids)
    ids = [BOS_ID] + input_ids + [SEP_ID] + output_ids + [EOS_ID]
    if mask_inputs:
        mask = [False] * (p + 2) + [True] * (q + 1)
    else:
        mask = [False] + [True] * (p + q + 2)
    return PackedSequence(ids=ids, p=p, q=q, loss_mask=mask)


@dataclass
class SplitManifest:
    """Record indices per split plus the seed that produced the assignment."""

    train: list[int]
    valid: list[int]
    test: list[int]
    seed: int

    def check(self, n_records: int) -> None:
        all_ids = self.train + self.valid + self.test
        if sorted(all_ids) != list(range(n_records)):
            raise DataError("manifest does not cover records exactly once")


def split_dataset(
    records: list[InstructRecord], seed: int, ratios: tuple[float, float] = (0.8, 0.1)
) -> SplitManifest:
    """Partition record indices 80:10:10 by default, keeping records that
    share a pair_id in the same split. Groups are shuffled deterministically
    by seed; train fills to round(r_train * n), then valid, remainder test."""
    n = len(records)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    groups: dict[object, list[int]] = {}
    for idx, rec in enumerate(records):
        key = rec.pair_id if rec.pair_id is not None else f"solo:{idx}"
        groups.setdefault(key, []).append(idx)
    keys = sorted(groups.keys(), key=str)
    random.Random(seed).shuffle(keys)
    target_train = round(ratios[0] * n)
    target_valid = round(ratios[1] * n)
    train: list[int] = []
    valid: list[int] = []
    test: list[int] = []
    for key in keys:
        g = groups[key]
        if len(train) < target_train:
            train.extend(g)
        elif len(valid) < target_valid:
            valid.extend(g)
        else:
            test.extend(g)
    manifest = SplitManifest(sorted(train), sorted(valid), sorted(test), seed)
    manifest.check(n)
    return manifest


# --- persistence ----------------------------------------------------------


def save_records(records: list[InstructRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            row = {
                "task": rec.task.value,
                "instruction": rec.instruction,
                "input": rec.input,
                "output": rec.output,
            }
            if rec.pair_id is not None:
                row["pair_id"] = rec.pair_id
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_records(path: str) -> list[InstructRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: bad JSON ({e})") from None
            try:
                task = Task(row["task"])
                rec = InstructRecord(
                    task=task,
                    instruction=row["instruction"],
                    input=row["input"],
                    output=row["output"],
                    pair_id=row.get("pair_id"),
                )
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad record ({e})") from None
            rec.validate()
            records.append(rec)
    return records


def save_manifest(manifest: SplitManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "train": manifest.train,
                "valid": manifest.valid,
                "test": manifest.test,
                "seed": manifest.seed,
            },
            f,
            indent=2,
        )
        f.write("\n")


def load_manifest(path: str) -> SplitManifest:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: bad manifest JSON ({e})") from None
    try:
        return SplitManifest(
            train=list(raw["train"]),
            valid=list(raw["valid"]),
            test=list(raw["test"]),
            seed=int(raw["seed"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: bad manifest ({e})") from None
