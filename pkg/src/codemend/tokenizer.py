"""Byte-level BPE tokenizer.

Every token id is either a special, a raw byte, or a learned merge:

    0..3     specials: PAD=0, BOS=1, SEP=2, EOS=3
    4..259   the 256 byte values (byte b -> id b + 4)
    260..    merged pairs, in the order they were learned

Training counts adjacent pairs over the byte-encoded corpus and repeatedly
merges the most frequent pair; frequency ties go to the pair whose
(left bytes, right bytes) tuple is lexicographically smallest, so training
is deterministic. Encoding replays merges greedily: at each step the pair
with the lowest merge rank present in the sequence is collapsed. There is
no regex pre-tokenization stage; merges may cross whitespace and
punctuation freely.

Decoding any encode() output restores the exact input string, since every
byte survives as either itself or part of a merged token.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, InputError

PAD_ID = 0
BOS_ID = 1
SEP_ID = 2
EOS_ID = 3
NUM_SPECIALS = 4
BYTE_OFFSET = 4
BASE_VOCAB = 260  # specials + 256 bytes

_SPECIAL_NAMES = {PAD_ID: "<pad>", BOS_ID: "<bos>", SEP_ID: "<sep>", EOS_ID: "<eos>"}


class TokenizerModel:
    """A trained byte-level BPE vocabulary.

    Attributes:
        vocab_size: total number of ids (specials + bytes + merges).
        merges: list of (left_id, right_id) pairs; merge i produced id 260+i.
    """

    def __init__(self, merges: list[tuple[int, int]] | None = None):
        self.merges: list[tuple[int, int]] = list(merges or [])
        self.vocab_size = BASE_VOCAB + len(self.merges)
        # byte string for every non-special id
        self.token_bytes: dict[int, bytes] = {
            BYTE_OFFSET + b: bytes([b]) for b in range(256)
        }
        for i, (left, right) in enumerate(self.merges):
            new_id = BASE_VOCAB + i
            if left not in self.token_bytes or right not in self.token_bytes:
                raise DataError(
                    f"merge {i} references id not yet defined: ({left}, {right})"
                )
            self.token_bytes[new_id] = self.token_bytes[left] + self.token_bytes[right]
        self._ranks: dict[tuple[int, int], int] = {
            pair: i for i, pair in enumerate(self.merges)
        }

    def encode(self, text: str) -> list[int]:
        """Encode a string to token ids. Specials are never emitted."""
        ids = [BYTE_OFFSET + b for b in text.encode("utf-8")]
        ranks = self._ranks
        if not ranks:
            return ids
        while len(ids) >= 2:
            best_rank = None
            best_pair = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
                    best_pair = pair
            if best_pair is None:
                break
            left, right = best_pair
            merged = BASE_VOCAB + best_rank
            out = []
            i = 0
            n = len(ids)
            while i < n:
                if i < n - 1 and ids[i] == left and ids[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def decode(self, ids: list[int]) -> str:
        """Decode ids back to a string. Special ids are dropped; ids outside
        the vocabulary raise InputError."""
        parts = []
        for tid in ids:
            if tid < 0 or tid >= self.vocab_size:
                raise InputError(f"token id {tid} outside vocabulary of size {self.vocab_size}")
            if tid < NUM_SPECIALS:
                continue
            parts.append(self.token_bytes[tid])
        return b"".join(parts).decode("utf-8", errors="replace")

    def save(self, path: str) -> None:
        """Write the model as text: one vocab_size header line, then one
        tab-separated merge per line with both sides as escaped byte strings."""
        lines = [f"vocab_size={self.vocab_size}"]
        for left, right in self.merges:
            lines.append(
                _escape_bytes(self.token_bytes[left])
                + "\t"
                + _escape_bytes(self.token_bytes[right])
            )
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "TokenizerModel":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or not lines[0].startswith("vocab_size="):
            raise DataError(f"{path}: missing vocab_size header")
        try:
            declared = int(lines[0].split("=", 1)[1])
        except ValueError:
            raise DataError(f"{path}: bad vocab_size header {lines[0]!r}") from None
        by_bytes = {bytes([b]): BYTE_OFFSET + b for b in range(256)}
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: merge line has no tab separator")
            left_s, right_s = line.split("\t", 1)
            left_b = _unescape_bytes(left_s, path, lineno)
            right_b = _unescape_bytes(right_s, path, lineno)
            if left_b not in by_bytes or right_b not in by_bytes:
                raise DataError(
                    f"{path}:{lineno}: merge references token not derivable from prior lines"
                )
            left, right = by_bytes[left_b], by_bytes[right_b]
            new_id = BASE_VOCAB + len(merges)
            merges.append((left, right))
            by_bytes[left_b + right_b] = new_id
        model = cls(merges)
        if model.vocab_size != declared:
            raise DataError(
                f"{path}: header says vocab_size={declared} but file derives {model.vocab_size}"
            )
        return model


def train_bpe(corpus: list[str], vocab_size: int) -> TokenizerModel:
    """Learn a BPE vocabulary of (at most) vocab_size ids from a text corpus.

    vocab_size must be at least 260 (specials + bytes). Pairs never merge
    across document boundaries. If the corpus runs out of repeating pairs
    before reaching vocab_size, training stops early and the model reports
    the smaller achieved size.
    """
    if vocab_size < BASE_VOCAB:
        raise DataError(f"vocab_size must be >= {BASE_VOCAB}, got {vocab_size}")
    model = TokenizerModel()
    # Flatten corpus into one int array; -1 sentinels separate documents so
    # no pair spans two texts.
    chunks = []
    for text in corpus:
        chunks.append(np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET)
        chunks.append(np.array([-1], dtype=np.int64))
    ids = np.concatenate(chunks) if chunks else np.array([], dtype=np.int64)

    byte_strings = set(model.token_bytes.values())
    merges: list[tuple[int, int]] = []
    n_merges = vocab_size - BASE_VOCAB
    while len(merges) < n_merges and len(ids) >= 2:
        left_arr, right_arr = ids[:-1], ids[1:]
        valid = (left_arr >= 0) & (right_arr >= 0)
        if not valid.any():
            break
        keys = left_arr[valid] << 21 | right_arr[valid]
        uniq, counts = np.unique(keys, return_counts=True)
        best = counts.max()
        if best < 2:
            break  # nothing repeats; further merges would not compress
        candidates = uniq[counts == best]
        pair = _pick_pair(candidates, model.token_bytes, byte_strings)
        if pair is None:
            break
        left, right = pair
        new_id = BASE_VOCAB + len(merges)
        merges.append((left, right))
        new_bytes = model.token_bytes[left] + model.token_bytes[right]
        model.token_bytes[new_id] = new_bytes
        byte_strings.add(new_bytes)
        ids = _apply_merge(ids, left, right, new_id)
    return TokenizerModel(merges)


def _pick_pair(candidate_keys, token_bytes, byte_strings):
    """Among equal-frequency pairs choose the lexicographically smallest by
    byte strings, skipping any whose merged bytes already name a token."""
    best = None
    best_key = None
    for key in candidate_keys:
        left, right = int(key) >> 21, int(key) & ((1 << 21) - 1)
        lb, rb = token_bytes[left], token_bytes[right]
        if lb + rb in byte_strings:
            continue
        k = (lb, rb)
        if best_key is None or k < best_key:
            best_key = k
            best = (left, right)
    return best


def _apply_merge(ids: np.ndarray, left: int, right: int, new_id: int) -> np.ndarray:
    """Replace every non-overlapping (left, right) adjacency with new_id,
    scanning left to right (in a run of overlaps, earliest match wins)."""
    match = (ids[:-1] == left) & (ids[1:] == right)
    pos = np.flatnonzero(match)
    if pos.size == 0:
        return ids
    if left == right:
        # consecutive matches overlap; keep every other one within each run
        run_start = np.empty(pos.size, dtype=bool)
        run_start[0] = True
        run_start[1:] = pos[1:] != pos[:-1] + 1
        run_idx = np.cumsum(run_start) - 1
        first = pos[run_start][run_idx]
        pos = pos[((pos - first) % 2) == 0]
    out = ids.copy()
    out[pos] = new_id
    keep = np.ones(len(out), dtype=bool)
    keep[pos + 1] = False
    return out[keep]


def _escape_bytes(bs: bytes) -> str:
    """Printable ASCII (0x20..0x7e) stays literal except backslash, which
    doubles; controls and high bytes become \\xHH."""
    out = []
    for b in bs:
        if b == 0x5C:
            out.append("\\\\")
        elif 0x20 <= b <= 0x7E:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def _unescape_bytes(s: str, path: str, lineno: int) -> bytes:
    out = bytearray()
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\":
            if i + 1 < len(s) and s[i + 1] == "\\":
                out.append(0x5C)
                i += 2
            elif i + 3 < len(s) and s[i + 1] == "x":
                try:
                    out.append(int(s[i + 2 : i + 4], 16))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad escape {s[i:i+4]!r}") from None
                i += 4
            else:
                raise DataError(f"{path}:{lineno}: bad escape at column {i}")
        else:
            out.extend(c.encode("utf-8"))
            i += 1
    return bytes(out)
