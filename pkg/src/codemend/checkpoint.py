"""Binary model checkpoints.

Layout (all integers little-endian):

    bytes 0..3   magic b"SRPK"
    u32          format version (currently 1)
    u32          config block length, then that many bytes of UTF-8
                 "key=value" lines describing the model shape
    u32          tensor count
    per tensor:  u16 name length, name bytes (UTF-8),
                 u8 rank, rank x u32 dims,
                 then prod(dims) float32 values

Loading verifies magic, version, and exact framing: any truncation or
trailing garbage raises IntegrityError naming the byte offset, and every
tensor must match the model's parameters in name and shape. A round trip
restores bit-identical weights."""

from __future__ import annotations

import struct

import torch

from .errors import IntegrityError
from .model import CausalLM, ModelConfig

MAGIC = b"SRPK"
FORMAT_VERSION = 1


def save_checkpoint(model: CausalLM, path: str) -> None:
    config_block = "".join(
        f"{k}={v}\n" for k, v in model.config.to_dict().items()
    ).encode("utf-8")
    named = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(config_block)))
        f.write(config_block)
        f.write(struct.pack("<I", len(named)))
        for name, p in named:
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            dims = tuple(p.shape)
            f.write(struct.pack("<B", len(dims)))
            for d in dims:
                f.write(struct.pack("<I", d))
            f.write(p.detach().to(torch.float32).contiguous().numpy().tobytes())


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise IntegrityError(
                f"{self.path}: truncated reading {what} at offset {self.off} "
                f"(need {n} bytes, have {len(self.data) - self.off})"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def load_checkpoint(path: str) -> CausalLM:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r} at offset 0")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    cfg_len = r.u32("config length")
    cfg_block = r.take(cfg_len, "config block").decode("utf-8")
    cfg_map = {}
    for line in cfg_block.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise IntegrityError(f"{path}: bad config line {line!r}")
        k, v = line.split("=", 1)
        cfg_map[k] = v
    try:
        config = ModelConfig.from_dict(cfg_map)
    except Exception as e:
        raise IntegrityError(f"{path}: bad model config ({e})") from None

    n_tensors = r.u32("tensor count")
    tensors: dict[str, torch.Tensor] = {}
    for i in range(n_tensors):
        name_len = r.u16(f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        rank = r.u8(f"tensor {name} rank")
        dims = tuple(r.u32(f"tensor {name} dim {j}") for j in range(rank))
        count = 1
        for d in dims:
            count *= d
        payload = r.take(4 * count, f"tensor {name} payload")
        arr = torch.frombuffer(bytearray(payload), dtype=torch.float32).reshape(dims)
        tensors[name] = arr
    if r.off != len(data):
        raise IntegrityError(
            f"{path}: {len(data) - r.off} trailing bytes at offset {r.off}"
        )

    model = CausalLM(config)
    expected = dict(model.named_parameters())
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise IntegrityError(
            f"{path}: parameter names mismatch (missing {missing}, unexpected {extra})"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise IntegrityError(
                    f"{path}: tensor {name} has shape {tuple(t.shape)}, "
                    f"model expects {tuple(p.shape)}"
                )
            p.copy_(t)
    model.eval()
    return model
