"""Checkpoints: a ``key = value`` manifest plus a flat little-endian float64 blob.

Files for a checkpoint at ``path``::

    path          manifest (config, step, tensor names and shapes in blob order)
    path.bin      concatenated tensors, '<f8'
    path.vocab    vocabulary, one token per line (optional)

The manifest is written last, so a crash mid-save leaves the previous
checkpoint intact.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import ModelConfig, Params
from .tensor import Tensor
from .tokenizer import Vocab

FORMAT = "mpnet-lab-1"
PathLike = Union[str, Path]


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: Params
    step: int = 0
    meta: dict[str, str] = field(default_factory=dict)    # everything else in the manifest
    moments: Optional[dict[str, np.ndarray]] = None       # "m.<name>" / "v.<name>"
    vocab: Optional[Vocab] = None


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save(path: PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray]] = [(f"param.{k}", t.data) for k, t in ckpt.params.items()]
    if ckpt.moments:
        arrays += [(f"adam.{k}", v) for k, v in ckpt.moments.items()]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    _atomic_write(Path(f"{path}.bin"), blob)
    if ckpt.vocab is not None:
        _atomic_write(Path(f"{path}.vocab"), ("\n".join(ckpt.vocab.tokens) + "\n").encode("utf-8"))

    lines = [f"format = {FORMAT}", f"step = {ckpt.step}", f"bin_sha256 = {hashlib.sha256(blob).hexdigest()}",
             f"vocab_file = {'yes' if ckpt.vocab is not None else 'no'}"]
    lines += [f"model.{k} = {v}" for k, v in ckpt.model_cfg.to_dict().items()]
    lines += [f"{k} = {v}" for k, v in ckpt.meta.items()]
    lines += [f"tensor.{name} = {'x'.join(map(str, a.shape)) or 'scalar'}" for name, a in arrays]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return path


def parse_manifest(text: str, source: str = "<manifest>") -> list[tuple[str, str]]:
    out = []
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{source}:{num}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out.append((key.strip(), val.strip()))
    return out


def load(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        entries = parse_manifest(path.read_text(encoding="utf-8"), str(path))
        blob = Path(f"{path}.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head = dict(entries)
    if head.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {head.get('format')!r}")
    if hashlib.sha256(blob).hexdigest() != head.get("bin_sha256"):
        raise CheckpointError(f"{path}.bin does not match the manifest checksum")

    model_vals, meta, tensors = {}, {}, []
    for key, val in entries:
        if key.startswith("model."):
            model_vals[key[6:]] = val
        elif key.startswith("tensor."):
            shape = () if val == "scalar" else tuple(int(s) for s in val.split("x"))
            tensors.append((key[7:], shape))
        elif key not in ("format", "step", "bin_sha256", "vocab_file"):
            meta[key] = val
    flat = np.frombuffer(blob, dtype="<f8")
    need = sum(int(np.prod(s)) for _, s in tensors)
    if need != flat.size:
        raise CheckpointError(f"{path}.bin holds {flat.size} values, manifest declares {need}")

    params: Params = {}
    moments: dict[str, np.ndarray] = {}
    at = 0
    for name, shape in tensors:
        size = int(np.prod(shape))
        arr = flat[at:at + size].reshape(shape).astype(np.float64)
        at += size
        if name.startswith("param."):
            params[name[6:]] = Tensor(arr, requires_grad=True, name=name[6:])
        elif name.startswith("adam."):
            moments[name[5:]] = arr
        else:
            raise CheckpointError(f"{path}: unexpected tensor entry {name!r}")
    vocab = Vocab.load(f"{path}.vocab") if head.get("vocab_file") == "yes" else None
    return Checkpoint(ModelConfig.from_dict(model_vals), params, int(head.get("step", 0)), meta,
                      moments or None, vocab)
