"""Checkpoint persistence: named tensors in a single binary file.

Layout: 8-byte magic, u64 config fingerprint (little endian), u32 entry
count, then per entry a u32 name length, the UTF-8 name, and the tensor in
MALTNSR1 framing.  Entries are written in sorted name order so identical
state always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams
from .optim import EmaState, OptimState
from .tensor import Tensor, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"MALCKPT1"


def config_fingerprint(cfg: ModelConfig) -> int:
    digest = hashlib.sha256(cfg.fingerprint_text().encode("utf-8")).digest()
    return struct.unpack("<Q", digest[:8])[0]


@dataclass
class Checkpoint:
    fingerprint: int
    entries: dict[str, np.ndarray]

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.entries.items()
                if k.startswith("param/")}


def save_checkpoint(path, model: ModelParams, optim: OptimState | None = None,
                    ema: EmaState | None = None) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        entries[f"param/{name}"] = p.data
    if optim is not None:
        for name, arr in optim.m.items():
            entries[f"adam_m/{name}"] = arr
        for name, arr in optim.v.items():
            entries[f"adam_v/{name}"] = arr
        entries["meta/step"] = np.asarray([float(optim.step)], dtype=np.float64)
    if ema is not None:
        for name, arr in ema.shadow.items():
            entries[f"ema/{name}"] = arr
        entries["meta/ema_decay"] = np.asarray([ema.decay], dtype=np.float64)
    fingerprint = config_fingerprint(model.config)
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<Q", fingerprint))
        fp.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            raw = name.encode("utf-8")
            fp.write(struct.pack("<I", len(raw)))
            fp.write(raw)
            write_tensor(fp, entries[name])


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fp:
            magic = fp.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad checkpoint magic {magic!r}")
            fingerprint = struct.unpack("<Q", fp.read(8))[0]
            count = struct.unpack("<I", fp.read(4))[0]
            entries = {}
            for _ in range(count):
                nlen = struct.unpack("<I", fp.read(4))[0]
                name = fp.read(nlen).decode("utf-8")
                entries[name] = read_tensor(fp)
    except (OSError, struct.error) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint(fingerprint=fingerprint, entries=entries)


def check_fingerprint(ckpt: Checkpoint, cfg: ModelConfig) -> None:
    expect = config_fingerprint(cfg)
    if ckpt.fingerprint != expect:
        raise CheckpointError(
            "checkpoint fingerprint does not match the run configuration "
            f"(checkpoint {ckpt.fingerprint:#018x}, config {expect:#018x})")


def restore_params(model: ModelParams, ckpt: Checkpoint,
                   prefixes: tuple[str, ...] | None = None) -> list[str]:
    """Copy checkpoint parameters into the model; returns restored names.

    ``prefixes`` restricts restoration (e.g. encoder-only adoption for
    fine-tuning); shape mismatches are errors, absent names are skipped
    unless every requested prefix matched nothing.
    """
    params = model.named_parameters()
    stored = ckpt.params()
    restored = []
    for name, p in params.items():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        if name not in stored:
            continue
        arr = stored[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch restoring {name}: checkpoint {arr.shape}, "
                f"model {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
        restored.append(name)
    if not restored:
        raise CheckpointError("checkpoint restored no parameters")
    return restored


def restore_optim(ckpt: Checkpoint, params: dict[str, Tensor],
                  **kwargs) -> OptimState | None:
    if "meta/step" not in ckpt.entries:
        return None
    state = OptimState.for_params(params, **kwargs)
    state.step = int(ckpt.entries["meta/step"][0])
    for name in params:
        m = ckpt.entries.get(f"adam_m/{name}")
        v = ckpt.entries.get(f"adam_v/{name}")
        if m is not None:
            state.m[name] = m.astype(state.m[name].dtype)
        if v is not None:
            state.v[name] = v.astype(state.v[name].dtype)
    return state


def restore_ema(ckpt: Checkpoint, params: dict[str, Tensor]) -> EmaState | None:
    shadow = {}
    for name, p in params.items():
        s = ckpt.entries.get(f"ema/{name}")
        if s is None:
            return None
        shadow[name] = s.astype(p.data.dtype)
    decay = float(ckpt.entries.get("meta/ema_decay", np.asarray([0.9999]))[0])
    return EmaState(shadow=shadow, decay=decay)
