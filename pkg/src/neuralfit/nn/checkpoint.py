"""Checkpoints: network parameters, Adam state and a meta record in one MFIT file."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import container
from ..errors import ConfigHashMismatch, FormatError
from .optim import AdamState

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)   # non-trainable arrays


def checkpoint_arrays(ck: Checkpoint) -> dict:
    meta = {"type": "checkpoint", "version": CHECKPOINT_VERSION, **ck.meta}
    arrays = {"meta": container.pack_meta(meta)}
    for k in sorted(ck.params):
        arrays[f"p/{k}"] = ck.params[k]
    for k in sorted(ck.extra):
        arrays[f"x/{k}"] = ck.extra[k]
    if ck.adam is not None:
        a = ck.adam
        arrays["adam/hyper"] = np.array([a.lr, a.beta1, a.beta2, a.eps])
        arrays["adam/step"] = np.array([a.step], dtype=np.int64)
        for k in sorted(a.m):
            arrays[f"adam/m/{k}"] = a.m[k]
            arrays[f"adam/v/{k}"] = a.v[k]
    return arrays


def save_checkpoint(path, ck: Checkpoint) -> None:
    container.write(path, checkpoint_arrays(ck))


def checkpoint_from_arrays(arrays: dict, config_hash: str | None = None) -> Checkpoint:
    if "meta" not in arrays:
        raise FormatError("checkpoint has no meta record")
    meta = container.unpack_meta(arrays["meta"])
    if meta.pop("type", None) != "checkpoint":
        raise FormatError("container does not hold a checkpoint")
    if meta.pop("version", None) != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version")
    params, extra, m, v = {}, {}, {}, {}
    for k, arr in arrays.items():
        if k.startswith("p/"):
            params[k[2:]] = arr
        elif k.startswith("x/"):
            extra[k[2:]] = arr
        elif k.startswith("adam/m/"):
            m[k[7:]] = arr
        elif k.startswith("adam/v/"):
            v[k[7:]] = arr
    adam = None
    if "adam/hyper" in arrays:
        lr, b1, b2, eps = (float(x) for x in arrays["adam/hyper"])
        adam = AdamState(lr, b1, b2, eps, int(arrays["adam/step"][0]), m, v)
    if config_hash is not None and meta.get("config_hash") != config_hash:
        warnings.warn(f"checkpoint config hash {meta.get('config_hash')} != {config_hash}",
                      ConfigHashMismatch, stacklevel=3)
    return Checkpoint(params, adam, meta, extra)


def load_checkpoint(path, config_hash: str | None = None) -> Checkpoint:
    return checkpoint_from_arrays(container.read(path), config_hash)
