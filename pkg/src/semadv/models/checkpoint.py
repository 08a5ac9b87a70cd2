"""Checkpoint persistence: named-tensor container plus a plain-text
architecture descriptor."""

from __future__ import annotations

import hashlib
from pathlib import Path

from ..errors import SetupError
from ..numerics import read_named_tensors, write_named_tensors
from .nets import ClassifierNet, DenoiserNet, MlpDenoiserNet

__all__ = ["save_model", "load_model", "checkpoint_digest"]

_KINDS = {cls.kind: cls for cls in (DenoiserNet, ClassifierNet, MlpDenoiserNet)}


def save_model(net, prefix):
    """Write `<prefix>.arch.txt` and `<prefix>.params.bin`."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    desc = net.arch_descriptor()
    lines = [f"{k}={desc[k]}" for k in desc]
    prefix.with_suffix(".arch.txt").write_text("\n".join(lines) + "\n")
    write_named_tensors(prefix.with_suffix(".params.bin"), net.params)


def load_model(prefix):
    prefix = Path(prefix)
    arch_path = prefix.with_suffix(".arch.txt")
    params_path = prefix.with_suffix(".params.bin")
    if not arch_path.exists() or not params_path.exists():
        raise SetupError(f"checkpoint missing at {prefix}")
    desc = {}
    for line in arch_path.read_text().splitlines():
        line = line.strip()
        if line:
            k, _, v = line.partition("=")
            desc[k] = v
    kind = desc.get("kind")
    if kind not in _KINDS:
        raise SetupError(f"unknown checkpoint kind {kind!r} at {prefix}")
    params = read_named_tensors(params_path)
    return _KINDS[kind].from_descriptor(desc, params)


def checkpoint_digest(prefix):
    """SHA-256 over descriptor and parameter bytes."""
    prefix = Path(prefix)
    h = hashlib.sha256()
    h.update(prefix.with_suffix(".arch.txt").read_bytes())
    h.update(prefix.with_suffix(".params.bin").read_bytes())
    return h.hexdigest()
