"""Checkpoint container: safetensors blobs plus JSON metadata (config, tokenizer, hash)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from .toy import ToyBackend, ToyConfig, ToyTokenizer

FORMAT = "multiperso-toy/1"
ARRAY_PREFIX = "aux."


@dataclass
class LoadedCheckpoint:
    backend: ToyBackend
    extra: dict
    arrays: dict = field(default_factory=dict)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(backend: ToyBackend) -> str:
    payload = {"config": dataclasses.asdict(backend.config), "scheduler": backend.scheduler.config()}
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def state_hash(backend: ToyBackend) -> str:
    """Hash of every parameter/buffer plus the tokenizer vocabulary."""
    h = hashlib.sha256()
    h.update(_canonical(backend.tokenizer.state()).encode())
    for name, tensor in sorted(backend.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(backend: ToyBackend, path, extra: dict | None = None, arrays: dict | None = None) -> str:
    """Write parameters, metadata and optional auxiliary arrays; returns the state hash.

    Auxiliary arrays (e.g. the reference image and masks) are stored under an
    ``aux.`` prefix and are not part of the state hash.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in backend.state_dict().items()}
    for k, v in (arrays or {}).items():
        tensors[ARRAY_PREFIX + k] = torch.as_tensor(v).contiguous()
    digest = state_hash(backend)
    metadata = {
        "format": FORMAT,
        "config": _canonical(dataclasses.asdict(backend.config)),
        "scheduler": _canonical(backend.scheduler.config()),
        "config_hash": config_hash(backend),
        "state_hash": digest,
        "tokenizer": _canonical(backend.tokenizer.state()),
        "extra": _canonical(extra or {}),
    }
    save_file(tensors, str(path), metadata=metadata)
    return digest


def read_metadata(path) -> dict:
    from safetensors import SafetensorError, safe_open

    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
    except SafetensorError as exc:
        raise ValueError(f"{path} is not a readable safetensors file ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    return meta


def load_checkpoint(path) -> LoadedCheckpoint:
    meta = read_metadata(path)
    cfg = ToyConfig(**json.loads(meta["config"]))
    backend = ToyBackend(cfg)
    backend.tokenizer = ToyTokenizer.from_state(json.loads(meta["tokenizer"]))
    tensors = load_file(str(path))
    arrays = {k[len(ARRAY_PREFIX):]: v.numpy() for k, v in tensors.items() if k.startswith(ARRAY_PREFIX)}
    tensors = {k: v for k, v in tensors.items() if not k.startswith(ARRAY_PREFIX)}
    rows = tensors["text_encoder.placeholder_embedding"]
    backend.text_encoder.placeholder_embedding = torch.nn.Parameter(torch.zeros_like(rows))
    backend.load_state_dict(tensors)
    if state_hash(backend) != meta["state_hash"]:
        raise ValueError(f"state hash mismatch while loading {path}")
    return LoadedCheckpoint(backend, json.loads(meta["extra"]), arrays)
