"""Model contracts an adapter has to satisfy.

Any object implementing these structurally can be dropped in place of the toy
backend; the conformance tests in ``tests/test_backend_contracts.py`` are
written against the protocols, not the toy classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import torch


@dataclass
class AttentionTap:
    """Post-softmax cross-attention of one layer: probs is (B, heads, m*m, N_tokens)."""

    name: str
    probs: torch.Tensor
    resolution: int


@dataclass
class DenoiserRun:
    prediction: torch.Tensor
    taps: list[AttentionTap] | None = None


@runtime_checkable
class TextEncoderContract(Protocol):
    def tokenize(self, text: str) -> tuple[list[int], list[tuple[int, int]]]: ...

    def encode_ids(self, ids) -> torch.Tensor: ...


@runtime_checkable
class DenoiserContract(Protocol):
    def run(self, z_t: torch.Tensor, t, context: torch.Tensor, record_attention: bool = False) -> DenoiserRun: ...


@runtime_checkable
class SchedulerContract(Protocol):
    T: int

    def add_noise(self, z0, noise, t): ...

    def step(self, prediction, z_t, t, generator=None, noise=None): ...


class Codec(Protocol):
    def encode(self, image) -> torch.Tensor: ...

    def decode(self, z) -> object: ...


class Backend(Protocol):
    """What the trainer, augmentation and eval code need from a model bundle."""

    tokenizer: object
    text_encoder: torch.nn.Module
    denoiser: DenoiserContract
    scheduler: SchedulerContract
    codec: Codec

    @property
    def T(self) -> int: ...

    def tokenize(self, text: str) -> tuple[Sequence[int], Sequence[tuple[int, int]]]: ...

    def encode_ids(self, ids) -> torch.Tensor: ...

    def placeholder_parameters(self) -> list[torch.nn.Parameter]: ...

    def full_parameters(self) -> list[torch.nn.Parameter]: ...
