"""Masked diffusion, mask-to-attention, inter-cross-attention and augmentation losses.

Reduction: elementwise mean inside each term, summed over the sampled subjects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .attention import class_prior_map, subject_map
from .core import AttentionStack, LossWeights, PromptPair, mask_union, resize_mask
from .errors import ContractViolationError, InvalidArgumentError, NumericError


@dataclass
class StepBatch:
    """Everything one optimization step needs.

    `latent_mask` is the union mask of `subset` at latent resolution;
    `attn_masks[i]` is subject i's mask at attention resolution.
    """

    z_t: torch.Tensor
    t: int
    epsilon: torch.Tensor
    prediction: torch.Tensor
    subset: tuple[int, ...]
    pair: PromptPair
    latent_mask: np.ndarray
    attn_masks: dict[int, np.ndarray]
    stacks: dict[str, AttentionStack]

    def __post_init__(self):
        if not self.subset:
            raise InvalidArgumentError("subset must be non-empty")
        if self.prediction.shape != self.epsilon.shape or self.epsilon.shape != self.z_t.shape:
            raise InvalidArgumentError(
                f"shape mismatch: z_t {tuple(self.z_t.shape)}, eps {tuple(self.epsilon.shape)}, "
                f"prediction {tuple(self.prediction.shape)}"
            )


def build_masks(full_masks: dict[int, np.ndarray], subset, latent_hw: tuple[int, int], m: int):
    """Union-then-resize for the latent mask, per-subject resize for attention masks."""
    union = mask_union([full_masks[i] for i in subset])
    h, w = latent_hw
    if h != w:
        raise InvalidArgumentError("square latents only")
    return resize_mask(union, h), {i: resize_mask(full_masks[i], m) for i in subset}


def _as_tensor(a, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=like.dtype)


def masked_diffusion_loss(batch: StepBatch) -> torch.Tensor:
    """Mean of (eps - eps_hat)^2 over masked elements (all channels of masked pixels)."""
    if not batch.subset:
        raise InvalidArgumentError("empty subject subset")
    eps, pred = batch.epsilon, batch.prediction
    mask = _as_tensor(batch.latent_mask, pred)
    if tuple(mask.shape) != tuple(eps.shape[-2:]):
        raise InvalidArgumentError(f"latent mask {tuple(mask.shape)} vs latent {tuple(eps.shape[-2:])}")
    diff = eps * mask - pred * mask
    per_pixel = eps.numel() // mask.numel()
    count = max(1.0, float(mask.sum()) * per_pixel)
    return (diff**2).sum() / count


def _attention_mask(batch: StepBatch, i: int, stack: AttentionStack) -> np.ndarray:
    mask = np.asarray(batch.attn_masks[i])
    m = stack.resolution
    if mask.shape != (m, m):
        raise InvalidArgumentError(f"mask for subject {i} is {mask.shape}, attention is {m}x{m}")
    return mask


def masked_attention_loss(batch: StepBatch) -> torch.Tensor:
    stack = batch.stacks["placeholder"]
    total = stack.maps.new_zeros(())
    for i in batch.subset:
        mask = _as_tensor(_attention_mask(batch, i, stack), stack.maps)
        a = subject_map(stack, batch.pair, i, "placeholder")
        total = total + ((a - mask) ** 2).mean()
    return total


def _ica(batch: StepBatch, branch_class: AttentionStack | None) -> torch.Tensor:
    stack = batch.stacks["placeholder"]
    cls = branch_class if branch_class is not None else batch.stacks.get("class")
    if cls is None or not cls.frozen:
        raise ContractViolationError("class branch must be a frozen (stop-gradient) attention stack")
    if cls.resolution != stack.resolution:
        raise InvalidArgumentError("placeholder and class stacks differ in resolution")
    total = stack.maps.new_zeros(())
    for i in batch.subset:
        target = class_prior_map(cls, batch.pair, i, _attention_mask(batch, i, stack))
        a = subject_map(stack, batch.pair, i, "placeholder")
        total = total + ((a - target) ** 2).mean()
    return total


def ica_loss(batch: StepBatch, branch_class: AttentionStack | None = None) -> torch.Tensor:
    """Pull each placeholder map toward g(M_i * class map) computed under stop-gradient."""
    return _ica(batch, branch_class)


def aug_loss(batch_aug: StepBatch, branch_class: AttentionStack | None = None) -> torch.Tensor:
    """ICA on an augmented sample: (c_a, c-hat_a) prompts and pseudo-label masks; no reconstruction term."""
    return _ica(batch_aug, branch_class)


def _finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(float(x))


def total_loss(md, m2a, ica, aug, w: LossWeights | None = None):
    w = w or LossWeights()
    for name, v in (("md", md), ("m2a", m2a), ("ica", ica), ("aug", aug)):
        if not _finite(v):
            raise NumericError(f"non-finite {name} loss: {v}")
    return w.lambda_md * md + w.lambda_m2a * m2a + w.lambda_ica * ica + w.lambda_aug * aug
