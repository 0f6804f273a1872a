"""Cross-attention extraction, per-subject slicing and concept-prior targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import AttentionStack, PromptPair, normalize_map
from .errors import CapabilityError, ContractViolationError, InvalidArgumentError


@dataclass(frozen=True)
class AttentionTapConfig:
    """Which tapped layers to collect and the working resolution they are resampled to.

    Layers and heads are always averaged uniformly; multi-token subjects are
    averaged over their token positions.
    """

    resolution: int = 16
    resolutions: frozenset = field(default_factory=lambda: frozenset({16}))
    reduce: str = "mean"
    token_reduce: str = "mean"

    def __post_init__(self):
        if not self.resolutions:
            raise InvalidArgumentError("resolutions must be non-empty")
        if self.reduce != "mean" or self.token_reduce != "mean":
            raise InvalidArgumentError("only mean aggregation is supported")
        if self.resolution < 1:
            raise InvalidArgumentError("resolution must be >= 1")


def extract_attention(denoiser_run, tap: AttentionTapConfig, timestep: int = 0, index: int = 0) -> AttentionStack:
    """Average the tapped post-softmax maps of one denoiser call into an m x m x N stack."""
    taps = getattr(denoiser_run, "taps", None)
    if not taps:
        raise CapabilityError("denoiser run carries no attention taps (call with record_attention=True)")
    m = tap.resolution
    collected = []
    for rec in taps:
        if rec.resolution not in tap.resolutions:
            continue
        probs = rec.probs[index]  # (heads, r*r, N)
        r = rec.resolution
        if probs.shape[1] != r * r:
            raise CapabilityError(f"tap {rec.name} reports {probs.shape[1]} locations, expected {r}x{r}")
        maps = probs.mean(dim=0).reshape(r, r, -1)
        if r != m:
            grid = maps.permute(2, 0, 1).unsqueeze(0)
            grid = F.interpolate(grid, size=(m, m), mode="bilinear", align_corners=False)
            maps = grid[0].permute(1, 2, 0)
        collected.append(maps)
    if not collected:
        raise CapabilityError(f"no tapped layer at resolutions {sorted(tap.resolutions)}")
    stacked = collected[0] if len(collected) == 1 else torch.stack(collected).mean(dim=0)
    return AttentionStack(stacked, int(timestep), frozen=not stacked.requires_grad and not torch.is_grad_enabled())


def attend(backend, z_t, t, ids, tap: AttentionTapConfig, frozen=False):
    """Run the denoiser on token ids and return (prediction, stack).

    With ``frozen=True`` the call happens under ``torch.no_grad`` and the
    resulting stack is flagged as a stop-gradient target.
    """
    if frozen:
        with torch.no_grad():
            ctx = backend.encode_ids(ids)
            run = backend.denoiser.run(z_t, t, ctx, record_attention=True)
        stack = extract_attention(run, tap, timestep=int(t))
        stack.frozen = True
        return run.prediction, stack
    ctx = backend.encode_ids(ids)
    run = backend.denoiser.run(z_t, t, ctx, record_attention=True)
    stack = extract_attention(run, tap, timestep=int(t))
    stack.frozen = False
    return run.prediction, stack


def subject_map(stack: AttentionStack, pair: PromptPair, subject: int, branch: str) -> torch.Tensor:
    return stack.per_subject(pair.positions(subject, branch))


def class_prior_map(stack_class: AttentionStack, pair: PromptPair, subject: int, mask_resized) -> torch.Tensor:
    """g(M_i * A_i(class prompt)): the mask-gated, max-normalized concept target."""
    if not stack_class.frozen or stack_class.maps.requires_grad:
        raise ContractViolationError("class-branch attention must be computed without gradient (frozen)")
    mask = torch.as_tensor(np.asarray(mask_resized), dtype=stack_class.maps.dtype)
    m = stack_class.resolution
    if tuple(mask.shape) != (m, m):
        raise InvalidArgumentError(f"mask is {tuple(mask.shape)}, attention resolution is {m}x{m}")
    return normalize_map(mask * subject_map(stack_class, pair, subject, "class"))


def _to_gray(a: torch.Tensor | np.ndarray, scale: int) -> np.ndarray:
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    a = a / a.max() if a.max() > 0 else a
    g = np.round(a * 255).astype(np.uint8)
    return np.kron(g, np.ones((scale, scale), dtype=np.uint8))


def export_attention_maps(stack: AttentionStack, pair: PromptPair, branch: str, step: int, out_dir, scale: int = 8):
    """Write one grayscale grid per subject: each token's map, then their mean.

    Files are named ``attn_{step}_{subject}_{branch}.png``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for subject in pair.subjects:
        positions = pair.positions(subject, branch)
        tiles = [_to_gray(stack.maps[..., p], scale) for p in positions]
        tiles.append(_to_gray(stack.per_subject(positions), scale))
        sep = np.full((tiles[0].shape[0], 2), 128, dtype=np.uint8)
        row = np.concatenate([x for t in tiles for x in (t, sep)][:-1], axis=1)
        path = out_dir / f"attn_{step}_{subject}_{branch}.png"
        Image.fromarray(row, mode="L").save(path, format="PNG")
        paths.append(path)
    return paths
