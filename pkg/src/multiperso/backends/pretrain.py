"""Fits the toy denoiser/text encoder on the shapes world with the plain noise-prediction objective."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..core import resize_mask
from ..errors import InvalidArgumentError, TrainingError
from .checkpoint import save_checkpoint
from .toy import ToyBackend, ToyConfig
from .world import ToyWorld

log = logging.getLogger(__name__)


def diffusion_loss(backend, images, captions, generator):
    z0 = torch.as_tensor(images).permute(0, 3, 1, 2).to(backend.dtype)
    b = z0.shape[0]
    t = torch.randint(1, backend.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = backend.scheduler.add_noise(z0, eps, t)
    ctx = backend.encode_text(captions)
    pred = backend.denoiser(z_t, t, ctx)
    return F.mse_loss(pred, eps)


def attention_targets(backend, captions, targets, resolution):
    """Per-sample lists of (token positions, mask at attention resolution) for the named objects."""
    out = []
    for text, objects in zip(captions, targets):
        _, offsets = backend.tokenize(text)
        items = []
        for (start, end), mask in objects:
            pos = [k for k, (s, e) in enumerate(offsets) if e > s and s < end and e > start]
            if pos:
                items.append((pos, torch.as_tensor(resize_mask(mask, resolution), dtype=backend.dtype)))
        out.append(items)
    return out


def grounded_diffusion_loss(backend, images, captions, targets, generator):
    """Noise-prediction MSE plus the mean-squared gap between each object token's attention and its mask.

    Returns (diffusion term, attention term). Samples with an empty caption
    contribute no attention term.
    """
    z0 = torch.as_tensor(images).permute(0, 3, 1, 2).to(backend.dtype)
    b = z0.shape[0]
    t = torch.randint(1, backend.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = backend.scheduler.add_noise(z0, eps, t)
    ctx = backend.encode_text(captions)
    run = backend.denoiser.run(z_t, t, ctx, record_attention=True)
    tap = run.taps[0]
    m = tap.resolution
    probs = tap.probs.mean(dim=1).reshape(b, m, m, -1)
    terms = []
    for k, items in enumerate(attention_targets(backend, captions, targets, m)):
        for pos, mask in items:
            # per token, so the shape noun localizes even when no slot word is present
            terms.append(((probs[k][..., pos] - mask[..., None]) ** 2).mean())
    attn = torch.stack(terms).mean() if terms else probs.new_zeros(())
    return F.mse_loss(run.prediction, eps), attn


def toy_pretrain(
    world: ToyWorld | None = None,
    steps: int = 4000,
    seed: int = 0,
    backend: ToyBackend | None = None,
    batch_size: int = 32,
    lr: float = 2e-3,
    caption_dropout: float = 0.1,
    attention_weight: float = 1.0,
    checkpoint_path=None,
    log_path=None,
    log_every: int = 25,
):
    """Train the toy backend and return (backend, curve).

    `curve` is a list of (step, loss) pairs; with `log_every` the loss is a
    running mean over the preceding window of the noise-prediction term.
    With `attention_weight` > 0 each of an object's "[color] shape [slot]" tokens is
    pulled toward that object's mask, which gives the toy model the
    object-localized cross-attention that large text-to-image models show.
    On a non-finite loss the last finite parameters are written to
    `checkpoint_path` (if given) and a TrainingError is raised.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    world = world or ToyWorld()
    backend = backend or ToyBackend(ToyConfig(seed=seed))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    warmup = max(1, steps // 20)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: min(1.0, (k + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * min(k, steps) / steps))
    )
    backend.train()
    curve = []
    window = []
    last_good = None
    for step in range(steps):
        images, captions, targets = world.batch(batch_size, rng, with_targets=True)
        drop = rng.random(batch_size) < caption_dropout
        captions = ["" if d else c for d, c in zip(drop, captions)]
        targets = [[] if d else tg for d, tg in zip(drop, targets)]
        if attention_weight > 0:
            mse, attn = grounded_diffusion_loss(backend, images, captions, targets, gen)
            loss = mse + attention_weight * attn
        else:
            mse = loss = diffusion_loss(backend, images, captions, gen)
        if not torch.isfinite(loss):
            if checkpoint_path is not None and last_good is not None:
                backend.load_state_dict(last_good)
                save_checkpoint(backend, checkpoint_path, extra={"diverged_at": step})
            raise TrainingError(f"non-finite pretraining loss at step {step}", {"step": step})
        last_good = {k: v.clone() for k, v in backend.state_dict().items()}
        if step == 0:
            curve.append((0, mse.item()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(backend.parameters(), 1.0)
        opt.step()
        sched.step()
        window.append(mse.item())
        if (step + 1) % log_every == 0 or step + 1 == steps:
            curve.append((step + 1, float(np.mean(window))))
            log.info("pretrain step %d loss %.5f", step + 1, curve[-1][1])
            window = []
    backend.eval()
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(curve)
    if checkpoint_path is not None:
        save_checkpoint(backend, checkpoint_path, extra={"pretrain_steps": steps, "seed": seed, "attention_weight": attention_weight})
    return backend, curve
