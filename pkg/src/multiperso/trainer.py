"""Two-phase personalization: placeholder embeddings first, then the whole model."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionTapConfig, attend, export_attention_maps, subject_map
from .backends.checkpoint import save_checkpoint, state_hash
from .backends.toy import register_placeholders
from .core import LossWeights, make_prompt_pair, normalize_map, registry_state, resize_mask, union_sample
from .errors import InvalidArgumentError, NumericError, TrainingError
from .losses import StepBatch, aug_loss, build_masks, ica_loss, masked_attention_loss, masked_diffusion_loss, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "t", "subset", "L_MD", "L_M2A", "L_ICA", "L_AUG", "L_total", "phase", "kind"]


@dataclass
class TrainConfig:
    phase1_steps: int = 700
    phase2_steps: int = 700
    phase1_lr: float = 5e-4
    phase2_lr: float = 2e-6
    weights: LossWeights = field(default_factory=LossWeights)
    aug_ratio: float = 0.5
    seed: int = 0
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    # "frozen_copy": class branch runs on a snapshot of the input model; "live": on the model being trained
    class_branch: str = "frozen_copy"
    prompt: str | None = None
    attention_resolution: int = 16
    check_attention: bool = True
    export_attention_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise InvalidArgumentError("step counts must be >= 0")
        if not (self.phase1_lr > 0 and self.phase2_lr > 0):
            raise InvalidArgumentError("learning rates must be > 0")
        if not 0.0 <= self.aug_ratio <= 1.0:
            raise InvalidArgumentError("aug_ratio must lie in [0, 1]")
        if self.class_branch not in ("frozen_copy", "live"):
            raise InvalidArgumentError(f"unknown class_branch {self.class_branch!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgumentError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def tap(self) -> AttentionTapConfig:
        return AttentionTapConfig(self.attention_resolution, frozenset({self.attention_resolution}))


def is_augmented_step(k: int, ratio: float) -> bool:
    """Evenly interleave: exactly floor(n * ratio) of the first n steps are augmented."""
    return int(np.floor((k + 1) * ratio)) > int(np.floor(k * ratio))


def _set_trainable(backend, params):
    ids = {id(p) for p in params}
    for p in backend.parameters():
        p.requires_grad_(id(p) in ids)


def mask_iou(pred, mask) -> float:
    pred = np.asarray(pred).astype(bool)
    mask = np.asarray(mask).astype(bool)
    union = (pred | mask).sum()
    return float((pred & mask).sum() / union) if union else 1.0


def map_iou(attn_map, mask, threshold=0.5) -> float:
    """IoU between the g-normalized map binarized at `threshold` and a mask of the same size."""
    a = attn_map.detach().cpu().numpy() if isinstance(attn_map, torch.Tensor) else np.asarray(attn_map)
    return mask_iou(normalize_map(a) >= threshold, mask)


@torch.no_grad()
def attention_iou(backend, registry, prompt, subject, tap=None, timesteps=None, seed=0) -> float:
    """Placeholder attention IoU against the subject mask on the reference image.

    The map is averaged over a few fixed timesteps with fixed noise, then
    normalized, binarized at 0.5 and compared with the mask resized to m.
    """
    tap = tap or AttentionTapConfig()
    T = backend.T
    timesteps = timesteps or (T // 4, T // 2, (3 * T) // 4)
    pair = make_prompt_pair(prompt, registry, backend.tokenize)
    z0 = backend.codec.encode(registry.reference_image).to(backend.dtype)
    g = torch.Generator().manual_seed(seed)
    acc = None
    for t in timesteps:
        eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        z_t = backend.scheduler.add_noise(z0, eps, t)
        _, stack = attend(backend, z_t, t, pair.placeholder_ids, tap, frozen=True)
        a = subject_map(stack, pair, subject, "placeholder")
        acc = a if acc is None else acc + a
    mask = resize_mask(registry.subject(subject).mask, tap.resolution)
    return map_iou(acc / len(timesteps), mask)


@dataclass
class TrainResult:
    backend: object
    rows: list[dict]
    metrics: dict
    checkpoint_hash: str


class Trainer:
    """Holds the per-run state; `step_batch` and `step_losses` are usable on their own."""

    def __init__(self, registry, aug_samples, backend, config: TrainConfig):
        self.registry = registry
        self.config = config
        self.tap = config.tap
        self.backend = backend.clone()
        if not self._registered(self.backend):
            register_placeholders(self.backend, registry)
        self.backend.eval()
        if config.class_branch == "frozen_copy":
            self.class_model = self.backend.clone()
            for p in self.class_model.parameters():
                p.requires_grad_(False)
        else:
            self.class_model = self.backend
        self.prompt = config.prompt or registry.default_prompt()
        self.pair = make_prompt_pair(self.prompt, registry, self.backend.tokenize)
        self.aug = [(s, s.prompt_pair.retokenize(self.backend.tokenize)) for s in (aug_samples or [])]
        self.full_masks = {s.index: s.mask for s in registry}
        self.z0_ref = self.backend.codec.encode(registry.reference_image).to(self.backend.dtype)
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.attention_checks = 0
        self.max_sum_deviation = 0.0

    def _registered(self, backend):
        return all(s.placeholder in backend.tokenizer.placeholders for s in self.registry)

    def step_batch(self, augmented: bool) -> tuple[StepBatch, bool]:
        b = self.backend
        t = int(self.rng.integers(1, b.T + 1))
        if augmented and self.aug:
            sample, pair = self.aug[int(self.rng.integers(len(self.aug)))]
            present = sorted(sample.pseudo_masks)
            subset = tuple(present[k - 1] for k in union_sample(len(present), self.rng))
            z0 = b.codec.encode(sample.image).to(b.dtype)
            masks = sample.pseudo_masks
        else:
            augmented = False
            pair = self.pair
            subset = union_sample(len(self.registry), self.rng)
            z0 = self.z0_ref
            masks = self.full_masks
        eps = torch.randn(z0.shape, generator=self.gen, dtype=z0.dtype)
        z_t = b.scheduler.add_noise(z0, eps, t)
        pred, st_ph = attend(b, z_t, t, pair.placeholder_ids, self.tap)
        _, st_cls = attend(self.class_model, z_t, t, pair.class_ids, self.tap, frozen=True)
        latent_mask, attn_masks = build_masks(masks, subset, tuple(z0.shape[-2:]), self.tap.resolution)
        batch = StepBatch(z_t, t, eps, pred, subset, pair, latent_mask, attn_masks, {"placeholder": st_ph, "class": st_cls})
        if self.config.check_attention:
            for st in (st_ph, st_cls):
                self.attention_checks += 1
                self.max_sum_deviation = max(self.max_sum_deviation, st.max_sum_deviation())
        return batch, augmented

    def step_losses(self, batch: StepBatch, augmented: bool) -> dict:
        zero = batch.prediction.new_zeros(())
        if augmented:
            parts = {"md": zero, "m2a": zero, "ica": zero, "aug": aug_loss(batch)}
        else:
            parts = {
                "md": masked_diffusion_loss(batch),
                "m2a": masked_attention_loss(batch),
                "ica": ica_loss(batch),
                "aug": zero,
            }
        parts["total"] = total_loss(parts["md"], parts["m2a"], parts["ica"], parts["aug"], self.config.weights)
        return parts

    def run(self, out_dir=None) -> TrainResult:
        cfg = self.config
        b = self.backend
        out_dir = Path(out_dir) if out_dir is not None else None
        started = time.perf_counter()
        iou_before = {s.index: attention_iou(b, self.registry, self.prompt, s.index, self.tap) for s in self.registry}
        rows = []
        phases = [
            (1, cfg.phase1_steps, cfg.phase1_lr, b.placeholder_parameters()),
            (2, cfg.phase2_steps, cfg.phase2_lr, b.full_parameters()),
        ]
        global_step = 0
        for phase, steps, lr, params in phases:
            if steps == 0:
                continue
            _set_trainable(b, params)
            opt = torch.optim.Adam(params, lr=lr, betas=cfg.adam_betas)
            for k in range(steps):
                augmented = is_augmented_step(global_step, cfg.aug_ratio)
                batch, augmented = self.step_batch(augmented)
                try:
                    parts = self.step_losses(batch, augmented)
                except NumericError as exc:
                    diag = {"step": global_step, "phase": phase, "t": batch.t, "subset": list(batch.subset),
                            "prompt": batch.pair.placeholder_prompt, "augmented": augmented}
                    if out_dir is not None:
                        out_dir.mkdir(parents=True, exist_ok=True)
                        (out_dir / "diagnostic.json").write_text(json.dumps(diag, indent=2))
                    raise TrainingError(f"non-finite loss at step {global_step}: {exc}", diag) from exc
                opt.zero_grad(set_to_none=True)
                parts["total"].backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                rows.append(
                    {
                        "step": global_step,
                        "t": batch.t,
                        "subset": "|".join(map(str, batch.subset)),
                        "L_MD": parts["md"].item(),
                        "L_M2A": parts["m2a"].item(),
                        "L_ICA": parts["ica"].item(),
                        "L_AUG": parts["aug"].item(),
                        "L_total": parts["total"].item(),
                        "phase": phase,
                        "kind": "aug" if augmented else "orig",
                    }
                )
                if out_dir is not None and cfg.export_attention_every and global_step % cfg.export_attention_every == 0:
                    export_attention_maps(batch.stacks["placeholder"], batch.pair, "placeholder", global_step, out_dir / "attention")
                    export_attention_maps(batch.stacks["class"], batch.pair, "class", global_step, out_dir / "attention")
                global_step += 1
        for p in b.parameters():
            p.requires_grad_(True)
        b.eval()
        iou_after = {s.index: attention_iou(b, self.registry, self.prompt, s.index, self.tap) for s in self.registry}
        metrics = {
            "iou_before": {str(k): v for k, v in iou_before.items()},
            "iou_after": {str(k): v for k, v in iou_after.items()},
            "attention_checks": self.attention_checks,
            "max_token_sum_deviation": self.max_sum_deviation,
            "steps": global_step,
            "seconds": time.perf_counter() - started,
        }
        digest = state_hash(b)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_log(rows, out_dir / "train_log.csv")
            meta, arrays = registry_state(self.registry)
            save_checkpoint(
                b,
                out_dir / "checkpoint.safetensors",
                extra={"registry": meta, "prompt": self.prompt, "train_config": cfg.to_dict()},
                arrays=arrays,
            )
            timing_free = {k: v for k, v in metrics.items() if k != "seconds"}
            (out_dir / "metrics.json").write_text(json.dumps(timing_free, indent=2, sort_keys=True) + "\n")
        return TrainResult(b, rows, metrics, digest)


def train(registry, aug_dataset, backend, config: TrainConfig, out_dir=None) -> TrainResult:
    """Personalize `backend` (left untouched; a clone is trained) on the registry and augmented samples."""
    return Trainer(registry, aug_dataset, backend, config).run(out_dir)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("L_MD", "L_M2A", "L_ICA", "L_AUG", "L_total"):
            r[k] = float(r[k])
        for k in ("step", "t", "phase"):
            r[k] = int(r[k])
    return rows
