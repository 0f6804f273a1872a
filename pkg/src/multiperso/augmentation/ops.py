"""Image-level steps: pseudo-mask segmentation, subject compositing, hole inpainting, GSA editing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..core import SubjectRegistry, as_binary_mask
from ..errors import InvalidArgumentError, MultiPersoError, TransportError


class SampleRejected(MultiPersoError):
    """A sample failed a rejection rule; `reason` is recorded in the manifest."""

    def __init__(self, reason, **details):
        super().__init__(reason)
        self.reason = reason
        self.details = details


def call_client(fn, *args, what="client"):
    try:
        return fn(*args)
    except MultiPersoError:
        raise
    except Exception as exc:  # adapters may raise anything
        raise TransportError(f"{what} failed: {exc}") from exc


def segment_pseudo_masks(image, phrases: dict[int, str], segmenter, max_overlap=0.1) -> dict[int, np.ndarray]:
    """One binary mask per subject by prompting the segmenter with that subject's phrase.

    Raises SampleRejected on an empty mask or when two masks overlap by more
    than `max_overlap` of either mask's area.
    """
    hw = np.asarray(image).shape[:2]
    masks = {}
    for i, phrase in sorted(phrases.items()):
        m = as_binary_mask(call_client(segmenter, image, phrase, what="segmenter"))
        if m.shape != hw:
            raise InvalidArgumentError(f"segmenter returned {m.shape} for a {hw} image")
        if m.sum() == 0:
            raise SampleRejected("empty_mask", subject=i, phrase=phrase)
        masks[i] = m
    keys = sorted(masks)
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            i, j = keys[a], keys[b]
            inter = int((masks[i] & masks[j]).sum())
            if inter > max_overlap * min(int(masks[i].sum()), int(masks[j].sum())):
                raise SampleRejected("mask_overlap", subjects=[i, j], overlap=inter)
    return masks


def bbox(mask) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def resize_nearest(a: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = a.shape[:2]
    iy = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    ix = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return a[iy][:, ix]


@dataclass
class Composite:
    image: np.ndarray
    holes: np.ndarray
    records: dict


def compose_subjects(draft, draft_masks: dict[int, np.ndarray], registry: SubjectRegistry, min_box_area=4) -> Composite:
    """Replace each drafted subject with the reference crop of that subject.

    The crop (reference pixels under M_i) is scaled into the draft mask's
    bounding box preserving aspect ratio and centered; it is pasted only
    inside the draft mask. Draft-mask pixels the crop does not cover become
    holes. Pixels outside every draft mask are never touched.
    """
    out = np.array(draft, dtype=np.float32, copy=True)
    ref = registry.reference_image
    covered = np.zeros(out.shape[:2], dtype=bool)
    inside = np.zeros(out.shape[:2], dtype=bool)
    records = {}
    for i, dmask in sorted(draft_masks.items()):
        dmask = as_binary_mask(dmask).astype(bool)
        if not dmask.any():
            raise SampleRejected("empty_mask", subject=i)
        y0, y1, x0, x1 = bbox(dmask)
        bh, bw = y1 - y0, x1 - x0
        if bh * bw < min_box_area:
            raise SampleRejected("degenerate_box", subject=i, box=[y0, y1, x0, x1])
        smask = registry.subject(i).mask
        ry0, ry1, rx0, rx1 = bbox(smask)
        ch, cw = ry1 - ry0, rx1 - rx0
        scale = min(bh / ch, bw / cw)
        nh, nw = max(1, int(round(ch * scale))), max(1, int(round(cw * scale)))
        crop = resize_nearest(ref[ry0:ry1, rx0:rx1], nh, nw)
        cmask = resize_nearest(smask[ry0:ry1, rx0:rx1], nh, nw).astype(bool)
        oy, ox = y0 + (bh - nh) // 2, x0 + (bw - nw) // 2
        paste = np.zeros_like(dmask)
        paste[oy : oy + nh, ox : ox + nw] = cmask
        paste &= dmask
        region = np.zeros(out.shape[:2] + (3,), dtype=np.float32)
        region[oy : oy + nh, ox : ox + nw] = crop
        out[paste] = region[paste]
        covered |= paste
        inside |= dmask
        records[i] = {
            "box": [y0, y1, x0, x1],
            "scale": float(scale),
            "offset": [int(oy), int(ox)],
            "pasted": int(paste.sum()),
        }
    holes = (inside & ~covered).astype(np.uint8)
    return Composite(out, holes, records)


def inpaint_holes(composed, holes, inpainter) -> np.ndarray:
    """Fill hole pixels with the inpainter; everything else is copied bit-for-bit."""
    composed = np.asarray(composed, dtype=np.float32)
    hole = as_binary_mask(holes).astype(bool)
    if not hole.any():
        return composed.copy()
    filled = np.asarray(call_client(inpainter, composed, hole.astype(np.uint8), what="inpainter"), dtype=np.float32)
    return np.where(hole[..., None], filled, composed)


def gsa_steps(strength: float, T: int) -> int:
    if not 0.0 <= strength <= 1.0:
        raise InvalidArgumentError(f"gsa_strength must lie in [0, 1], got {strength}")
    return int(round(strength * T))


@torch.no_grad()
def gsa_edit(image, prompt: str, k_steps: int, backend, seed: int, guidance_scale: float = 1.0) -> np.ndarray:
    """Noise the image forward to step k with seeded noise, then denoise k steps conditioned on `prompt`."""
    from ..backends.sampling import reverse_chain

    if not 0 <= k_steps <= backend.T:
        raise InvalidArgumentError(f"k_steps must lie in [0, {backend.T}], got {k_steps}")
    z0 = backend.codec.encode(image).to(backend.dtype)
    g = torch.Generator().manual_seed(int(seed))
    if k_steps == 0:
        z = z0
    else:
        noise = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        z = backend.scheduler.add_noise(z0, noise, k_steps)
        z = reverse_chain(backend, z, k_steps, [prompt], g, guidance_scale)
    return np.clip(backend.codec.decode(z), 0.0, 1.0)
