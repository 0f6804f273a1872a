"""Domain types, mask algebra, union sampling and map normalization."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import InvalidArgumentError

PLACEHOLDER_RE = re.compile(r"<[A-Za-z_][A-Za-z0-9_]*>")


@dataclass
class SubjectAsset:
    """One personalized subject.

    `index` is 1-based; `mask` is a {0,1} uint8 map at reference-image resolution.
    """

    index: int
    placeholder: str
    class_noun: str
    mask: np.ndarray
    noun_phrase: str = ""
    synonyms: tuple[str, ...] = ()

    def __post_init__(self):
        self.mask = as_binary_mask(self.mask)
        if not PLACEHOLDER_RE.fullmatch(self.placeholder):
            raise InvalidArgumentError(f"placeholder must look like <name>, got {self.placeholder!r}")
        if self.mask.sum() == 0:
            raise InvalidArgumentError(f"mask of {self.placeholder} is empty")

    def phrase(self, source: str) -> str:
        if source == "class_noun":
            return self.class_noun
        if source == "noun_phrase":
            if not self.noun_phrase:
                raise InvalidArgumentError(f"{self.placeholder} has no noun phrase yet")
            return self.noun_phrase
        raise InvalidArgumentError(f"unknown phrase source {source!r}")


@dataclass
class SubjectRegistry:
    subjects: list[SubjectAsset]
    reference_image: np.ndarray

    def __post_init__(self):
        if not self.subjects:
            raise InvalidArgumentError("registry needs at least one subject")
        img = np.asarray(self.reference_image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidArgumentError(f"reference image must be HxWx3, got {img.shape}")
        if img.min() < 0 or img.max() > 1:
            raise InvalidArgumentError("reference image values must lie in [0, 1]")
        self.reference_image = img
        indices = [s.index for s in self.subjects]
        if sorted(indices) != list(range(1, len(indices) + 1)):
            raise InvalidArgumentError(f"subject indices must be exactly 1..N, got {indices}")
        names = [s.placeholder for s in self.subjects]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate placeholders in {names}")
        for s in self.subjects:
            if s.mask.shape != img.shape[:2]:
                raise InvalidArgumentError(
                    f"mask of {s.placeholder} has shape {s.mask.shape}, image is {img.shape[:2]}"
                )

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def indices(self) -> list[int]:
        return [s.index for s in self.subjects]

    def subject(self, index: int) -> SubjectAsset:
        for s in self.subjects:
            if s.index == index:
                return s
        raise InvalidArgumentError(f"no subject with index {index}")

    def by_placeholder(self, placeholder: str) -> SubjectAsset:
        for s in self.subjects:
            if s.placeholder == placeholder:
                return s
        raise InvalidArgumentError(f"unknown placeholder {placeholder!r}")

    def default_prompt(self) -> str:
        return "a photo of " + " and ".join(s.placeholder for s in self.subjects)


@dataclass
class PromptPair:
    """A placeholder prompt and its class-substituted twin.

    `alignment[i]` holds (token positions in the placeholder prompt,
    token positions in the class prompt) for subject index `i`.
    """

    placeholder_prompt: str
    class_prompt: str
    placeholder_ids: list[int]
    class_ids: list[int]
    alignment: dict[int, tuple[tuple[int, ...], tuple[int, ...]]]
    substitutions: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    phrase_source: str = "class_noun"

    @property
    def subjects(self) -> list[int]:
        return sorted(self.alignment)

    def positions(self, subject: int, branch: str) -> tuple[int, ...]:
        if subject not in self.alignment:
            raise InvalidArgumentError(f"subject {subject} not present in prompt {self.placeholder_prompt!r}")
        ph, cl = self.alignment[subject]
        if branch == "placeholder":
            return ph
        if branch == "class":
            return cl
        raise InvalidArgumentError(f"branch must be 'placeholder' or 'class', got {branch!r}")

    def outside_spans_equal(self) -> bool:
        """True when both texts agree everywhere except the substituted spans."""
        a, b = self.placeholder_prompt, self.class_prompt
        pa = pb = 0
        for _, sa, ea, sb, eb in self.substitutions:
            if a[pa:sa] != b[pb:sb]:
                return False
            pa, pb = ea, eb
        return a[pa:] == b[pb:]

    def to_dict(self) -> dict:
        return {
            "placeholder_prompt": self.placeholder_prompt,
            "class_prompt": self.class_prompt,
            "phrase_source": self.phrase_source,
            "placeholder_ids": list(self.placeholder_ids),
            "class_ids": list(self.class_ids),
            "alignment": {str(k): [list(v[0]), list(v[1])] for k, v in sorted(self.alignment.items())},
            "substitutions": [list(s) for s in self.substitutions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptPair":
        return cls(
            placeholder_prompt=d["placeholder_prompt"],
            class_prompt=d["class_prompt"],
            placeholder_ids=list(d["placeholder_ids"]),
            class_ids=list(d["class_ids"]),
            alignment={int(k): (tuple(v[0]), tuple(v[1])) for k, v in d["alignment"].items()},
            substitutions=[tuple(s) for s in d["substitutions"]],
            phrase_source=d.get("phrase_source", "class_noun"),
        )

    def retokenize(self, tokenizer) -> "PromptPair":
        """Recompute ids and alignment with another tokenizer, keeping the texts and spans."""
        ph_ids, ph_off = tokenizer(self.placeholder_prompt)
        cl_ids, cl_off = tokenizer(self.class_prompt)
        alignment: dict[int, tuple[list[int], list[int]]] = {}
        for index, ps, pe, cs, ce in self.substitutions:
            entry = alignment.setdefault(index, ([], []))
            entry[0].extend(_token_positions(ph_off, ps, pe))
            entry[1].extend(_token_positions(cl_off, cs, ce))
        return PromptPair(
            self.placeholder_prompt,
            self.class_prompt,
            list(ph_ids),
            list(cl_ids),
            {k: (tuple(v[0]), tuple(v[1])) for k, v in alignment.items()},
            list(self.substitutions),
            self.phrase_source,
        )


def _token_positions(offsets: Sequence[tuple[int, int]], start: int, end: int) -> tuple[int, ...]:
    return tuple(k for k, (s, e) in enumerate(offsets) if s < end and e > start and e > s)


def make_prompt_pair(template: str, registry: SubjectRegistry, tokenizer, phrase_source: str = "class_noun") -> PromptPair:
    """Build (c, c-hat) from a template that contains registered placeholders.

    `tokenizer(text)` must return `(ids, offsets)` where offsets are character
    spans per token (``(0, 0)`` for special tokens).
    """
    pieces = []
    subs = []  # (subject, ph_start, ph_end, cls_start, cls_end)
    pos = 0
    cls_len = 0
    for m in PLACEHOLDER_RE.finditer(template):
        subj = registry.by_placeholder(m.group(0))
        before = template[pos:m.start()]
        pieces.append(before)
        cls_len += len(before)
        phrase = subj.phrase(phrase_source)
        subs.append((subj.index, m.start(), m.end(), cls_len, cls_len + len(phrase)))
        pieces.append(phrase)
        cls_len += len(phrase)
        pos = m.end()
    if not subs:
        raise InvalidArgumentError(f"template {template!r} references no placeholder")
    pieces.append(template[pos:])
    class_prompt = "".join(pieces)

    ph_ids, ph_off = tokenizer(template)
    cl_ids, cl_off = tokenizer(class_prompt)
    alignment: dict[int, tuple[list[int], list[int]]] = {}
    for index, ps, pe, cs, ce in subs:
        ph_pos = _token_positions(ph_off, ps, pe)
        cl_pos = _token_positions(cl_off, cs, ce)
        if not ph_pos or not cl_pos:
            raise InvalidArgumentError(f"subject {index} lost during tokenization of {template!r}")
        entry = alignment.setdefault(index, ([], []))
        entry[0].extend(ph_pos)
        entry[1].extend(cl_pos)
    return PromptPair(
        placeholder_prompt=template,
        class_prompt=class_prompt,
        placeholder_ids=list(ph_ids),
        class_ids=list(cl_ids),
        alignment={k: (tuple(v[0]), tuple(v[1])) for k, v in alignment.items()},
        substitutions=subs,
        phrase_source=phrase_source,
    )


@dataclass
class AttentionStack:
    """Token-axis softmax cross-attention maps at one resolution: `maps` is (m, m, N).

    `frozen` marks maps computed without gradient recording (the class branch).
    """

    maps: torch.Tensor
    timestep: int
    frozen: bool = False

    @property
    def resolution(self) -> int:
        return self.maps.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[-1]

    def per_subject(self, positions: Sequence[int]) -> torch.Tensor:
        if not positions:
            raise InvalidArgumentError("no token positions given")
        return self.maps[..., list(positions)].mean(dim=-1)

    def max_sum_deviation(self) -> float:
        """Largest |sum over tokens - 1| across spatial locations."""
        return float((self.maps.detach().sum(dim=-1) - 1).abs().max())


@dataclass(frozen=True)
class LossWeights:
    lambda_md: float = 1.0
    lambda_m2a: float = 1e-2
    lambda_ica: float = 5e-3
    lambda_aug: float = 1e-4

    def __post_init__(self):
        for name in ("lambda_md", "lambda_m2a", "lambda_ica", "lambda_aug"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_md, self.lambda_m2a, self.lambda_ica, self.lambda_aug)


# ---------------------------------------------------------------------------
# operations


def union_sample(n_subjects: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over the 2^N - 1 non-empty subsets of {1..N}."""
    if n_subjects < 1:
        raise InvalidArgumentError(f"n_subjects must be >= 1, got {n_subjects}")
    code = int(rng.integers(1, 2**n_subjects))
    return tuple(i + 1 for i in range(n_subjects) if code >> i & 1)


def as_binary_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidArgumentError(f"mask must be 2-D, got shape {m.shape}")
    return (m > 0).astype(np.uint8)


def mask_union(masks: Sequence[np.ndarray]) -> np.ndarray:
    if len(masks) == 0:
        raise InvalidArgumentError("mask_union needs at least one mask")
    shape = np.shape(masks[0])
    out = np.zeros(shape, dtype=np.uint8)
    for m in masks:
        if np.shape(m) != shape:
            raise InvalidArgumentError(f"mask shapes differ: {np.shape(m)} vs {shape}")
        out |= as_binary_mask(m)
    return out


def normalize_map(x):
    """x / max(x); an all-zero map is returned unchanged.

    Works on numpy arrays and torch tensors alike.
    """
    if (x < 0).any():
        raise InvalidArgumentError("normalize_map expects a nonnegative map")
    peak = x.max()
    if peak <= 0:
        return x * 0
    return x / peak


def _area_weights(src: int, dst: int) -> np.ndarray:
    # w[i, j] = fraction of target cell i covered by source cell j
    edges = np.arange(dst + 1) * (src / dst)
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / w.sum(axis=1, keepdims=True)


def resize_mask(mask, m: int) -> np.ndarray:
    """Area-average resample to m x m, then threshold at 0.5."""
    if m < 1:
        raise InvalidArgumentError(f"target resolution must be >= 1, got {m}")
    src = as_binary_mask(mask).astype(np.float64)
    h, w = src.shape
    if (h, w) == (m, m):
        return src.astype(np.uint8)
    avg = _area_weights(h, m) @ src @ _area_weights(w, m).T
    # exact half-coverage ties come out as 0.4999... in floating point
    return (avg >= 0.5 - 1e-9).astype(np.uint8)


# ---------------------------------------------------------------------------
# file I/O: masks as 0/255 single-channel PNGs, images as RGB PNGs


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return as_binary_mask(np.asarray(im.convert("L")) >= 128)


def save_mask(mask, path) -> None:
    Image.fromarray(as_binary_mask(mask) * 255, mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save_image(image, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_registry(image_path, mask_dir, subjects: Sequence[dict]) -> SubjectRegistry:
    """Read a reference image plus one mask file per subject.

    Each subject dict carries `placeholder`, `class_noun` and optionally
    `noun_phrase`, `synonyms` and `mask` (file name inside `mask_dir`;
    defaults to the placeholder name without brackets plus ``.png``).
    """
    image = load_image(image_path)
    mask_dir = Path(mask_dir)
    assets = []
    for k, spec in enumerate(subjects, start=1):
        fname = spec.get("mask") or spec["placeholder"].strip("<>") + ".png"
        assets.append(
            SubjectAsset(
                index=k,
                placeholder=spec["placeholder"],
                class_noun=spec["class_noun"],
                noun_phrase=spec.get("noun_phrase", ""),
                synonyms=tuple(spec.get("synonyms", ())),
                mask=load_mask(mask_dir / fname),
            )
        )
    return SubjectRegistry(assets, image)


def registry_state(registry: SubjectRegistry) -> tuple[dict, dict]:
    """Split a registry into JSON metadata and named arrays (for checkpoint storage)."""
    meta = {
        "subjects": [
            {
                "index": s.index,
                "placeholder": s.placeholder,
                "class_noun": s.class_noun,
                "noun_phrase": s.noun_phrase,
                "synonyms": list(s.synonyms),
            }
            for s in registry
        ]
    }
    arrays = {"reference_image": np.asarray(registry.reference_image, dtype=np.float32)}
    for s in registry:
        arrays[f"mask_{s.index}"] = s.mask
    return meta, arrays


def registry_from_state(meta: dict, arrays: dict) -> SubjectRegistry:
    subjects = [
        SubjectAsset(
            index=d["index"],
            placeholder=d["placeholder"],
            class_noun=d["class_noun"],
            noun_phrase=d.get("noun_phrase", ""),
            synonyms=tuple(d.get("synonyms", ())),
            mask=np.asarray(arrays[f"mask_{d['index']}"]),
        )
        for d in meta["subjects"]
    ]
    return SubjectRegistry(subjects, np.asarray(arrays["reference_image"]))
