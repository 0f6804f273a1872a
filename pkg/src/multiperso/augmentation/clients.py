"""Client adapters for the augmentation pipeline, plus offline stubs.

Each adapter is a plain callable object:

    describer(image, query) -> text
    prompt_generator(query) -> text
    t2i(prompt, seed) -> HxWx3 image in [0, 1]
    segmenter(image, phrase) -> HxW {0,1} mask
    inpainter(image, holes) -> image

Real services (VLMs, LLMs, SAM, diffusion pipelines) plug in by providing the
same call signatures; see `load_client`.
"""

from __future__ import annotations

import importlib
import itertools
import re

import numpy as np
from scipy import ndimage

from ..backends.sampling import generate
from ..backends.world import COLORS, SLOTS
from ..errors import InvalidArgumentError


class StubDescriber:
    """Replies with configured phrases, one per line.

    `responses` may hold several replies that are returned in turn on
    successive calls (handy for exercising the re-query path); the last one
    repeats.
    """

    def __init__(self, phrases=None, responses=None):
        if responses is None:
            if phrases is None:
                raise InvalidArgumentError("StubDescriber needs phrases or responses")
            responses = [list(phrases)]
        self.responses = [list(r) for r in responses]
        self.calls = []

    def __call__(self, image, query):
        self.calls.append(query)
        reply = self.responses[min(len(self.calls) - 1, len(self.responses) - 1)]
        return "\n".join(f"{k + 1}. {p}" for k, p in enumerate(reply))


# sentence patterns understood by the toy world; {0}/{1} are noun phrases, {a}/{b} slots
_PAIR_PATTERNS = (
    "{0} {a} and {1} {b}",
    "a photo of {0} {a} and {1} {b}",
    "{0} jumping {a} near {1} {b}",
    "{0} rolling {a} next to {1} {b}",
    "{1} {b} touching {0} {a}",
    "{0} resting {a} beside {1} {b}",
    "{1} bouncing {b} and {0} sitting {a}",
    "{0} chasing {1} from the {a} to the {b}",
)
_SINGLE_PATTERNS = (
    "{0} {a}",
    "a photo of {0} {a}",
    "{0} jumping {a}",
    "{0} rolling {a}",
    "{0} resting {a}",
)
# deliberately awkward lines the filter stage is expected to drop
_AWKWARD_PATTERNS = (
    "{0} {0} {a} {a}",
    "and and {1} of of {0}",
)


class StubPromptGenerator:
    """Table-driven stand-in for a language model.

    Generation queries carry the noun phrases in double quotes and the
    requested count as "at least N"; filter queries carry a numbered list
    and "select the N". Replies are deterministic.
    """

    def __init__(self, slots=SLOTS):
        self.slots = tuple(slots)
        self.calls = []

    def _candidates(self, phrases):
        out = []
        slot_pairs = [p for p in itertools.permutations(self.slots, 2)]
        if len(phrases) >= 2:
            p0, p1 = phrases[:2]
            for a, b in slot_pairs:
                for pat in _PAIR_PATTERNS:
                    out.append(pat.format(p0, p1, a=a, b=b))
                for pat in _AWKWARD_PATTERNS:
                    out.append(pat.format(p0, p1, a=a, b=b))
        for p in phrases:
            for a in self.slots:
                for pat in _SINGLE_PATTERNS:
                    out.append(pat.format(p, a=a))
        return out

    def __call__(self, query):
        self.calls.append(query)
        keep = re.search(r"select the (\d+)", query)
        if keep:
            n = int(keep.group(1))
            lines = re.findall(r"^\s*\d+\.\s*(.+?)\s*$", query, flags=re.M)
            natural = [s for s in lines if not re.search(r"\b(\w+) \1\b", s)]
            return "\n".join(natural[:n])
        more = re.search(r"at least (\d+)", query)
        n = int(more.group(1)) if more else 20
        phrases = re.findall(r'"([^"]+)"', query)
        if not phrases:
            raise InvalidArgumentError("generation query names no quoted noun phrase")
        cands = self._candidates(phrases)
        # spread picks across the table instead of taking a prefix
        order = np.random.default_rng(len(self.calls)).permutation(len(cands))
        return "\n".join(f"{k + 1}. {cands[j]}" for k, j in enumerate(order[: n + 1]))


class ToyT2I:
    """Text-to-image via ancestral sampling of a toy backend."""

    def __init__(self, backend, guidance_scale=4.0):
        self.backend = backend
        self.guidance_scale = guidance_scale

    def __call__(self, prompt, seed):
        return generate(self.backend, [prompt], seed, self.guidance_scale)[0]


class ToySegmenter:
    """Color-threshold segmenter: the phrase's color word selects pixels near that color.

    Only the largest connected component is kept, which removes isolated
    sampling speckle.
    """

    def __init__(self, tolerance=0.4, largest_component=True):
        self.tolerance = tolerance
        self.largest_component = largest_component

    def __call__(self, image, phrase):
        words = re.findall(r"[a-z]+", phrase.lower())
        colors = [w for w in words if w in COLORS]
        img = np.asarray(image, dtype=np.float32)
        if not colors:
            return np.zeros(img.shape[:2], dtype=np.uint8)
        target = np.asarray(COLORS[colors[0]], dtype=np.float32)
        mask = np.abs(img - target).max(axis=-1) < self.tolerance
        if self.largest_component and mask.any():
            labels, n = ndimage.label(mask)
            if n > 1:
                sizes = ndimage.sum(mask, labels, index=range(1, n + 1))
                mask = labels == (1 + int(np.argmax(sizes)))
        return mask.astype(np.uint8)


class ToyInpainter:
    """Fills holes by iterated 4-neighbor averaging (Jacobi) until the largest update is below `tol`."""

    def __init__(self, tol=1e-3, max_iter=10_000):
        self.tol = tol
        self.max_iter = max_iter
        self.last_iterations = 0

    def __call__(self, image, holes):
        img = np.array(image, dtype=np.float64)
        hole = np.asarray(holes).astype(bool)
        if not hole.any():
            self.last_iterations = 0
            return np.asarray(image, dtype=np.float32).copy()
        known = ~hole
        fill = img[known].mean(axis=0) if known.any() else np.zeros(img.shape[-1])
        img[hole] = fill
        ones = np.ones(hole.shape)
        # neighbor counts respect the image border
        count = np.zeros(hole.shape)
        count[1:] += ones[:-1]
        count[:-1] += ones[1:]
        count[:, 1:] += ones[:, :-1]
        count[:, :-1] += ones[:, 1:]
        for it in range(1, self.max_iter + 1):
            acc = np.zeros_like(img)
            acc[1:] += img[:-1]
            acc[:-1] += img[1:]
            acc[:, 1:] += img[:, :-1]
            acc[:, :-1] += img[:, 1:]
            new = acc / count[..., None]
            delta = np.abs(new[hole] - img[hole]).max()
            img[hole] = new[hole]
            if delta < self.tol:
                break
        self.last_iterations = it
        return img.astype(np.float32)


def load_client(spec, **context):
    """Instantiate a client from a config entry.

    `spec` is either ``{"type": "stub-describer" | "stub-generator" | "toy-t2i" |
    "toy-segmenter" | "toy-inpainter", ...kwargs}`` or
    ``{"type": "import", "target": "package.module:Factory", ...kwargs}``.
    `context` supplies shared objects such as the backend.
    """
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "stub-describer":
        return StubDescriber(**spec)
    if kind == "stub-generator":
        return StubPromptGenerator(**spec)
    if kind == "toy-t2i":
        return ToyT2I(context["backend"], **spec)
    if kind == "toy-segmenter":
        return ToySegmenter(**spec)
    if kind == "toy-inpainter":
        return ToyInpainter(**spec)
    if kind == "import":
        module, _, name = spec.pop("target").partition(":")
        return getattr(importlib.import_module(module), name)(**spec)
    raise InvalidArgumentError(f"unknown client type {kind!r}")
