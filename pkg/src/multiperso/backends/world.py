"""Synthetic shapes world used as a desk-scale stand-in for natural images.

Scenes are 64x64 RGB on a black background holding 1-3 flat-colored shapes,
each sitting in one horizontal slot (left / center / right). Captions name
color, shape and slot, with some words dropped at random so that bare class
words ("circle") keep a concept-level meaning of their own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
SHAPES = ("circle", "square", "triangle")
SHAPE_SYNONYMS = {"circle": ("disk", "ball"), "square": ("box", "block"), "triangle": ("wedge",)}
SLOTS = ("left", "center", "right")

EXTRA_WORDS = (
    "a", "an", "the", "photo", "of", "and", "is", "with", "near", "next", "to",
    "beside", "on", "in", "at", "jumping", "rolling", "resting", "sitting",
    "standing", "moving", "bouncing", "touching", "pushing", "chasing", "meeting",
)

VOCAB = tuple(
    dict.fromkeys(
        EXTRA_WORDS
        + tuple(COLORS)
        + SHAPES
        + tuple(w for syn in SHAPE_SYNONYMS.values() for w in syn)
        + SLOTS
    )
)


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: str
    slot: str
    cx: float
    cy: float
    radius: float


def shape_mask(spec: ShapeSpec, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy, r = xx - spec.cx, yy - spec.cy, spec.radius
    if spec.shape == "circle":
        m = dx**2 + dy**2 <= r**2
    elif spec.shape == "square":
        h = 0.85 * r
        m = (np.abs(dx) <= h) & (np.abs(dy) <= h)
    elif spec.shape == "triangle":
        # apex up, base at cy + r
        top, bottom = spec.cy - r, spec.cy + r
        frac = (yy - top) / (bottom - top)
        m = (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * r)
    else:
        raise ValueError(f"unknown shape {spec.shape!r}")
    return m.astype(np.uint8)


@dataclass
class ToySample:
    image: np.ndarray
    masks: list[np.ndarray]
    caption: str
    scene: list[ShapeSpec]
    spans: list[tuple[int, int]] = field(default_factory=list)


class ToyWorld:
    def __init__(self, size=64, min_shapes=1, max_shapes=3, radius=(6.0, 9.0), word_drop=0.3, photo_prefix=0.3):
        self.size = size
        self.min_shapes, self.max_shapes = min_shapes, max_shapes
        self.radius = radius
        self.word_drop = word_drop
        self.photo_prefix = photo_prefix

    def config(self) -> dict:
        return {
            "size": self.size,
            "min_shapes": self.min_shapes,
            "max_shapes": self.max_shapes,
            "radius": list(self.radius),
            "word_drop": self.word_drop,
            "photo_prefix": self.photo_prefix,
        }

    def slot_x(self, slot: str) -> float:
        return self.size * (0.5 + SLOTS.index(slot)) / len(SLOTS)

    def sample_scene(self, rng: np.random.Generator) -> list[ShapeSpec]:
        n = int(rng.integers(self.min_shapes, self.max_shapes + 1))
        slots = rng.choice(len(SLOTS), size=n, replace=False)
        colors = rng.choice(len(COLORS), size=n, replace=False)
        names = list(COLORS)
        scene = []
        for slot, color in zip(sorted(slots), colors):
            r = float(rng.uniform(*self.radius))
            jitter = self.size / len(SLOTS) / 2 - r - 1
            cx = self.slot_x(SLOTS[slot]) + float(rng.uniform(-1, 1)) * max(jitter, 0.0)
            cy = self.size / 2 + float(rng.uniform(-1, 1)) * (self.size / 2 - r - 2)
            scene.append(ShapeSpec(SHAPES[int(rng.integers(len(SHAPES)))], names[color], SLOTS[slot], cx, cy, r))
        return scene

    def render(self, scene) -> tuple[np.ndarray, list[np.ndarray]]:
        image = np.zeros((self.size, self.size, 3), dtype=np.float32)
        masks = []
        for spec in scene:
            m = shape_mask(spec, self.size)
            image[m.astype(bool)] = COLORS[spec.color]
            masks.append(m)
        return image, masks

    def caption_with_spans(self, scene, rng: np.random.Generator):
        """Caption plus, per scene entry, the char span of its "[color] shape [slot]" words."""
        order = rng.permutation(len(scene))
        text = "a photo of " if rng.random() < self.photo_prefix else ""
        spans = [None] * len(scene)
        for n, k in enumerate(order):
            s = scene[k]
            if n:
                text += " and "
            text += "a "
            start = len(text)
            if rng.random() >= self.word_drop:
                text += s.color + " "
            text += s.shape
            if rng.random() >= self.word_drop:
                text += " " + s.slot
            spans[k] = (start, len(text))
        return text, spans

    def caption(self, scene, rng: np.random.Generator) -> str:
        return self.caption_with_spans(scene, rng)[0]

    def sample(self, rng: np.random.Generator) -> ToySample:
        scene = self.sample_scene(rng)
        image, masks = self.render(scene)
        text, spans = self.caption_with_spans(scene, rng)
        return ToySample(image, masks, text, scene, spans)

    def batch(self, n: int, rng: np.random.Generator, with_targets: bool = False):
        """(images NHWC, captions) or, with targets, also per-sample [(span, mask), ...]."""
        samples = [self.sample(rng) for _ in range(n)]
        images = np.stack([s.image for s in samples])
        captions = [s.caption for s in samples]
        if not with_targets:
            return images, captions
        return images, captions, [list(zip(s.spans, s.masks)) for s in samples]

    def reference_scene(self, seed: int = 0, shapes=("circle", "square"), colors=("red", "blue")) -> list[ShapeSpec]:
        """A fixed two-or-more subject scene, one shape per slot left to right."""
        rng = np.random.default_rng(seed)
        slots = ("left", "right") if len(shapes) == 2 else SLOTS[: len(shapes)]
        scene = []
        for shape, color, slot in zip(shapes, colors, slots):
            r = float(rng.uniform(self.radius[1] - 0.5, self.radius[1]))
            cy = self.size / 2 + float(rng.uniform(-4, 4))
            scene.append(ShapeSpec(shape, color, slot, self.slot_x(slot), cy, r))
        return scene
