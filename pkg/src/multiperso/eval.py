"""Evaluation harness: categorized prompt suites, pluggable scorers, reports and image grids."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .augmentation.pipeline import derive_seed
from .backends.sampling import generate
from .backends.world import COLORS
from .core import PLACEHOLDER_RE, SubjectRegistry, to_uint8
from .errors import InvalidArgumentError, MultiPersoError

log = logging.getLogger(__name__)

CATEGORIES = ("plain", "action", "interaction")
METRICS = ("clip_t", "clip_i", "ir")

PLAIN_PROMPTS = (
    "<asset0> in a nurse suit.",
    "<asset0> in an Iron Man suit.",
    "<asset0> in a firefighter uniform.",
    "<asset0> in a pencil sketch.",
    "<asset0> in an oil painting.",
    "<asset0> in a comic.",
    "<asset0> in watercolor.",
    "<asset0> at the Acropolis.",
    "<asset0> at the Eiffel Tower.",
    "<asset0> in a jungle.",
)
ACTION_PROMPTS = (
    "The <asset0> is running.",
    "The <asset0> is jumping.",
    "The <asset0> is sitting.",
    "The <asset0> is dancing.",
    "The <asset0> is sleeping.",
    "The <asset0> is reading a book.",
    "The <asset0> is playing a guitar.",
    "The <asset0> is eating a carrot.",
    "The <asset0> is riding a bicycle.",
    "The <asset0> is flying a kite.",
)
INTERACTION_PROMPTS = (
    "<asset0> is throwing the <asset1>.",
    "<asset0> is washing the <asset1>.",
    "<asset0> is filling the <asset1> with bamboo leaves.",
    "<asset0> is drinking water from the <asset1>.",
    "<asset0> is placing the <asset1> on a table.",
    "<asset0> is looking into the <asset1>.",
    "<asset0> is carrying the <asset1>.",
    "<asset0> is stacking the <asset1>s.",
    "<asset0> is painting the <asset1>.",
    "<asset0> is balancing the <asset1> on its head.",
)


def placeholders_in(text: str) -> list[str]:
    return list(dict.fromkeys(PLACEHOLDER_RE.findall(text)))


@dataclass(frozen=True)
class PromptSuite:
    category: str
    prompts: tuple[str, ...]

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidArgumentError(f"unknown category {self.category!r}")
        object.__setattr__(self, "prompts", tuple(self.prompts))
        need = 2 if self.category == "interaction" else 1
        for p in self.prompts:
            if len(placeholders_in(p)) < need:
                raise InvalidArgumentError(f"{self.category} prompt {p!r} must reference >= {need} subject(s)")


DEFAULT_SUITES = {
    "plain": PromptSuite("plain", PLAIN_PROMPTS),
    "action": PromptSuite("action", ACTION_PROMPTS),
    "interaction": PromptSuite("interaction", INTERACTION_PROMPTS),
}


def load_suites(name: str) -> list[PromptSuite]:
    """`plain`, `action`, `interaction`, `all`, or a path to a JSON list of {category, prompts}."""
    if name == "all":
        return [DEFAULT_SUITES[c] for c in CATEGORIES]
    if name in DEFAULT_SUITES:
        return [DEFAULT_SUITES[name]]
    path = Path(name)
    if not path.exists():
        raise InvalidArgumentError(f"unknown suite {name!r}")
    suites = [PromptSuite(d["category"], d["prompts"]) for d in json.loads(path.read_text())]
    seen = {}
    for s in suites:
        for p in s.prompts:
            if seen.setdefault(p, s.category) != s.category:
                raise InvalidArgumentError(f"prompt {p!r} appears in more than one category")
    return suites


@dataclass
class TaggedImage:
    image: np.ndarray
    prompt: str
    category: str
    seed: int
    sample: int

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.image).tobytes()).hexdigest()


def _as_backend(checkpoint):
    from .backends.checkpoint import LoadedCheckpoint, load_checkpoint

    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, LoadedCheckpoint):
        return checkpoint.backend
    return checkpoint


def sample_images(checkpoint, suites, n_per_prompt: int = 4, seed: int = 0, guidance_scale: float = 4.0):
    """Generate `n_per_prompt` images per template; each image seed is derived from (seed, prompt, sample)."""
    backend = _as_backend(checkpoint)
    suites = [suites] if isinstance(suites, PromptSuite) else list(suites)
    if n_per_prompt < 0:
        raise InvalidArgumentError("n_per_prompt must be >= 0")
    known = set(backend.tokenizer.placeholders)
    for s in suites:
        for p in s.prompts:
            missing = [ph for ph in placeholders_in(p) if ph not in known]
            if missing:
                raise InvalidArgumentError(f"prompt {p!r} uses unknown placeholder(s) {missing}")
    out = []
    for s in suites:
        for j, prompt in enumerate(s.prompts):
            key = int(hashlib.sha256(f"{s.category}:{prompt}".encode()).hexdigest()[:8], 16)
            for k in range(n_per_prompt):
                image_seed = derive_seed(seed, key, k)
                image = generate(backend, [prompt], image_seed, guidance_scale)[0]
                out.append(TaggedImage(image, prompt, s.category, image_seed, k))
    return out


def class_text(prompt: str, registry: SubjectRegistry) -> str:
    """Prompt with placeholders replaced by each subject's descriptive phrase."""
    def sub(m):
        s = registry.by_placeholder(m.group(0))
        return s.noun_phrase or s.class_noun

    return PLACEHOLDER_RE.sub(sub, prompt)


# Toy scorers. They only make the harness testable offline and are not comparable to CLIP or IR values.


def _color_histogram(image, mask=None, bins: int = 4) -> np.ndarray:
    px = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        px = px[np.asarray(mask).reshape(-1).astype(bool)]
    if len(px) == 0:
        return np.zeros(bins**3)
    q = np.minimum((px * bins).astype(int), bins - 1)
    h = np.bincount(q[:, 0] * bins * bins + q[:, 1] * bins + q[:, 2], minlength=bins**3).astype(np.float64)
    return h / h.sum()


class HistogramImageScorer:
    """Image-image similarity: color-histogram intersection against the reference foreground."""

    name = "toy-histogram"
    metric = "clip_i"

    def __init__(self, bins: int = 4, foreground_only: bool = True):
        self.bins = bins
        self.foreground_only = foreground_only

    def similarity(self, a, b, mask_a=None, mask_b=None) -> float:
        ha = _color_histogram(a, mask_a, self.bins)
        hb = _color_histogram(b, mask_b, self.bins)
        return float(np.minimum(ha, hb).sum())

    def __call__(self, item: TaggedImage, registry: SubjectRegistry) -> float:
        ref = registry.reference_image
        ref_mask = None
        gen_mask = None
        if self.foreground_only:
            used = [registry.by_placeholder(p) for p in placeholders_in(item.prompt)]
            ref_mask = np.any([s.mask for s in used], axis=0)
            gen_mask = np.asarray(item.image).max(axis=-1) > 0.25
            if not gen_mask.any():
                return 0.0
        return self.similarity(item.image, ref, gen_mask, ref_mask)


_COLOR_WORDS = {name: np.asarray(rgb, dtype=np.float64) for name, rgb in COLORS.items()}


def image_tokens(image, min_fraction: float = 0.01, tolerance: float = 0.4) -> set[str]:
    """Color words whose pure color covers at least `min_fraction` of the image."""
    px = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    found = set()
    for name, rgb in _COLOR_WORDS.items():
        if (np.abs(px - rgb).max(axis=1) <= tolerance).mean() >= min_fraction:
            found.add(name)
    return found


def text_tokens(text: str) -> set[str]:
    return {w for w in re.findall(r"[a-z]+", text.lower()) if w in _COLOR_WORDS}


class TokenOverlapScorer:
    """Text-image alignment as overlap between color words in the text and colors visible in the image.

    mode="recall": fraction of the text's color words present in the image.
    mode="jaccard": intersection over union of both token sets.
    """

    def __init__(self, mode: str = "recall", metric: str = "clip_t"):
        if mode not in ("recall", "jaccard"):
            raise InvalidArgumentError(f"unknown mode {mode!r}")
        self.mode = mode
        self.metric = metric
        self.name = f"toy-token-{mode}"

    def __call__(self, item: TaggedImage, registry: SubjectRegistry) -> float:
        want = text_tokens(class_text(item.prompt, registry))
        have = image_tokens(item.image)
        if self.mode == "recall":
            return 1.0 if not want else len(want & have) / len(want)
        union = want | have
        return 1.0 if not union else len(want & have) / len(union)


class ClipScorer:
    """CLIP-T (text) or CLIP-I (image) cosine similarity via `transformers`; loaded on first use."""

    def __init__(self, metric: str = "clip_t", model_name: str = "openai/clip-vit-base-patch32"):
        if metric not in ("clip_t", "clip_i"):
            raise InvalidArgumentError("ClipScorer handles clip_t or clip_i")
        self.metric = metric
        self.model_name = model_name
        self.name = f"clip:{model_name}"
        self._model = None

    def _load(self):
        if self._model is None:
            from transformers import CLIPModel, CLIPProcessor

            self._model = CLIPModel.from_pretrained(self.model_name).eval()
            self._processor = CLIPProcessor.from_pretrained(self.model_name)
        return self._model, self._processor

    def __call__(self, item: TaggedImage, registry: SubjectRegistry) -> float:
        import torch

        model, proc = self._load()
        with torch.no_grad():
            img = model.get_image_features(**proc(images=Image.fromarray(to_uint8(item.image)), return_tensors="pt"))
            if self.metric == "clip_t":
                other = model.get_text_features(**proc(text=[class_text(item.prompt, registry)], return_tensors="pt"))
            else:
                ref = Image.fromarray(to_uint8(registry.reference_image))
                other = model.get_image_features(**proc(images=ref, return_tensors="pt"))
        return float(torch.nn.functional.cosine_similarity(img, other).item())


class ImageRewardScorer:
    """Image Reward through the `ImageReward` package; loaded on first use."""

    metric = "ir"

    def __init__(self, model_name: str = "ImageReward-v1.0"):
        self.model_name = model_name
        self.name = f"image-reward:{model_name}"
        self._model = None

    def __call__(self, item: TaggedImage, registry: SubjectRegistry) -> float:
        if self._model is None:
            import ImageReward

            self._model = ImageReward.load(self.model_name)
        return float(self._model.score(class_text(item.prompt, registry), Image.fromarray(to_uint8(item.image))))


SCORERS = {
    "toy-clip-i": lambda: HistogramImageScorer(),
    "toy-clip-t": lambda: TokenOverlapScorer("recall"),
    "toy-ir": lambda: TokenOverlapScorer("jaccard", metric="ir"),
    "clip-t": lambda: ClipScorer("clip_t"),
    "clip-i": lambda: ClipScorer("clip_i"),
    "image-reward": lambda: ImageRewardScorer(),
}
DEFAULT_SCORERS = ("toy-clip-t", "toy-clip-i", "toy-ir")


def make_scorers(names) -> list:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    out = []
    for n in names:
        if n not in SCORERS:
            raise InvalidArgumentError(f"unknown scorer {n!r}; choose from {sorted(SCORERS)}")
        out.append(SCORERS[n]())
    metrics = [s.metric for s in out]
    if len(set(metrics)) != len(metrics):
        raise InvalidArgumentError(f"more than one scorer for the same metric: {metrics}")
    return out


@dataclass
class MetricSummary:
    scorer: str
    count: int
    errors: int
    mean: float | None
    std: float | None


@dataclass
class ScoreReport:
    """Per (category, metric) summaries plus the per-image records they were computed from."""

    summaries: dict[str, dict[str, MetricSummary]] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "summaries": {
                c: {m: vars(s) for m, s in sorted(by_metric.items())} for c, by_metric in sorted(self.summaries.items())
            },
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        summaries = {c: {m: MetricSummary(**s) for m, s in ms.items()} for c, ms in d["summaries"].items()}
        return cls(summaries, list(d["records"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "metric", "scorer", "count", "errors", "mean", "std"])
        for c, ms in sorted(self.summaries.items()):
            for m, s in sorted(ms.items()):
                w.writerow([c, m, s.scorer, s.count, s.errors, "" if s.mean is None else repr(s.mean),
                            "" if s.std is None else repr(s.std)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreReport":
        summaries: dict = {}
        for row in csv.DictReader(io.StringIO(text)):
            summaries.setdefault(row["category"], {})[row["metric"]] = MetricSummary(
                row["scorer"],
                int(row["count"]),
                int(row["errors"]),
                float(row["mean"]) if row["mean"] else None,
                float(row["std"]) if row["std"] else None,
            )
        return cls(summaries, [])


def score(images, suites, registry: SubjectRegistry, scorers) -> ScoreReport:
    """Score every image with every scorer and aggregate per category.

    A scorer that raises on one image produces an error record; that image
    is excluded from the mean and counted under `errors`.
    """
    suites = [suites] if isinstance(suites, PromptSuite) else list(suites)
    scorers = make_scorers(scorers) if isinstance(scorers, (str, list, tuple)) and all(
        isinstance(s, str) for s in scorers) else list(scorers)
    category_of = {}
    for s in suites:
        for p in s.prompts:
            if category_of.setdefault(p, s.category) != s.category:
                raise InvalidArgumentError(f"prompt {p!r} appears in more than one category")
    records = []
    values: dict[tuple[str, str], list[float]] = {}
    errors: dict[tuple[str, str], int] = {}
    for k, item in enumerate(images):
        category = category_of.get(item.prompt)
        if category is None or category != item.category:
            raise InvalidArgumentError(f"image {k} prompt {item.prompt!r} is not in category {item.category!r}")
        for scorer in scorers:
            rec = {"image": k, "prompt": item.prompt, "category": category, "seed": item.seed,
                   "sample": item.sample, "metric": scorer.metric, "scorer": scorer.name}
            try:
                v = float(scorer(item, registry))
                if not math.isfinite(v):
                    raise ArithmeticError(f"non-finite score {v}")
                rec["value"] = v
                values.setdefault((category, scorer.metric), []).append(v)
            except (MultiPersoError, ArithmeticError, ValueError, RuntimeError, KeyError) as exc:
                rec["error"] = f"{type(exc).__name__}: {exc}"
                errors[(category, scorer.metric)] = errors.get((category, scorer.metric), 0) + 1
                log.warning("scorer %s failed on image %d: %s", scorer.name, k, exc)
            records.append(rec)
    summaries: dict = {}
    for s in suites:
        for scorer in scorers:
            key = (s.category, scorer.metric)
            v = values.get(key, [])
            summaries.setdefault(s.category, {})[scorer.metric] = MetricSummary(
                scorer.name,
                len(v),
                errors.get(key, 0),
                float(np.mean(v)) if v else None,
                float(np.std(v)) if v else None,
            )
    return ScoreReport(summaries, records)


def _font():
    return ImageFont.load_default()


def emit_grid(images, layout, out_path, captions=None, strip_height: int = 14) -> Path:
    """Write a PNG grid with one caption strip under each row.

    `images` are arrays or TaggedImage items; `layout` is (rows, cols).
    Row captions default to the prompt of the first item in each row.
    """
    items = list(images)
    if not items:
        raise InvalidArgumentError("emit_grid needs at least one image")
    rows, cols = layout
    if rows * cols < len(items):
        raise InvalidArgumentError(f"layout {rows}x{cols} cannot hold {len(items)} images")
    arrays = [to_uint8(it.image if isinstance(it, TaggedImage) else it) for it in items]
    h, w = arrays[0].shape[:2]
    for k, a in enumerate(arrays):
        if a.shape[:2] != (h, w):
            log.warning("image %d is %s; resizing to %dx%d", k, a.shape[:2], h, w)
            arrays[k] = np.asarray(Image.fromarray(a).resize((w, h), Image.BILINEAR))
    if captions is None:
        captions = []
        for r in range(rows):
            first = items[r * cols] if r * cols < len(items) else None
            captions.append(first.prompt if isinstance(first, TaggedImage) else "")
    canvas = Image.new("RGB", (cols * w, rows * (h + strip_height)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = _font()
    for k, a in enumerate(arrays):
        r, c = divmod(k, cols)
        canvas.paste(Image.fromarray(a), (c * w, r * (h + strip_height)))
    for r, text in enumerate(captions[:rows]):
        draw.text((2, r * (h + strip_height) + h + 1), text, fill=(0, 0, 0), font=font)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path, format="PNG", optimize=False)
    return out_path


def write_report(report: ScoreReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    j, c = out_dir / "report.json", out_dir / "report.csv"
    j.write_text(report.to_json())
    c.write_text(report.to_csv())
    return j, c
