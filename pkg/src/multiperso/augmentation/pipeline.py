"""Concept-based prompt-and-image augmentation: describe, generate prompts, draft, compose + GSA."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import (
    PromptPair,
    SubjectRegistry,
    load_image,
    load_mask,
    make_prompt_pair,
    save_image,
    save_mask,
    to_uint8,
)
from ..errors import InvalidArgumentError, PipelineError
from .ops import (
    SampleRejected,
    call_client,
    compose_subjects,
    gsa_edit,
    gsa_steps,
    inpaint_holes,
    segment_pseudo_masks,
)

log = logging.getLogger(__name__)

DESCRIBE_QUERY = "Name every subject in this image with a short noun phrase of at most five words."
MAX_PHRASE_WORDS = 5
MANIFEST_VERSION = 1


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


def _parse_lines(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = re.sub(r"^\s*(?:\d+[.)]|[-*])\s*", "", line).strip().strip('"').rstrip(".").strip()
        if line:
            out.append(line)
    return out


def _phrase_ok(phrase: str, subject) -> bool:
    words = phrase.lower().split()
    names = [subject.class_noun.lower(), *(s.lower() for s in subject.synonyms)]
    has_noun = any(re.search(rf"\b{re.escape(n)}\b", phrase.lower()) for n in names)
    return len(words) <= MAX_PHRASE_WORDS and has_noun


def describe_subjects(image, registry: SubjectRegistry, vlm, max_requery: int = 3) -> dict[int, str]:
    """Ask the describer for one short noun phrase per subject and store it on the registry."""
    order = ", ".join(s.class_noun for s in registry)
    query = f"{DESCRIBE_QUERY} Answer with one numbered line per subject, in this order: {order}."
    phrases = None
    for attempt in range(max_requery + 1):
        lines = _parse_lines(call_client(vlm, image, query, what="describer"))
        if len(lines) != len(registry):
            continue
        phrases = lines
        if all(_phrase_ok(p, s) for p, s in zip(lines, registry)):
            break
    if phrases is None:
        raise PipelineError(f"describer never returned {len(registry)} phrases")
    result = {}
    for phrase, subject in zip(phrases, registry):
        words = phrase.split()
        if len(words) > MAX_PHRASE_WORDS:
            log.warning("truncating over-length phrase %r for %s", phrase, subject.placeholder)
            phrase = " ".join(words[:MAX_PHRASE_WORDS])
        if not _phrase_ok(phrase, subject):
            log.warning("phrase %r lacks class noun %r; using the class noun", phrase, subject.class_noun)
            phrase = subject.class_noun
        subject.noun_phrase = phrase
        result[subject.index] = phrase
    return result


def _generation_query(phrases: list[str], n: int) -> str:
    quoted = [f'"{p}"' for p in phrases]
    if len(quoted) == 1:
        return f"Write at least {n} varied sentences showing {quoted[0]} doing different things."
    return f"Write at least {n} varied sentences in which {', '.join(quoted[:-1])} and {quoted[-1]} interact."


def _filter_query(sentences: list[str], n: int) -> str:
    head = (
        f"From the numbered list below, select the {n} most natural sentences, "
        "keeping objects other than the subjects evenly represented."
    )
    return head + "\n" + "\n".join(f"{k + 1}. {s}" for k, s in enumerate(sentences))


def substitute_placeholders(sentence: str, phrases: dict[str, str]) -> str:
    """Replace noun-phrase occurrences (longest first, case-insensitive) by their placeholders."""
    out = sentence
    for placeholder, phrase in sorted(phrases.items(), key=lambda kv: -len(kv[1])):
        out = re.sub(rf"(?<![\w<]){re.escape(phrase)}(?![\w>])", placeholder, out, flags=re.I)
    return out


def generate_prompts(phrases: dict[str, str], lm, n_target: int = 30, overgenerate: int = 2) -> list[str]:
    """Over-generate sentences, filter them with a second query, map phrases back to placeholders.

    `phrases` maps placeholder -> noun phrase. Returns up to `n_target`
    distinct templates, each containing at least one placeholder.
    """
    if n_target < 1:
        raise InvalidArgumentError("n_target must be >= 1")
    names = list(phrases.values())
    templates: list[str] = []
    for attempt in range(2):
        raw = _parse_lines(call_client(lm, _generation_query(names, overgenerate * n_target), what="prompt generator"))
        kept = _parse_lines(call_client(lm, _filter_query(raw, n_target), what="prompt generator"))
        for sentence in kept:
            tpl = substitute_placeholders(sentence, phrases)
            if any(p in tpl for p in phrases) and tpl not in templates:
                templates.append(tpl)
        if len(templates) >= n_target:
            break
    if len(templates) < n_target:
        log.warning("only %d of %d prompts survived filtering", len(templates), n_target)
    return templates[:n_target]


def generate_draft(prompt: str, t2i, seed: int, size: tuple[int, int] | None = None) -> np.ndarray:
    image = np.asarray(call_client(t2i, prompt, int(seed), what="t2i"), dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3 or (size is not None and image.shape[:2] != tuple(size)):
        raise PipelineError(f"t2i returned an image of shape {image.shape}")
    return image


@dataclass
class AugmentedSample:
    prompt_pair: PromptPair
    image: np.ndarray
    pseudo_masks: dict[int, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {"prompt_pair": self.prompt_pair.to_dict(), "provenance": self.provenance}


@dataclass
class AugmentConfig:
    n_prompts: int = 30
    gsa_strength: float = 0.7
    seed: int = 0
    guidance_scale: float = 4.0
    max_overlap: float = 0.1
    save_intermediates: bool = True


@dataclass
class AugmentClients:
    describer: object
    prompt_generator: object
    t2i: object
    segmenter: object
    inpainter: object


def _quantize(image) -> np.ndarray:
    return to_uint8(image).astype(np.float32) / 255.0


def build_augmented_dataset(registry: SubjectRegistry, config: AugmentConfig, clients: AugmentClients, backend, out_dir=None):
    """Run the four augmentation steps; returns (samples, manifest dict).

    `backend` provides the tokenizer (placeholders must be registered) and
    the diffusion model used for GSA. Images are quantized to 8 bits so the
    in-memory samples equal what a reloaded manifest yields.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        for sub in ("images", "masks", "drafts"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)

    phrases = describe_subjects(registry.reference_image, registry, clients.describer)
    by_placeholder = {registry.subject(i).placeholder: p for i, p in phrases.items()}
    templates = generate_prompts(by_placeholder, clients.prompt_generator, config.n_prompts)
    k_steps = gsa_steps(config.gsa_strength, backend.T)
    size = registry.reference_image.shape[:2]

    samples, entries, rejections = [], [], []
    for j, template in enumerate(templates):
        draft_seed = derive_seed(config.seed, j, 0)
        gsa_seed = derive_seed(config.seed, j, 1)
        stage = "prompt"
        try:
            pair = make_prompt_pair(template, registry, backend.tokenize, "noun_phrase")
            referenced = {i: phrases[i] for i in pair.subjects}
            stage = "draft"
            draft = generate_draft(pair.class_prompt, clients.t2i, draft_seed, size)
            draft_masks = segment_pseudo_masks(draft, referenced, clients.segmenter, config.max_overlap)
            stage = "compose"
            comp = compose_subjects(draft, draft_masks, registry)
            inpainted = inpaint_holes(comp.image, comp.holes, clients.inpainter)
            stage = "gsa"
            final = _quantize(gsa_edit(inpainted, pair.class_prompt, k_steps, backend, gsa_seed, config.guidance_scale))
            pseudo = segment_pseudo_masks(final, referenced, clients.segmenter, config.max_overlap)
        except SampleRejected as rej:
            rejections.append(
                {"id": j, "template": template, "stage": stage, "reason": rej.reason, "details": _jsonable(rej.details)}
            )
            log.info("sample %d rejected at %s: %s", j, stage, rej.reason)
            continue
        provenance = {
            "id": j,
            "draft_seed": draft_seed,
            "gsa_seed": gsa_seed,
            "gsa_steps": k_steps,
            "gsa_strength": config.gsa_strength,
            "inpainting": {"hole_area": int(comp.holes.sum())},
            "compose": {str(i): r for i, r in comp.records.items()},
        }
        sample = AugmentedSample(pair, final, pseudo, provenance)
        entry = {**sample.metadata()}
        if out_dir is not None:
            entry["image"] = f"images/sample_{j:03d}.png"
            save_image(final, out_dir / entry["image"])
            entry["masks"] = {}
            for i, m in sorted(pseudo.items()):
                rel = f"masks/sample_{j:03d}_{i}.png"
                save_mask(m, out_dir / rel)
                entry["masks"][str(i)] = rel
            if config.save_intermediates:
                save_image(draft, out_dir / f"drafts/draft_{j:03d}.png")
                save_image(inpainted, out_dir / f"drafts/inpainted_{j:03d}.png")
        samples.append(sample)
        entries.append(entry)

    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": config.seed,
        "gsa_strength": config.gsa_strength,
        "gsa_steps": k_steps,
        "n_prompts": config.n_prompts,
        "phrases": {registry.subject(i).placeholder: p for i, p in sorted(phrases.items())},
        "samples": entries,
        "rejections": rejections,
    }
    if out_dir is not None:
        write_manifest(manifest, out_dir / "manifest.json")
    if not samples:
        raise PipelineError(f"no augmented sample survived ({len(rejections)} rejected)")
    return samples, manifest


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> tuple[list[AugmentedSample], dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise InvalidArgumentError(f"unsupported manifest version {manifest.get('version')}")
    root = path.parent
    samples = []
    for entry in manifest["samples"]:
        pair = PromptPair.from_dict(entry["prompt_pair"])
        image = load_image(root / entry["image"])
        masks = {int(i): load_mask(root / rel) for i, rel in entry["masks"].items()}
        samples.append(AugmentedSample(pair, image, masks, entry["provenance"]))
    return samples, manifest
