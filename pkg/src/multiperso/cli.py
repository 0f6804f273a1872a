"""Command line entry point: toy-pretrain, toy-reference, augment, train, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import InvalidArgumentError, MultiPersoError

log = logging.getLogger("multiperso")

DEFAULT_CLIENTS = {
    "describer": {"type": "stub-describer", "phrases": ["red circle", "blue square"]},
    "prompt_generator": {"type": "stub-generator"},
    "t2i": {"type": "toy-t2i"},
    "segmenter": {"type": "toy-segmenter"},
    "inpainter": {"type": "toy-inpainter"},
}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from exc


def _subjects(doc: dict, where: str) -> list[dict]:
    subjects = doc.get("subjects")
    if not subjects:
        raise InvalidArgumentError(f"{where} must list `subjects` (placeholder, class_noun per entry)")
    return subjects


def cmd_toy_pretrain(args):
    from .backends import ToyBackend, ToyConfig, ToyWorld, toy_pretrain

    backend = ToyBackend(ToyConfig(seed=args.seed))
    _, curve = toy_pretrain(
        ToyWorld(),
        steps=args.steps,
        seed=args.seed,
        backend=backend,
        batch_size=args.batch_size,
        lr=args.lr,
        checkpoint_path=args.out,
        log_path=Path(args.out).with_suffix(".csv"),
    )
    print(f"pretrained {args.steps} steps, final loss {curve[-1][1]:.5f} -> {args.out}")


def cmd_toy_reference(args):
    from .backends import ToyWorld
    from .core import save_image, save_mask

    world = ToyWorld()
    scene = world.reference_scene(args.seed)
    image, masks = world.render(scene)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    save_image(image, out / "reference.png")
    subjects = []
    for k, (spec, mask) in enumerate(zip(scene, masks)):
        placeholder = f"<asset{k}>"
        save_mask(mask, out / "masks" / f"asset{k}.png")
        subjects.append({"placeholder": placeholder, "class_noun": spec.shape})
    (out / "subjects.json").write_text(json.dumps({"subjects": subjects}, indent=2) + "\n")
    print(f"wrote reference image, {len(masks)} masks and subjects.json to {out}")


def _load_backend(path):
    from .backends import load_checkpoint

    return load_checkpoint(path).backend


def cmd_augment(args):
    from .augmentation.clients import load_client
    from .augmentation.pipeline import AugmentClients, AugmentConfig, build_augmented_dataset
    from .backends import register_placeholders
    from .core import load_registry

    cfg = _read_json(args.config)
    root = Path(args.config).parent
    registry = load_registry(root / cfg["reference"], root / cfg["masks"], _subjects(cfg, args.config))
    backend = _load_backend(root / cfg["backend"])
    register_placeholders(backend, registry)
    specs = {**DEFAULT_CLIENTS, **cfg.get("clients", {})}
    clients = AugmentClients(**{k: load_client(v, backend=backend) for k, v in specs.items()})
    options = dict(cfg.get("augment", {}))
    if args.seed is not None:
        options["seed"] = args.seed
    if args.n_prompts is not None:
        options["n_prompts"] = args.n_prompts
    if args.gsa_strength is not None:
        options["gsa_strength"] = args.gsa_strength
    samples, manifest = build_augmented_dataset(registry, AugmentConfig(**options), clients, backend, args.out)
    print(f"{len(samples)} augmented samples ({len(manifest['rejections'])} rejected) -> {args.out}/manifest.json")


def cmd_train(args):
    from .augmentation.pipeline import load_manifest
    from .core import load_registry
    from .trainer import TrainConfig, train

    doc = _read_json(args.config)
    root = Path(args.config).parent
    subjects = _subjects(doc, args.config)
    backend_path = args.backend or (root / doc["backend"] if "backend" in doc else None)
    if backend_path is None:
        raise InvalidArgumentError("no backend checkpoint: pass --backend or set `backend` in the config")
    config = TrainConfig.from_dict({k: v for k, v in doc.items() if k not in ("subjects", "backend")})
    registry = load_registry(args.ref, args.masks, subjects)
    samples = []
    if args.aug_manifest:
        samples, manifest = load_manifest(args.aug_manifest)
        for s in registry:
            s.noun_phrase = manifest.get("phrases", {}).get(s.placeholder, s.noun_phrase)
    result = train(registry, samples, _load_backend(backend_path), config, args.out)
    m = result.metrics
    print(f"trained {m['steps']} steps in {m['seconds']:.1f}s; IoU before {m['iou_before']} after {m['iou_after']}")
    print(f"checkpoint {args.out}/checkpoint.safetensors state {result.checkpoint_hash}")


def cmd_eval(args):
    from .backends import load_checkpoint
    from .core import registry_from_state
    from .eval import emit_grid, load_suites, make_scorers, sample_images, score, write_report

    ckpt = load_checkpoint(args.checkpoint)
    if "registry" not in ckpt.extra:
        raise InvalidArgumentError(f"{args.checkpoint} carries no subject registry (not a personalized checkpoint)")
    registry = registry_from_state(ckpt.extra["registry"], ckpt.arrays)
    suites = load_suites(args.suite)
    known = set(ckpt.backend.tokenizer.placeholders)
    images = sample_images(ckpt.backend, suites, args.n_per_prompt, args.seed, args.guidance_scale)
    report = score(images, suites, registry, make_scorers(args.scorers))
    out = Path(args.out)
    write_report(report, out)
    if args.n_per_prompt > 0:
        for s in suites:
            subset = [im for im in images if im.category == s.category]
            emit_grid(subset, (len(s.prompts), args.n_per_prompt), out / f"grid_{s.category}.png")
    print(f"scored {len(images)} images with placeholders {sorted(known)} -> {out}/report.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiperso", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("toy-pretrain", help="fit the toy backend on the synthetic shapes world")
    q.add_argument("--out", required=True)
    q.add_argument("--steps", type=int, default=4000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--batch-size", type=int, default=32)
    q.add_argument("--lr", type=float, default=2e-3)
    q.set_defaults(func=cmd_toy_pretrain)

    q = sub.add_parser("toy-reference", help="write a two-subject reference image with masks")
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_toy_reference)

    q = sub.add_parser("augment", help="build the augmented prompt/image dataset")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int)
    q.add_argument("--n-prompts", type=int)
    q.add_argument("--gsa-strength", type=float)
    q.set_defaults(func=cmd_augment)

    q = sub.add_parser("train", help="two-phase personalization")
    q.add_argument("--config", required=True)
    q.add_argument("--ref", required=True)
    q.add_argument("--masks", required=True)
    q.add_argument("--aug-manifest")
    q.add_argument("--backend", help="pretrained checkpoint (overrides `backend` in the config)")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", help="sample the prompt suites and score them")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--suite", default="all")
    q.add_argument("--scorers", default="toy-clip-t,toy-clip-i,toy-ir")
    q.add_argument("--out", required=True)
    q.add_argument("--n-per-prompt", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--guidance-scale", type=float, default=4.0)
    q.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        args.func(args)
    except (MultiPersoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
