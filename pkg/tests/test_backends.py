import numpy as np
import pytest
import torch

from multiperso.backends import (
    DDPMScheduler,
    ToyBackend,
    ToyConfig,
    ToyTokenizer,
    ToyWorld,
    load_checkpoint,
    register_placeholders,
    save_checkpoint,
    state_hash,
    toy_pretrain,
)
from multiperso.backends.checkpoint import read_metadata
from multiperso.backends.sampling import generate
from multiperso.backends.world import ShapeSpec, shape_mask
from multiperso.errors import InvalidArgumentError, TrainingError


# scheduler


def alpha_bar_oracle(betas, t):
    prod = 1.0
    for k in range(1, t + 1):
        prod *= 1.0 - float(betas[k - 1])
    return prod


def test_scheduler_schedule_values():
    s = DDPMScheduler(100)
    assert s.beta_start == pytest.approx(1e-3) and s.beta_end == pytest.approx(0.2)
    assert float(s.alphas_cumprod[0]) == 1.0
    betas = np.linspace(1e-3, 0.2, 100)
    for t in (1, 7, 50, 100):
        assert float(s.alphas_cumprod[t]) == pytest.approx(alpha_bar_oracle(betas, t), rel=1e-12)
    levels = [float(s.noise_level(t)) for t in range(101)]
    assert all(a < b for a, b in zip(levels, levels[1:]))
    assert levels[-1] > 0.999


def test_scheduler_roundtrip_float64():
    s = DDPMScheduler(100)
    g = torch.Generator().manual_seed(0)
    z0 = torch.rand((2, 3, 8, 8), generator=g, dtype=torch.float64)
    eps = torch.randn((2, 3, 8, 8), generator=g, dtype=torch.float64)
    for t in (1, 10, 50, 99, 100):
        z_t = s.add_noise(z0, eps, t)
        assert torch.allclose(s.predict_original(eps, z_t, t), z0, atol=1e-5)


def test_scheduler_posterior_oracle():
    s = DDPMScheduler(100)
    betas = np.linspace(1e-3, 0.2, 100)
    z0 = torch.tensor([0.3], dtype=torch.float64)
    z_t = torch.tensor([-0.7], dtype=torch.float64)
    for t in (2, 40, 100):
        ab, abp, b = alpha_bar_oracle(betas, t), alpha_bar_oracle(betas, t - 1), betas[t - 1]
        mean = b * abp**0.5 / (1 - ab) * 0.3 + (1 - abp) * (1 - b) ** 0.5 / (1 - ab) * -0.7
        var = b * (1 - abp) / (1 - ab)
        assert float(s.posterior_mean(z0, z_t, t)) == pytest.approx(mean, rel=1e-10)
        assert float(s.posterior_variance(t, z0)) == pytest.approx(var, rel=1e-10)
    assert float(s.posterior_variance(1, z0)) == 0.0


def test_scheduler_step_contracts():
    s = DDPMScheduler(100)
    z0 = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    eps = torch.randn((1, 3, 4, 4), dtype=torch.float64)
    z1 = s.add_noise(z0, eps, 1)
    # at t = 1 the step is deterministic and recovers the clean sample
    assert torch.allclose(s.step(eps, z1, 1, noise=torch.randn_like(z1)), z0, atol=1e-10)
    with pytest.raises(InvalidArgumentError):
        s.step(eps, z1, 0)
    with pytest.raises(InvalidArgumentError):
        s.add_noise(z0, eps, 101)
    tt = torch.tensor([3])
    a = s.step(eps, z1, tt, generator=torch.Generator().manual_seed(3))
    b = s.step(eps, z1, tt, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


# tokenizer / text encoder / denoiser


def test_tokenizer_contract():
    tok = ToyTokenizer()
    ids, offsets = tok("a red circle left")
    assert len(ids) == tok.context_length == 24
    assert ids[0] == tok.bos_id and offsets[0] == (0, 0)
    assert offsets[2] == (2, 5)
    assert ids[5:] == [tok.pad_id] * 19
    assert tok("zebra")[0][1] == tok.unk_id
    with pytest.raises(InvalidArgumentError):
        tok("<asset0> here")
    pid = tok.add_placeholder("<asset0>")
    assert pid == len(tok) - 1 and tok("<asset0>")[0][1] == pid
    with pytest.raises(InvalidArgumentError):
        tok.add_placeholder("<asset0>")
    with pytest.raises(InvalidArgumentError):
        tok(" ".join(["a"] * 30))
    again = ToyTokenizer.from_state(tok.state())
    assert again("a <asset0>") == tok("a <asset0>")


def test_register_placeholders_initializes_from_class_noun(toy_backend, registry):
    register_placeholders(toy_backend, registry)
    te = toy_backend.text_encoder
    tok = toy_backend.tokenizer
    assert te.placeholder_embedding.shape == (2, te.dim)
    assert torch.equal(te.placeholder_embedding[0], te.base_embedding[tok.token_id("circle")])
    # identical embeddings -> identical encoder output at that position
    a = toy_backend.encode_text(["a photo of <asset0>"])
    b = toy_backend.encode_text(["a photo of circle"])
    assert torch.allclose(a, b, atol=1e-6)
    with pytest.raises(InvalidArgumentError):
        register_placeholders(toy_backend, registry)


def test_register_rejects_unknown_class_noun(toy_backend, registry):
    registry.subjects[0].class_noun = "panda"
    with pytest.raises(InvalidArgumentError):
        register_placeholders(toy_backend, registry)


def test_text_encoder_is_contextual(toy_backend):
    a = toy_backend.encode_text(["a red circle"])[0, 3]
    b = toy_backend.encode_text(["a blue circle"])[0, 3]
    assert not torch.allclose(a, b)


def test_denoiser_contract(toy_backend):
    z = torch.rand((2, 3, 64, 64))
    ctx = toy_backend.encode_text(["a red circle", "a blue square"])
    run = toy_backend.denoiser.run(z, torch.tensor([5, 50]), ctx, record_attention=True)
    assert run.prediction.shape == z.shape
    # zero-initialized output projection
    assert torch.count_nonzero(run.prediction) == 0
    (tap,) = run.taps
    assert tap.resolution == 16 and tap.probs.shape == (2, 2, 256, 24)
    assert torch.allclose(tap.probs.sum(-1), torch.ones(2, 2, 256), atol=1e-5)
    assert toy_backend.denoiser.run(z, 5, ctx).taps is None


def test_clone_is_independent(toy_backend):
    c = toy_backend.clone()
    with torch.no_grad():
        c.text_encoder.base_embedding.add_(1.0)
    assert not torch.equal(c.text_encoder.base_embedding, toy_backend.text_encoder.base_embedding)


def test_same_seed_same_init():
    assert state_hash(ToyBackend(ToyConfig(seed=3))) == state_hash(ToyBackend(ToyConfig(seed=3)))
    assert state_hash(ToyBackend(ToyConfig(seed=3))) != state_hash(ToyBackend(ToyConfig(seed=4)))


# checkpoints


def test_checkpoint_roundtrip(tmp_path, toy_backend, registry):
    register_placeholders(toy_backend, registry)
    arrays = {"mask_1": registry.subject(1).mask}
    digest = save_checkpoint(toy_backend, tmp_path / "c.safetensors", extra={"note": 1}, arrays=arrays)
    loaded = load_checkpoint(tmp_path / "c.safetensors")
    assert state_hash(loaded.backend) == digest
    assert loaded.extra == {"note": 1}
    assert np.array_equal(loaded.arrays["mask_1"], registry.subject(1).mask)
    assert loaded.backend.tokenizer.placeholders == ["<asset0>", "<asset1>"]
    meta = read_metadata(tmp_path / "c.safetensors")
    assert meta["state_hash"] == digest and len(meta["config_hash"]) == 64
    ids = torch.tensor([toy_backend.tokenize("a <asset1>")[0]])
    assert torch.equal(loaded.backend.encode_ids(ids), toy_backend.encode_ids(ids))


def test_checkpoint_detects_tampering(tmp_path, toy_backend):
    from safetensors.torch import load_file, save_file
    from safetensors import safe_open

    path = tmp_path / "c.safetensors"
    save_checkpoint(toy_backend, path)
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata()
    tensors = load_file(str(path))
    tensors["denoiser.conv_out.bias"] = tensors["denoiser.conv_out.bias"] + 1
    save_file(tensors, str(path), metadata=meta)
    with pytest.raises(ValueError):
        load_checkpoint(path)


# pretraining and sampling


def test_pretrain_reduces_loss_and_logs(tmp_path):
    backend, curve = toy_pretrain(ToyWorld(), steps=40, batch_size=8, log_every=20,
                                  log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "p.safetensors")
    assert curve[0][0] == 0 and curve[-1][0] == 40
    assert curve[-1][1] < curve[0][1]
    assert (tmp_path / "log.csv").read_text().startswith("step,loss")
    assert state_hash(load_checkpoint(tmp_path / "p.safetensors").backend) == state_hash(backend)


def test_pretrain_divergence_saves_last_finite_state(tmp_path):
    backend = ToyBackend(ToyConfig(seed=0))
    with pytest.raises(TrainingError) as info:
        toy_pretrain(ToyWorld(), steps=20, batch_size=4, lr=1e30, backend=backend,
                     checkpoint_path=tmp_path / "d.safetensors")
    assert "step" in info.value.diagnostics
    loaded = load_checkpoint(tmp_path / "d.safetensors")
    assert all(torch.isfinite(p).all() for p in loaded.backend.parameters())
    assert loaded.extra["diverged_at"] == info.value.diagnostics["step"]


def test_generate_deterministic(toy_backend):
    a = generate(toy_backend, ["a red circle"], seed=5)
    b = generate(toy_backend, ["a red circle"], seed=5)
    c = generate(toy_backend, ["a red circle"], seed=6)
    assert a[0].shape == (64, 64, 3)
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[0], c[0])
    assert a[0].min() >= 0 and a[0].max() <= 1


def test_pretrained_model_follows_slot_words(pretrained):
    """"circle left" puts more intensity in the left half than the right, and vice versa."""
    halves = {}
    for word in ("left", "right"):
        acc = []
        for seed in range(8):
            img = generate(pretrained, [f"a red circle {word}"], seed=seed, guidance_scale=4.0)[0].mean(axis=-1)
            acc.append((img[:, :32].mean(), img[:, 32:].mean()))
        halves[word] = np.mean(acc, axis=0)
    assert halves["left"][0] > halves["left"][1]
    assert halves["right"][1] > halves["right"][0]


def test_pretrained_model_follows_color_words(pretrained):
    for k, word in enumerate(("red", "green", "blue")):
        totals = sum(generate(pretrained, [f"a {word} square"], seed=s, guidance_scale=4.0)[0].sum(axis=(0, 1))
                     for s in range(4))
        assert int(np.argmax(totals)) == k


# world


def test_world_render_and_caption():
    world = ToyWorld()
    rng = np.random.default_rng(0)
    sample = world.sample(rng)
    assert sample.image.shape == (64, 64, 3)
    assert len(sample.masks) == len(sample.scene)
    for spec, mask in zip(sample.scene, sample.masks):
        assert mask.any()
    for m1 in sample.masks:
        assert m1.dtype == np.uint8
    images, captions = world.batch(3, rng)
    assert images.shape == (3, 64, 64, 3) and len(captions) == 3
    tok = ToyTokenizer()
    for c in captions:
        assert tok.unk_id not in tok(c)[0]


def test_world_shape_areas():
    r = 8.0
    circle = shape_mask(ShapeSpec("circle", "red", "center", 32, 32, r), 64).sum()
    square = shape_mask(ShapeSpec("square", "red", "center", 32, 32, r), 64).sum()
    assert abs(circle - np.pi * r * r) < 0.1 * np.pi * r * r
    # square half-side is 0.85 r: 14 x 14 pixels at r = 8
    assert square == 14 * 14
    tri = shape_mask(ShapeSpec("triangle", "red", "center", 32, 32, r), 64).sum()
    assert abs(tri - r * r * 2) < 0.15 * r * r * 2
