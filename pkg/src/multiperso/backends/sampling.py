"""Ancestral sampling helpers shared by draft generation, GSA editing and evaluation."""

import torch


@torch.no_grad()
def reverse_chain(backend, z, t_start: int, texts, generator: torch.Generator, guidance_scale: float = 1.0):
    """Run ancestral steps t_start, ..., 1 on a batch of latents conditioned on `texts`."""
    if t_start <= 0:
        return z
    ctx = backend.encode_text(list(texts))
    uncond = backend.encode_text([""] * len(texts)) if guidance_scale != 1.0 else None
    for t in range(t_start, 0, -1):
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = backend.denoiser(z, tt, ctx)
        if uncond is not None:
            eps_u = backend.denoiser(z, tt, uncond)
            eps = eps_u + guidance_scale * (eps - eps_u)
        z = backend.scheduler.step(eps, z, tt, generator=generator)
    return z


@torch.no_grad()
def generate(backend, texts, seed: int, guidance_scale: float = 1.0):
    """Sample one image per text from pure noise; returns a list of HxWx3 arrays in [0, 1]."""
    g = torch.Generator().manual_seed(int(seed))
    size = backend.config.image_size
    z = torch.randn((len(texts), 3, size, size), generator=g, dtype=backend.dtype)
    z = reverse_chain(backend, z, backend.T, texts, g, guidance_scale)
    z = z.clamp(0, 1)
    return [backend.codec.decode(z[k : k + 1]) for k in range(z.shape[0])]
