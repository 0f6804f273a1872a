import torch

from ..errors import InvalidArgumentError


class DDPMScheduler:
    """Linear-beta DDPM schedule indexed by t in 0..T.

    t = 0 is the clean sample (alpha_bar = 1); training and sampling use t in 1..T.
    The beta endpoints default to the usual (1e-4, 0.02) at T = 1000, rescaled by
    1000 / T so a short chain still ends near pure noise.
    """

    def __init__(self, num_train_timesteps=100, beta_start=None, beta_end=None, clip_range=(0.0, 1.0)):
        if num_train_timesteps < 1:
            raise InvalidArgumentError("num_train_timesteps must be >= 1")
        T = num_train_timesteps
        scale = 1000.0 / T
        beta_start = 1e-4 * scale if beta_start is None else beta_start
        beta_end = 0.02 * scale if beta_end is None else beta_end
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.T = T
        self.beta_start, self.beta_end = beta_start, beta_end
        self.clip_range = clip_range
        self.betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)

    def config(self) -> dict:
        return {
            "num_train_timesteps": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "clip_range": list(self.clip_range) if self.clip_range else None,
        }

    def _coef(self, table, t, like):
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise InvalidArgumentError(f"timestep out of range [0, {self.T}]")
        c = table[t].to(like.dtype)
        return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))

    def noise_level(self, t):
        """Standard deviation of the noise component at t (monotone in t)."""
        return torch.sqrt(1.0 - self.alphas_cumprod[t])

    def add_noise(self, z0, noise, t):
        abar = self._coef(self.alphas_cumprod, t, z0)
        return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise

    def predict_original(self, prediction, z_t, t):
        abar = self._coef(self.alphas_cumprod, t, z_t)
        return (z_t - (1.0 - abar).sqrt() * prediction) / abar.sqrt()

    def posterior_mean(self, z0, z_t, t):
        t = torch.as_tensor(t, dtype=torch.long)
        abar = self._coef(self.alphas_cumprod, t, z_t)
        abar_prev = self._coef(self.alphas_cumprod, t - 1, z_t)
        beta = self._coef(self.betas, t, z_t)
        alpha = self._coef(self.alphas, t, z_t)
        c0 = beta * abar_prev.sqrt() / (1.0 - abar)
        ct = (1.0 - abar_prev) * alpha.sqrt() / (1.0 - abar)
        return c0 * z0 + ct * z_t

    def posterior_variance(self, t, like):
        t = torch.as_tensor(t, dtype=torch.long)
        abar = self._coef(self.alphas_cumprod, t, like)
        abar_prev = self._coef(self.alphas_cumprod, t - 1, like)
        beta = self._coef(self.betas, t, like)
        return beta * (1.0 - abar_prev) / (1.0 - abar)

    def step(self, prediction, z_t, t, generator=None, noise=None):
        """One ancestral step z_t -> z_{t-1}; t may be an int or a (B,) tensor, t >= 1."""
        if int(torch.as_tensor(t).min()) < 1:
            raise InvalidArgumentError("step() needs t >= 1")
        z0 = self.predict_original(prediction, z_t, t)
        if self.clip_range is not None:
            z0 = z0.clamp(*self.clip_range)
        mean = self.posterior_mean(z0, z_t, t)
        var = self.posterior_variance(t, z_t)
        if noise is None:
            noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        return mean + var.sqrt() * noise
