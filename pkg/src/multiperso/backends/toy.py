"""Self-contained CPU-scale backend: word tokenizer, text encoder, denoiser, codec."""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import PLACEHOLDER_RE
from ..errors import InvalidArgumentError
from .contracts import AttentionTap, DenoiserRun
from .scheduler import DDPMScheduler
from .world import VOCAB

SPECIALS = ("<pad>", "<bos>", "<unk>")
_WORD_RE = re.compile(r"<[A-Za-z_][A-Za-z0-9_]*>|[A-Za-z0-9]+")


class ToyTokenizer:
    """Word-level tokenizer with a fixed base vocabulary plus appended placeholders."""

    def __init__(self, words=VOCAB, context_length=24):
        self.base_vocab = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.placeholders: list[str] = []
        self.context_length = context_length
        self._index = {w: k for k, w in enumerate(self.base_vocab)}

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def unk_id(self):
        return 2

    @property
    def base_size(self):
        return len(self.base_vocab)

    def __len__(self):
        return len(self.base_vocab) + len(self.placeholders)

    def add_placeholder(self, token: str) -> int:
        if not PLACEHOLDER_RE.fullmatch(token):
            raise InvalidArgumentError(f"placeholder must look like <name>, got {token!r}")
        if token in self._index:
            raise InvalidArgumentError(f"token {token!r} already in vocabulary")
        self.placeholders.append(token)
        self._index[token] = len(self) - 1
        return self._index[token]

    def token_id(self, word: str) -> int:
        if word.startswith("<"):
            if word not in self._index:
                raise InvalidArgumentError(f"unknown placeholder {word!r}")
            return self._index[word]
        return self._index.get(word.lower(), self.unk_id)

    def __call__(self, text: str):
        """Return (ids, offsets); offsets are (start, end) char spans, (0, 0) for specials."""
        ids = [self.bos_id]
        offsets = [(0, 0)]
        for m in _WORD_RE.finditer(text):
            ids.append(self.token_id(m.group(0)))
            offsets.append(m.span())
        if len(ids) > self.context_length:
            raise InvalidArgumentError(f"prompt longer than {self.context_length - 1} words: {text!r}")
        pad = self.context_length - len(ids)
        return ids + [self.pad_id] * pad, offsets + [(0, 0)] * pad

    def batch(self, texts) -> torch.Tensor:
        return torch.tensor([self(t)[0] for t in texts], dtype=torch.long)

    def state(self) -> dict:
        return {"base_vocab": self.base_vocab, "placeholders": self.placeholders, "context_length": self.context_length}

    @classmethod
    def from_state(cls, state):
        tok = cls(words=state["base_vocab"], context_length=state["context_length"])
        for p in state["placeholders"]:
            tok.add_placeholder(p)
        return tok


class TextBlock(nn.Module):
    """Pre-norm bidirectional self-attention + MLP; padding keys are masked out."""

    def __init__(self, dim, hidden, heads=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def forward(self, x, pad):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=pad, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyTextEncoder(nn.Module):
    """Token + position embedding followed by a few contextual blocks, so a noun sees its attributes.

    Placeholder rows live in their own parameter so they can be optimized
    on their own while the base table stays untouched.
    """

    def __init__(self, vocab_size, context_length=24, dim=64, hidden=128, init_std=0.3, layers=1, pad_id=0):
        super().__init__()
        self.dim = dim
        self.pad_id = pad_id
        self.base_embedding = nn.Parameter(torch.randn(vocab_size, dim) * init_std)
        self.placeholder_embedding = nn.Parameter(torch.zeros(0, dim))
        self.position = nn.Parameter(torch.randn(context_length, dim) * 0.02)
        self.blocks = nn.ModuleList([TextBlock(dim, hidden) for _ in range(layers)])
        # final norm: context vectors are O(1) whatever the scale of the embedding table
        self.norm = nn.LayerNorm(dim)

    def embedding_table(self):
        return torch.cat([self.base_embedding, self.placeholder_embedding], dim=0)

    def append_rows(self, rows: torch.Tensor):
        new = torch.cat([self.placeholder_embedding.data, rows.to(self.placeholder_embedding.dtype)], dim=0)
        self.placeholder_embedding = nn.Parameter(new)

    def forward(self, ids):
        x = F.embedding(ids, self.embedding_table()) + self.position[: ids.shape[-1]]
        pad = ids == self.pad_id
        for blk in self.blocks:
            x = blk(x, pad)
        return self.norm(x)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch, temb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class CrossAttention(nn.Module):
    """Queries from spatial features (+ learned 2-D position), keys/values from text."""

    def __init__(self, ch, text_dim, resolution, heads=2, head_dim=32, groups=8):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.resolution = resolution
        self.norm = nn.GroupNorm(groups, ch)
        self.position = nn.Parameter(torch.randn(resolution * resolution, ch) * 0.5)
        self.to_q = nn.Linear(ch, heads * head_dim, bias=False)
        self.to_k = nn.Linear(text_dim, heads * head_dim, bias=False)
        self.to_v = nn.Linear(text_dim, heads * head_dim, bias=False)
        self.to_out = nn.Linear(heads * head_dim, ch)

    def forward(self, x, context):
        b, c, h, w = x.shape
        hs = self.norm(x).flatten(2).transpose(1, 2) + self.position
        q = self.to_q(hs).view(b, h * w, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, -1)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out, probs


class ToyDenoiser(nn.Module):
    """Patchify (4x4) -> res blocks -> one cross-attention block at 16x16 -> res blocks -> unpatchify.

    The output projection starts at zero, so an untrained model predicts zero noise.
    """

    def __init__(self, T, image_size=64, channels=3, width=64, text_dim=64, patch=4, heads=2, head_dim=32, blocks=2):
        super().__init__()
        self.T = T
        self.patch = patch
        self.resolution = image_size // patch
        self.width = width
        tdim = width * 2
        self.temb = nn.Sequential(nn.Linear(width, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(channels * patch * patch, width, 3, padding=1)
        self.down = nn.ModuleList([ResBlock(width, tdim) for _ in range(blocks)])
        self.attn = CrossAttention(width, text_dim, self.resolution, heads=heads, head_dim=head_dim)
        self.up = nn.ModuleList([ResBlock(width, tdim) for _ in range(blocks)])
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, channels * patch * patch, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def run(self, z_t, t, context, record_attention=False) -> DenoiserRun:
        b = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(b)
        # scale t to the usual 0..1000 range so the sinusoid frequencies stay meaningful
        temb = self.temb(timestep_embedding(t * (1000.0 / self.T), self.width).to(z_t.dtype))
        h = self.conv_in(F.pixel_unshuffle(z_t, self.patch))
        for blk in self.down:
            h = blk(h, temb)
        h, probs = self.attn(h, context)
        for blk in self.up:
            h = blk(h, temb)
        eps = F.pixel_shuffle(self.conv_out(F.silu(self.norm_out(h))), self.patch)
        taps = [AttentionTap("attn", probs, self.resolution)] if record_attention else None
        return DenoiserRun(eps, taps)

    def forward(self, z_t, t, context):
        return self.run(z_t, t, context).prediction


class IdentityCodec:
    """Latent == image (HxWx3 in [0,1] <-> 3xHxW)."""

    def encode(self, image) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))
        return x.permute(2, 0, 1).unsqueeze(0).contiguous()

    def decode(self, z) -> np.ndarray:
        return z[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)


@dataclass
class ToyConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    image_size: int = 64
    context_length: int = 24
    text_dim: int = 64
    width: int = 64
    heads: int = 2
    head_dim: int = 32
    blocks: int = 2
    embed_init_std: float = 0.02
    text_layers: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)


class ToyBackend(nn.Module):
    """Bundle of tokenizer, text encoder, denoiser, scheduler and codec."""

    def __init__(self, config: ToyConfig | None = None):
        super().__init__()
        self.config = config or ToyConfig()
        cfg = self.config
        torch.manual_seed(cfg.seed)
        self.tokenizer = ToyTokenizer(context_length=cfg.context_length)
        self.text_encoder = ToyTextEncoder(
            self.tokenizer.base_size,
            cfg.context_length,
            cfg.text_dim,
            init_std=cfg.embed_init_std,
            layers=cfg.text_layers,
            pad_id=self.tokenizer.pad_id,
        )
        self.denoiser = ToyDenoiser(
            cfg.T, cfg.image_size, 3, cfg.width, cfg.text_dim, heads=cfg.heads, head_dim=cfg.head_dim, blocks=cfg.blocks
        )
        self.scheduler = DDPMScheduler(cfg.T, cfg.beta_start, cfg.beta_end)
        self.codec = IdentityCodec()

    @property
    def T(self):
        return self.scheduler.T

    def tokenize(self, text):
        return self.tokenizer(text)

    def encode_text(self, texts) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        ids = self.tokenizer.batch(texts)
        return self.text_encoder(ids).to(self.dtype)

    def encode_ids(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        return self.text_encoder(ids)

    @property
    def dtype(self):
        return self.text_encoder.base_embedding.dtype

    def clone(self) -> "ToyBackend":
        return copy.deepcopy(self)

    def placeholder_parameters(self):
        return [self.text_encoder.placeholder_embedding]

    def full_parameters(self):
        return list(self.parameters())


def register_placeholders(backend: ToyBackend, registry) -> ToyBackend:
    """Add one trainable embedding row per placeholder, initialized to its class noun's embedding.

    A multi-word class noun initializes to the mean of its word rows. The
    backend is modified in place and returned.
    """
    names = [s.placeholder for s in registry]
    if len(set(names)) != len(names):
        raise InvalidArgumentError(f"duplicate placeholders in {names}")
    for name in names:
        if name in backend.tokenizer._index:
            raise InvalidArgumentError(f"placeholder {name!r} already registered")
    table = backend.text_encoder.base_embedding.detach()
    rows = []
    for s in registry:
        words = _WORD_RE.findall(s.class_noun)
        ids = [backend.tokenizer.token_id(w) for w in words]
        if not ids or backend.tokenizer.unk_id in ids:
            raise InvalidArgumentError(f"class noun {s.class_noun!r} is not in the base vocabulary")
        rows.append(table[ids].mean(dim=0))
    for name in names:
        backend.tokenizer.add_placeholder(name)
    backend.text_encoder.append_rows(torch.stack(rows))
    return backend
