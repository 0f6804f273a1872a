"""Independent scalar-loop reference implementations used to freeze expected values."""

import numpy as np
import torch

from multiperso.core import AttentionStack, PromptPair
from multiperso.losses import StepBatch


def md_oracle(eps, pred, mask):
    c, h, w = eps.shape
    num = 0.0
    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y][x]:
                for k in range(c):
                    d = float(eps[k][y][x]) - float(pred[k][y][x])
                    num += d * d
                    count += 1
    return num / max(1, count)


def subject_mean(maps, positions, y, x):
    return sum(float(maps[y][x][p]) for p in positions) / len(positions)


def m2a_oracle(maps, subset, positions, masks):
    m = len(maps)
    total = 0.0
    for i in subset:
        acc = 0.0
        for y in range(m):
            for x in range(m):
                d = subject_mean(maps, positions[i], y, x) - float(masks[i][y][x])
                acc += d * d
        total += acc / (m * m)
    return total


def ica_oracle(maps_ph, maps_cls, subset, pos_ph, pos_cls, masks):
    m = len(maps_ph)
    total = 0.0
    for i in subset:
        gated = [[float(masks[i][y][x]) * subject_mean(maps_cls, pos_cls[i], y, x) for x in range(m)] for y in range(m)]
        peak = max(max(row) for row in gated)
        acc = 0.0
        for y in range(m):
            for x in range(m):
                target = gated[y][x] / peak if peak > 0 else 0.0
                d = subject_mean(maps_ph, pos_ph[i], y, x) - target
                acc += d * d
        total += acc / (m * m)
    return total


def random_softmax_maps(rng, m, n, dtype=torch.float64, temperature=1.0):
    logits = torch.as_tensor(rng.normal(size=(m, m, n)) / temperature, dtype=dtype)
    return torch.softmax(logits, dim=-1)


def random_instance(rng, n_subjects=None, m=None, n_tokens=None, channels=3):
    """A StepBatch built from random tensors plus the raw ingredients the oracles need."""
    n_subjects = n_subjects or int(rng.integers(1, 4))
    m = m or int(rng.choice([2, 4, 8, 16]))
    n_tokens = n_tokens or int(rng.integers(2 * n_subjects + 1, 2 * n_subjects + 6))
    code = int(rng.integers(1, 2**n_subjects))
    subset = tuple(i + 1 for i in range(n_subjects) if code >> i & 1)
    free = list(rng.permutation(np.arange(1, n_tokens)))
    pos_ph, pos_cls = {}, {}
    for i in range(1, n_subjects + 1):
        pos_ph[i] = (int(free.pop()),)
        k = int(rng.integers(1, 3))
        pos_cls[i] = tuple(sorted(int(p) for p in rng.choice(np.arange(1, n_tokens), size=k, replace=False)))
    masks = {i: (rng.random((m, m)) < rng.uniform(0.1, 0.7)).astype(np.uint8) for i in range(1, n_subjects + 1)}
    union = np.zeros((m, m), dtype=np.uint8)
    for i in subset:
        union |= masks[i]
    eps = torch.as_tensor(rng.normal(size=(1, channels, m, m)))
    pred = torch.as_tensor(rng.normal(size=(1, channels, m, m)))
    z_t = torch.as_tensor(rng.normal(size=(1, channels, m, m)))
    maps_ph = random_softmax_maps(rng, m, n_tokens)
    maps_cls = random_softmax_maps(rng, m, n_tokens)
    pair = PromptPair(
        "placeholder prompt",
        "class prompt",
        list(range(n_tokens)),
        list(range(n_tokens)),
        {i: (pos_ph[i], pos_cls[i]) for i in pos_ph},
    )
    batch = StepBatch(
        z_t,
        int(rng.integers(1, 100)),
        eps,
        pred,
        subset,
        pair,
        union,
        {i: masks[i] for i in subset},
        {"placeholder": AttentionStack(maps_ph, 0), "class": AttentionStack(maps_cls, 0, frozen=True)},
    )
    raw = dict(
        eps=eps[0].numpy(),
        pred=pred[0].numpy(),
        union=union,
        masks=masks,
        subset=subset,
        pos_ph=pos_ph,
        pos_cls=pos_cls,
        maps_ph=maps_ph.numpy(),
        maps_cls=maps_cls.numpy(),
    )
    return batch, raw
