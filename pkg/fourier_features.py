# fourier_features.py
#
# Random Fourier features cos(W x + b) for the Gaussian kernel, with a
# running input normalization (EMA of mean and mean-square).
# W and b are regenerated from the seed; only the running stats are
# state worth saving.
#
#----------------------------------------------------------------------

import json
import logging
import math

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

STATS_DECAY = 0.99
NORM_EPS = 1e-6


class FourierFeaturizer(nn.Module):
    """cos(W normalize(x) + b) with W ~ N(0, 1)^{d x k}, b ~ U[0, 2pi)^d."""

    def __init__(self, k, d, seed, decay=STATS_DECAY):
        super().__init__()
        if k < 1 or d < 1:
            raise ValueError(f"k and d must be >= 1, got k={k}, d={d}")
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.k = int(k)
        self.d = int(d)
        self.seed = int(seed)
        self.decay = float(decay)

        gen = torch.Generator()
        gen.manual_seed(self.seed)
        self.register_buffer("w", torch.randn(self.d, self.k, generator=gen, dtype=torch.float64))
        self.register_buffer("b", torch.rand(self.d, generator=gen, dtype=torch.float64) * 2 * math.pi)
        self.register_buffer("f_avg", torch.zeros(self.k, dtype=torch.float64))
        self.register_buffer("f_sq", torch.ones(self.k, dtype=torch.float64))

    def _as_input(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.shape[-1] != self.k:
            raise ValueError(f"expected inputs of dim {self.k}, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to the Fourier featurizer")
        return x

    def normalize(self, x):
        var = torch.clamp(self.f_sq - self.f_avg ** 2, min=NORM_EPS ** 2)
        return (x - self.f_avg) / torch.sqrt(var)

    def forward(self, x):
        x = self._as_input(x)
        return torch.cos(self.normalize(x) @ self.w.T + self.b)

    def map(self, x):
        return self.forward(x)

    def raw_map(self, x):
        """cos(W x + b) with the normalization held at identity."""
        x = self._as_input(x)
        return torch.cos(x @ self.w.T + self.b)

    @torch.no_grad()
    def update_stats(self, batch):
        batch = self._as_input(batch).reshape(-1, self.k)
        if batch.shape[0] == 0:
            raise ValueError("update_stats needs a non-empty batch")
        self.f_avg.mul_(self.decay).add_(batch.mean(dim=0), alpha=1.0 - self.decay)
        self.f_sq.mul_(self.decay).add_((batch ** 2).mean(dim=0), alpha=1.0 - self.decay)

    @torch.no_grad()
    def kernel_estimate(self, x, y):
        """(2/d) phi(x).phi(y), an estimate of exp(-|x - y|^2 / 2)."""
        fx = self.raw_map(x)
        fy = self.raw_map(y)
        return float(2.0 / self.d * torch.dot(fx, fy))

    def to_dict(self):
        return {
            "k": self.k,
            "d": self.d,
            "seed": self.seed,
            "decay": self.decay,
            "f_avg": self.f_avg.tolist(),
            "f_sq": self.f_sq.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        feat = cls(doc["k"], doc["d"], doc["seed"], decay=doc.get("decay", STATS_DECAY))
        with torch.no_grad():
            feat.f_avg.copy_(torch.tensor(doc["f_avg"], dtype=torch.float64))
            feat.f_sq.copy_(torch.tensor(doc["f_sq"], dtype=torch.float64))
        return feat

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def new_featurizer(k, d, seed, decay=STATS_DECAY):
    return FourierFeaturizer(k, d, seed, decay=decay)


def kernel_error(feat, pairs):
    """Max |estimate - exp(-|x-y|^2/2)| over (x, y) pairs."""
    worst = 0.0
    for x, y in pairs:
        exact = math.exp(-0.5 * float(np.sum((np.asarray(x) - np.asarray(y)) ** 2)))
        worst = max(worst, abs(feat.kernel_estimate(x, y) - exact))
    return worst


def random_pairs(rng, k, n_pairs, max_dist=4.0):
    """Pairs with |x - y| <= max_dist, distance uniform in [0, max_dist]."""
    pairs = []
    for _ in range(n_pairs):
        x = rng.normal(size=k)
        direction = rng.normal(size=k)
        direction /= np.linalg.norm(direction)
        y = x + rng.uniform(0.0, max_dist) * direction
        pairs.append((x, y))
    return pairs
