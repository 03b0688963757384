"""Generative classifier: an invertible feature extractor feeding a
class-conditional Gaussian mixture in latent space.

Latent layout follows the pooling stage: the first D_mean coordinates are
the per-channel DC components, the remainder the higher DCT modes.  Class
means are free over the DC part; over the rest they are mixed from K
shared prototype rows, which keeps the head low-rank.  All mixture
components have unit variance and fixed log-priors (uniform unless
overridden).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from . import tensor as T

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    image_shape: tuple = (1, 16, 16)  # (C, H, W)
    n_classes: int = 4
    rank: int = 8
    hidden: int = 32
    clamp: float = 2.0
    couplings_per_stage: int = 2
    depth: int = 8  # coupling count for 1x1 toy inputs
    seed: int = 0

    def validate(self):
        c, h, w = self.image_shape
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.rank < 1 or self.hidden < 1 or self.couplings_per_stage < 1:
            raise ValueError("rank, hidden and couplings_per_stage must be positive")
        if not (self.clamp > 0):
            raise ValueError("clamp must be positive")
        if (h, w) != (1, 1) and (c, h, w) != (1, 16, 16):
            raise ValueError("supported inputs are Cx1x1 vectors or 1x16x16 images")
        if (h, w) == (1, 1) and c % 2:
            raise ValueError("1x1 inputs need an even channel count")


def _build_blocks(cfg, rng):
    c, h, w = cfg.image_shape
    out = []
    if (h, w) == (1, 1):
        for i in range(cfg.depth):
            out.append(B.CouplingBlock(c, cfg.hidden, 1, rng, "block%d" % i, cfg.clamp))
        out.append(B.DctPool(c, 1, 1))
        return out, (c, 1, 1)
    out.append(B.DownsamplingCouplingBlock(1, cfg.hidden, 7, rng, "entry", cfg.clamp))
    out.append(B.HaarTransform(4))
    for i in range(cfg.couplings_per_stage):
        out.append(B.CouplingBlock(16, cfg.hidden, 3, rng, "mid%d" % i, cfg.clamp))
    out.append(B.DownsamplingCouplingBlock(16, cfg.hidden, 3, rng, "down", cfg.clamp))
    for i in range(cfg.couplings_per_stage):
        out.append(B.CouplingBlock(64, cfg.hidden, 3, rng, "late%d" % i, cfg.clamp))
    out.append(B.DctPool(64, 2, 2))
    return out, (64, 2, 2)


class GmmHead:
    """Unit-variance mixture head with low-rank means over the non-DC part."""

    def __init__(self, n_classes, dim, d_mean, rank, rng):
        self.n_classes = n_classes
        self.dim = dim
        self.d_mean = d_mean
        self.d_rest = dim - d_mean
        self.rank = min(rank, self.d_rest) if self.d_rest else 0
        self.mu_mean = T.Tensor(rng.standard_normal((n_classes, d_mean)) * 0.1,
                                requires_grad=True)
        if self.d_rest:
            self.alpha = T.Tensor(rng.standard_normal((n_classes, self.rank)) * 0.1,
                                  requires_grad=True)
            self.protos = T.Tensor(rng.standard_normal((self.rank, self.d_rest)) * 0.1,
                                   requires_grad=True)
        else:
            self.alpha = None
            self.protos = None
        self.log_priors = np.full(n_classes, -math.log(n_classes))

    def means_t(self):
        """Assembled (M, dim) means on the tape."""
        if self.d_rest:
            rest = T.matmul(self.alpha, self.protos)
            return T.concat([self.mu_mean, rest], axis=1)
        return self.mu_mean

    def means(self):
        if self.d_rest:
            return np.concatenate([self.mu_mean.data,
                                   self.alpha.data @ self.protos.data], axis=1)
        return self.mu_mean.data.copy()

    def params(self):
        out = [("head.mu_mean", self.mu_mean)]
        if self.d_rest:
            out += [("head.alpha", self.alpha), ("head.protos", self.protos)]
        return out


@dataclass
class Prediction:
    labels: np.ndarray
    posterior: np.ndarray
    class_ll: np.ndarray
    marginal: np.ndarray
    z: np.ndarray
    logdet: np.ndarray


class GenerativeClassifier:
    def __init__(self, config: ModelConfig, blocks=None, feature_shape=None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        if blocks is None:
            self.blocks, self.feature_shape = _build_blocks(config, rng)
        else:
            self.blocks = blocks
            self.feature_shape = feature_shape
        c, h, w = self.feature_shape
        self.dim = c * h * w
        self.head = GmmHead(config.n_classes, self.dim, c, config.rank, rng)

    # ----------------------------------------------------------- flow passes

    def encode(self, x):
        """x -> (z, logdet), both on the tape when one is active."""
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        total = None
        for blk in self.blocks:
            h, ld = blk.forward(h)
            if ld is not None:
                total = ld if total is None else T.add(total, ld)
        if total is None:
            total = T.Tensor(np.zeros(h.shape[0]))
        return h, total

    def features_before_pool(self, x):
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        for blk in self.blocks[:-1]:
            h, _ = blk.forward(h)
        return h

    def decode(self, z):
        """Exact inverse of encode; numpy in, numpy out."""
        y = np.asarray(z, dtype=np.float64)
        for blk in reversed(self.blocks):
            y = blk.inverse(y)
        return y

    # ------------------------------------------------------------- gmm head

    def distances_t(self, z):
        """Squared distances to every class mean, (N, M) on the tape."""
        n, d = z.shape
        m = self.head.n_classes
        mu = self.head.means_t()
        diff = T.sub(T.reshape(z, (n, 1, d)), T.reshape(mu, (1, m, d)))
        return T.sum(T.square(diff), axis=2)

    def class_log_likelihoods(self, z, logdet):
        d2 = 0.5 * ((z[:, None, :] - self.head.means()[None]) ** 2).sum(axis=2)
        return -d2 - 0.5 * self.dim * LOG_2PI + logdet[:, None]

    def marginal_log_likelihood(self, z, logdet):
        cll = self.class_log_likelihoods(z, logdet)
        a = cll + self.head.log_priors[None, :]
        m = a.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]

    def posterior(self, z):
        d2 = ((z[:, None, :] - self.head.means()[None]) ** 2).sum(axis=2)
        a = -0.5 * d2 + self.head.log_priors[None, :]
        a -= a.max(axis=1, keepdims=True)
        e = np.exp(a)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x, batch=256):
        """Tape-free forward over a dataset, in bounded chunks."""
        x = np.asarray(x, dtype=np.float64)
        parts = []
        for lo in range(0, x.shape[0], batch):
            chunk = x[lo:lo + batch]
            z, logdet = self.encode(chunk)
            parts.append((z.data, logdet.data))
        z = np.concatenate([p[0] for p in parts])
        logdet = np.concatenate([p[1] for p in parts])
        post = self.posterior(z)
        return Prediction(
            labels=np.argmax(post, axis=1),
            posterior=post,
            class_ll=self.class_log_likelihoods(z, logdet),
            marginal=self.marginal_log_likelihood(z, logdet),
            z=z,
            logdet=logdet,
        )

    # ------------------------------------------------------------- plumbing

    def params(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.head.params())
        return out

    def buffers(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.buffers())
        out.append(("head.log_priors", self.head.log_priors))
        return out

    def decay_flags(self):
        """True for parameters that take weight decay: subnet conv weights
        only; biases, norm affines, global affines and head parameters
        are excluded."""
        flags = []
        for name, p in self.params():
            flags.append(name.endswith(".weight"))
        return flags
