"""Information-bottleneck training objective.

Both terms are driven by the squared distances between latents and class
means.  The generative term trades log-volume against a logsumexp of those
distances; the discriminative term is cross-entropy over the mixture
posterior.  ``beta`` weighs the two: 0 drops the class term entirely,
infinity keeps only it.
"""

import math

import numpy as np

from . import tensor as T

LN2 = math.log(2.0)


def loss_x(logdet, d2, log_priors):
    """Per-sample generative term: -logdet + 0.5 * lse_y(d2_y - 2 w_y)."""
    arg = T.sub(d2, T.Tensor(2.0 * log_priors))
    return T.add(T.neg(logdet), T.scale(T.logsumexp(arg, axis=1), 0.5))


def loss_y(d2, log_priors, target_probs):
    """Per-sample cross-entropy of the mixture posterior against
    (possibly smoothed) target label distributions."""
    probs = np.asarray(target_probs, dtype=np.float64)
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-8):
        raise ValueError("targets must be probability distributions over classes")
    logits = T.add(T.scale(d2, -0.5), T.Tensor(log_priors))
    ls = T.logsoftmax(logits, axis=1)
    return T.neg(T.sum(T.mul(ls, T.Tensor(probs)), axis=1))


def ib_objective(lx, ly, beta):
    """Combined per-sample objective; beta=0 is lx alone, beta=inf ly alone."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0.0:
        return lx
    if math.isinf(beta):
        return ly
    return T.add(lx, T.scale(ly, beta))


def smooth_labels(labels, n_classes, alpha=0.05):
    """(1 - alpha) * onehot + alpha / M."""
    labels = np.asarray(labels)
    out = np.full((labels.shape[0], n_classes), alpha / n_classes)
    out[np.arange(labels.shape[0]), labels] += 1.0 - alpha
    return out


def dequantize(x, amplitude, rng):
    """Add uniform noise from [0, amplitude)."""
    if amplitude == 0.0:
        return np.array(x, dtype=np.float64, copy=True)
    return x + rng.uniform(0.0, amplitude, size=x.shape)


def bits_per_dim(marginal_ll, dim, quantized=False):
    """Negative marginal log-likelihood in bits per input dimension.

    The continuous convention is -ll / (dim * ln 2); the quantized
    convention adds the 8 bits that 1/256-level dequantization shifts
    the density by.
    """
    bpd = -np.asarray(marginal_ll, dtype=np.float64) / (dim * LN2)
    return bpd + 8.0 if quantized else bpd
