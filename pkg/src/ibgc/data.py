"""Synthetic datasets and the binary dataset container.

``synth_bars`` draws one oriented Gaussian bar per image; the class sets
the angle (class y at y * pi / M), the position jitters uniformly and
pixel noise is Gaussian.  Values are clipped to [0, 1].  The
out-of-distribution variants derive from the same images or pure noise.

File format (little-endian): magic "IBDS1", u32 N, C, H, W, M, then
N*C*H*W f64 pixels row-major, then N u16 labels.
"""

import numpy as np

from .errors import DataError

MAGIC = b"IBDS1"

BAR_LENGTH = 4.0   # gaussian sigma along the bar
BAR_WIDTH = 1.2    # gaussian sigma across the bar
BAR_PEAK = 0.9
JITTER = 2.0
NOISE_SIGMA = 0.05


def synth_bars(n, n_classes, seed, shape=(1, 16, 16)):
    """Oriented-bar images; returns (x, labels) with balanced labels."""
    if not 1 <= n_classes <= 8:
        raise DataError("synth_bars supports 1..8 classes")
    c, h, w = shape
    if c != 1:
        raise DataError("bars are single-channel")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    labels = (np.arange(n) % n_classes).astype(np.uint16)
    rng.shuffle(labels)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    x = np.empty((n, c, h, w))
    for i in range(n):
        angle = labels[i] * np.pi / n_classes
        cy = (h - 1) / 2.0 + rng.uniform(-JITTER, JITTER)
        cx = (w - 1) / 2.0 + rng.uniform(-JITTER, JITTER)
        dy, dx = ys - cy, xs - cx
        par = np.cos(angle) * dx + np.sin(angle) * dy
        perp = -np.sin(angle) * dx + np.cos(angle) * dy
        img = BAR_PEAK * np.exp(-0.5 * ((par / BAR_LENGTH) ** 2 + (perp / BAR_WIDTH) ** 2))
        img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
        x[i, 0] = img
    return np.clip(x, 0.0, 1.0), labels


def synth_ood(kind, n=None, shape=(1, 16, 16), seed=0, reference=None):
    """Out-of-distribution samples: 'uniform_noise' draws iid U[0,1];
    'inverted' and 'shuffled_pixels' transform the reference images."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    if kind == "uniform_noise":
        if n is None:
            raise DataError("uniform_noise needs a sample count")
        return rng.uniform(0.0, 1.0, size=(n,) + tuple(shape))
    if reference is None:
        raise DataError("'%s' needs reference images" % kind)
    if kind == "inverted":
        return 1.0 - reference
    if kind == "shuffled_pixels":
        out = np.empty_like(reference)
        flat = reference.reshape(reference.shape[0], -1)
        for i in range(flat.shape[0]):
            out.reshape(out.shape[0], -1)[i] = flat[i][rng.permutation(flat.shape[1])]
        return out
    raise DataError("unknown ood kind: %s" % kind)


def write_dataset(path, x, labels, n_classes):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.uint16)
    if x.ndim != 4 or x.shape[0] != labels.shape[0]:
        raise DataError("dataset arrays are inconsistent")
    if labels.size and int(labels.max()) >= n_classes:
        raise DataError("label out of range")
    n, c, h, w = x.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([n, c, h, w, n_classes], dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(x).astype("<f8").tobytes())
        f.write(labels.astype("<u2").tobytes())


def read_dataset(path):
    """Returns (x, labels, n_classes); raises DataError on any mismatch."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError("cannot read dataset: %s" % e) from e
    if len(raw) < 25 or raw[:5] != MAGIC:
        raise DataError("not a dataset file (bad magic)")
    n, c, h, w, m = np.frombuffer(raw[5:25], dtype="<u4")
    need = 25 + n * c * h * w * 8 + n * 2
    if len(raw) != need:
        raise DataError("dataset file truncated or padded: %d bytes, expected %d"
                        % (len(raw), need))
    x = np.frombuffer(raw[25:25 + n * c * h * w * 8], dtype="<f8")
    x = x.reshape(n, c, h, w).copy()
    labels = np.frombuffer(raw[25 + n * c * h * w * 8:], dtype="<u2").copy()
    if not np.all(np.isfinite(x)):
        raise DataError("dataset contains non-finite pixels")
    if labels.size and int(labels.max()) >= m:
        raise DataError("label out of range for %d classes" % m)
    return x, labels, int(m)
