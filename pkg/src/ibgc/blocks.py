"""Invertible transform blocks.

Every block maps NCHW tensors forward on the tape and exposes an exact
numpy inverse; ``forward`` returns ``(y, logdet)`` where logdet is the
per-sample log |det J| contribution, or None for volume-preserving
reorderings.  Couplings follow the affine form v2 = s(u1) * u2 + t(u1)
with s = exp(alpha * tanh(.)), so log s is bounded by the clamp alpha.
After the coupling each block applies a global per-channel affine
(scale s0 * softplus(gamma), s0 fixed at 0.1, gamma starting at 10) and
a frozen random orthogonal channel mix.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T

S0_GLOBAL = 0.1


def sample_orthogonal(n, rng):
    """Orthogonal matrix from the O(n) Haar distribution.

    QR of a standard normal matrix, with the R diagonal sign fixed so the
    distribution is exactly Haar rather than QR-convention dependent.
    """
    if n == 1:
        return np.array([[1.0 if rng.standard_normal() >= 0 else -1.0]])
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs[None, :]


def dct_matrix(n):
    """Orthonormal DCT-II basis; row 0 is the constant (DC) vector."""
    k = np.arange(n)[:, None].astype(np.float64)
    m = 2.0 * np.arange(n)[None, :] + 1.0
    c = np.cos(np.pi * k * m / (2.0 * n)) * math.sqrt(2.0 / n)
    c[0] /= math.sqrt(2.0)
    return c


# 2x2 patch basis in row-major patch order (a, b; c, d):
# rows give (LL, LH, HL, HH), each with unit norm.
HAAR4 = 0.5 * np.array([
    [1.0, 1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
])


def _checkerboard_t(x):
    """(N, C, H, W) -> (N, 4C, H/2, W/2); channel c*4+2*di+dj holds phase (di, dj)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("checkerboard needs even spatial dims")
    y = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (n, 4 * c, h // 2, w // 2))


def _checkerboard_np(x):
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y).reshape(n, 4 * c, h // 2, w // 2)


def _checkerboard_inv_np(y):
    n, c4, h2, w2 = y.shape
    c = c4 // 4
    x = y.reshape(n, c, 2, 2, h2, w2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x).reshape(n, c, 2 * h2, 2 * w2)


class Checkerboard:
    """Invertible space-to-channel reordering of 2x2 patches."""

    def __init__(self, channels):
        self.channels = channels

    def forward(self, x):
        return _checkerboard_t(x), None

    def inverse(self, y):
        return _checkerboard_inv_np(y)

    def params(self):
        return []

    def buffers(self):
        return []


class HaarTransform:
    """Orthonormal 2x2 Haar analysis; each input channel yields LL, LH, HL, HH."""

    def __init__(self, channels):
        self.channels = channels

    def _mix(self, d, mat):
        n, c4, h2, w2 = d.shape
        c = c4 // 4
        y = T.reshape(d, (n, c, 4, h2, w2))
        y = T.transpose(y, (0, 1, 3, 4, 2))
        y = T.reshape(y, (n * c * h2 * w2, 4))
        y = T.matmul(y, T.Tensor(mat.T))
        y = T.reshape(y, (n, c, h2, w2, 4))
        y = T.transpose(y, (0, 1, 4, 2, 3))
        return T.reshape(y, (n, c4, h2, w2))

    def forward(self, x):
        return self._mix(_checkerboard_t(x), HAAR4), None

    def inverse(self, y):
        n, c4, h2, w2 = y.shape
        c = c4 // 4
        d = y.reshape(n, c, 4, h2, w2).transpose(0, 1, 3, 4, 2)
        d = np.ascontiguousarray(d).reshape(-1, 4) @ HAAR4  # H^-1 = H^T applied to rows
        d = d.reshape(n, c, h2, w2, 4).transpose(0, 1, 4, 2, 3)
        return _checkerboard_inv_np(np.ascontiguousarray(d).reshape(n, c4, h2, w2))

    def params(self):
        return []

    def buffers(self):
        return []


class ChannelAffine:
    """Per-channel scale and shift; the batch-norm slot with running
    statistics pinned to identity, so it is a plain learned affine."""

    def __init__(self, channels, prefix):
        self.scale = T.Tensor(np.ones(channels), requires_grad=True)
        self.shift = T.Tensor(np.zeros(channels), requires_grad=True)
        self.prefix = prefix

    def forward(self, x):
        c = self.scale.shape[0]
        s = T.reshape(self.scale, (1, c, 1, 1))
        b = T.reshape(self.shift, (1, c, 1, 1))
        return T.add(T.mul(x, s), b)

    def params(self):
        return [(self.prefix + ".scale", self.scale), (self.prefix + ".shift", self.shift)]


class Conv:
    def __init__(self, cin, cout, kernel, rng, prefix, stride=1, zero_init=False):
        if zero_init:
            w = np.zeros((cout, cin, kernel, kernel))
        else:
            std = math.sqrt(2.0 / (cin * kernel * kernel))
            w = rng.standard_normal((cout, cin, kernel, kernel)) * std
        self.weight = T.Tensor(w, requires_grad=True)
        self.bias = T.Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2
        self.prefix = prefix

    def forward(self, x):
        y = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return T.add(y, T.reshape(self.bias, (1, self.bias.shape[0], 1, 1)))

    def params(self):
        return [(self.prefix + ".weight", self.weight), (self.prefix + ".bias", self.bias)]


class Subnet:
    """Coefficient network of a coupling: a pre-activation bottleneck of
    1x1 / kxk / 1x1 convolutions plus a zero-initialised output projection,
    so freshly built couplings are exact identities."""

    def __init__(self, cin, cout, hidden, kernel, rng, prefix, mid_stride=1):
        self.layers = []
        widths = [(cin, hidden, 1, 1), (hidden, hidden, kernel, mid_stride),
                  (hidden, 4 * hidden, 1, 1)]
        for i, (a, b, k, s) in enumerate(widths):
            self.layers.append(ChannelAffine(a, "%s.norm%d" % (prefix, i)))
            self.layers.append(Conv(a, b, k, rng, "%s.conv%d" % (prefix, i), stride=s))
        self.layers.append(ChannelAffine(4 * hidden, "%s.norm3" % prefix))
        self.layers.append(Conv(4 * hidden, cout, 1, rng, "%s.conv3" % prefix, zero_init=True))

    def forward(self, x):
        h = x
        for layer in self.layers:
            if isinstance(layer, ChannelAffine):
                h = T.relu(layer.forward(h))
            else:
                h = layer.forward(h)
        return h

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


def _mix_channels_t(y, q):
    n, c, h, w = y.shape
    r = T.transpose(y, (0, 2, 3, 1))
    r = T.reshape(r, (n * h * w, c))
    r = T.matmul(r, T.Tensor(q.T))
    r = T.reshape(r, (n, h, w, c))
    return T.transpose(r, (0, 3, 1, 2))


def _mix_channels_inv_np(y, q):
    n, c, h, w = y.shape
    r = y.transpose(0, 2, 3, 1).reshape(-1, c) @ q
    return np.ascontiguousarray(r.reshape(n, h, w, c).transpose(0, 3, 1, 2))


class _CouplingCore:
    """State and helpers shared by the plain and downsampling couplings."""

    def __init__(self, out_channels, rng, prefix, clamp):
        self.clamp = float(clamp)
        self.gamma = T.Tensor(np.full(out_channels, 10.0), requires_grad=True)
        self.t_global = T.Tensor(np.zeros(out_channels), requires_grad=True)
        self.q = sample_orthogonal(out_channels, rng)
        self.prefix = prefix

    def affine_fwd(self, u2, st, c2):
        raw = T.narrow(st, 1, 0, c2)
        t = T.narrow(st, 1, c2, c2)
        logs = T.scale(T.tanh(raw), self.clamp)
        v2 = T.add(T.mul(T.exp(logs), u2), t)
        return v2, T.sum(logs, axis=(1, 2, 3))

    def affine_inv(self, v2, st_data, c2):
        logs = self.clamp * np.tanh(st_data[:, :c2])
        t = st_data[:, c2:]
        return (v2 - t) * np.exp(-logs)

    def global_and_mix_fwd(self, y):
        c = self.gamma.shape[0]
        hw = float(y.shape[2] * y.shape[3])
        log_sg = T.add(T.log_softplus(self.gamma), T.Tensor(math.log(S0_GLOBAL)))
        sg = T.exp(T.reshape(log_sg, (1, c, 1, 1)))
        tg = T.reshape(self.t_global, (1, c, 1, 1))
        y = T.add(T.mul(y, sg), tg)
        logdet = T.scale(T.sum(log_sg), hw)
        return _mix_channels_t(y, self.q), logdet

    def global_and_mix_inv(self, y):
        y = _mix_channels_inv_np(y, self.q)
        sg = S0_GLOBAL * np.logaddexp(0.0, self.gamma.data)
        return (y - self.t_global.data[None, :, None, None]) / sg[None, :, None, None]

    def core_params(self):
        return [(self.prefix + ".gamma", self.gamma),
                (self.prefix + ".t_global", self.t_global)]

    def buffers(self):
        return [(self.prefix + ".mix_q", self.q)]


class CouplingBlock(_CouplingCore):
    """Affine coupling over an even channel split, followed by the global
    affine and a fixed orthogonal channel mix."""

    def __init__(self, channels, hidden, kernel, rng, prefix, clamp=2.0):
        if channels % 2:
            raise ValueError("coupling needs an even channel count")
        super().__init__(channels, rng, prefix, clamp)
        self.channels = channels
        self.c1 = channels // 2
        self.subnet = Subnet(self.c1, 2 * (channels - self.c1), hidden, kernel,
                             rng, prefix + ".subnet")

    def forward(self, x):
        c1, c2 = self.c1, self.channels - self.c1
        u1 = T.narrow(x, 1, 0, c1)
        u2 = T.narrow(x, 1, c1, c2)
        v2, logdet = self.affine_fwd(u2, self.subnet.forward(u1), c2)
        y = T.concat([u1, v2], axis=1)
        y, logdet_g = self.global_and_mix_fwd(y)
        return y, T.add(logdet, logdet_g)

    def inverse(self, y):
        c1, c2 = self.c1, self.channels - self.c1
        y = self.global_and_mix_inv(y)
        u1 = y[:, :c1]
        st = self.subnet.forward(T.Tensor(u1)).data
        u2 = self.affine_inv(y[:, c1:], st, c2)
        return np.concatenate([u1, u2], axis=1)

    def params(self):
        return self.subnet.params() + self.core_params()


class DownsamplingCouplingBlock(_CouplingCore):
    """Coupling with the checkerboard reordering nested inside: spatial dims
    halve and channels quadruple in one invertible step.

    For two or more input channels both halves of the split pass through
    the reordering and the subnet sees u1 at full resolution through a
    strided convolution.  A single-channel input cannot be split down the
    channel axis, so there the reordering runs first and the coupling
    conditions two of the four phase channels on the other two, with the
    subnet at the reduced resolution and no stride.
    """

    def __init__(self, channels, hidden, kernel, rng, prefix, clamp=2.0):
        if channels != 1 and channels % 2:
            raise ValueError("downsampling coupling needs 1 or an even channel count")
        super().__init__(4 * channels, rng, prefix, clamp)
        self.channels = channels
        if channels == 1:
            self.c1, self.c2 = 2, 2
            self.subnet = Subnet(2, 4, hidden, kernel, rng, prefix + ".subnet")
        else:
            self.c1 = channels // 2
            self.c2 = channels - self.c1
            self.subnet = Subnet(self.c1, 8 * self.c2, hidden, kernel, rng,
                                 prefix + ".subnet", mid_stride=2)

    def forward(self, x):
        if self.channels == 1:
            d = _checkerboard_t(x)
            u1 = T.narrow(d, 1, 0, 2)
            u2 = T.narrow(d, 1, 2, 2)
            v2, logdet = self.affine_fwd(u2, self.subnet.forward(u1), 2)
            y = T.concat([u1, v2], axis=1)
        else:
            u1 = T.narrow(x, 1, 0, self.c1)
            u2 = T.narrow(x, 1, self.c1, self.c2)
            st = self.subnet.forward(u1)
            d1 = _checkerboard_t(u1)
            d2 = _checkerboard_t(u2)
            v2, logdet = self.affine_fwd(d2, st, 4 * self.c2)
            y = T.concat([d1, v2], axis=1)
        y, logdet_g = self.global_and_mix_fwd(y)
        return y, T.add(logdet, logdet_g)

    def inverse(self, y):
        y = self.global_and_mix_inv(y)
        if self.channels == 1:
            u1 = y[:, :2]
            st = self.subnet.forward(T.Tensor(u1)).data
            u2 = self.affine_inv(y[:, 2:], st, 2)
            return _checkerboard_inv_np(np.concatenate([u1, u2], axis=1))
        d1 = y[:, :4 * self.c1]
        u1 = _checkerboard_inv_np(d1)
        st = self.subnet.forward(T.Tensor(u1)).data
        d2 = self.affine_inv(y[:, 4 * self.c1:], st, 4 * self.c2)
        return np.concatenate([u1, _checkerboard_inv_np(d2)], axis=1)

    def params(self):
        return self.subnet.params() + self.core_params()


class DctPool:
    """Orthonormal per-channel 2d DCT, flattened with every channel's DC
    coefficient first.

    Output layout for maps of C channels at HxW: positions [0, C) hold the
    DC coefficients (channel order), followed by each channel's remaining
    H*W-1 coefficients in row-major (u, v) order.  The DC coefficient
    equals sqrt(H*W) times the channel mean.
    """

    def __init__(self, channels, h, w):
        self.channels, self.h, self.w = channels, h, w
        self.k = np.kron(dct_matrix(h), dct_matrix(w))
        self.dim = channels * h * w

    def forward(self, x):
        n, c, h, w = x.shape
        hw = h * w
        y = T.reshape(x, (n * c, hw))
        y = T.matmul(y, T.Tensor(self.k.T))
        y = T.reshape(y, (n, c, hw))
        if hw == 1:
            return T.reshape(y, (n, c)), None
        dc = T.reshape(T.narrow(y, 2, 0, 1), (n, c))
        rest = T.reshape(T.narrow(y, 2, 1, hw - 1), (n, c * (hw - 1)))
        return T.concat([dc, rest], axis=1), None

    def inverse(self, z):
        n = z.shape[0]
        c, hw = self.channels, self.h * self.w
        y = np.empty((n, c, hw))
        y[:, :, 0] = z[:, :c]
        if hw > 1:
            y[:, :, 1:] = z[:, c:].reshape(n, c, hw - 1)
        x = y.reshape(n * c, hw) @ self.k
        return np.ascontiguousarray(x.reshape(n, c, self.h, self.w))

    def params(self):
        return []

    def buffers(self):
        return []
