"""Network building blocks on top of the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Module",
    "Dense",
    "MLP",
    "ConvEncoder",
    "ConvDecoder",
    "LinearEncoder",
    "LinearDecoder",
    "LowRankTransition",
    "DenseTransition",
    "fourier_encode",
    "angular_embed",
    "angular_unembed",
    "assemble_G2",
]

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "softplus": ad.softplus, None: lambda x: x}


class Module:
    """Container whose parameters are named :class:`Tensor` leaves.

    Sub-modules are discovered through ``self._children``; parameter names
    are dotted paths.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name, value) -> Tensor:
        t = ad.parameter(value, name=name)
        self._params[name] = t
        return t

    def add_child(self, name, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.parameters(prefix + cname + "."))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    def __init__(self, n_in, n_out, rng, activation=None, scale=1.0, rowwise=False):
        super().__init__()
        self.W = self.add_param("W", scale * _uniform(rng, (n_in, n_out), n_in))
        self.b = self.add_param("b", np.zeros(n_out))
        self.act = ACTIVATIONS[activation]
        self.rowwise = rowwise

    def __call__(self, x):
        y = ad.rowwise_matmul(x, self.W) if self.rowwise else x @ self.W
        return self.act(y + self.b)


class MLP(Module):
    """Fully connected network; hidden layers share ``activation``, output is linear.

    ``rowwise=True`` makes each input row's output bit-identical regardless
    of the batch it is evaluated in (see :func:`~.autodiff.rowwise_matmul`).
    """

    def __init__(self, sizes, rng, activation="tanh", out_scale=1.0, rowwise=False):
        super().__init__()
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layer = Dense(a, b, rng, None if last else activation, out_scale if last else 1.0, rowwise)
            self.layers.append(self.add_child(f"l{i}", layer))

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class _ConvLayer(Module):
    def __init__(self, cin, cout, rng, stride, transpose=False, activation="relu", k=3):
        super().__init__()
        # transposed layers keep the (kh, kw, c_big, c_small) layout of the conv they undo
        shape = (k, k, cout, cin) if transpose else (k, k, cin, cout)
        self.K = self.add_param("K", _uniform(rng, shape, k * k * cin))
        self.b = self.add_param("b", np.zeros(cout))
        self.stride = stride
        self.transpose = transpose
        self.act = ACTIVATIONS[activation]

    def __call__(self, x):
        if self.transpose:
            y = ad.circular_conv_transpose2d(x, self.K, self.stride)
        else:
            y = ad.circular_conv2d(x, self.K, self.stride)
        return self.act(y + self.b)


class ConvEncoder(Module):
    """Circular CNN ``(B, n, n, c_in) -> (B, n/2^L, n/2^L, n_c)``.

    Each down block is a stride-1 and a stride-2 circular 3x3 convolution;
    a final linear 3x3 convolution sets the latent channel count.
    """

    def __init__(self, c_in, n_c, channels, rng):
        super().__init__()
        self.blocks = []
        c = c_in
        for i, ch in enumerate(channels):
            self.blocks.append(self.add_child(f"b{i}a", _ConvLayer(c, ch, rng, 1)))
            self.blocks.append(self.add_child(f"b{i}b", _ConvLayer(ch, ch, rng, 2)))
            c = ch
        self.blocks.append(self.add_child("out", _ConvLayer(c, n_c, rng, 1, activation=None)))

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class ConvDecoder(Module):
    """Mirror of :class:`ConvEncoder` with circular transposed convolutions."""

    def __init__(self, n_c, c_out, channels, rng):
        super().__init__()
        self.blocks = []
        chans = list(channels)[::-1]
        c = n_c
        self.blocks.append(self.add_child("in", _ConvLayer(c, chans[0], rng, 1)))
        c = chans[0]
        for i, ch in enumerate(chans):
            nxt = chans[i + 1] if i + 1 < len(chans) else ch
            self.blocks.append(self.add_child(f"b{i}a", _ConvLayer(c, ch, rng, 2, transpose=True)))
            self.blocks.append(self.add_child(f"b{i}b", _ConvLayer(ch, nxt, rng, 1)))
            c = nxt
        self.blocks.append(self.add_child("out", _ConvLayer(c, c_out, rng, 1, activation=None)))

    def __call__(self, z):
        for b in self.blocks:
            z = b(z)
        return z


class LinearEncoder(Module):
    """Affine map from the flattened field to the flattened latent grid."""

    def __init__(self, d_in, latent_shape, rng):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.map = self.add_child("map", Dense(d_in, int(np.prod(latent_shape)), rng))

    def __call__(self, x):
        b = x.shape[0]
        return self.map(x.reshape(b, -1)).reshape((b,) + self.latent_shape)


class LinearDecoder(Module):
    def __init__(self, latent_shape, out_shape, rng):
        super().__init__()
        self.out_shape = tuple(out_shape)
        self.map = self.add_child("map", Dense(int(np.prod(latent_shape)), int(np.prod(out_shape)), rng))

    def __call__(self, z):
        b = z.shape[0]
        return self.map(z.reshape(b, -1)).reshape((b,) + self.out_shape)


# -- positional features ----------------------------------------------------
def _lib(x):
    return ad if isinstance(x, Tensor) else np


def fourier_encode(pos, K: int):
    """``[x, y, {sin 2^k pi x, cos 2^k pi x, sin 2^k pi y, cos 2^k pi y}_k]``.

    ``pos`` has trailing axis of size 2; output trailing size is ``2 + 4K``.
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    lib = _lib(pos)
    x = pos[..., 0:1]
    y = pos[..., 1:2]
    feats = [x, y]
    for k in range(K):
        w = (2.0**k) * np.pi
        feats += [lib.sin(x * w), lib.cos(x * w), lib.sin(y * w), lib.cos(y * w)]
    return ad.concat(feats, axis=-1) if lib is ad else np.concatenate(feats, axis=-1)


def angular_embed(pos):
    """``(x, y) -> (cos x, sin x, cos y, sin y)`` along the trailing axis."""
    lib = _lib(pos)
    x = pos[..., 0:1]
    y = pos[..., 1:2]
    feats = [lib.cos(x), lib.sin(x), lib.cos(y), lib.sin(y)]
    return ad.concat(feats, axis=-1) if lib is ad else np.concatenate(feats, axis=-1)


def angular_unembed(emb, tol: float = 1e-3) -> np.ndarray:
    """Inverse of :func:`angular_embed` into ``[0, 2pi)``; pairs must be near the unit circle."""
    emb = np.asarray(emb.value if isinstance(emb, Tensor) else emb, float)
    cx, sx, cy, sy = (emb[..., i] for i in range(4))
    dev = np.maximum(np.abs(np.hypot(cx, sx) - 1.0), np.abs(np.hypot(cy, sy) - 1.0))
    if np.any(dev > tol):
        raise ValueError(f"angular pair off the unit circle by {dev.max():.3g}")
    two_pi = 2 * np.pi
    out = np.mod(np.stack([np.arctan2(sx, cx), np.arctan2(sy, cy)], axis=-1), two_pi)
    return np.where(out >= two_pi, 0.0, out)


def renormalize_angular(emb: np.ndarray) -> np.ndarray:
    """Project each (cos, sin) pair of an embedding onto the unit circle."""
    e = np.array(emb, float)
    for a in (0, 2):
        nrm = np.hypot(e[..., a], e[..., a + 1])
        nrm = np.where(nrm > 0, nrm, 1.0)
        e[..., a] /= nrm
        e[..., a + 1] /= nrm
    return e


# -- latent transition ------------------------------------------------------
def _softplus_inv(y):
    return np.log(np.expm1(y))


class LowRankTransition(Module):
    """``G2 = U diag(s) V^T + diag(delta)`` with QR-orthonormalised ``U, V``."""

    def __init__(self, d_z, r, rng, s0=0.9, delta0=0.01):
        super().__init__()
        if not 1 <= r <= d_z:
            raise ValueError("rank must satisfy 1 <= r <= d_z")
        self.d_z, self.r = d_z, r
        self.U_raw = self.add_param("U_raw", rng.standard_normal((d_z, r)))
        self.V_raw = self.add_param("V_raw", rng.standard_normal((d_z, r)))
        self.s_raw = self.add_param("s_raw", np.full(r, _softplus_inv(s0)))
        self.delta = self.add_param("delta", np.full(d_z, delta0))

    def __call__(self):
        return assemble_G2(self)

    def factors(self):
        U, _ = ad.qr(self.U_raw)
        V, _ = ad.qr(self.V_raw)
        return U, ad.softplus(self.s_raw), V


def assemble_G2(p: LowRankTransition) -> Tensor:
    U, s, V = p.factors()
    return (U * s) @ V.mT + ad.diag_embed(p.delta)


class DenseTransition(Module):
    """Unconstrained ``G2``, initialised near ``0.9 I``."""

    def __init__(self, d_z, rng, diag0=0.9, noise=0.01):
        super().__init__()
        self.G = self.add_param("G", diag0 * np.eye(d_z) + noise * rng.standard_normal((d_z, d_z)))

    def __call__(self):
        return self.G
