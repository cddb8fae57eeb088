"""Small generator networks with explicit forward/backward passes, plus Adam.

Networks are real-valued end to end. Inputs and outputs are flat float
arrays; a two-channel output ``[re; im]`` is read as a complex signal with
:func:`ntkdip.numerics.unstack_real`. Parameters live in one flat vector so
optimizers and Jacobian code never need to know the layer structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream


class ShapeError(ValueError):
    pass


@dataclass
class Gradient:
    weights: np.ndarray
    input: np.ndarray | None = None


def _relu_mask(h: np.ndarray) -> np.ndarray:
    # ReLU'(0) := 0
    return (h > 0).astype(np.float64)


class GeneratorNet:
    """Common plumbing: flat weights, shape checks, output as complex."""

    arch = "base"
    in_size: int
    out_len: int
    out_channels: int
    weights: np.ndarray

    @property
    def out_size(self) -> int:
        return self.out_len * self.out_channels

    @property
    def n_params(self) -> int:
        return self.weights.size

    def _params(self, params):
        w = self.weights if params is None else np.asarray(params, dtype=np.float64)
        if w.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} parameters, got {w.size}")
        return w

    def _input(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.in_size:
            raise ShapeError(f"{self.arch}: input length {x.size} != {self.in_size}")
        return x

    def _cotangent(self, g):
        g = np.asarray(g)
        if np.iscomplexobj(g):
            g = np.concatenate([g.real, g.imag]) if self.out_channels == 2 else g.real
        g = np.asarray(g, dtype=np.float64).ravel()
        if g.size != self.out_size:
            raise ShapeError(f"cotangent length {g.size} != output length {self.out_size}")
        return g

    def with_weights(self, weights) -> "GeneratorNet":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.weights = np.array(self._params(weights), dtype=np.float64)
        return new

    def output_complex(self, out: np.ndarray) -> np.ndarray:
        """Interpret a flat network output as a complex signal."""
        if self.out_channels == 2:
            return out[: self.out_len] + 1j * out[self.out_len:]
        return out.astype(np.complex128)

    def forward(self, x, params=None) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, x, cotangent, params=None, input_grad=False) -> Gradient:  # pragma: no cover
        raise NotImplementedError

    def shape_meta(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Two-layer decoder  G_C(Z) = ReLU(U C Z) v
# ---------------------------------------------------------------------------


def circulant(first_col: np.ndarray) -> np.ndarray:
    """Circulant matrix with ``U[i, j] = h[(i - j) mod n]``."""
    h = np.asarray(first_col, dtype=np.float64)
    n = h.size
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return h[idx]


def decoder_last_layer(k: int) -> np.ndarray:
    if k % 2:
        raise ShapeError("decoder width k must be even")
    return np.concatenate([np.ones(k // 2), -np.ones(k // 2)]) / np.sqrt(k)


class TwoLayerDecoder(GeneratorNet):
    """``ReLU(U C Z) v`` with trainable ``C`` (n x k).

    ``U`` is a fixed circulant convolution built from a seeded random filter of
    ``filter_len`` taps, ``v`` is fixed with half its entries ``+1/sqrt(k)``
    and half ``-1/sqrt(k)``. The input ``Z`` is a ``k x k`` matrix, flattened
    row-major; ``Z = I`` recovers the plain ``ReLU(U C) v`` form.
    """

    arch = "two-layer-decoder"

    def __init__(self, n: int, k: int, rng: RngStream | None = None, filter_len: int | None = 7,
                 u: np.ndarray | None = None):
        self.out_len = n
        self.out_channels = 1
        self.k = k
        self.in_size = k * k
        self.v = decoder_last_layer(k)
        if u is None:
            rng = rng or RngStream(0)
            taps = n if filter_len is None else min(filter_len, n)
            h = np.zeros(n)
            h[:taps] = rng.normal(size=taps)
            h = np.roll(h, -(taps // 2))
            h /= np.linalg.norm(h)
            u = circulant(h)
        self.u = np.asarray(u, dtype=np.float64)
        if self.u.shape != (n, n):
            raise ShapeError("U must be n x n")
        self.weights = np.zeros(n * k)

    def identity_input(self) -> np.ndarray:
        return np.eye(self.k).ravel()

    def forward(self, x, params=None) -> np.ndarray:
        c = self._params(params).reshape(self.out_len, self.k)
        z = self._input(x).reshape(self.k, self.k)
        h = self.u @ c @ z
        return np.maximum(h, 0.0) @ self.v

    def backward(self, x, cotangent, params=None, input_grad=False) -> Gradient:
        c = self._params(params).reshape(self.out_len, self.k)
        z = self._input(x).reshape(self.k, self.k)
        g = self._cotangent(cotangent)
        h = self.u @ c @ z
        dh = np.outer(g, self.v) * _relu_mask(h)
        ut_dh = self.u.T @ dh
        dc = ut_dh @ z.T
        dz = (c.T @ ut_dh).ravel() if input_grad else None
        return Gradient(dc.ravel(), dz)

    def shape_meta(self) -> dict:
        return {"arch": self.arch, "n": self.out_len, "k": self.k,
                "u_first_col": self.u[:, 0].tolist()}


# ---------------------------------------------------------------------------
# Convolutional generator
# ---------------------------------------------------------------------------


def _conv1d(x: np.ndarray, kern: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """'same' zero-padded correlation. x: (C_in, L), kern: (C_out, C_in, K).

    Returns the output and the im2col matrix ``(C_in * K, L)`` for reuse in
    the backward pass.
    """
    c_in, length = x.shape
    ks = kern.shape[2]
    pad = ks // 2
    xp = np.pad(x, ((0, 0), (pad, ks - 1 - pad)))
    cols = np.empty((c_in, ks, length))
    for j in range(ks):
        cols[:, j, :] = xp[:, j:j + length]
    cols = cols.reshape(c_in * ks, length)
    return kern.reshape(kern.shape[0], -1) @ cols, cols


def _conv1d_backward(g: np.ndarray, cols: np.ndarray, kern: np.ndarray, length: int):
    c_out, c_in, ks = kern.shape
    pad = ks // 2
    d_kern = (g @ cols.T).reshape(kern.shape)
    d_cols = (kern.reshape(c_out, -1).T @ g).reshape(c_in, ks, length)
    d_xp = np.zeros((c_in, length + ks - 1))
    for j in range(ks):
        d_xp[:, j:j + length] += d_cols[:, j, :]
    return d_kern, d_xp[:, pad:pad + length]


class ConvGenerator(GeneratorNet):
    """Layers of (nearest upsample -> conv -> ReLU) and a linear 1x1 head.

    Convolutions are zero padded and use the NTK parameterization: each
    layer's pre-activation is multiplied by ``sqrt(2 / fan_in)`` (the head by
    ``sqrt(1 / fan_in)``) so that standard-normal weights keep activations at
    unit scale. The default of three x2 upsampling layers maps a length
    ``L`` code to a length ``8 L`` output; ``upsample=(1, 1, 1)`` gives an
    image-to-image network for inputs that live in image space.
    """

    arch = "conv-generator"

    def __init__(self, in_len: int, in_channels: int = 2, channels: int = 16,
                 kernel_size: int = 3, upsample: tuple[int, ...] = (2, 2, 2),
                 out_channels: int = 2):
        self.in_len = in_len
        self.in_channels = in_channels
        self.channels = channels
        self.kernel_size = kernel_size
        self.upsample = tuple(int(u) for u in upsample)
        self.out_channels = out_channels
        self.in_size = in_len * in_channels
        self.out_len = in_len * int(np.prod(self.upsample))
        shapes = []
        c_in = in_channels
        for _ in self.upsample:
            shapes.append(("conv", (channels, c_in, kernel_size)))
            shapes.append(("bias", (channels,)))
            c_in = channels
        shapes.append(("head", (out_channels, c_in)))
        shapes.append(("head_bias", (out_channels,)))
        self.layout = shapes
        self._offsets = np.cumsum([0] + [int(np.prod(s)) for _, s in shapes])
        self.weights = np.zeros(int(self._offsets[-1]))

    def _unpack(self, w):
        return [w[a:b].reshape(s) for (_, s), a, b in zip(self.layout, self._offsets[:-1], self._offsets[1:])]

    def _scales(self):
        fan = [self.in_channels * self.kernel_size] + [self.channels * self.kernel_size] * (len(self.upsample) - 1)
        return [np.sqrt(2.0 / f) for f in fan], np.sqrt(1.0 / self.channels)

    def _run(self, x, params):
        parts = self._unpack(self._params(params))
        h = self._input(x).reshape(self.in_channels, self.in_len)
        scales, head_scale = self._scales()
        cache = []
        for i, up in enumerate(self.upsample):
            kern, bias = parts[2 * i], parts[2 * i + 1]
            hu = np.repeat(h, up, axis=1) if up > 1 else h
            pre, cols = _conv1d(hu, kern)
            pre = scales[i] * pre + bias[:, None]
            cache.append((up, h.shape[1], hu.shape[1], cols, pre))
            h = np.maximum(pre, 0.0)
        head, head_bias = parts[-2], parts[-1]
        out = head_scale * (head @ h) + head_bias[:, None]
        return out, h, cache, parts

    def forward(self, x, params=None) -> np.ndarray:
        return self._run(x, params)[0].ravel()

    def backward(self, x, cotangent, params=None, input_grad=False) -> Gradient:
        out, h_last, cache, parts = self._run(x, params)
        g = self._cotangent(cotangent).reshape(self.out_channels, self.out_len)
        scales, head_scale = self._scales()
        grads = [None] * len(parts)
        grads[-2] = head_scale * g @ h_last.T
        grads[-1] = g.sum(axis=1)
        dh = head_scale * parts[-2].T @ g
        for i in reversed(range(len(self.upsample))):
            up, l_in, l_up, cols, pre = cache[i]
            dpre = dh * _relu_mask(pre)
            grads[2 * i + 1] = dpre.sum(axis=1)
            if i == 0 and not input_grad:
                grads[2 * i] = scales[i] * (dpre @ cols.T).reshape(parts[2 * i].shape)
                dh = None
                break
            d_kern, d_hu = _conv1d_backward(scales[i] * dpre, cols, parts[2 * i], l_up)
            grads[2 * i] = d_kern
            dh = d_hu.reshape(d_hu.shape[0], l_in, up).sum(axis=2) if up > 1 else d_hu
        flat = np.concatenate([gr.ravel() for gr in grads])
        return Gradient(flat, None if dh is None else dh.ravel())

    def shape_meta(self) -> dict:
        return {"arch": self.arch, "in_len": self.in_len, "in_channels": self.in_channels,
                "channels": self.channels, "kernel_size": self.kernel_size,
                "upsample": list(self.upsample), "out_channels": self.out_channels}


# ---------------------------------------------------------------------------
# Linear network
# ---------------------------------------------------------------------------


class LinearNet(GeneratorNet):
    """``f(x) = W x`` with the matrix entries (row-major) as weights.

    With ``W = I`` it reproduces its input, which makes it the reference
    network for realizable fits.
    """

    arch = "linear"

    def __init__(self, in_size: int, out_len: int, out_channels: int = 1):
        self.in_size = in_size
        self.out_len = out_len
        self.out_channels = out_channels
        self.weights = np.zeros(self.out_size * in_size)

    def identity_weights(self) -> np.ndarray:
        if self.out_size != self.in_size:
            raise ShapeError("identity needs equal input and output sizes")
        return np.eye(self.in_size).ravel()

    def forward(self, x, params=None) -> np.ndarray:
        return self._params(params).reshape(self.out_size, self.in_size) @ self._input(x)

    def backward(self, x, cotangent, params=None, input_grad=False) -> Gradient:
        w = self._params(params).reshape(self.out_size, self.in_size)
        x = self._input(x)
        g = self._cotangent(cotangent)
        return Gradient(np.outer(g, x).ravel(), w.T @ g if input_grad else None)

    def shape_meta(self) -> dict:
        return {"arch": self.arch, "in_size": self.in_size, "out_len": self.out_len,
                "out_channels": self.out_channels}


# ---------------------------------------------------------------------------
# Initialization, checkpoints
# ---------------------------------------------------------------------------


def init_weights(net: GeneratorNet, omega: float, rng: RngStream) -> GeneratorNet:
    """Copy of ``net`` with i.i.d. N(0, omega) weights (omega is the variance)."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    return net.with_weights(rng.normal(0.0, np.sqrt(omega), size=net.n_params))


def net_from_meta(meta: dict) -> GeneratorNet:
    meta = dict(meta)
    arch = meta.pop("arch")
    if arch == TwoLayerDecoder.arch:
        u = circulant(np.asarray(meta["u_first_col"]))
        return TwoLayerDecoder(meta["n"], meta["k"], u=u)
    if arch == LinearNet.arch:
        return LinearNet(**meta)
    if arch == ConvGenerator.arch:
        meta["upsample"] = tuple(meta["upsample"])
        return ConvGenerator(**meta)
    raise ValueError(f"unknown architecture {arch!r}")


def save_checkpoint(path, net: GeneratorNet) -> None:
    """JSON shape header line followed by little-endian float64 weights."""
    header = json.dumps({"n_params": net.n_params, "meta": net.shape_meta()}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(np.asarray(net.weights, dtype="<f8").tobytes())


def load_checkpoint(path) -> GeneratorNet:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    w = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if w.size != header["n_params"]:
        raise ShapeError(f"checkpoint holds {w.size} weights, header says {header['n_params']}")
    return net_from_meta(header["meta"]).with_weights(w)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam; ``m``/``v`` are allocated on the first step."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: AdamState, params: np.ndarray, grad) -> np.ndarray:
    """One Adam update; returns new parameters and advances ``state``."""
    g = grad.weights if isinstance(grad, Gradient) else np.asarray(grad, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if g.shape != params.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {params.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
