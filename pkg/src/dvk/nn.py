"""Layers, diagonal Gaussians and Adam on top of :mod:`dvk.autodiff`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 5.0
_LV_CENTER = 0.5 * (LOG_VAR_MIN + LOG_VAR_MAX)
_LV_HALF = 0.5 * (LOG_VAR_MAX - LOG_VAR_MIN)
LOG_2PI = math.log(2.0 * math.pi)

ACTIVATIONS = {
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
}

NUMPY_ACTIVATIONS = {
    "tanh": np.tanh,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "sigmoid": lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
    "identity": lambda x: x,
}


def glorot_uniform(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class DiagGaussian:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ad.ShapeError(f"mean {self.mean.shape} vs log_var {self.log_var.shape}")

    @property
    def var(self):
        return np.exp(self.log_var.data)

    @classmethod
    def standard(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch_shape, size):
        shape = tuple(batch_shape) + (size,)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def squash_log_var(raw):
    """Smoothly map raw outputs into (LOG_VAR_MIN, LOG_VAR_MAX); slope 1 at the center."""
    return ad.tanh((raw - _LV_CENTER) * (1.0 / _LV_HALF)) * _LV_HALF + _LV_CENTER


def dense_forward(W, b, x, activation="identity"):
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"dense: input width {x.shape[-1]} vs weight rows {W.shape[0]}")
    if x.ndim == 1:
        y = ad.reshape(ad.reshape(x, (1, -1)) @ W, (W.shape[1],)) + b
    else:
        y = x @ W + b
    return ACTIVATIONS[activation](y)


class Dense:
    def __init__(self, store, name, n_in, n_out, rng, activation="identity"):
        self.W = store.add(f"{name}.W", glorot_uniform(rng, n_in, n_out))
        self.b = store.add(f"{name}.b", np.zeros(n_out))
        self.activation = activation
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x):
        return dense_forward(self.W, self.b, x, self.activation)


class MLP:
    """Tanh hidden layers followed by a linear output layer."""

    def __init__(self, store, name, n_in, hidden, n_out, rng, activation="tanh"):
        sizes = [n_in] + list(hidden)
        self.layers = [Dense(store, f"{name}.{i}", a, b, rng, activation)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.out = Dense(store, f"{name}.out", sizes[-1], n_out, rng)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.out(x)

    def numpy_forward(self, z):
        h = np.asarray(z, float)
        for layer in self.layers:
            h = NUMPY_ACTIVATIONS[layer.activation](h @ layer.W.data + layer.b.data)
        return h @ self.out.W.data + self.out.b.data

    def derivatives(self, z, weights=None):
        """Closed-form outputs, input Jacobians and weighted input Hessians for rows of ``z``.

        Returns ``(y (N, n), J (N, n, m), Hw (N, m, m))`` where
        ``Hw[r] = sum_i weights[r, i] * d2 y[r, i] / dz2``; ``Hw`` is None
        without weights. Only valid for tanh hidden layers. Curvature enters
        only through the activations, so ``Hw = sum_l Ja_l^T diag(r_l * tanh''(a_l)) Ja_l``
        with ``Ja_l`` the Jacobian of layer l's pre-activation and ``r_l`` the
        gradient of ``weights . y`` w.r.t. that layer's output.
        """
        if any(layer.activation != "tanh" for layer in self.layers):
            raise ValueError("closed-form derivatives need tanh hidden layers")
        h = np.atleast_2d(np.asarray(z, float))
        N, m = h.shape
        hs, slopes, pre_jacs = [], [], []
        J = np.broadcast_to(np.eye(m), (N, m, m))
        for layer in self.layers:
            W = layer.W.data
            Ja = np.matmul(W.T, J)                # (N, width, m)
            h = np.tanh(h @ W + layer.b.data)
            s = 1.0 - h * h
            J = Ja * s[..., None]
            hs.append(h)
            slopes.append(s)
            pre_jacs.append(Ja)
        Wo = self.out.W.data
        y = h @ Wo + self.out.b.data
        J = np.matmul(Wo.T, J)
        if weights is None:
            return y, J, None
        r = np.asarray(weights, float) @ Wo.T
        Hw = np.zeros((N, m, m))
        for i in range(len(self.layers) - 1, -1, -1):
            h, s, Ja = hs[i], slopes[i], pre_jacs[i]
            curv = r * (-2.0 * h * s)
            Hw += np.matmul(np.swapaxes(Ja, 1, 2), Ja * curv[..., None])
            r = (r * s) @ self.layers[i].W.data.T
        return y, J, Hw


class GaussianHead:
    """MLP whose output is split into a mean and a squashed log-variance."""

    def __init__(self, store, name, n_in, hidden, dim, rng, init_log_var=0.0):
        self.net = MLP(store, name, n_in, hidden, 2 * dim, rng)
        self.dim = dim
        if init_log_var:
            self.net.out.b.data[dim:] = init_log_var

    def __call__(self, x):
        h = self.net(x)
        return DiagGaussian(h[..., :self.dim], squash_log_var(h[..., self.dim:]))


def lstm_step(params, x, state):
    """One LSTM cell update; ``params`` holds ``Wx`` (in, 4h), ``Wh`` (h, 4h), ``b`` (4h).

    Gate layout along the last axis is [input, forget, output, candidate].
    """
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    x = as_tensor(x)
    if x.shape[-1] != Wx.shape[0]:
        raise ad.ShapeError(f"lstm: input width {x.shape[-1]} vs {Wx.shape[0]}")
    if state.hidden.shape[-1] != Wh.shape[0]:
        raise ad.ShapeError("lstm: state width does not match parameters")
    return _lstm_cell(_rowmat(x, Wx) + b, state, Wh)


def _rowmat(x, W):
    if x.ndim == 1:
        return ad.reshape(ad.reshape(x, (1, -1)) @ W, (W.shape[1],))
    return x @ W


def _lstm_cell(x_proj, state, Wh):
    n = Wh.shape[0]
    pre = x_proj + _rowmat(state.hidden, Wh)
    gates = ad.sigmoid(pre[..., :3 * n])
    cand = ad.tanh(pre[..., 3 * n:])
    i, f, o = gates[..., :n], gates[..., n:2 * n], gates[..., 2 * n:]
    cell = f * state.cell + i * cand
    return LstmState(o * ad.tanh(cell), cell)


class LSTM:
    def __init__(self, store, name, n_in, n_hidden, rng, forget_bias=1.0):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.Wx = store.add(f"{name}.Wx", glorot_uniform(rng, n_in, 4 * n_hidden))
        self.Wh = store.add(f"{name}.Wh", glorot_uniform(rng, n_hidden, 4 * n_hidden))
        b = np.zeros(4 * n_hidden)
        b[n_hidden:2 * n_hidden] = forget_bias
        self.b = store.add(f"{name}.b", b)

    @property
    def params(self):
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}

    def initial_state(self, batch_shape=()):
        return LstmState.zeros(batch_shape, self.n_hidden)

    def step(self, x, state):
        return lstm_step(self.params, x, state)

    def run(self, xs, reverse=False):
        """Hidden states for a (batch..., T, n_in) tensor, in input order."""
        xs = as_tensor(xs)
        proj = xs @ self.Wx + self.b
        T = xs.shape[-2]
        state = self.initial_state(xs.shape[:-2])
        hidden = [None] * T
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            state = _lstm_cell(proj[..., t, :], state, self.Wh)
            hidden[t] = state.hidden
        return hidden


class BiLSTM:
    def __init__(self, store, name, n_in, n_hidden, rng):
        self.fwd = LSTM(store, f"{name}.fwd", n_in, n_hidden, rng)
        self.bwd = LSTM(store, f"{name}.bwd", n_in, n_hidden, rng)
        self.n_hidden = n_hidden

    def __call__(self, xs):
        return bilstm_encode(self, xs)


def bilstm_encode(net, sequence):
    """Per-step concatenation of forward and backward hidden states.

    ``sequence`` is a list of vectors or a (batch..., T, n_in) tensor.
    Returns ``(per_step, summary)`` where ``summary`` joins the final
    forward state with the final (position 0) backward state.
    """
    if isinstance(sequence, (list, tuple)):
        if not sequence:
            raise ValueError("bilstm_encode: empty sequence")
        xs = ad.stack([as_tensor(v) for v in sequence], axis=-2)
    else:
        xs = as_tensor(sequence)
    if xs.shape[-2] == 0:
        raise ValueError("bilstm_encode: empty sequence")
    hf = net.fwd.run(xs)
    hb = net.bwd.run(xs, reverse=True)
    per_step = [ad.concat([f, b], axis=-1) for f, b in zip(hf, hb)]
    summary = ad.concat([hf[-1], hb[0]], axis=-1)
    return per_step, summary


def gaussian_sample(d, noise):
    return ad.gaussian_sample(d.mean, d.log_var, noise)


def gaussian_kl(q, p, axis=-1):
    """KL(q || p) between diagonal Gaussians, summed over ``axis``."""
    if q.mean.shape != p.mean.shape:
        raise ad.ShapeError(f"kl: {q.mean.shape} vs {p.mean.shape}")
    diff = q.mean - p.mean
    terms = (ad.exp(q.log_var - p.log_var) + ad.square(diff) * ad.exp(-p.log_var)
             + p.log_var - q.log_var - 1.0)
    return terms.sum(axis=axis) * 0.5


def gaussian_logpdf(d, x, axis=-1):
    x = as_tensor(x)
    if x.shape != d.mean.shape:
        raise ad.ShapeError(f"logpdf: {x.shape} vs {d.mean.shape}")
    terms = d.log_var + ad.square(x - d.mean) * ad.exp(-d.log_var) + LOG_2PI
    return terms.sum(axis=axis) * -0.5


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0


@dataclass
class AdamMoments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}, total


def adam_step(params, grads, moments, hyper):
    """Return updated ``(params, moments)``; inputs are left untouched.

    ``params`` and ``grads`` map names to arrays. Gradients are clipped to
    ``hyper.clip_norm`` (global norm) first.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient for {name!r}")
    grads, _ = clip_by_global_norm(grads, hyper.clip_norm)
    t = moments.t + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = hyper.beta1 * moments.m.get(name, 0.0) + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * moments.v.get(name, 0.0) + (1.0 - hyper.beta2) * g * g
        new_p[name] = p - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamMoments(new_m, new_v, t)


class Adam:
    """Adam over a :class:`~dvk.autodiff.ParameterStore`, updating it in place."""

    def __init__(self, store, config=None):
        self.store = store
        self.config = config or AdamConfig()
        self.moments = AdamMoments()

    def step(self, grads):
        params, self.moments = adam_step(self.store.arrays(), grads, self.moments, self.config)
        for name, value in params.items():
            self.store[name].data = value

    def state_arrays(self):
        out = {}
        for name in self.store.names():
            if name in self.moments.m:
                out[f"adam.m.{name}"] = np.asarray(self.moments.m[name])
                out[f"adam.v.{name}"] = np.asarray(self.moments.v[name])
        out["adam.t"] = np.array(float(self.moments.t))
        return out

    def load_state_arrays(self, arrays):
        m, v = {}, {}
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                m[key[len("adam.m."):]] = np.array(value)
            elif key.startswith("adam.v."):
                v[key[len("adam.v."):]] = np.array(value)
        self.moments = AdamMoments(m, v, int(arrays.get("adam.t", 0)))
