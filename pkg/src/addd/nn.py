"""Minimal numeric layer: LSTM and dense layers with hand-written gradients.

Sequences are time-major arrays of shape ``(T, B, D)``; a 2-D ``(T, D)``
array is treated as a batch of one. LSTM gates are stacked in the order
input, forget, output, candidate along the last weight axis.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from addd._jit import jit
from addd.errors import NumericError, ShapeError, ContractError
from addd.rng import make_rng


def he_normal_init(shape, seed=0):
    """Draw a ``(fan_in, fan_out)`` weight matrix from N(0, 2 / fan_in)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise ShapeError(f"expected a 2-D shape, got {shape}")
    fan_in = shape[0]
    if fan_in <= 0 or shape[1] <= 0:
        raise ShapeError(f"invalid shape {shape}: fan_in must be positive")
    rng = make_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def sigmoid(a):
    # tanh form avoids overflow in exp for large |a|
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def leaky_relu(a, slope):
    return np.where(a > 0, a, slope * a)


def leaky_relu_grad(a, slope):
    return np.where(a > 0, 1.0, slope)


def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(dy, x, W):
    """Return ``(dW, db, dx)`` for ``y = x @ W + b`` over a 2-D batch."""
    return x.T @ dy, dy.sum(axis=0), dy @ W.T


# ---------------------------------------------------------------- LSTM


@dataclass
class LstmParams:
    Wx: np.ndarray  # (input_dim, 4 * hidden_dim)
    Wh: np.ndarray  # (hidden_dim, 4 * hidden_dim)
    b: np.ndarray  # (4 * hidden_dim,)

    @property
    def input_dim(self):
        return self.Wx.shape[0]

    @property
    def hidden_dim(self):
        return self.Wh.shape[0]

    def validate(self):
        d, h = self.input_dim, self.hidden_dim
        if self.Wx.shape != (d, 4 * h) or self.Wh.shape != (h, 4 * h) or self.b.shape != (4 * h,):
            raise ShapeError(
                f"inconsistent LSTM shapes Wx={self.Wx.shape} Wh={self.Wh.shape} b={self.b.shape}"
            )
        for a in (self.Wx, self.Wh, self.b):
            if not np.all(np.isfinite(a)):
                raise NumericError("non-finite LSTM parameter")

    @classmethod
    def init(cls, input_dim, hidden_dim, seed=0):
        rng = make_rng(seed)
        return cls(
            Wx=he_normal_init((input_dim, 4 * hidden_dim), rng),
            Wh=he_normal_init((hidden_dim, 4 * hidden_dim), rng),
            b=np.zeros(4 * hidden_dim),
        )

    @classmethod
    def zeros(cls, input_dim, hidden_dim):
        return cls(
            Wx=np.zeros((input_dim, 4 * hidden_dim)),
            Wh=np.zeros((hidden_dim, 4 * hidden_dim)),
            b=np.zeros(4 * hidden_dim),
        )


class LstmCache(NamedTuple):
    x: np.ndarray
    hs: np.ndarray
    cs: np.ndarray
    acts: np.ndarray  # activated gates, (T, B, 4H)
    squeeze: bool


@jit
def _sig(a):
    # exp-based: markedly cheaper than libm tanh inside the kernels
    if a >= 0.0:
        return 1.0 / (1.0 + np.exp(-a))
    e = np.exp(a)
    return e / (1.0 + e)


@jit
def _tanh(a):
    return 2.0 * _sig(2.0 * a) - 1.0


@jit
def _lstm_forward_kernel(x, Wx, Wh, b):
    T, B, D = x.shape
    H = Wh.shape[0]
    hs = np.zeros((T, B, H))
    cs = np.zeros((T, B, H))
    acts = np.zeros((T, B, 4 * H))
    a = np.empty(4 * H)
    for n in range(B):
        for t in range(T):
            for k in range(4 * H):
                s = b[k]
                for d in range(D):
                    s += x[t, n, d] * Wx[d, k]
                if t > 0:
                    for j in range(H):
                        s += hs[t - 1, n, j] * Wh[j, k]
                a[k] = s
            for j in range(H):
                i = _sig(a[j])
                f = _sig(a[H + j])
                o = _sig(a[2 * H + j])
                g = _tanh(a[3 * H + j])
                c_prev = cs[t - 1, n, j] if t > 0 else 0.0
                c = f * c_prev + i * g
                cs[t, n, j] = c
                hs[t, n, j] = o * _tanh(c)
                acts[t, n, j] = i
                acts[t, n, H + j] = f
                acts[t, n, 2 * H + j] = o
                acts[t, n, 3 * H + j] = g
    return hs, cs, acts


@jit
def _lstm_backward_kernel(dhs, x, hs, cs, acts, Wx, Wh):
    T, B, D = x.shape
    H = Wh.shape[0]
    dWx = np.zeros(Wx.shape)
    dWh = np.zeros(Wh.shape)
    db = np.zeros(4 * H)
    dx = np.zeros(x.shape)
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    da = np.empty(4 * H)
    for n in range(B):
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for t in range(T - 1, -1, -1):
            for j in range(H):
                i = acts[t, n, j]
                f = acts[t, n, H + j]
                o = acts[t, n, 2 * H + j]
                g = acts[t, n, 3 * H + j]
                c_prev = cs[t - 1, n, j] if t > 0 else 0.0
                tc = _tanh(cs[t, n, j])
                dh = dhs[t, n, j] + dh_next[j]
                dc = dh * o * (1.0 - tc * tc) + dc_next[j]
                da[j] = dc * g * i * (1.0 - i)
                da[H + j] = dc * c_prev * f * (1.0 - f)
                da[2 * H + j] = dh * tc * o * (1.0 - o)
                da[3 * H + j] = dc * i * (1.0 - g * g)
                dc_next[j] = dc * f
            for k in range(4 * H):
                db[k] += da[k]
                for d in range(D):
                    dWx[d, k] += x[t, n, d] * da[k]
                if t > 0:
                    for j in range(H):
                        dWh[j, k] += hs[t - 1, n, j] * da[k]
            for d in range(D):
                s = 0.0
                for k in range(4 * H):
                    s += da[k] * Wx[d, k]
                dx[t, n, d] = s
            for j in range(H):
                s = 0.0
                for k in range(4 * H):
                    s += da[k] * Wh[j, k]
                dh_next[j] = s
    return dWx, dWh, db, dx


def lstm_forward(seq, params):
    """Run the LSTM over ``seq`` and return ``(hidden_states, cache)``.

    ``seq`` is ``(T, D)`` or time-major ``(T, B, D)``; hidden states come
    back with the same rank. Initial hidden and cell states are zero.
    """
    x = np.asarray(seq, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, None, :]
    if x.ndim != 3:
        if x.size == 0:
            x = x.reshape(0, 1, params.input_dim)
            squeeze = True
        else:
            raise ShapeError(f"expected (T, D) or (T, B, D) input, got shape {x.shape}")
    if x.shape[2] != params.input_dim:
        raise ShapeError(f"input dim {x.shape[2]} != LSTM input_dim {params.input_dim}")
    x = np.ascontiguousarray(x)
    hs, cs, acts = _lstm_forward_kernel(x, params.Wx, params.Wh, params.b)
    cache = LstmCache(x, hs, cs, acts, squeeze)
    return (hs[:, 0, :] if squeeze else hs), cache


def lstm_backward(grad_hidden_seq, cache, params):
    """Back-propagate hidden-state gradients through a cached forward pass.

    Returns ``(LstmParams of gradients, input gradients)``.
    """
    if not isinstance(cache, LstmCache):
        raise ContractError("cache does not come from lstm_forward")
    dhs = np.asarray(grad_hidden_seq, dtype=np.float64)
    if cache.squeeze:
        dhs = dhs.reshape(dhs.shape[0], 1, -1) if dhs.ndim == 2 else dhs
    H = params.hidden_dim
    if cache.acts.shape[2] != 4 * H or cache.x.shape[2] != params.input_dim:
        raise ContractError("cache was produced with differently shaped parameters")
    if dhs.shape != cache.hs.shape:
        raise ContractError(f"gradient shape {dhs.shape} does not match cached states {cache.hs.shape}")
    dWx, dWh, db, dx = _lstm_backward_kernel(
        np.ascontiguousarray(dhs), cache.x, cache.hs, cache.cs, cache.acts, params.Wx, params.Wh
    )
    grads = LstmParams(dWx, dWh, db)
    return grads, (dx[:, 0, :] if cache.squeeze else dx)


# ---------------------------------------------------------------- losses


def square_error(x, x_hat):
    """Sum of squared differences over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    d = x - x_hat
    return np.sum(d * d, axis=-1)


def kl_standard_normal(mu, logvar):
    """KL( N(mu, exp(logvar)) || N(0, I) ), summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeError(f"length mismatch: {mu.shape} vs {logvar.shape}")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise NumericError("non-finite mu/logvar")
    # expm1 keeps the small-logvar case exact: 1 + lv - e^lv = lv - expm1(lv)
    return 0.5 * np.sum(mu * mu + np.expm1(logvar) - logvar, axis=-1)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr):
    """Apply one bias-corrected Adam update in place.

    ``params`` and ``grads`` are matching lists of arrays. Returns
    ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam state have different lengths")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in Adam step: {p.shape}, {g.shape}, {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params, state
