"""LSTM variational autoencoder for univariate sequences.

Encoder: LSTM over the sequence, last hidden state -> dense heads for the
latent mean and log-variance. Decoder: latent -> dense seed (leaky ReLU),
repeated as input to a second LSTM, per-step dense head with sigmoid output.
"""

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from addd import nn
from addd._jit import jit
from addd.errors import ConfigError, InvalidInputError, NumericError, ShapeError
from addd.rng import make_rng

FORMAT_TAG = "addd-vae/1"


@dataclass(frozen=True)
class VaeConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    beta: float = 1.0
    time_step: int = 10
    hidden_dim: int = 2
    latent_dim: int = 2
    leaky_relu_slope: float = 0.01
    forget_bias: float = 1.0  # initial LSTM forget-gate bias
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("batch_size", "time_step", "hidden_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def _layout(cfg):
    H, L = cfg.hidden_dim, cfg.latent_dim
    return [
        ("enc_Wx", (1, 4 * H)),
        ("enc_Wh", (H, 4 * H)),
        ("enc_b", (4 * H,)),
        ("mu_W", (H, L)),
        ("mu_b", (L,)),
        ("lv_W", (H, L)),
        ("lv_b", (L,)),
        ("seed_W", (L, H)),
        ("seed_b", (H,)),
        ("dec_Wx", (H, 4 * H)),
        ("dec_Wh", (H, 4 * H)),
        ("dec_b", (4 * H,)),
        ("out_W", (H, 1)),
        ("out_b", (1,)),
    ]


def _views(flat, cfg):
    out = {}
    offset = 0
    for name, shape in _layout(cfg):
        size = int(np.prod(shape))
        out[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return out


class VaeModel:
    """Parameters live in one flat vector; ``model.p`` holds named views."""

    def __init__(self, config, theta):
        self.config = config
        n = sum(int(np.prod(s)) for _, s in _layout(config))
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got {theta.shape}")
        self.theta = theta
        self.p = _views(self.theta, config)

    @classmethod
    def init(cls, config=None):
        config = config or VaeConfig()
        rng = make_rng(config.seed, "init")
        model = cls(config, np.zeros(sum(int(np.prod(s)) for _, s in _layout(config))))
        for name, shape in _layout(config):
            if len(shape) == 2:
                model.p[name][...] = nn.he_normal_init(shape, rng)
        H = config.hidden_dim
        for name in ("enc_b", "dec_b"):
            model.p[name][H : 2 * H] = config.forget_bias
        return model

    @classmethod
    def zeros(cls, config=None):
        config = config or VaeConfig()
        return cls(config, np.zeros(sum(int(np.prod(s)) for _, s in _layout(config))))

    def copy(self):
        return VaeModel(self.config, self.theta.copy())

    @property
    def encoder(self):
        return nn.LstmParams(self.p["enc_Wx"], self.p["enc_Wh"], self.p["enc_b"])

    @property
    def decoder(self):
        return nn.LstmParams(self.p["dec_Wx"], self.p["dec_Wh"], self.p["dec_b"])

    # persistence -------------------------------------------------------
    def to_bytes(self):
        buf = io.BytesIO()
        np.savez(
            buf,
            format=np.array(FORMAT_TAG),
            config=np.array(json.dumps(asdict(self.config), sort_keys=True)),
            theta=self.theta,
        )
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            tag = str(z["format"])
            if tag != FORMAT_TAG:
                raise InvalidInputError(f"unsupported model format {tag!r}")
            config = VaeConfig(**json.loads(str(z["config"])))
            return cls(config, z["theta"].copy())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _as_batch(model, seq):
    x = np.asarray(seq, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.time_step:
        raise ShapeError(
            f"expected sequences of length {model.config.time_step}, got shape {np.shape(seq)}"
        )
    return x, single


def _encode_batch(model, x):
    p = model.p
    xt = np.ascontiguousarray(x.T[:, :, None])
    hs, cs, acts = nn._lstm_forward_kernel(xt, p["enc_Wx"], p["enc_Wh"], p["enc_b"])
    h_last = hs[-1]
    mu = h_last @ p["mu_W"] + p["mu_b"]
    logvar = h_last @ p["lv_W"] + p["lv_b"]
    return mu, logvar, (xt, hs, cs, acts)


def _decode_batch(model, z):
    p, cfg = model.p, model.config
    s_pre = z @ p["seed_W"] + p["seed_b"]
    s = nn.leaky_relu(s_pre, cfg.leaky_relu_slope)
    rep = np.ascontiguousarray(np.broadcast_to(s, (cfg.time_step,) + s.shape))
    hs, cs, acts = nn._lstm_forward_kernel(rep, p["dec_Wx"], p["dec_Wh"], p["dec_b"])
    o_pre = hs @ p["out_W"] + p["out_b"]
    x_hat = nn.sigmoid(o_pre[:, :, 0]).T
    return x_hat, (s_pre, rep, hs, cs, acts)


def encode(model, seq):
    """Return the posterior ``(mu, logvar)`` for one sequence or a batch."""
    x, single = _as_batch(model, seq)
    mu, logvar, _ = _encode_batch(model, x)
    return (mu[0], logvar[0]) if single else (mu, logvar)


def reparameterize(mu, logvar, rng):
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    eps = make_rng(rng).standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def decode(model, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != model.config.latent_dim:
        raise ShapeError(f"expected latent vectors of size {model.config.latent_dim}, got {z.shape}")
    x_hat, _ = _decode_batch(model, z)
    return x_hat[0] if single else x_hat


def vae_loss(x, x_hat, mu, logvar, beta):
    """Reconstruction square error plus ``beta`` times the KL term."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    return nn.square_error(x, x_hat) + beta * nn.kl_standard_normal(mu, logvar)


@jit
def _unpack(flat, H, L):
    # must follow the order of _layout
    shapes = ((1, 4 * H), (H, 4 * H), (1, 4 * H), (H, L), (1, L), (H, L), (1, L),
              (L, H), (1, H), (H, 4 * H), (H, 4 * H), (1, 4 * H), (H, 1), (1, 1))
    out = []
    o = 0
    for r, c in shapes:
        out.append(flat[o : o + r * c].reshape((r, c)))
        o += r * c
    return out


@jit
def _vae_kernel(x, eps, sample, beta, slope, H, L, theta, want_grad, grad):
    """Forward pass and, if ``want_grad``, backward pass into ``grad``.

    Returns per-sample losses, the posterior means and the reconstructions.
    """
    (enc_Wx, enc_Wh, enc_b, mu_W, mu_b, lv_W, lv_b,
     seed_W, seed_b, dec_Wx, dec_Wh, dec_b, out_W, out_b) = _unpack(theta, H, L)
    enc_b = enc_b[0]
    mu_b = mu_b[0]
    lv_b = lv_b[0]
    seed_b = seed_b[0]
    dec_b = dec_b[0]
    out_b = out_b[0]
    B, T = x.shape
    xt = np.ascontiguousarray(x.T).reshape(T, B, 1)
    hs_e, cs_e, acts_e = nn._lstm_forward_kernel(xt, enc_Wx, enc_Wh, enc_b)
    h_last = hs_e[T - 1]
    mu = h_last @ mu_W + mu_b
    logvar = h_last @ lv_W + lv_b
    std = np.exp(0.5 * logvar)
    if sample:
        z = mu + std * eps
    else:
        z = mu.copy()
    s_pre = z @ seed_W + seed_b
    s = np.where(s_pre > 0, s_pre, slope * s_pre)
    H = s.shape[1]
    rep = np.empty((T, B, H))
    for t in range(T):
        rep[t] = s
    hs_d, cs_d, acts_d = nn._lstm_forward_kernel(rep, dec_Wx, dec_Wh, dec_b)
    x_hat = np.empty((B, T))
    for t in range(T):
        for n in range(B):
            o = out_b[0]
            for h in range(H):
                o += hs_d[t, n, h] * out_W[h, 0]
            x_hat[n, t] = nn._sig(o)
    diff = x_hat - x
    kl = 0.5 * (mu * mu + np.expm1(logvar) - logvar)
    losses = (diff * diff).sum(axis=1) + beta * kl.sum(axis=1)
    if not want_grad:
        return losses, mu, x_hat

    (g_enc_Wx, g_enc_Wh, g_enc_b, g_mu_W, g_mu_b, g_lv_W, g_lv_b,
     g_seed_W, g_seed_b, g_dec_Wx, g_dec_Wh, g_dec_b, g_out_W, g_out_b) = _unpack(grad, H, L)
    g_enc_b = g_enc_b[0]
    g_mu_b = g_mu_b[0]
    g_lv_b = g_lv_b[0]
    g_seed_b = g_seed_b[0]
    g_dec_b = g_dec_b[0]
    g_out_b = g_out_b[0]
    # mean over the batch
    d_opre = 2.0 * diff * x_hat * (1.0 - x_hat) / B
    d_hs_d = np.empty((T, B, H))
    g_out_W[:] = 0.0
    g_out_b[:] = 0.0
    out_row = out_W[:, 0].copy()
    for t in range(T):
        col = d_opre[:, t].copy()
        g_out_W[:, 0] += hs_d[t].T @ col
        g_out_b[0] += col.sum()
        for h in range(H):
            d_hs_d[t, :, h] = col * out_row[h]
    dWx, dWh, db, d_rep = nn._lstm_backward_kernel(d_hs_d, rep, hs_d, cs_d, acts_d, dec_Wx, dec_Wh)
    g_dec_Wx[:] = dWx
    g_dec_Wh[:] = dWh
    g_dec_b[:] = db
    d_s = d_rep.sum(axis=0)
    d_spre = d_s * np.where(s_pre > 0, 1.0, slope)
    g_seed_W[:] = np.ascontiguousarray(z.T) @ d_spre
    g_seed_b[:] = d_spre.sum(axis=0)
    d_z = d_spre @ np.ascontiguousarray(seed_W.T)
    # z = mu + exp(lv/2) * eps; KL gradients are mu and (e^lv - 1) / 2
    d_mu = beta * mu / B
    d_lv = beta * 0.5 * np.expm1(logvar) / B
    d_mu += d_z
    if sample:
        d_lv += d_z * eps * 0.5 * std
    h_last_t = np.ascontiguousarray(h_last.T)
    g_mu_W[:] = h_last_t @ d_mu
    g_mu_b[:] = d_mu.sum(axis=0)
    g_lv_W[:] = h_last_t @ d_lv
    g_lv_b[:] = d_lv.sum(axis=0)
    d_hs_e = np.zeros((T, B, H))
    d_hs_e[T - 1] = d_mu @ np.ascontiguousarray(mu_W.T) + d_lv @ np.ascontiguousarray(lv_W.T)
    dWx, dWh, db, _ = nn._lstm_backward_kernel(d_hs_e, xt, hs_e, cs_e, acts_e, enc_Wx, enc_Wh)
    g_enc_Wx[:] = dWx
    g_enc_Wh[:] = dWh
    g_enc_b[:] = db
    return losses, mu, x_hat


def _run(model, x, eps, grad=None):
    cfg = model.config
    want_grad = grad is not None
    if not want_grad:
        grad = model.theta
    sample = eps is not None
    if eps is None:
        eps = np.zeros((x.shape[0], cfg.latent_dim))
    return _vae_kernel(
        np.ascontiguousarray(x), np.ascontiguousarray(eps, dtype=np.float64), sample,
        float(cfg.beta), float(cfg.leaky_relu_slope), cfg.hidden_dim, cfg.latent_dim,
        model.theta, want_grad, grad,
    )


def loss_and_grads(model, x, eps):
    """Per-sample losses and the gradient of their batch mean.

    ``x`` is ``(B, T)``; ``eps`` is the ``(B, latent_dim)`` standard normal
    draw used for the reparameterized latent. Returns ``(losses, grad)``
    where ``grad`` is flat and aligned with ``model.theta``.
    """
    x, _ = _as_batch(model, x)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (x.shape[0], model.config.latent_dim):
        raise ShapeError(f"eps shape {eps.shape} does not match batch")
    grad = np.zeros_like(model.theta)
    losses, _, _ = _run(model, x, eps, grad)
    return losses, grad


def train(model, dataset, config=None, seed=None):
    """Train a copy of ``model`` on ``dataset`` and return ``(model, history)``.

    ``dataset`` is an ``(N, time_step)`` array of sequences in [0, 1].
    History holds the mean per-sample loss of each epoch. ``seed`` selects
    the shuffling/sampling stream (defaults to ``config.seed``).
    """
    cfg = config or model.config
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidInputError("training dataset must be a non-empty (N, time_step) array")
    if data.shape[1] != model.config.time_step:
        raise ShapeError(f"sequence length {data.shape[1]} != time_step {model.config.time_step}")
    if np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
        raise InvalidInputError("training sequences must lie in [0, 1]")
    arch = ("time_step", "hidden_dim", "latent_dim")
    if any(getattr(cfg, a) != getattr(model.config, a) for a in arch):
        raise ConfigError("training config does not match the model architecture")
    trained = model.copy()
    trained.config = cfg
    rng = make_rng(cfg.seed if seed is None else seed, "train")
    state = nn.AdamState.for_params([trained.theta])
    history = []
    n = data.shape[0]
    L = trained.config.latent_dim
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            eps = rng.standard_normal((batch.shape[0], L))
            losses, grad = loss_and_grads(trained, batch, eps)
            nn.adam_step([trained.theta], [grad], state, cfg.learning_rate)
            if not np.all(np.isfinite(trained.theta)):
                raise NumericError("non-finite parameter after Adam step")
            total += float(losses.sum())
        history.append(total / n)
    return trained, history


def infer(model, seq):
    """Deterministic loss and encoding, using the posterior mean as latent.

    Accepts one sequence (returns a float and a vector) or a batch.
    """
    x, single = _as_batch(model, seq)
    loss, mu, _ = _run(model, x, None)
    if single:
        return float(loss[0]), mu[0]
    return loss, mu
