"""Deep Variational Koopman model: networks, evidence lower bound, training and sampling.

Sequences are handled in batches: states ``x`` (B, L, n) and actions ``u``
(B, L-1, p). The first ``T`` states form the context the encoders see; any
remaining states are prediction targets reached by rolling the derived
linear model forward from the last context latent.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linsys
from .autodiff import Tensor
from .envs import Trajectory, stack_trials
from .nn import (LOG_VAR_MAX, LOG_VAR_MIN, Adam, AdamConfig, BiLSTM, DiagGaussian,
                 GaussianHead, LSTM, MLP, bilstm_encode, gaussian_kl, gaussian_sample)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class DvkConfig:
    state_dim: int
    action_dim: int
    latent_dim: int = 4
    T: int = 32
    H: int = 32
    ridge: float = linsys.DEFAULT_RIDGE
    inverse_fit: str = "backward"
    kl_weight: float = 1.0
    kl_warmup_epochs: int = 0
    decoder_hidden: tuple = (64, 32)
    temporal_hidden: int = 64
    init_inference_hidden: tuple = (64,)
    obs_encoder_hidden: int = 64
    obs_inference_hidden: tuple = (64, 64)
    prior_hidden: tuple = (64, 32)
    posterior_init_log_var: float = -4.0
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0
    epochs: int = 20
    steps_per_epoch: int = 50
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("decoder_hidden", "init_inference_hidden", "obs_inference_hidden",
                     "prior_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.T < self.latent_dim + self.action_dim + 1:
            raise ValueError("T must be at least latent_dim + action_dim + 1")
        if self.H < 0:
            raise ValueError("H must be >= 0")
        if self.inverse_fit not in linsys.INVERSE_FITS:
            raise ValueError(f"inverse_fit must be one of {linsys.INVERSE_FITS}")

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            default = f.default
            if isinstance(default, tuple):
                kwargs[f.name] = tuple(int(s) for s in v.split(",") if s)
            elif isinstance(default, float):
                kwargs[f.name] = float(v)
            elif isinstance(default, str):
                kwargs[f.name] = v
            else:
                kwargs[f.name] = int(v)
        return cls(**kwargs)


@dataclass
class ObservationPath:
    g: Tensor                # (B, T, m) sampled observations
    posterior: DiagGaussian  # (B, T, m)
    prior: DiagGaussian      # (B, T, m); step 0 is the standard normal


@dataclass
class LatentPath:
    z: np.ndarray  # (T, m)


@dataclass
class EnsembleMember:
    model: linsys.LinearModel
    latents: LatentPath


def _pad_actions(u, length):
    pad = length - u.shape[1]
    if pad <= 0:
        return u[:, :length]
    return np.concatenate([u, np.zeros(u.shape[:1] + (pad,) + u.shape[2:])], axis=1)


class DVK:
    def __init__(self, config, state_mean=None, state_std=None):
        self.config = c = config
        rng = np.random.default_rng([c.seed, 7919])
        n, p, m = c.state_dim, c.action_dim, c.latent_dim
        self.params = store = ad.ParameterStore()
        self.state_mean = np.zeros(n) if state_mean is None else np.asarray(state_mean, float)
        self.state_std = np.ones(n) if state_std is None else np.asarray(state_std, float)

        self.decoder = MLP(store, "decoder", m, c.decoder_hidden, n, rng)
        self.temporal = BiLSTM(store, "temporal", n + p, c.temporal_hidden, rng)
        enc = 2 * c.temporal_hidden
        self.init_inference = GaussianHead(store, "init_inference", enc, c.init_inference_hidden,
                                           m, rng, init_log_var=c.posterior_init_log_var)
        self.obs_encoder = LSTM(store, "obs_encoder", m, c.obs_encoder_hidden, rng)
        self.obs_inference = GaussianHead(store, "obs_inference",
                                          2 * enc + c.obs_encoder_hidden, c.obs_inference_hidden,
                                          m, rng, init_log_var=c.posterior_init_log_var)
        self.prior = GaussianHead(store, "prior", m + p, c.prior_hidden, m, rng)

    # -- normalization -------------------------------------------------------
    def normalize(self, x):
        return (np.asarray(x, float) - self.state_mean) / self.state_std

    def fit_normalization(self, states):
        flat = np.asarray(states, float).reshape(-1, self.config.state_dim)
        self.state_mean = flat.mean(axis=0)
        self.state_std = np.maximum(flat.std(axis=0), 1e-6)

    # -- networks ------------------------------------------------------------
    def encode_sequence(self, x, u):
        """Temporal encoding of context states x (B, T, n) and actions u (B, T-1, p)."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if x.ndim != 3 or x.shape[-1] != self.config.state_dim:
            raise ad.ShapeError(f"states must be (B, T, {self.config.state_dim}), got {x.shape}")
        if u.shape[:2] != (x.shape[0], x.shape[1] - 1):
            raise ad.ShapeError(f"actions {u.shape} do not match states {x.shape}")
        inputs = np.concatenate([self.normalize(x), _pad_actions(u, x.shape[1])], axis=-1)
        return bilstm_encode(self.temporal, Tensor(inputs))

    def infer_observations(self, encoding, u, noise):
        """Sample g_1..g_T from the posterior and evaluate the conditional priors.

        ``noise`` is standard normal with shape (B, T, m); zeros give posterior means.
        """
        per_step, summary = encoding
        T = len(per_step)
        B = summary.shape[0]
        m = self.config.latent_dim
        noise = np.asarray(noise, float)
        if noise.shape != (B, T, m):
            raise ad.ShapeError(f"noise must be {(B, T, m)}, got {noise.shape}")
        q = self.init_inference(summary)
        g = gaussian_sample(q, noise[:, 0])
        gs, means, log_vars = [g], [q.mean], [q.log_var]
        state = self.obs_encoder.initial_state((B,))
        for t in range(1, T):
            state = self.obs_encoder.step(g, state)
            q = self.obs_inference(ad.concat([summary, per_step[t], state.hidden], axis=-1))
            g = gaussian_sample(q, noise[:, t])
            gs.append(g)
            means.append(q.mean)
            log_vars.append(q.log_var)
        g_all = ad.stack(gs, axis=1)
        posterior = DiagGaussian(ad.stack(means, axis=1), ad.stack(log_vars, axis=1))
        if T > 1:
            u_prev = Tensor(np.asarray(u, float)[:, :T - 1])
            pr = self.prior(ad.concat([g_all[:, :T - 1], u_prev], axis=-1))
            zero = Tensor(np.zeros((B, 1, m)))
            prior = DiagGaussian(ad.concat([zero, pr.mean], axis=1),
                                 ad.concat([zero, pr.log_var], axis=1))
        else:
            prior = DiagGaussian.standard((B, 1, m))
        return ObservationPath(g_all, posterior, prior)

    def decode_normalized(self, z):
        return self.decoder(z)

    def decode_mean(self, z):
        """Decoder mean in raw state units for latents (..., m)."""
        return self.decoder(z) * self.state_std + self.state_mean

    def decode(self, z):
        """Gaussian over the state for a single latent; unit covariance in normalized units."""
        with ad.no_grad():
            mu = self.decode_mean(Tensor(np.asarray(z, float)))
        return DiagGaussian(mu.data, np.broadcast_to(2.0 * np.log(self.state_std), mu.shape).copy())

    # -- differentiable dynamics ----------------------------------------------
    def fit_dynamics(self, g, u):
        """Batched ridge fit: A (B,m,m), B (B,m,p), A_inv (B,m,m) from g (B,T,m)."""
        c = self.config
        m, p = c.latent_dim, c.action_dim
        T = g.shape[1]
        lam = c.ridge
        X = ad.transpose(g[:, :T - 1])
        Y = ad.transpose(g[:, 1:])
        Gamma = Tensor(np.swapaxes(np.asarray(u, float)[:, :T - 1], -1, -2))
        Z = ad.concat([X, Gamma], axis=1)
        K = ad.solve(Z @ ad.transpose(Z) + lam * np.eye(m + p), Z @ ad.transpose(Y))
        A = ad.transpose(K[:, :m])
        Bm = ad.transpose(K[:, m:])
        W = Y - Bm @ Gamma
        if c.inverse_fit == "backward":
            # X ~ A_inv W directly; the ridge keeps the solve away from singular systems
            A_inv = ad.transpose(ad.solve(W @ ad.transpose(W) + lam * np.eye(m),
                                          W @ ad.transpose(X)))
            return A, Bm, A_inv
        Mt = ad.solve(X @ ad.transpose(X) + lam * np.eye(m), X @ ad.transpose(W))
        cond = np.linalg.cond(Mt.data)
        if not np.all(np.isfinite(cond)) or np.max(cond) > linsys.MAX_CONDITION:
            raise linsys.SingularSystemError(f"forward map ill-conditioned (cond={np.max(cond):.3g})")
        A_inv = ad.inv(ad.transpose(Mt))
        return A, Bm, A_inv

    def rollout_latents(self, g, u, A, Bm, A_inv, horizon):
        """Backward latents over the context, then ``horizon`` forward steps.

        Returns (B, T + horizon, m).
        """
        T = g.shape[1]
        u = np.asarray(u, float)
        Bu = Tensor(u[:, :T - 1 + horizon]) @ ad.transpose(Bm)
        A_invT = ad.transpose(A_inv)
        z = g[:, T - 1:T]
        back = [z]
        for t in range(T - 2, -1, -1):
            z = (z - Bu[:, t:t + 1]) @ A_invT
            back.append(z)
        back.reverse()
        fwd = []
        if horizon:
            AT = ad.transpose(A)
            z = back[-1]
            for h in range(horizon):
                z = z @ AT + Bu[:, T - 1 + h:T + h]
                fwd.append(z)
        return ad.concat(back + fwd, axis=1)

    def elbo_loss(self, x, u, noise, T=None, kl_weight=None):
        """Negative bound on (B, T+H) windows; returns (loss tensor, diagnostics).

        Squared decoder error over reconstruction and prediction steps is
        measured in normalized state units.
        """
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        T = self.config.T if T is None else T
        L = x.shape[1]
        H = L - T
        if H < 0:
            raise ValueError(f"window of {L} states is shorter than the context T={T}")
        if u.shape[1] != L - 1:
            raise ad.ShapeError(f"need {L - 1} actions for {L} states, got {u.shape[1]}")
        enc = self.encode_sequence(x[:, :T], u[:, :T - 1])
        path = self.infer_observations(enc, u, noise)
        A, Bm, A_inv = self.fit_dynamics(path.g, u)
        z = self.rollout_latents(path.g, u, A, Bm, A_inv, H)
        err = ad.square(self.decode_normalized(z) - self.normalize(x))
        batch = x.shape[0]
        recon = err[:, :T].sum() * (1.0 / batch)
        kl = gaussian_kl(path.posterior, path.prior).sum() * (1.0 / batch)
        kl_weight = self.config.kl_weight if kl_weight is None else kl_weight
        loss = recon + kl * kl_weight
        pred_val = 0.0
        if H:
            pred = err[:, T:].sum() * (1.0 / batch)
            loss = loss + pred
            pred_val = pred.item()
        diag = {"recon": recon.item(), "pred": pred_val, "kl": kl.item(), "total": loss.item()}
        return loss, diag

    def loss_and_grads(self, x, u, noise, T=None, kl_weight=None):
        with ad.enable_grad():
            loss, diag = self.elbo_loss(x, u, noise, T, kl_weight)
        grads = ad.grad(loss, self.params.tensors())
        return diag, dict(zip(self.params.names(), grads))

    # -- sampling ---------------------------------------------------------------
    def sample_paths(self, x, u, noise):
        """Posterior observation samples for a batch of context windows (no graph)."""
        with ad.no_grad():
            enc = self.encode_sequence(x, u)
            return self.infer_observations(enc, u, noise)

    def sample_ensemble(self, x, u, k, seed):
        """k linear models (with latent paths) for one context sequence x (T, n), u (T-1, p)."""
        x = np.asarray(x, float)
        u = np.asarray(u, float).reshape(x.shape[0] - 1, -1)
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((k, x.shape[0], self.config.latent_dim))
        path = self.sample_paths(np.broadcast_to(x, (k,) + x.shape),
                                 np.broadcast_to(u, (k,) + u.shape), noise)
        members = []
        for i in range(k):
            model = derive_dynamics(path.g.data[i], u, self.config.ridge,
                                    self.config.inverse_fit)
            members.append(EnsembleMember(model, backward_latents(model, u)))
        return members

    def predict(self, x, u, horizon, n_samples, seed, window=None):
        """Sampled state predictions for ``horizon`` steps past each context.

        x (N, C, n) contexts, u (N, C-1+horizon, p) actions; returns
        (N, n_samples, horizon, n) in raw units. Each sample draws one
        observation path, fits its own linear model and rolls forward from g_T.
        Inference uses the most recent ``window`` context states (default: the
        training length T; 0 means the whole context).
        """
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        N, C, n = x.shape
        if u.shape[:2] != (N, C - 1 + horizon):
            raise ad.ShapeError(f"actions must be ({N}, {C - 1 + horizon}, p), got {u.shape}")
        window = self.config.T if window is None else window
        if 0 < window < C:
            x, u = x[:, C - window:], u[:, C - window:]
        T = x.shape[1]
        S, m = n_samples, self.config.latent_dim
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((N * S, T, m))
        xs = np.repeat(x, S, axis=0)
        us = np.repeat(u, S, axis=0)
        path = self.sample_paths(xs, us[:, :T - 1], noise)
        z = np.empty((N * S, horizon, m))
        for i in range(N * S):
            mdl = derive_dynamics(path.g.data[i], us[i, :T - 1], self.config.ridge,
                                  self.config.inverse_fit)
            z[i] = mdl.rollout(mdl.g_T, us[i, T - 1:])[1:]
        with ad.no_grad():
            out = self.decode_mean(Tensor(z)).data
        return out.reshape(N, S, horizon, n)

    def state_arrays(self):
        arrays = dict(self.params.arrays())
        arrays["norm.mean"] = self.state_mean
        arrays["norm.std"] = self.state_std
        return arrays

    def load_state_arrays(self, arrays):
        arrays = dict(arrays)
        self.state_mean = np.asarray(arrays.pop("norm.mean"), float)
        self.state_std = np.asarray(arrays.pop("norm.std"), float)
        self.params.load_arrays(arrays)


def derive_dynamics(g, u, ridge=linsys.DEFAULT_RIDGE, inverse_fit="backward"):
    """LinearModel from one sampled observation sequence g (T, m) and actions (T-1, p)."""
    s = linsys.build_snapshots(g, u)
    A, B = linsys.fit_forward(s, ridge)
    A_inv = linsys.fit_inverse(s, B, ridge, inverse_fit)
    return linsys.LinearModel(A, B, A_inv, np.array(g[-1], dtype=float))


def backward_latents(model, u):
    """z_T = g_T, z_t = A_inv (z_{t+1} - B u_t); returns the (T, m) path."""
    u = np.asarray(u, float).reshape(len(u), -1)
    T = u.shape[0] + 1
    z = np.empty((T, model.m))
    z[-1] = model.g_T
    for t in range(T - 2, -1, -1):
        z[t] = model.A_inv @ (z[t + 1] - model.B @ u[t])
        if not np.isfinite(z[t]).all():
            raise ad.NonFiniteError("backward latent recursion diverged")
    return LatentPath(z)


# ---------------------------------------------------------------------------
# training

@dataclass
class LossRow:
    epoch: int
    recon: float
    pred: float
    kl: float
    total: float


@dataclass
class TrainResult:
    model: DVK
    curve: list = field(default_factory=list)


def _as_arrays(dataset):
    if isinstance(dataset, tuple):
        return np.asarray(dataset[0], float), np.asarray(dataset[1], float)
    return stack_trials(dataset)


def sample_windows(states, actions, batch, length, rng):
    """Random (batch, length) windows of states and matching (length-1) actions."""
    N, L = states.shape[:2]
    idx = rng.integers(0, N, size=batch)
    start = rng.integers(0, L - length + 1, size=batch)
    offs = start[:, None] + np.arange(length)[None]
    xs = states[idx[:, None], offs]
    us = actions[idx[:, None], offs[:, :-1]]
    return xs, us


CHECKPOINT_PARAMS = "params.dvk"
CHECKPOINT_OPTIM = "optimizer.dvk"
CHECKPOINT_CONFIG = "config.txt"
CHECKPOINT_CURVE = "loss.csv"


def save_checkpoint(directory, model, optimizer=None, curve=None):
    os.makedirs(directory, exist_ok=True)
    ad.save_tensors(os.path.join(directory, CHECKPOINT_PARAMS), model.state_arrays())
    with open(os.path.join(directory, CHECKPOINT_CONFIG), "w") as f:
        f.write(model.config.to_text())
    if optimizer is not None:
        ad.save_tensors(os.path.join(directory, CHECKPOINT_OPTIM), optimizer.state_arrays())
    if curve is not None:
        write_loss_csv(os.path.join(directory, CHECKPOINT_CURVE), curve)


def load_checkpoint(directory):
    with open(os.path.join(directory, CHECKPOINT_CONFIG)) as f:
        config = DvkConfig.from_text(f.read())
    model = DVK(config)
    model.load_state_arrays(ad.load_tensors(os.path.join(directory, CHECKPOINT_PARAMS)))
    return model


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "recon", "pred", "kl", "total"])
        for r in curve:
            w.writerow([int(r.epoch)] + [repr(float(v)) for v in (r.recon, r.pred, r.kl, r.total)])


def read_loss_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [LossRow(int(r["epoch"]), float(r["recon"]), float(r["pred"]), float(r["kl"]),
                    float(r["total"])) for r in rows]


def kl_schedule(config, epoch, step):
    """KL weight ramped linearly from 0 over the first ``kl_warmup_epochs`` epochs."""
    if config.kl_warmup_epochs <= 0:
        return config.kl_weight
    done = (epoch * config.steps_per_epoch + step) / (config.kl_warmup_epochs * config.steps_per_epoch)
    return config.kl_weight * min(1.0, done)


def train(dataset, config, checkpoint_dir=None, resume=False, model=None, callback=None):
    """Minibatch Adam on random (T+H)-step windows of ``dataset``.

    ``dataset`` is a list of :class:`Trajectory` or a (states, actions) pair.
    Each epoch draws its windows from an RNG keyed on (seed, epoch), so a
    resumed run continues exactly where an uninterrupted one would be.
    Passing ``model`` fine-tunes it instead of starting fresh.
    """
    states, actions = _as_arrays(dataset)
    window = config.T + config.H
    if states.shape[1] < window:
        raise ValueError(f"trials have {states.shape[1]} steps, need at least T+H={window}")
    if states.shape[-1] != config.state_dim or actions.shape[-1] != config.action_dim:
        raise ValueError("dataset dimensions do not match the config")

    curve = []
    if resume and checkpoint_dir and os.path.exists(os.path.join(checkpoint_dir, CHECKPOINT_PARAMS)):
        model = load_checkpoint(checkpoint_dir)
        model.config = config
        optimizer = Adam(model.params, AdamConfig(lr=config.lr, clip_norm=config.clip_norm))
        optim_path = os.path.join(checkpoint_dir, CHECKPOINT_OPTIM)
        if os.path.exists(optim_path):
            optimizer.load_state_arrays(ad.load_tensors(optim_path))
        curve_path = os.path.join(checkpoint_dir, CHECKPOINT_CURVE)
        if os.path.exists(curve_path):
            curve = read_loss_csv(curve_path)
    else:
        if model is None:
            model = DVK(config)
            model.fit_normalization(states)
        else:
            model.config = config
        optimizer = Adam(model.params, AdamConfig(lr=config.lr, clip_norm=config.clip_norm))

    start_epoch = curve[-1].epoch + 1 if curve else 0
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 104729])
        sums = np.zeros(4)
        for i in range(config.steps_per_epoch):
            xs, us = sample_windows(states, actions, config.batch_size, window, rng)
            noise = rng.standard_normal((config.batch_size, config.T, config.latent_dim))
            backup = model.params.arrays()
            try:
                diag, grads = model.loss_and_grads(xs, us, noise,
                                                   kl_weight=kl_schedule(config, epoch, i))
                optimizer.step(grads)
            except (ad.NonFiniteError, linsys.SingularSystemError) as e:
                for name, value in backup.items():
                    model.params[name].data = value
                if checkpoint_dir:
                    save_checkpoint(checkpoint_dir, model, optimizer, curve)
                raise TrainingError(f"epoch {epoch}: {e}; last good parameters saved") from e
            sums += [diag["recon"], diag["pred"], diag["kl"], diag["total"]]
        row = LossRow(epoch, *(float(v) for v in sums / config.steps_per_epoch))
        curve.append(row)
        log.info("epoch %d recon %.4f pred %.4f kl %.4f total %.4f",
                 epoch, row.recon, row.pred, row.kl, row.total)
        if callback is not None:
            callback(row)
        if checkpoint_dir and ((epoch + 1) % config.checkpoint_every == 0
                               or epoch + 1 == config.epochs):
            save_checkpoint(checkpoint_dir, model, optimizer, curve)
    return TrainResult(model, curve)
