"""Uncertainty-aware trajectory optimization over ensembles of latent linear models.

Actions are optimized in an unconstrained coordinate ``u_tilde`` with
``u = u_max * tanh(u_tilde)``. An ensemble of k models is treated as one
augmented system whose state stacks every member's latent; the augmented
transition matrix is block diagonal, so products with it are done blockwise.
The planning cost over a horizon H is

    sum_{h<H} c(decode(z_h), u_h) + c(decode(z_H), 0)

averaged over members (expected mode) or taken from a single member.
"""
from __future__ import annotations

import csv
import functools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from . import autodiff as ad
from . import envs, linsys

log = logging.getLogger(__name__)


# tanh(10) = 1 - 4e-9, so clipped actions stay strictly inside the bounds
U_TILDE_MAX = 10.0


class PlannerError(RuntimeError):
    pass


@dataclass
class QuadCost:
    """Local quadratic cost model; arrays carry a leading axis over expansion points."""
    c0: np.ndarray
    c_z: np.ndarray
    c_zz: np.ndarray
    c_u: np.ndarray
    c_uu: np.ndarray
    c_zu: np.ndarray

    def __getitem__(self, i):
        return QuadCost(self.c0[i], self.c_z[i], self.c_zz[i], self.c_u[i], self.c_uu[i],
                        self.c_zu[i])


class DvkDecoder:
    """Raw-unit decoder mean of a trained model with closed-form derivatives."""

    def __init__(self, dvk):
        self.dvk = dvk
        self.std = dvk.state_std
        self.mean = dvk.state_mean

    def __call__(self, z):
        return self.dvk.decode_mean(z)

    def values(self, Z):
        return self.dvk.decoder.numpy_forward(Z) * self.std + self.mean

    def derivatives(self, Z, weights=None):
        w = None if weights is None else weights * self.std
        y, J, Hw = self.dvk.decoder.derivatives(Z, w)
        return y * self.std + self.mean, J * self.std[:, None], Hw


class LatentCost:
    """State-space cost pulled back through a decoder.

    ``decoder`` maps a (N, m) tensor to (N, n) state means, or is ``None`` for
    the identity. Decoders exposing ``values``/``derivatives`` (see
    :class:`DvkDecoder`) skip the autodiff engine. ``cost_fn(X, U)`` returns
    ``(c, c_x, c_xx, c_u, c_uu)`` row-wise.
    """

    def __init__(self, decoder, cost_fn, gauss_newton=False):
        self.decoder = decoder
        self.cost_fn = cost_fn
        self.gauss_newton = gauss_newton
        self._closed_form = hasattr(decoder, "values") and hasattr(decoder, "derivatives")

    def decode(self, Z):
        if self.decoder is None:
            return Z
        if self._closed_form:
            return self.decoder.values(Z)
        with ad.no_grad():
            return self.decoder(ad.Tensor(Z)).data

    def value(self, Z, U):
        return self.cost_fn(self.decode(Z), U)[0]

    def expand(self, Z, U):
        Z = np.atleast_2d(Z)
        U = np.atleast_2d(U)
        N, m = Z.shape
        if self.decoder is None:
            X = Z
            J = np.broadcast_to(np.eye(m), (N, m, m))
        elif self._closed_form:
            X, J, _ = self.decoder.derivatives(Z)
        else:
            X, J = ad.batch_jacobian(self.decoder, Z)
        c, cx, cxx, cu, cuu = self.cost_fn(X, U)
        c_z = np.einsum("ni,nim->nm", cx, J)
        c_zz = np.einsum("nim,nij,njk->nmk", J, cxx, J)
        if self.decoder is not None and not self.gauss_newton:
            if self._closed_form:
                c_zz = c_zz + self.decoder.derivatives(Z, cx)[2]
            else:
                c_zz = c_zz + ad.batch_weighted_hessian(self.decoder, Z, cx)
        if not np.all(np.isfinite(c_zz)):
            raise ad.NonFiniteError("non-finite cost Hessian")
        c_zu = np.zeros((N, m, U.shape[1]))
        return QuadCost(c, c_z, c_zz, cu, cuu, c_zu)


def quad_cost_approx(decoder, z, u, env_cost, gauss_newton=False):
    """Quadratic expansion of ``env_cost(decoder(z), u)`` at a single point."""
    return LatentCost(decoder, env_cost, gauss_newton).expand(
        np.asarray(z, float)[None], np.atleast_1d(np.asarray(u, float))[None])[0]


def env_cost_fn(spec):
    return functools.partial(envs.cost_terms, spec)


class QuadraticCost:
    """c(x, u) = (x - x_goal)^T Q (x - x_goal) + u^T R u."""

    def __init__(self, Q, R, x_goal=None):
        self.Q = np.atleast_2d(np.asarray(Q, float))
        self.R = np.atleast_2d(np.asarray(R, float))
        self.x_goal = np.zeros(len(self.Q)) if x_goal is None else np.asarray(x_goal, float)

    def __call__(self, X, U):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        N = X.shape[0]
        d = X - self.x_goal
        c = np.einsum("ni,ij,nj->n", d, self.Q, d) + np.einsum("ni,ij,nj->n", U, self.R, U)
        cx = d @ (self.Q + self.Q.T)
        cu = U @ (self.R + self.R.T)
        cxx = np.broadcast_to(self.Q + self.Q.T, (N,) + self.Q.shape).copy()
        cuu = np.broadcast_to(self.R + self.R.T, (N,) + self.R.shape).copy()
        return c, cx, cxx, cu, cuu


# ---------------------------------------------------------------------------
# DDP

@dataclass
class DdpOptions:
    max_iter: int = 50
    line_search: tuple = tuple(2.0 ** -i for i in range(11))
    mu_init: float = 1e-6
    mu_min: float = 1e-6
    mu_max: float = 1e10
    mu_factor: float = 10.0
    tol: float = 1e-6
    max_outer: int = 10


@dataclass
class SquashedActionSeq:
    u_tilde: np.ndarray
    u_max: np.ndarray

    @property
    def u(self):
        return self.u_max * np.tanh(self.u_tilde)


@dataclass
class DdpResult:
    actions: SquashedActionSeq
    predicted_cost: float
    iterations: int
    converged: bool
    member_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _stack_models(models):
    A = np.stack([mdl.A for mdl in models])
    B = np.stack([mdl.B for mdl in models])
    if len({a.shape for a in A}) != 1 or len({b.shape for b in B}) != 1:
        raise ValueError("ensemble members have mismatched dimensions")
    return A, B


def rollout(A, B, z0, U):
    """Latent trajectories (k, H+1, m) for every member under actions U (H, p)."""
    k, m = z0.shape
    Z = np.empty((k, len(U) + 1, m))
    Z[:, 0] = z0
    BU = np.einsum("kij,hj->khi", B, U)
    for h in range(len(U)):
        Z[:, h + 1] = np.einsum("kij,kj->ki", A, Z[:, h]) + BU[:, h]
    return Z


def member_costs(cost, Z, U):
    """Per-member trajectory cost, (k,)."""
    k, H1, m = Z.shape
    H = H1 - 1
    p = U.shape[1]
    U_all = np.concatenate([np.broadcast_to(U, (k, H, p)), np.zeros((k, 1, p))], axis=1)
    vals = cost.value(Z.reshape(-1, m), U_all.reshape(-1, p)).reshape(k, H1)
    return vals.sum(axis=1)


class _Problem:
    def __init__(self, models, z1s, cost, u_max):
        self.A, self.B = _stack_models(models)
        self.k, self.m, _ = self.A.shape
        self.p = self.B.shape[2]
        self.z1 = np.asarray(z1s, float).reshape(self.k, self.m)
        self.cost = cost
        self.u_max = np.broadcast_to(np.asarray(u_max, float), (self.p,)).copy()
        self.At = np.swapaxes(self.A, 1, 2)

    def simulate(self, ut):
        U = self.u_max * np.tanh(ut)
        Z = rollout(self.A, self.B, self.z1, U)
        costs = member_costs(self.cost, Z, U)
        return Z, costs

    # products with the block-diagonal augmented transition matrix
    def _At_times(self, v):
        if self.k == 1:
            return self.At[0] @ v
        return np.matmul(self.At, v.reshape(self.k, self.m, 1)).reshape(-1)

    def _At_V_A(self, V):
        if self.k == 1:
            return self.At[0] @ V @ self.A[0]
        k, m = self.k, self.m
        V4 = V.reshape(k, m, k, m).transpose(0, 2, 1, 3)
        return (self.At[:, None] @ V4 @ self.A[None]).transpose(0, 2, 1, 3).reshape(k * m, k * m)

    def _times_A(self, M):
        """Rows of M (r, km) times the augmented A."""
        if self.k == 1:
            return M @ self.A[0]
        r = M.shape[0]
        return np.matmul(M.reshape(r, self.k, 1, self.m), self.A[None]).reshape(r, -1)

    def forward(self, Z, ut, kff, Kfb, alpha):
        """Closed-loop rollout around the reference (Z, ut)."""
        H = len(ut)
        z = self.z1.copy()
        new_ut = np.empty_like(ut)
        Zn = np.empty_like(Z)
        Zn[:, 0] = z
        for h in range(H):
            dz = (z - Z[:, h]).reshape(-1)
            new_ut[h] = np.clip(ut[h] + alpha * kff[h] + Kfb[h] @ dz, -U_TILDE_MAX, U_TILDE_MAX)
            u = self.u_max * np.tanh(new_ut[h])
            z = np.einsum("kij,kj->ki", self.A, z) + self.B @ u
            Zn[:, h + 1] = z
        U = self.u_max * np.tanh(new_ut)
        return Zn, new_ut, member_costs(self.cost, Zn, U)

    def expand(self, Z, ut):
        """Local models of cost and squashed dynamics along the reference (Z, ut)."""
        k, m, p = self.k, self.m, self.p
        H = len(ut)
        km = k * m
        th = np.tanh(ut)
        sech2 = 1.0 - th * th
        du = self.u_max * sech2                   # du/du_tilde, (H, p)
        d2u = -2.0 * self.u_max * th * sech2      # d2u/du_tilde2
        U = self.u_max * th

        U_all = np.concatenate([np.broadcast_to(U, (k, H, p)), np.zeros((k, 1, p))], axis=1)
        q = self.cost.expand(Z.reshape(-1, m), U_all.reshape(-1, p))
        c_z = q.c_z.reshape(k, H + 1, m) / k
        c_zz = q.c_zz.reshape(k, H + 1, m, m) / k
        c_u = q.c_u.reshape(k, H + 1, p).mean(axis=0)
        c_uu = q.c_uu.reshape(k, H + 1, p, p).mean(axis=0)
        c_zu = q.c_zu.reshape(k, H + 1, m, p) / k

        # per-step terms, flattened to the augmented state
        lx = c_z.transpose(1, 0, 2).reshape(H + 1, km)
        lxx = np.zeros((H + 1, k, m, k, m))
        idx = np.arange(k)
        lxx[:, idx, :, idx, :] = c_zz
        lxx = lxx.reshape(H + 1, km, km)
        B_flat = self.B.reshape(km, p)
        fu_all = B_flat[None] * du[:, None, :]                       # (H, km, p)
        lu_all = c_u[:H] * du
        luu_all = du[:, :, None] * c_uu[:H] * du[:, None, :]
        luu_all[:, np.arange(p), np.arange(p)] += c_u[:H] * d2u
        lxu_all = c_zu[:, :H].transpose(1, 0, 2, 3).reshape(H, km, p) * du[:, None, :]
        return dict(d2u=d2u, lx=lx, lxx=lxx, B_flat=B_flat, fu_all=fu_all, lu_all=lu_all,
                    luu_all=luu_all, lxu_all=lxu_all)

    def backward(self, ex, mu):
        """Gains and expected improvement, or None when Q_uu cannot be made positive definite."""
        p = self.p
        km = self.k * self.m
        d2u, lx, lxx, B_flat = ex["d2u"], ex["lx"], ex["lxx"], ex["B_flat"]
        fu_all, lu_all, luu_all, lxu_all = ex["fu_all"], ex["lu_all"], ex["luu_all"], ex["lxu_all"]
        H = len(fu_all)
        eye_p = np.eye(p)

        Vx = lx[H]
        Vxx = lxx[H]
        kff = np.zeros((H, p))
        Kfb = np.zeros((H, p, km))
        dV = np.zeros(2)
        for h in range(H - 1, -1, -1):
            fu = fu_all[h]
            Qx = lx[h] + self._At_times(Vx)
            Qu = lu_all[h] + fu.T @ Vx
            fuV = fu.T @ Vxx
            # second-order term of the squashed input: V_x . d2f/du_tilde2 (diagonal in u)
            Quu = luu_all[h] + fuV @ fu + np.diag((Vx @ B_flat) * d2u[h])
            Qxx = lxx[h] + self._At_V_A(Vxx)
            Qux = self._times_A(fuV) + lxu_all[h].T
            Quu = 0.5 * (Quu + Quu.T)
            try:
                np.linalg.cholesky(Quu + mu * eye_p)
            except np.linalg.LinAlgError:
                return None
            sol = -np.linalg.solve(Quu + mu * eye_p, np.concatenate([Qu[:, None], Qux], axis=1))
            kf, Kf = sol[:, 0], sol[:, 1:]
            kff[h], Kfb[h] = kf, Kf
            dV += [kf @ Qu, 0.5 * kf @ Quu @ kf]
            KtQuu = Kf.T @ Quu
            Vx = Qx + KtQuu @ kf + Kf.T @ Qu + Qux.T @ kf
            Vxx = Qxx + KtQuu @ Kf + Kf.T @ Qux + Qux.T @ Kf
            Vxx = 0.5 * (Vxx + Vxx.T)
        return kff, Kfb, dV


def ddp_solve(models, z1s, cost, H, u_init=None, u_max=1.0, mode="expected", options=None):
    """Minimize the member-averaged planning cost with shared actions.

    ``models`` are LinearModels, ``z1s`` their starting latents (k, m),
    ``cost`` a :class:`LatentCost`. ``u_init`` is given in squashed units
    (it is mapped through atanh). Only ``mode="expected"`` is handled here;
    see :func:`worst_case_solve`.
    """
    if mode != "expected":
        raise ValueError("ddp_solve handles the expected-cost mode; use worst_case_solve")
    if not models:
        raise ValueError("need at least one model")
    opts = options or DdpOptions()
    prob = _Problem(models, z1s, cost, u_max)
    ut = _to_tilde(u_init, H, prob.p, prob.u_max)
    Z, costs = prob.simulate(ut)
    J = costs.mean()
    mu = opts.mu_init
    converged = False
    it = 0
    ex = None
    while it < opts.max_iter:
        it += 1
        if ex is None:
            ex = prob.expand(Z, ut)
        bw = prob.backward(ex, mu)
        if bw is None:
            mu = max(mu * opts.mu_factor, opts.mu_min)
            if mu > opts.mu_max:
                raise PlannerError("Q_uu not positive definite at maximum regularization")
            continue
        kff, Kfb, dV = bw
        expected = -(dV[0] + dV[1])
        if expected <= opts.tol * max(abs(J), 1e-12) * 1e-3:
            converged = True
            break
        accepted = False
        for alpha in opts.line_search:
            Zn, utn, cn = prob.forward(Z, ut, kff, Kfb, alpha)
            Jn = cn.mean()
            if np.isfinite(Jn) and Jn < J:
                accepted = True
                break
        if not accepted:
            mu = max(mu * opts.mu_factor, opts.mu_min)
            if mu > opts.mu_max:
                converged = True  # no descent direction left at any step size
                break
            continue
        improvement = (J - Jn) / max(abs(J), 1e-12)
        Z, ut, costs, J = Zn, utn, cn, Jn
        ex = None
        mu = max(mu / opts.mu_factor, opts.mu_min)
        if improvement < opts.tol:
            converged = True
            break
    if not np.isfinite(J):
        raise PlannerError("divergent forward pass")
    return DdpResult(SquashedActionSeq(ut, prob.u_max), float(J), it, converged, costs)


def _to_tilde(u_init, H, p, u_max):
    if u_init is None:
        return np.zeros((H, p))
    u = np.asarray(u_init, float).reshape(H, p)
    with np.errstate(divide="ignore"):
        return np.clip(np.arctanh(np.clip(u / u_max, -1, 1)), -U_TILDE_MAX, U_TILDE_MAX)


def worst_case_solve(models, z1s, cost, H, u_init=None, u_max=1.0, options=None):
    """Alternately optimize against whichever member currently predicts the largest cost.

    Stops when the worst member repeats or after ``max_outer`` rounds and
    returns the visited action sequence with the lowest worst-case cost.
    """
    opts = options or DdpOptions()
    z1s = np.asarray(z1s, float).reshape(len(models), -1)
    if len(models) == 1:
        return ddp_solve(models, z1s, cost, H, u_init, u_max, "expected", opts)
    prob = _Problem(models, z1s, cost, u_max)
    ut = _to_tilde(u_init, H, prob.p, prob.u_max)
    _, costs = prob.simulate(ut)
    best = DdpResult(SquashedActionSeq(ut, prob.u_max), float(costs.max()), 0, False, costs)
    worst = int(np.argmax(costs))
    total_iters = 0
    converged = False
    for _ in range(opts.max_outer):
        res = ddp_solve([models[worst]], z1s[worst:worst + 1], cost, H,
                        prob.u_max * np.tanh(ut), u_max, "expected", opts)
        total_iters += res.iterations
        ut = res.actions.u_tilde
        _, costs = prob.simulate(ut)
        if costs.max() < best.predicted_cost:
            best = DdpResult(SquashedActionSeq(ut.copy(), prob.u_max), float(costs.max()),
                             total_iters, False, costs)
        new_worst = int(np.argmax(costs))
        if new_worst == worst:
            converged = True
            break
        worst = new_worst
    best.iterations = total_iters
    best.converged = converged
    return best


# ---------------------------------------------------------------------------
# MPC

@dataclass
class EpisodeRecord:
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    iterations: np.ndarray
    mode: str
    k: int
    failures: list = field(default_factory=list)

    def trajectory(self):
        return envs.Trajectory(self.states, self.actions[:-1])


def plan(dvk, spec, ctx_x, ctx_u, k, mode, H, seed, u_prev=None, options=None,
         gauss_newton=False):
    members = dvk.sample_ensemble(ctx_x, ctx_u, k, seed)
    models = [mem.model for mem in members]
    z1s = np.stack([mem.latents.z[-1] for mem in members])
    cost = LatentCost(DvkDecoder(dvk), env_cost_fn(spec), gauss_newton)
    if mode == "worst" and k >= 2:
        return worst_case_solve(models, z1s, cost, H, u_prev, spec.u_max, options)
    return ddp_solve(models, z1s, cost, H, u_prev, spec.u_max, "expected", options)


def mpc_run(spec, dvk, k, mode, episode_len, T, H, seed, options=None, gauss_newton=False):
    """Closed-loop episode: random actions until T states are observed, then replan each step."""
    if mode not in ("expected", "worst"):
        raise ValueError(f"unknown planner mode {mode!r}")
    if mode == "worst" and k < 2:
        log.warning("worst-case planning needs k >= 2; using expected cost")
        mode = "expected"
    if episode_len < T:
        raise ValueError("episode_len must be at least T")
    seed = [int(v) for v in np.atleast_1d(seed)]
    rng = np.random.default_rng(seed + [0x5EED])
    n, p = spec.state_dim, spec.action_dim
    states = np.empty((episode_len, n))
    actions = np.zeros((episode_len, p))
    costs = np.empty(episode_len)
    iters = np.zeros(episode_len, dtype=int)
    failures = []
    x = envs.reset(spec, rng)
    warm = None
    for t in range(episode_len):
        states[t] = x
        if t < T - 1:
            u = rng.uniform(-spec.u_max, spec.u_max, size=p)
        else:
            ctx_x = states[t - T + 1:t + 1]
            ctx_u = actions[t - T + 1:t]
            try:
                res = plan(dvk, spec, ctx_x, ctx_u, k, mode, H, seed + [t], warm,
                           options, gauss_newton)
                u = res.actions.u[0]
                iters[t] = res.iterations
                warm = np.vstack([res.actions.u[1:], np.zeros((1, p))])
            except (PlannerError, linsys.SingularSystemError, ad.NonFiniteError,
                    np.linalg.LinAlgError) as e:
                log.warning("planner failed at step %d: %s", t, e)
                failures.append((t, str(e)))
                u = np.zeros(p)
                warm = None
        actions[t] = u
        costs[t] = envs.cost(spec, x, u)
        x = envs.step(spec, x, u)
    return EpisodeRecord(states, actions, costs, iters, mode, k, failures)


def write_episode_csv(path, episodes):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if not episodes:
            w.writerow(["episode", "t"])
            return
        n = episodes[0].states.shape[1]
        p = episodes[0].actions.shape[1]
        w.writerow(["episode", "t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(p)]
                   + ["cost", "mode", "k", "iterations"])
        for e, ep in enumerate(episodes):
            for t in range(len(ep.costs)):
                w.writerow([e, t] + [repr(float(v)) for v in ep.states[t]]
                           + [repr(float(v)) for v in ep.actions[t]]
                           + [repr(float(ep.costs[t])), ep.mode, ep.k, int(ep.iterations[t])])
