"""Pendulum, continuous cartpole and continuous acrobot simulators plus dataset I/O.

Dynamics constants follow the classic Gym implementations. States are exposed
with angles embedded as (cos, sin); internally the integrators work on raw
angles recovered with ``atan2``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

DATASET_MAGIC = b"DVKD"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    dt: float
    u_max: float
    integrator: str = "euler"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


@dataclass
class Trajectory:
    states: np.ndarray   # (T, n)
    actions: np.ndarray  # (T-1, p)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float).reshape(len(self.actions), -1)
        if self.actions.shape[0] != self.states.shape[0] - 1:
            raise ValueError("a trajectory needs exactly one action fewer than states")
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self):
        return self.states.shape[0]


# ---------------------------------------------------------------------------
# pendulum: theta = 0 upright

PEND_G, PEND_M, PEND_L, PEND_MAX_SPEED = 10.0, 1.0, 1.0, 8.0


def _pend_accel(th, u):
    return 3.0 * PEND_G / (2.0 * PEND_L) * np.sin(th) + 3.0 / (PEND_M * PEND_L ** 2) * u


def _pend_step(spec, x, u):
    th = np.arctan2(x[1], x[0])
    thdot = x[2]
    u = float(u[0])
    if spec.integrator == "euler":
        # semi-implicit, as in Gym
        thdot = thdot + _pend_accel(th, u) * spec.dt
        th = th + thdot * spec.dt
        thdot = np.clip(thdot, -PEND_MAX_SPEED, PEND_MAX_SPEED)
    else:
        s = _rk4(lambda y: np.array([y[1], _pend_accel(y[0], u)]), np.array([th, thdot]), spec.dt)
        th, thdot = s
    return np.array([np.cos(th), np.sin(th), thdot])


def _pend_reset(rng):
    th = rng.uniform(-np.pi, np.pi)
    thdot = rng.uniform(-1.0, 1.0)
    return np.array([np.cos(th), np.sin(th), thdot])


def pendulum_energy(x):
    """Conserved quantity of the unforced pendulum (per unit inertia scaling)."""
    th = np.arctan2(x[1], x[0])
    return 0.5 * x[2] ** 2 + 3.0 * PEND_G / (2.0 * PEND_L) * (np.cos(th) - 1.0)


def _pend_cost_terms(X, U):
    # (1 - c)^2 + s^2 equals 2(1 - cos th) on the circle and stays convex off it
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    N = X.shape[0]
    c = (1.0 - X[:, 0]) ** 2 + X[:, 1] ** 2 + 0.1 * X[:, 2] ** 2 + 0.001 * np.sum(U ** 2, axis=1)
    cx = np.stack([-2.0 * (1.0 - X[:, 0]), 2.0 * X[:, 1], 0.2 * X[:, 2]], axis=1)
    cxx = np.zeros((N, 3, 3))
    cxx[:, 0, 0] = 2.0
    cxx[:, 1, 1] = 2.0
    cxx[:, 2, 2] = 0.2
    cu = 0.002 * U
    cuu = np.broadcast_to(0.002 * np.eye(U.shape[1]), (N, U.shape[1], U.shape[1])).copy()
    return c, cx, cxx, cu, cuu


# ---------------------------------------------------------------------------
# cartpole: theta = 0 upright, continuous force in +-10

CP_G, CP_MC, CP_MP, CP_L = 9.8, 1.0, 0.1, 0.5


def _cp_deriv(s, force):
    pos, vel, th, thdot = s
    total = CP_MC + CP_MP
    pml = CP_MP * CP_L
    cos, sin = np.cos(th), np.sin(th)
    temp = (force + pml * thdot ** 2 * sin) / total
    thacc = (CP_G * sin - cos * temp) / (CP_L * (4.0 / 3.0 - CP_MP * cos ** 2 / total))
    xacc = temp - pml * thacc * cos / total
    return np.array([vel, xacc, thdot, thacc])


def _cp_step(spec, x, u):
    s = np.array([x[0], x[1], np.arctan2(x[3], x[2]), x[4]])
    force = float(u[0])
    if spec.integrator == "euler":
        d = _cp_deriv(s, force)
        s = s + spec.dt * d
    else:
        s = _rk4(lambda y: _cp_deriv(y, force), s, spec.dt)
    return np.array([s[0], s[1], np.cos(s[2]), np.sin(s[2]), s[3]])


def _cp_reset(rng):
    s = rng.uniform(-0.05, 0.05, size=4)
    return np.array([s[0], s[1], np.cos(s[2]), np.sin(s[2]), s[3]])


def _cp_cost_terms(X, U):
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    N = X.shape[0]
    w = np.array([0.01, 0.0, 1.0, 1.0, 0.1])
    target = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    d = X - target
    c = np.sum(w * d ** 2, axis=1) + 1e-4 * np.sum(U ** 2, axis=1)
    cx = 2.0 * w * d
    cxx = np.broadcast_to(np.diag(2.0 * w), (N, 5, 5)).copy()
    cu = 2e-4 * U
    cuu = np.broadcast_to(2e-4 * np.eye(U.shape[1]), (N, U.shape[1], U.shape[1])).copy()
    return c, cx, cxx, cu, cuu


# ---------------------------------------------------------------------------
# acrobot: theta1 = 0 hanging, continuous torque in +-1, RK4

AC_L1, AC_M1, AC_M2, AC_LC1, AC_LC2, AC_I1, AC_I2, AC_G = 1.0, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 9.8
AC_MAX_VEL1, AC_MAX_VEL2 = 4 * np.pi, 9 * np.pi


def _ac_deriv(s, a):
    th1, th2, dth1, dth2 = s
    m1, m2, l1, lc1, lc2, I1, I2, g = AC_M1, AC_M2, AC_L1, AC_LC1, AC_LC2, AC_I1, AC_I2, AC_G
    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * np.cos(th2)) + I1 + I2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * np.cos(th2)) + I2
    phi2 = m2 * lc2 * g * np.cos(th1 + th2 - np.pi / 2.0)
    phi1 = (-m2 * l1 * lc2 * dth2 ** 2 * np.sin(th2)
            - 2 * m2 * l1 * lc2 * dth2 * dth1 * np.sin(th2)
            + (m1 * lc1 + m2 * l1) * g * np.cos(th1 - np.pi / 2.0) + phi2)
    ddth2 = ((a + d2 / d1 * phi1 - m2 * l1 * lc2 * dth1 ** 2 * np.sin(th2) - phi2)
             / (m2 * lc2 ** 2 + I2 - d2 ** 2 / d1))
    ddth1 = -(d2 * ddth2 + phi1) / d1
    return np.array([dth1, dth2, ddth1, ddth2])


def _ac_step(spec, x, u):
    s = np.array([np.arctan2(x[1], x[0]), np.arctan2(x[3], x[2]), x[4], x[5]])
    a = float(u[0])
    if spec.integrator == "rk4":
        s = _rk4(lambda y: _ac_deriv(y, a), s, spec.dt)
    else:
        s = s + spec.dt * _ac_deriv(s, a)
    s[2] = np.clip(s[2], -AC_MAX_VEL1, AC_MAX_VEL1)
    s[3] = np.clip(s[3], -AC_MAX_VEL2, AC_MAX_VEL2)
    return np.array([np.cos(s[0]), np.sin(s[0]), np.cos(s[1]), np.sin(s[1]), s[2], s[3]])


def _ac_reset(rng):
    s = rng.uniform(-0.1, 0.1, size=4)
    return np.array([np.cos(s[0]), np.sin(s[0]), np.cos(s[1]), np.sin(s[1]), s[2], s[3]])


def _ac_cost_terms(X, U):
    # tip height -cos(t1) - cos(t1 + t2) in (-2, 2); cost (2 - height) / 2 plus small rate/effort
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    N = X.shape[0]
    c1, s1, c2, s2, w1, w2 = X.T
    cos12 = c1 * c2 - s1 * s2
    height = -c1 - cos12
    c = 1.0 - 0.5 * height + 0.01 * (w1 ** 2 + w2 ** 2) + 1e-3 * np.sum(U ** 2, axis=1)
    cx = np.stack([0.5 * (1.0 + c2), -0.5 * s2, 0.5 * c1, -0.5 * s1, 0.02 * w1, 0.02 * w2], axis=1)
    cxx = np.zeros((N, 6, 6))
    cxx[:, 0, 2] = cxx[:, 2, 0] = 0.5
    cxx[:, 1, 3] = cxx[:, 3, 1] = -0.5
    cxx[:, 4, 4] = cxx[:, 5, 5] = 0.02
    cu = 2e-3 * U
    cuu = np.broadcast_to(2e-3 * np.eye(U.shape[1]), (N, U.shape[1], U.shape[1])).copy()
    return c, cx, cxx, cu, cuu


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


ENVS = {
    "pendulum": EnvSpec("pendulum", 3, 1, 0.05, 2.0, "euler"),
    "cartpole": EnvSpec("cartpole", 5, 1, 0.02, 10.0, "euler"),
    "acrobot": EnvSpec("acrobot", 6, 1, 0.2, 1.0, "rk4"),
}

_STEP = {"pendulum": _pend_step, "cartpole": _cp_step, "acrobot": _ac_step}
_RESET = {"pendulum": _pend_reset, "cartpole": _cp_reset, "acrobot": _ac_reset}
_COST = {"pendulum": _pend_cost_terms, "cartpole": _cp_cost_terms, "acrobot": _ac_cost_terms}
# index pairs (cos, sin) of the angle used for "vertical" checks
_MAIN_ANGLE = {"pendulum": (0, 1), "cartpole": (2, 3), "acrobot": (0, 1)}


def get_env(name, **overrides):
    try:
        spec = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return replace(spec, **overrides) if overrides else spec


def step(spec, x, u):
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (spec.state_dim,) or u.shape != (spec.action_dim,):
        raise ValueError(f"{spec.name}: bad shapes x{x.shape} u{u.shape}")
    if not (np.isfinite(x).all() and np.isfinite(u).all()):
        raise ValueError("non-finite state or action")
    u = np.clip(u, -spec.u_max, spec.u_max)
    return _STEP[spec.name](spec, x, u)


def reset(spec, rng):
    return _RESET[spec.name](rng)


def cost_terms(spec, X, U):
    """Vectorized cost with derivatives: (c, c_x, c_xx, c_u, c_uu) over rows."""
    return _COST[spec.name](X, U)


def cost(spec, x, u):
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (spec.state_dim,) or u.shape != (spec.action_dim,):
        raise ValueError(f"{spec.name}: bad shapes x{x.shape} u{u.shape}")
    return float(cost_terms(spec, x[None], u[None])[0][0])


def angle(spec, states):
    """Wrapped main angle (0 = upright for pendulum/cartpole) of trig-embedded states."""
    states = np.atleast_2d(states)
    ci, si = _MAIN_ANGLE[spec.name]
    return np.arctan2(states[:, si], states[:, ci])


def trial_rng(seed, index):
    """Independent stream per trial; ``seed`` may be an int or a sequence of ints."""
    return np.random.default_rng([int(v) for v in np.atleast_1d(seed)] + [int(index)])


def run_trial(spec, length, policy, rng, x0=None):
    """Roll out ``length`` states; ``policy(x, t, rng) -> action``."""
    x = reset(spec, rng) if x0 is None else np.asarray(x0, dtype=float)
    states = np.empty((length, spec.state_dim))
    actions = np.empty((length - 1, spec.action_dim))
    states[0] = x
    for t in range(length - 1):
        u = np.clip(np.atleast_1d(policy(x, t, rng)), -spec.u_max, spec.u_max)
        actions[t] = u
        x = step(spec, x, u)
        states[t + 1] = x
    return Trajectory(states, actions)


def random_policy(spec):
    def policy(x, t, rng):
        return rng.uniform(-spec.u_max, spec.u_max, size=spec.action_dim)
    return policy


def generate_trials(spec, n_trials, length, policy="random", seed=0):
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if length < 2:
        raise ValueError("length must be >= 2")
    if policy == "random":
        policy = random_policy(spec)
    elif not callable(policy):
        raise ValueError(f"unknown policy {policy!r}")
    return [run_trial(spec, length, policy, trial_rng(seed, i)) for i in range(n_trials)]


# ---------------------------------------------------------------------------
# dataset files

_HEADER = struct.Struct("<4sIIIII")


def write_dataset(path, trials):
    if trials:
        T, n = trials[0].states.shape
        p = trials[0].actions.shape[1]
        for tr in trials:
            if tr.states.shape != (T, n) or tr.actions.shape != (T - 1, p):
                raise ValueError("all trials in a dataset must share shapes")
    else:
        T = n = p = 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(trials), n, p, T))
        for tr in trials:
            f.write(np.ascontiguousarray(tr.states, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(tr.actions, dtype="<f8").tobytes())


def read_dataset(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for header")
    magic, version, count, n, p, T = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    per_trial = T * n + max(T - 1, 0) * p
    expected = _HEADER.size + 8 * count * per_trial
    if len(buf) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(float)
    trials = []
    for i in range(count):
        block = data[i * per_trial:(i + 1) * per_trial]
        states = block[:T * n].reshape(T, n)
        actions = block[T * n:].reshape(T - 1, p)
        trials.append(Trajectory(states.copy(), actions.copy()))
    return trials


def write_csv(path, trials):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if not trials:
            w.writerow(["trial", "t"])
            return
        n = trials[0].states.shape[1]
        p = trials[0].actions.shape[1]
        w.writerow(["trial", "t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(p)])
        for k, tr in enumerate(trials):
            for t in range(len(tr)):
                u = tr.actions[t] if t < len(tr) - 1 else [""] * p
                w.writerow([k, t] + [repr(float(v)) for v in tr.states[t]]
                           + [v if v == "" else repr(float(v)) for v in u])


def stack_trials(trials):
    """(N, T, n) states and (N, T-1, p) actions."""
    return (np.stack([tr.states for tr in trials]), np.stack([tr.actions for tr in trials]))
