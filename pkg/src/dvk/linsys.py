"""Snapshot matrices and ridge-regularized recovery of forward/reverse linear dynamics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

DEFAULT_RIDGE = 1e-3
INVERSE_FITS = ("backward", "invert")
MAX_CONDITION = 1e12


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class SnapshotMatrices:
    Z: np.ndarray      # (m+p, T-1): observations stacked over actions
    Y: np.ndarray      # (m, T-1): observations shifted one step
    X: np.ndarray      # (m, T-1)
    Gamma: np.ndarray  # (p, T-1)

    @property
    def m(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.Gamma.shape[0]


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    A_inv: np.ndarray
    g_T: np.ndarray

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    def inverse_error(self):
        """Frobenius norm of ``A @ A_inv - I`` (non-zero under regularization)."""
        return float(np.linalg.norm(self.A @ self.A_inv - np.eye(self.m)))

    def rollout(self, z0, actions):
        """Forward rollout; returns (len(actions)+1, m) including ``z0``."""
        z = np.empty((len(actions) + 1, self.m))
        z[0] = z0
        for t, u in enumerate(actions):
            z[t + 1] = self.A @ z[t] + self.B @ u
        return z

    def to_arrays(self, prefix=""):
        return {f"{prefix}A": self.A, f"{prefix}B": self.B,
                f"{prefix}A_inv": self.A_inv, f"{prefix}g_T": self.g_T}

    @classmethod
    def from_arrays(cls, arrays, prefix=""):
        return cls(*(np.asarray(arrays[f"{prefix}{k}"]) for k in ("A", "B", "A_inv", "g_T")))


def build_snapshots(g, u):
    g = np.atleast_2d(np.asarray(g, dtype=float))
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = g.shape[0]
    if T < 2:
        raise ValueError("need at least two observations")
    if u.shape[0] != T - 1:
        raise ValueError(f"expected {T - 1} actions for {T} observations, got {u.shape[0]}")
    X = g[:-1].T.copy()
    Y = g[1:].T.copy()
    Gamma = u.T.copy()
    return SnapshotMatrices(Z=np.vstack([X, Gamma]), Y=Y, X=X, Gamma=Gamma)


def ridge_solve(D, R, ridge):
    """Solve ``M (D D^T + ridge I) = R D^T`` for ``M`` via Cholesky."""
    G = D @ D.T
    if ridge > 0:
        G = G + ridge * np.eye(G.shape[0])
    try:
        c = la.cho_factor(G)
    except la.LinAlgError as e:
        raise SingularSystemError("normal matrix is singular; use ridge > 0") from e
    return la.cho_solve(c, D @ R.T).T


def fit_forward(s, ridge=DEFAULT_RIDGE):
    """[A B] minimizing ||Y - [A B] Z||_F^2 + ridge ||[A B]||_F^2."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    m, p = s.m, s.p
    if s.Z.shape[1] < m + p:
        warnings.warn(f"only {s.Z.shape[1]} snapshots for {m + p} unknowns per row",
                      stacklevel=2)
    K = ridge_solve(s.Z, s.Y, ridge)
    return K[:, :m], K[:, m:]


def fit_inverse(s, B, ridge=DEFAULT_RIDGE, method="backward"):
    """Reverse-time map A_inv with z_t = A_inv (z_{t+1} - B u_t).

    ``backward`` regresses X on W = Y - B Gamma directly. ``invert`` fits the
    forward map W ~ M X and returns inv(M), which is exact on linear data but
    singular when M is.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if method not in INVERSE_FITS:
        raise ValueError(f"method must be one of {INVERSE_FITS}")
    if method == "backward":
        return ridge_solve(s.Y - B @ s.Gamma, s.X, ridge)
    M = ridge_solve(s.X, s.Y - B @ s.Gamma, ridge)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystemError(f"forward map is ill-conditioned (cond={cond:.3g})")
    lu = la.lu_factor(M)
    return la.lu_solve(lu, np.eye(M.shape[0]))


def block_diag(models):
    if not models:
        raise ValueError("need at least one model")
    m, p = models[0].A.shape[0], models[0].B.shape[1]
    for mod in models:
        if mod.A.shape != (m, m) or mod.B.shape != (m, p):
            raise ValueError("models have mismatched dimensions")
    return la.block_diag(*[mod.A for mod in models]), np.vstack([mod.B for mod in models])
