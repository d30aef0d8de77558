"""Prediction-quality and control metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import envs

VERTICAL_BAND = math.pi / 8
DEFAULT_VAR_FLOOR = 1e-8


@dataclass
class PredictionBundle:
    truth: np.ndarray    # (H, n)
    samples: np.ndarray  # (S, H, n)

    def __post_init__(self):
        self.truth = np.asarray(self.truth, float)
        self.samples = np.asarray(self.samples, float)
        if self.samples.ndim != 3 or self.samples.shape[1:] != self.truth.shape:
            raise ValueError(f"samples {self.samples.shape} do not match truth {self.truth.shape}")
        if not (np.isfinite(self.truth).all() and np.isfinite(self.samples).all()):
            raise ValueError("prediction bundle contains non-finite values")


@dataclass
class ControlReport:
    avg_cost: float
    vertical_fraction: float
    falls_per_trial: float
    n_trials: int


def _check(bundles):
    if not bundles:
        raise ValueError("no prediction bundles given")
    H = bundles[0].truth.shape
    for b in bundles:
        if b.truth.shape != H:
            raise ValueError("bundles have inconsistent shapes")


def mse_vs_horizon(bundles):
    """Squared error per horizon step, averaged over samples, state dims and sequences."""
    _check(bundles)
    per_seq = [np.mean((b.samples - b.truth[None]) ** 2, axis=(0, 2)) for b in bundles]
    return np.mean(per_seq, axis=0)


def nll_vs_horizon(bundles, var_floor=DEFAULT_VAR_FLOOR):
    """Gaussian NLL of the truth under per-step fits to the samples, summed over dims and sequences.

    Variance is the unbiased sample variance, floored at ``var_floor``. A zero
    variance (floor 0) gives +inf unless the truth equals the fitted mean.
    """
    _check(bundles)
    total = np.zeros(bundles[0].truth.shape[0])
    for b in bundles:
        if b.samples.shape[0] < 2:
            raise ValueError("NLL needs at least two samples per sequence")
        mu = b.samples.mean(axis=0)
        var = np.maximum(b.samples.var(axis=0, ddof=1), var_floor)
        err2 = (b.truth - mu) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            nll = 0.5 * np.log(2 * np.pi * var) + err2 / (2 * var)
        zero = var == 0
        nll = np.where(zero & (err2 > 0), np.inf, nll)
        nll = np.where(zero & (err2 == 0), -np.inf, nll)
        total = total + nll.sum(axis=1)
    return total


def persistence_bundles(contexts_last, truths):
    """Baseline that repeats the last observed state (a single deterministic sample)."""
    return [PredictionBundle(t, np.broadcast_to(c, t.shape)[None].copy())
            for c, t in zip(contexts_last, truths)]


def count_falls(in_band, min_steps=20):
    """Exits from the band after more than ``min_steps`` consecutive steps inside it."""
    falls, run = 0, 0
    for inside in in_band:
        if inside:
            run += 1
        else:
            if run > min_steps:
                falls += 1
            run = 0
    return falls


def control_metrics(episodes, dt_threshold=20, spec=None, band=VERTICAL_BAND):
    """Average episode cost, fraction of steps vertical and falls per episode.

    Each episode needs ``states`` (trig-embedded) and per-step ``costs``.
    """
    spec = spec or envs.get_env("pendulum")
    if not episodes:
        return ControlReport(0.0, 0.0, 0.0, 0)
    costs, inside_total, steps, falls = [], 0, 0, 0
    for ep in episodes:
        theta = envs.angle(spec, ep.states)
        in_band = np.abs(theta) <= band
        inside_total += int(in_band.sum())
        steps += len(in_band)
        falls += count_falls(in_band, dt_threshold)
        costs.append(float(np.sum(ep.costs)))
    n = len(episodes)
    return ControlReport(float(np.mean(costs)), inside_total / steps, falls / n, n)


def write_metrics_csv(path, mse, nll):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["horizon", "mse", "nll"])
        for h, (a, b) in enumerate(zip(mse, nll), start=1):
            w.writerow([h, repr(float(a)), repr(float(b))])


def write_series_csv(path, name, values):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["horizon", name])
        for h, v in enumerate(values, start=1):
            w.writerow([h, repr(float(v))])


def write_control_report(path, report, **extra):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        keys = list(extra) + ["avg_cost", "vertical_fraction", "falls_per_trial", "n_trials"]
        w.writerow(keys)
        w.writerow([extra[k] for k in extra] + [repr(report.avg_cost), repr(report.vertical_fraction),
                                                 repr(report.falls_per_trial), report.n_trials])
