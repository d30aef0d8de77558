"""Command-line pipeline: gen-data, train, eval, control.

Every command writes ``manifest.txt`` (resolved flags) next to its outputs,
prints its settings at startup, and derives all randomness from ``--seed``
(overridden by the ``DVK_SEED`` environment variable).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import control, envs, eval as metrics, linsys, model as dvk_model

log = logging.getLogger("dvk")

DEFAULTS = dvk_model.DvkConfig(1, 1)


def _resolve_seed(args):
    env_seed = os.environ.get("DVK_SEED")
    if env_seed is not None:
        args.seed = int(env_seed)
    return args.seed


def _startup(args, parser):
    defaults = {a.dest: a.default for a in parser._actions if a.dest not in ("help",)}
    print(f"dvk {args.command}")
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        value = getattr(args, key)
        tag = "" if value != defaults.get(key) else " (default)"
        print(f"  {key} = {value}{tag}")
    sys.stdout.flush()


def _write_manifest(directory, args):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write(f"command={args.command}\n")
        for key in sorted(vars(args)):
            if key in ("func", "command"):
                continue
            f.write(f"{key}={getattr(args, key)}\n")


def _out_dir_for(path):
    return os.path.dirname(os.path.abspath(path)) or "."


# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    spec = envs.get_env(args.env)
    trials = envs.generate_trials(spec, args.trials, args.steps, seed=args.seed)
    os.makedirs(_out_dir_for(args.out), exist_ok=True)
    envs.write_dataset(args.out, trials)
    if args.csv:
        envs.write_csv(args.csv, trials)
    _write_manifest(_out_dir_for(args.out), args)
    print(f"wrote {len(trials)} trials x {args.steps} steps, state dim {spec.state_dim}, "
          f"action dim {spec.action_dim} to {args.out}")
    return 0


def _config_from_args(args, spec):
    return dvk_model.DvkConfig(
        state_dim=spec.state_dim, action_dim=spec.action_dim, latent_dim=args.latent,
        T=args.T, H=args.H, ridge=args.ridge, inverse_fit=args.inverse_fit,
        kl_weight=args.kl_weight,
        kl_warmup_epochs=args.kl_warmup_epochs, batch_size=args.batch_size, lr=args.lr,
        epochs=args.epochs, steps_per_epoch=args.steps_per_epoch, seed=args.seed)


def cmd_train(args):
    spec = envs.get_env(args.env)
    trials = envs.read_dataset(args.data)
    if trials and trials[0].states.shape[1] != spec.state_dim:
        print(f"error: dataset state dim {trials[0].states.shape[1]} does not match "
              f"{args.env} ({spec.state_dim})", file=sys.stderr)
        return 2
    config = _config_from_args(args, spec)
    init = dvk_model.load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    result = dvk_model.train(trials, config, checkpoint_dir=args.checkpoint,
                             resume=args.resume, model=init)
    _write_manifest(args.checkpoint, args)
    last = result.curve[-1] if result.curve else None
    if last is not None:
        print(f"epoch {last.epoch}: total {last.total:.4f} (recon {last.recon:.4f}, "
              f"pred {last.pred:.4f}, kl {last.kl:.4f})")
        if not np.isfinite(last.total):
            return 1
    return 0


def evaluation_windows(spec, n_sequences, context, horizon, seed, data=None):
    """Test windows of context+horizon states; from ``data`` if given, otherwise fresh trials."""
    length = context + horizon
    if data is None:
        trials = envs.generate_trials(spec, n_sequences, length, seed=seed)
        return envs.stack_trials(trials)
    states, actions = envs.stack_trials(data)
    rng = np.random.default_rng([seed, 31337])
    return dvk_model.sample_windows(states, actions, n_sequences, length, rng)


def prediction_metrics(dvk, states, actions, context, horizon, samples, seed, var_floor,
                       window=None):
    """(mse, nll, persistence mse) over the horizon for the given test windows."""
    preds = dvk.predict(states[:, :context], actions[:, :context - 1 + horizon], horizon,
                        samples, seed, window)
    truths = states[:, context:context + horizon]
    bundles = [metrics.PredictionBundle(t, p) for t, p in zip(truths, preds)]
    base = metrics.persistence_bundles(states[:, context - 1], truths)
    return (metrics.mse_vs_horizon(bundles), metrics.nll_vs_horizon(bundles, var_floor),
            metrics.mse_vs_horizon(base))


def cmd_eval(args):
    dvk = dvk_model.load_checkpoint(args.checkpoint)
    spec = envs.get_env(args.env)
    data = envs.read_dataset(args.data) if args.data else None
    states, actions = evaluation_windows(spec, args.sequences, args.context, args.horizon,
                                         [args.seed, 1], data)
    mse, nll, base = prediction_metrics(dvk, states, actions, args.context, args.horizon,
                                        args.samples, [args.seed, 2], args.var_floor,
                                        args.window)
    os.makedirs(args.out, exist_ok=True)
    metrics.write_series_csv(os.path.join(args.out, "mse.csv"), "mse", mse)
    metrics.write_series_csv(os.path.join(args.out, "nll.csv"), "nll", nll)
    metrics.write_series_csv(os.path.join(args.out, "persistence_mse.csv"), "mse", base)
    metrics.write_metrics_csv(os.path.join(args.out, "metrics.csv"), mse, nll)
    _write_manifest(args.out, args)
    print(f"mse h=1 {mse[0]:.4g} h={len(mse)} {mse[-1]:.4g}; persistence h={len(base)} "
          f"{base[-1]:.4g}; nll h=1 {nll[0]:.4g} h={len(nll)} {nll[-1]:.4g}")
    ok = np.isfinite(mse).all() and np.isfinite(nll).all()
    return 0 if ok else 1


def _episode(job):
    checkpoint, env, k, mode, length, T, H, seed, gauss_newton = job
    dvk = dvk_model.load_checkpoint(checkpoint)
    spec = envs.get_env(env)
    return control.mpc_run(spec, dvk, k, mode, length, T, H, seed, gauss_newton=gauss_newton)


def run_episodes(checkpoint, env, n, k, mode, length, T, H, seed, workers=1, gauss_newton=False):
    jobs = [(checkpoint, env, k, mode, length, T, H, [seed, i], gauss_newton) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_episode, jobs))
    return [_episode(j) for j in jobs]


def cmd_control(args):
    if args.mode == "worst" and args.k < 2:
        log.warning("worst-case planning needs k >= 2; falling back to expected cost")
        args.mode = "expected"
    config = dvk_model.load_checkpoint(args.checkpoint).config
    T = args.T or config.T
    H = args.H or config.H
    spec = envs.get_env(args.env)
    episodes = run_episodes(args.checkpoint, args.env, args.episodes, args.k, args.mode,
                            args.episode_len, T, H, args.seed, args.workers, args.gauss_newton)
    report = metrics.control_metrics(episodes, spec=spec)
    os.makedirs(args.out, exist_ok=True)
    control.write_episode_csv(os.path.join(args.out, "episodes.csv"), episodes)
    metrics.write_control_report(os.path.join(args.out, "report.csv"), report,
                                 mode=args.mode, k=args.k)
    if args.save_trials:
        envs.write_dataset(args.save_trials, [ep.trajectory() for ep in episodes])
    _write_manifest(args.out, args)
    failures = sum(len(ep.failures) for ep in episodes)
    print(f"{args.mode} k={args.k}: cost {report.avg_cost:.2f}, vertical "
          f"{report.vertical_fraction:.3f}, falls/trial {report.falls_per_trial:.3f}, "
          f"planner failures {failures}")
    return 0 if np.isfinite(report.avg_cost) else 1


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dvk", description="Deep variational Koopman models")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--env", default="pendulum", choices=sorted(envs.ENVS))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gen-data", help="simulate random-action trials")
    common(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--out", default="data/trials.dvkd")
    p.add_argument("--csv", default=None, help="optional CSV export")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model to a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default="checkpoint")
    p.add_argument("--init-checkpoint", default=None, help="fine-tune from these parameters")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--T", type=int, default=DEFAULTS.T)
    p.add_argument("--H", type=int, default=DEFAULTS.H)
    p.add_argument("--latent", type=int, default=DEFAULTS.latent_dim)
    p.add_argument("--ridge", type=float, default=DEFAULTS.ridge)
    p.add_argument("--inverse-fit", choices=linsys.INVERSE_FITS, default=DEFAULTS.inverse_fit,
                   help="reverse-time map: direct backward regression or inverse of the forward fit")
    p.add_argument("--kl-weight", type=float, default=DEFAULTS.kl_weight)
    p.add_argument("--kl-warmup-epochs", type=int, default=DEFAULTS.kl_warmup_epochs)
    p.add_argument("--batch-size", type=int, default=DEFAULTS.batch_size)
    p.add_argument("--lr", type=float, default=DEFAULTS.lr)
    p.add_argument("--epochs", type=int, default=DEFAULTS.epochs)
    p.add_argument("--steps-per-epoch", type=int, default=DEFAULTS.steps_per_epoch)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="prediction MSE/NLL versus horizon")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="draw test windows from this dataset")
    p.add_argument("--sequences", type=int, default=5000)
    p.add_argument("--context", type=int, default=64)
    p.add_argument("--horizon", type=int, default=64)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--var-floor", type=float, default=metrics.DEFAULT_VAR_FLOOR)
    p.add_argument("--window", type=int, default=None,
                   help="context states used for inference (default: training T; 0: all)")
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("control", help="MPC episodes with sampled model ensembles")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--mode", choices=("expected", "worst"), default="expected")
    p.add_argument("--episode-len", type=int, default=256)
    p.add_argument("--T", type=int, default=0, help="context length (0: from checkpoint)")
    p.add_argument("--H", type=int, default=0, help="planning horizon (0: from checkpoint)")
    p.add_argument("--gauss-newton", action="store_true")
    p.add_argument("--save-trials", default=None, help="write episodes as a dataset")
    p.add_argument("--out", default="control_out")
    p.set_defaults(func=cmd_control)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    _resolve_seed(args)
    _startup(args, sub_parser(parser, args.command))
    try:
        return args.func(args)
    except (OSError, envs.DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def sub_parser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    return parser


if __name__ == "__main__":
    sys.exit(main())
