"""Command line interface.

Subcommands: ``gen``, ``vi``, ``gap``, ``learn``, ``drift``, ``diagnose``.
Each writes CSV outputs plus ``manifest.json`` into its output directory.
Exit status is 0 on success, 2 on configuration errors and 1 on runtime
failures.
"""

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import dynamics, game as gm, learner, oracles
from .io import (ConfigError, RunManifest, emit_csv, load_policy, read_config,
                 resolve_output_dir, save_policy)

LEARN_DEFAULTS = {
    "T": 20, "K": 20000, "tau": 0.1, "alpha": 0.05, "beta": 0.002, "M": None,
    "seed": 0, "s0": 0, "instrumented": False, "gap_every": 1, "diag_every": 0,
    "features": "tabular", "dim": None, "engine": "compiled", "rho0": None,
}


def _load_game(path):
    if not Path(path).exists():
        raise ConfigError(f"game file {path} does not exist")
    try:
        game = gm.load_game(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    problems = gm.validate_game(game)
    if problems:
        raise ConfigError(f"{path}: invalid game: {'; '.join(problems)}")
    return game


def _parse_rho0(text, n_states):
    if text is None:
        return None
    try:
        rho = np.array([float(t) for t in str(text).split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse rho0 {text!r}") from None
    if rho.shape != (n_states,) or np.any(rho < 0) or abs(rho.sum() - 1) > 1e-10:
        raise ConfigError("rho0 must be a distribution over states")
    return rho


def _features(game, kind, dim, seed):
    if kind == "tabular":
        return gm.FeatureMap.tabular(game)
    if kind == "random":
        if dim is None:
            raise ConfigError("random features need --dim D1 D2")
        dims = tuple(int(d) for d in (dim if isinstance(dim, (list, tuple)) else str(dim).split()))
        try:
            return gm.FeatureMap.random(game, dims, np.random.default_rng([seed, 1]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown feature kind {kind!r}")


def cmd_gen(args):
    rng = np.random.default_rng(args.seed)
    if args.preset == "matching-pennies":
        game = gm.matching_pennies(args.gamma)
    else:
        branching = args.branching if args.branching else args.states
        try:
            game = gm.random_game(
                gm.GameSpec(args.states, tuple(args.actions), branching, args.gamma), rng)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    out = Path(args.output)
    out_dir = resolve_output_dir(args.out_dir) if args.out_dir else out.parent
    config = {"preset": args.preset, "states": args.states, "actions": list(args.actions),
              "branching": args.branching, "gamma": args.gamma, "seed": args.seed}
    man = RunManifest(out_dir, "gen", config, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    gm.save_game(game, out)
    man.files.append(str(out))
    man.write()
    print(f"wrote {out}")
    return 0


def cmd_vi(args):
    game = _load_game(args.game)
    man = RunManifest(resolve_output_dir(args.out_dir), "vi",
                      {"game": str(args.game), "tol": args.tol})
    results = {i: oracles.minimax_value_iteration(game, i, args.tol, keep_history=True)
               for i in (1, 2)}
    log = []
    for i, res in results.items():
        for it in range(1, len(res.history)):
            change = float(np.abs(res.history[it] - res.history[it - 1]).max())
            log.append({"player": i, "iteration": it, "sup_change": change})
    emit_csv(log, "vi_log", man.path("vi_log.csv"))
    emit_csv([{"state": s, "v1": results[1].v[s], "v2": results[2].v[s]}
              for s in range(game.n_states)], "vstar", man.path("vstar.csv"))
    man.write()
    print(f"v*1 = {np.array2string(results[1].v, precision=6)}  "
          f"({results[1].iterations} iterations)")
    return 0


def cmd_gap(args):
    game = _load_game(args.game)
    policy = load_policy(args.policy)
    S = game.n_states
    if policy.pi1.shape != (S, game.n_actions[0]) or policy.pi2.shape != (S, game.n_actions[1]):
        raise ConfigError("policy shape does not match the game")
    rho0 = _parse_rho0(args.rho0, S)
    man = RunManifest(resolve_output_dir(args.out_dir), "gap",
                      {"game": str(args.game), "policy": str(args.policy),
                       "rho0": args.rho0, "tol": args.tol})
    value = oracles.nash_gap(game, policy, rho0, args.tol)
    emit_csv([{"rho0": args.rho0 or "uniform", "nash_gap": value}], "gap",
             man.path("gap.csv"))
    man.write()
    print(f"nash gap = {value:.10g}")
    return 0


def _learn_settings(args):
    settings = dict(LEARN_DEFAULTS)
    if args.config:
        cfg = read_config(args.config)
        unknown = set(cfg) - set(settings)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(cfg)
    for key in settings:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return settings


def cmd_learn(args):
    game = _load_game(args.game)
    st = _learn_settings(args)
    features = _features(game, st["features"], st["dim"], int(st["seed"]))
    lam = min(gm.chain_diagnostics(game, features, gm.uniform_policy(game), 0.25).excitation)
    M = st["M"] if st["M"] is not None else learner.default_radius(lam, game.gamma)
    try:
        cfg = learner.RunConfig(
            T=int(st["T"]), K=int(st["K"]), tau=float(st["tau"]), alpha=float(st["alpha"]),
            beta=float(st["beta"]), M=float(M), seed=int(st["seed"]), s0=int(st["s0"]),
            instrumented=bool(st["instrumented"]), gap_every=int(st["gap_every"]),
            diag_every=int(st["diag_every"]), lambda_hat=lam)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if st["engine"] not in learner.ENGINES:
        raise ConfigError(f"unknown engine {st['engine']!r}")
    rho0 = _parse_rho0(st["rho0"], game.n_states)
    st["M"] = cfg.M
    st["game"] = str(args.game)
    man = RunManifest(resolve_output_dir(args.out_dir), "learn", st, cfg.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", learner.ConfigWarning)
        cfg.check(game.gamma)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    result = learner.run(game, features, cfg, engine=st["engine"], rho0=rho0)
    emit_csv(result.records, "diagnostics", man.path("diagnostics.csv"))
    save_policy(result.policy, man.path("policy.json"))
    man.write()
    gaps = [r["nash_gap"] for r in result.records if not np.isnan(r["nash_gap"])]
    if gaps:
        print(f"final nash gap = {gaps[-1]:.6g}")
    return 0


def _drift_trial(rng, size_lo, size_hi, tau, beta, steps, noise, defect):
    m, n = rng.integers(size_lo, size_hi + 1, size=2)
    X1 = rng.uniform(-1, 1, (m, n))
    X2 = -X1.T + defect * rng.uniform(-1, 1, (n, m))
    pair = dynamics.MatrixGamePair(X1, X2)
    x1 = rng.normal(size=m)
    x2 = rng.normal(size=n)
    noise_fn = None
    if noise > 0:
        draws = [(noise * rng.normal(size=m), noise * rng.normal(size=n)) for _ in range(steps)]
        noise_fn = draws.__getitem__
    traj, used = dynamics.simulate_params(x1, x2, pair, tau, beta, steps, noise_fn)
    cfg = dynamics.EnvelopeConfig(tau)
    return pair, dynamics.drift_check(traj, pair, cfg, beta, used)


def cmd_drift(args):
    lo, hi = (args.size, args.size) if args.size else (args.min_size, args.max_size)
    if not 1 <= lo <= hi:
        raise ConfigError("need 1 <= min size <= max size")
    config = {k: getattr(args, k) for k in
              ("trials", "size", "min_size", "max_size", "tau", "beta", "steps",
               "seed", "noise", "defect", "tol")}
    man = RunManifest(resolve_output_dir(args.out_dir), "drift", config, args.seed)
    rng = np.random.default_rng(args.seed)
    summary = []
    total = ok = 0
    for trial in range(args.trials):
        pair, rep = _drift_trial(rng, lo, hi, args.tau, args.beta, args.steps,
                                 args.noise, args.defect)
        emit_csv(rep.rows, "drift", man.path(f"drift/trial_{trial:03d}.csv"))
        sat = rep.satisfied(args.tol)
        total += len(rep.rows)
        ok += sat
        summary.append({"trial": trial, "n_actions_1": pair.X1.shape[0],
                        "n_actions_2": pair.X1.shape[1], "steps": len(rep.rows),
                        "satisfied": sat, "min_slack": rep.min_slack, "L_b": rep.L_b})
    emit_csv(summary, "drift_summary", man.path("drift_summary.csv"))
    man.write()
    print(f"drift inequality satisfied on {ok}/{total} steps")
    return 0


def cmd_diagnose(args):
    game = _load_game(args.game)
    features = _features(game, args.features, args.dim, args.seed)
    rng = np.random.default_rng(args.seed)
    uniform = gm.uniform_policy(game)
    diag = gm.chain_diagnostics(game, features, uniform, args.delta)
    lam_u = min(diag.excitation)
    M = args.M if args.M is not None else learner.default_radius(lam_u, game.gamma)
    rows = []
    for i in (1, 2):
        rows.append({"quantity": "excitation_uniform", "player": i,
                     "value": diag.excitation[i - 1], "note": "exact"})
    lam_min = [diag.excitation[0], diag.excitation[1]]
    mix_max = diag.mixing_time
    resid = [0.0, 0.0]
    for _ in range(args.samples):
        theta = gm.sample_params(features, M, rng)
        pol = gm.policy_from_params(theta, features, args.tau)
        d = gm.chain_diagnostics(game, features, pol, args.delta)
        mix_max = max(mix_max, d.mixing_time)
        w_tilde = gm.sample_params(features, M, rng)
        for i in (1, 2):
            lam_min[i - 1] = min(lam_min[i - 1], d.excitation[i - 1])
            resid[i - 1] = max(resid[i - 1], oracles.completeness_residual(
                game, features, pol, w_tilde[i - 1], i))
    note = f"estimate over uniform + {args.samples} sampled policies"
    for i in (1, 2):
        rows.append({"quantity": "excitation_min", "player": i,
                     "value": lam_min[i - 1], "note": note})
        rows.append({"quantity": "completeness_residual_max", "player": i,
                     "value": resid[i - 1], "note": f"estimate over {args.samples} samples"})
        rows.append({"quantity": "policy_floor", "player": i,
                     "value": gm.policy_floor(args.tau, M, game.n_actions[i - 1]),
                     "note": "bound for |logit| <= M"})
    rows.append({"quantity": "mixing_time_uniform", "player": 0,
                 "value": diag.mixing_time, "note": f"delta={args.delta}"})
    rows.append({"quantity": "mixing_time_max", "player": 0, "value": mix_max, "note": note})
    rows.append({"quantity": "radius_M", "player": 0, "value": M, "note": "projection radius"})
    config = {k: getattr(args, k) for k in ("game", "tau", "M", "samples", "delta",
                                            "features", "dim", "seed")}
    man = RunManifest(resolve_output_dir(args.out_dir), "diagnose", config, args.seed)
    emit_csv(rows, "diagnose", man.path("diagnose.csv"))
    man.write()
    for r in rows:
        print(f"{r['quantity']:<28} {r['player']}  {r['value']:.6g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="twotimescale", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a random game file")
    p.add_argument("--states", type=int, default=2)
    p.add_argument("--actions", type=int, nargs=2, default=[2, 2], metavar=("A1", "A2"))
    p.add_argument("--branching", type=int, default=None)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("random", "matching-pennies"), default="random")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--out-dir", default=None, help="manifest directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("vi", help="minimax value iteration")
    p.add_argument("game")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out-dir", default="out/vi")
    p.set_defaults(func=cmd_vi)

    p = sub.add_parser("gap", help="Nash gap of a saved policy")
    p.add_argument("game")
    p.add_argument("policy")
    p.add_argument("--rho0", default=None, help="comma separated distribution")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out-dir", default="out/gap")
    p.set_defaults(func=cmd_gap)

    p = sub.add_parser("learn", help="run the two-timescale learner")
    p.add_argument("game")
    p.add_argument("--config", default=None, help="flat key = value file")
    for key, typ in (("T", int), ("K", int), ("tau", float), ("alpha", float),
                     ("beta", float), ("M", float), ("seed", int), ("s0", int)):
        p.add_argument(f"--{key}", type=typ, default=None)
    p.add_argument("--instrumented", action="store_const", const=True, default=None)
    p.add_argument("--gap-every", dest="gap_every", type=int, default=None)
    p.add_argument("--diag-every", dest="diag_every", type=int, default=None)
    p.add_argument("--features", choices=("tabular", "random"), default=None)
    p.add_argument("--dim", type=int, nargs=2, default=None, metavar=("D1", "D2"))
    p.add_argument("--engine", choices=tuple(learner.ENGINES), default=None)
    p.add_argument("--rho0", default=None)
    p.add_argument("--out-dir", default="out/learn")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("drift", help="audit the drift inequality on random matrix games")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--size", type=int, default=None, help="fixed action count")
    p.add_argument("--min-size", type=int, default=2)
    p.add_argument("--max-size", type=int, default=4)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise scale")
    p.add_argument("--defect", type=float, default=0.0, help="non-zero-sum perturbation")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out/drift")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("diagnose", help="excitation, mixing and completeness estimates")
    p.add_argument("game")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--M", type=float, default=None)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--features", choices=("tabular", "random"), default="tabular")
    p.add_argument("--dim", type=int, nargs=2, default=None, metavar=("D1", "D2"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out/diagnose")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
