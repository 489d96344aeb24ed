"""Command-line driver: gen-data, label, train, eval, verify, plot, inspect.

Exit codes: 0 success, 2 configuration or input error, 3 training
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data, env, phase1, verify
from .approx import checkpoint as ckpt
from .baselines import Method, phase1_greedy, train_bc, train_indd, train_vdn_variant
from .errors import ConfigError, DivergenceError
from .pipeline import train_misodice
from .policy import joint_table, load_policies
from .preference import MalformedResponse, TransportError, make_provider, sample_pairs
from .training import MetricsLog

log = logging.getLogger("misodice")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4


def _atomic(path, write):
    """Run ``write(tmp_path)`` then move into place, so a failed command leaves no partial artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write(path, payload: bytes):
    _atomic(path, lambda tmp: Path(tmp).write_bytes(payload))


def _atomic_save(path, model):
    _atomic(path, model.save)


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    cfg = config_mod.apply_environment(cfg)
    for dotted, value in _overrides(args):
        cfg = config_mod.set_path(cfg, dotted, value)
    return cfg


_OVERRIDES = {
    "seed": "seed", "n_expert": "dataset.n_expert", "n_poor": "dataset.n_poor", "horizon": "dataset.horizon",
    "provider": "preference.provider", "n_pairs": "preference.n_pairs", "flip_prob": "preference.flip_prob",
    "endpoint": "preference.endpoint", "topk": "phase1.k", "phase1_steps": "phase1.steps",
    "alpha": "phase2.alpha", "mixer": "phase2.mixer", "episodes": "eval.episodes", "eval_seeds": "eval.seeds",
}


def _overrides(args):
    for attr, dotted in _OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            yield dotted, value


def _build_env(cfg: config_mod.RunConfig):
    try:
        return env.build_benchmark(cfg.env.as_dict())
    except ValueError as err:
        raise ConfigError(f"env: {err}") from err


def _load_dataset(path) -> data.Dataset:
    try:
        return data.load(path)
    except OSError as err:
        raise ConfigError(f"cannot read dataset {path}: {err}") from err
    except data.DatasetFormatError as err:
        raise ConfigError(f"dataset {path}: {err}") from err


def _masks(mdp):
    return None if mdp.action_masks is None else [mdp.local_mask(i) for i in range(mdp.n_agents)]


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    mdp = _build_env(cfg)
    d = cfg.dataset
    expert = env.solve_expert(mdp)
    poor = env.degrade(expert, d.poor_eps, mdp)
    E = env.collect(mdp, expert, d.n_expert, d.horizon, cfg.seed, "expert")
    P = (env.collect(mdp, poor, d.n_poor, d.horizon, cfg.seed, "poor") if d.n_poor
         else data.Dataset(*E.dims))
    U = data.build_unlabeled(E, P, cfg.seed)
    _atomic_write(args.out, data.dumps(U))
    ret_E = np.mean([data.sealed_rewards(t).sum() for t in E])
    ret_P = np.mean([data.sealed_rewards(t).sum() for t in P]) if len(P) else float("nan")
    print(f"{mdp.name}: wrote {len(U)} trajectories ({d.n_expert} expert, {d.n_poor} poor, "
          f"horizon {d.horizon}) to {args.out}")
    print(f"mean return: expert {ret_E:.3f}, poor {ret_P:.3f}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _load_config(args)
    U = _load_dataset(args.data)
    p, p1 = cfg.preference, cfg.phase1
    if p1.k > len(U):
        raise ConfigError(f"top-k {p1.k} exceeds the dataset size {len(U)}")
    provider = make_provider(p.provider, flip_prob=p.flip_prob, seed=cfg.seed, endpoint=p.endpoint,
                             timeout=p.timeout)
    pairs = sample_pairs(U, p.n_pairs, cfg.seed)
    try:
        prefs = provider.label(pairs, U)
    except (TransportError, MalformedResponse) as err:
        raise ConfigError(f"preference provider failed: {err}") from err
    metrics = MetricsLog("phase1")
    model = phase1.train_pref_model(prefs, U, cfg.phase1_train(), cfg.phase2.gamma, p1.lambda_v, metrics)
    split = phase1.rank_and_split(phase1.recover_rewards(model, U), p1.k)
    model_path = args.model_out or f"{args.out}.model"
    _atomic_save(model_path, model)
    _atomic_write(args.out, split.to_text().encode())
    acc = phase1.preference_accuracy(model, prefs, U)
    print(f"labelled {len(prefs)} pairs with the {p.provider} provider; preference accuracy {acc:.3f}")
    print(f"wrote split ({len(split.expert_ids)} expert / {len(split.mix_ids)} mixed) to {args.out}")
    return EXIT_OK


def _read_manifest(path) -> phase1.SplitResult:
    try:
        return phase1.SplitResult.from_text(Path(path).read_text())
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot read split manifest {path}: {err}") from err


def cmd_train(args) -> int:
    cfg = _load_config(args)
    method = Method(args.method)
    if (args.beta is not None) != (method is Method.BC):
        raise ConfigError("--beta is required for --method bc and not accepted otherwise")
    if args.beta is not None and not 0.0 <= args.beta <= 1.0:
        raise ConfigError("--beta must lie in [0, 1]")
    if method is Method.PHASE1_GREEDY and not args.phase1_model:
        raise ConfigError("--method phase1-greedy needs --phase1-model")
    mdp = _build_env(cfg)
    U = _load_dataset(args.data)
    split = _read_manifest(args.manifest)
    missing = [i for i in split.expert_ids if i not in U]
    if missing:
        raise ConfigError(f"manifest names {len(missing)} trajectories absent from the dataset")
    D_E = U.subset(split.expert_ids)
    p2, stages, masks = cfg.phase2, cfg.stages(), _masks(mdp)
    metrics = MetricsLog(method.value)
    out = Path(args.out_dir)
    artifacts = {}
    if method is Method.MISODICE:
        res = train_misodice(D_E, U, stages, p2.gamma, p2.alpha, p2.mixer, masks, metrics)
        artifacts = {"disc.ckpt": res.disc, "values.ckpt": res.values}
        policies = res.policies
    elif method is Method.VDN:
        res = train_vdn_variant(D_E, U, stages, p2.gamma, p2.alpha, masks, metrics)
        artifacts = {"disc.ckpt": res.disc, "values.ckpt": res.values}
        policies = res.policies
    elif method is Method.BC:
        policies = train_bc(D_E, U, args.beta, stages.policy, masks, metrics)
    elif method is Method.INDD:
        policies = train_indd(D_E, U, stages, p2.gamma, p2.alpha, masks, metrics)
    else:
        try:
            model = phase1.PrefQVModel.load(args.phase1_model)
        except (OSError, ValueError) as err:
            raise ConfigError(f"cannot load phase-1 model: {err}") from err
        policies = phase1_greedy(model, masks)
    for name, model in artifacts.items():
        _atomic_save(out / name, model)
    _atomic_save(out / "policy.ckpt", policies)
    _atomic_write(out / "metrics.csv", metrics.to_csv().encode())
    print(f"{method.value}: trained on {len(D_E)} expert / {len(U)} union trajectories; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    mdp = _build_env(cfg)
    if args.expert:
        table = env.solve_expert(mdp).table
        label = "expert"
    else:
        if not args.policy:
            raise ConfigError("eval needs --policy or --expert")
        try:
            table = joint_table(load_policies(args.policy), mdp)
        except (OSError, ValueError, IndexError) as err:
            raise ConfigError(f"cannot evaluate {args.policy}: {err}") from err
        label = args.policy
    e = cfg.eval
    returns = env.monte_carlo_returns(mdp, table, cfg.eval_horizon, e.episodes, e.seeds, cfg.seed)
    mean, std = float(returns.mean()), float(returns.std())
    print(f"{label}: return {mean:.4f} +- {std:.4f} over {e.seeds} seeds x {e.episodes} episodes "
          f"(horizon {cfg.eval_horizon}; exact {env.expected_return(mdp, table, cfg.eval_horizon):.4f})")
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "mean_return", "std_return"])
        for k, row in enumerate(returns):
            w.writerow([k, repr(float(row.mean())), repr(float(row.std()))])
        _atomic_write(args.out, buf.getvalue().encode())
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite()
    print(verify.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def learning_curves(paths) -> str:
    """Mean and std across runs of every ``stage/metric`` at every logged step."""
    groups = {}
    for path in paths:
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as err:
            raise ConfigError(f"cannot read metrics {path}: {err}") from err
        if rows and set(rows[0]) != {"method", "stage", "step", "metric", "value"}:
            raise ConfigError(f"{path} is not a metrics file")
        for r in rows:
            key = (f"{r['stage']}/{r['metric']}", int(r["step"]))
            groups.setdefault(key, []).append(float(r["value"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "metric", "mean", "std", "n_runs"])
    for (metric, step), vals in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        w.writerow([step, metric, repr(float(np.mean(vals))), repr(float(np.std(vals))), len(vals)])
    return buf.getvalue()


def cmd_plot(args) -> int:
    text = learning_curves(args.metrics)
    _atomic_write(args.out, text.encode())
    print(f"wrote {text.count(chr(10)) - 1} curve points to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    raw = Path(args.path).read_bytes() if Path(args.path).exists() else None
    if raw is None:
        raise ConfigError(f"no such file {args.path}")
    if raw.startswith(data.MAGIC):
        header = data.read_header(raw)
        for k, v in header.items():
            print(f"{k}: {v}")
        return EXIT_OK
    try:
        params, meta = ckpt.loads(raw)
    except ckpt.CheckpointError:
        try:
            split = phase1.SplitResult.from_text(raw.decode())
        except (UnicodeDecodeError, ValueError, KeyError) as err:
            raise ConfigError(f"{args.path}: unrecognised artifact") from err
        print(f"split manifest: {len(split.expert_ids)} expert, {len(split.mix_ids)} mixed")
        return EXIT_OK
    print(f"checkpoint: {meta}")
    for k, v in params.items():
        print(f"  {k}: shape {tuple(v.shape)}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="misodice", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("gen-data", help="roll out expert and poor policies into one unlabeled dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--n-expert", type=int)
    p.add_argument("--n-poor", type=int)
    p.add_argument("--horizon", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = with_config(sub.add_parser("label", help="label pairs, fit the preference model, split expert/mixed"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="split manifest path")
    p.add_argument("--model-out", help="preference model checkpoint (default: <out>.model)")
    p.add_argument("--provider", choices=config_mod.PROVIDERS)
    p.add_argument("--topk", type=int)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--endpoint")
    p.add_argument("--phase1-steps", type=int)
    p.set_defaults(fn=cmd_label)

    p = with_config(sub.add_parser("train", help="train a policy from the dataset and split"))
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", default="misodice", choices=[m.value for m in Method])
    p.add_argument("--mixer", choices=["linear", "vdn", "two-layer"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--phase1-model")
    p.set_defaults(fn=cmd_train)

    p = with_config(sub.add_parser("eval", help="roll out a policy and report mean +- std return"))
    p.add_argument("--policy")
    p.add_argument("--expert", action="store_true", help="evaluate the optimal joint policy instead")
    p.add_argument("--episodes", type=int)
    p.add_argument("--eval-seeds", type=int)
    p.add_argument("--out", help="per-seed CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the oracle and certificate checks")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("plot", help="aggregate metrics CSVs of several runs into learning curves")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("inspect", help="describe a dataset, checkpoint or manifest")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
