"""Command-line entry point: ``latent-refine <subcommand> [flags]``.

Config files are JSON with optional ``refinement``, ``train``, ``task`` and
``arm`` sections; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

from . import bench
from .core import MODES, ROUND_POLICIES, Featurizer, RefinementConfig
from .dynamics import CheckpointError, CheckpointPair, load_checkpoint, make_oracle_arm
from .engine import evaluate, export_traces, export_trajectories, find_flip_cases, trace_compare
from .tasks import FAMILIES, SUPERVISION_FORMATS, TaskSchemaError, generate, read_jsonl, write_jsonl
from .train import TrainConfig, TrainingDivergedError, train_mlp

log = logging.getLogger("latent_refine")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: invalid JSON ({e})")
    if not isinstance(doc, dict):
        raise UsageError(f"config {path}: top level must be an object")
    unknown = set(doc) - {"refinement", "train", "task", "arm"}
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    return doc


def _typed(cls, section: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    return dict(section)


_REFINE_FLAGS = {"alpha": "alpha", "eta": "eta", "steps": "steps_T", "rounds": "rounds_R",
                 "mode": "mode", "round_policy": "round_policy"}


def refinement_from(args, conf: dict, base: RefinementConfig | None = None) -> RefinementConfig:
    values = asdict(base or RefinementConfig())
    values.update(_typed(RefinementConfig, conf.get("refinement", {}), "refinement"))
    for flag, name in _REFINE_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if getattr(args, "literal_sign", False):
        values["literal_sign"] = True
    return RefinementConfig(**values)


def train_config_from(args, conf: dict, base: TrainConfig | None = None) -> TrainConfig:
    values = {f.name: getattr(base or TrainConfig(), f.name) for f in fields(TrainConfig)}
    values.update(_typed(TrainConfig, conf.get("train", {}), "train"))
    for name in ("epochs", "lr", "batch_size", "hidden", "dim", "latent_weight"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "checkpoint_epochs", None):
        values["checkpoint_epochs"] = tuple(args.checkpoint_epochs)
    if getattr(args, "steps", None) is not None:
        values["steps_T"] = args.steps
    values["seed"] = args.seed
    values.pop("train_refinement", None)
    return TrainConfig(**values)


def _task_params(args, conf: dict) -> dict:
    params = dict(conf.get("task", {}))
    for name in ("nodes", "depth", "distractors", "chain_len", "modulus"):
        v = getattr(args, name, None)
        if v is not None:
            params[name] = v
    return params


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, conf: dict, default_count: int):
    if getattr(args, "data", None):
        return read_jsonl(args.data)
    params = _task_params(args, conf)
    family = params.pop("family", None) or args.family
    count = params.pop("count", None) or args.count or default_count
    return generate(family, count, seed=args.seed, **params)


def _models(args, conf: dict, data, cfg: RefinementConfig):
    """Main model and reference pair for the chosen backend."""
    if args.backend == "oracle":
        arm_conf = dict(conf.get("arm", {}))
        oc = bench.OracleArmConfig(**{k: v for k, v in arm_conf.items() if k != "refinement"},
                                   refinement=cfg, noise_seed=args.seed)
        if args.noise is not None:
            feat = Featurizer.create(data[0].width, oc.dim, oc.featurizer_seed)
            model, pair = make_oracle_arm(feat, args.noise, oc.pull, args.seed, len(data[0].choices))
            return model, pair
        arm = bench.build_oracle_arm(oc, data)
        log.info("oracle arm calibrated: noise %.4f, baseline accuracy %.2f%%", arm.noise, arm.baseline_accuracy)
        return arm.model, arm.pair
    if not args.model:
        raise UsageError("--backend mlp needs --model <checkpoint>")
    model = load_checkpoint(args.model)
    pair = None
    if args.good_ckpt or args.bad_ckpt:
        if not (args.good_ckpt and args.bad_ckpt):
            raise UsageError("--good-ckpt and --bad-ckpt must be given together")
        pair = CheckpointPair(load_checkpoint(args.good_ckpt), load_checkpoint(args.bad_ckpt))
    if cfg.uses_search and pair is None:
        raise UsageError(f"mode {cfg.mode!r} needs --good-ckpt and --bad-ckpt")
    return model, pair


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, conf):
    data = _dataset(args, conf, 1000)
    path = _out(args) / f"{data[0].family}.jsonl"
    write_jsonl(data, path)
    print(f"wrote {len(data)} instances to {path}")


def cmd_train(args, conf):
    data = _dataset(args, conf, 2000)
    tcfg = train_config_from(args, conf)
    res = train_mlp(data, args.format, tcfg, out_dir=_out(args))
    with (Path(args.out) / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(res.history, 1):
            w.writerow([i, repr(loss)])
    for epoch, path in sorted(res.paths.items()):
        print(f"epoch {epoch}: {path}")


def cmd_eval(args, conf):
    data = _dataset(args, conf, 500)
    cfg = refinement_from(args, conf)
    model, pair = _models(args, conf, data, cfg)
    trajs = evaluate(data, model, pair, cfg, args.workers)
    out = _out(args)
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "gold", "predicted", "correct"])
        for t in trajs:
            w.writerow([t.instance_id, t.gold, t.predicted, int(t.correct)])
    if args.trajectories:
        export_trajectories(trajs, out / "trajectories.jsonl")
    acc = bench.batch_accuracy(trajs)
    print(f"accuracy {acc:.2f}% over {len(trajs)} instances (mode={cfg.mode})")


def cmd_ablate(args, conf):
    cfg = refinement_from(args, conf, bench.OracleArmConfig().refinement)
    if args.backend == "mlp" and not args.model:
        arm_cfg = bench.MlpArmConfig(refinement=cfg)
        report = bench.run_mlp_ablation(args.seeds or [args.seed], arm_cfg)
    else:
        data = _dataset(args, conf, 1000)
        model, pair = _models(args, conf, data, cfg)
        report = bench.run_ablation(data, model, pair, cfg, args.seeds or bench.DEFAULT_SEEDS, args.workers)
    path = report.to_csv(_out(args) / "ablation.csv")
    print(report.format())
    print(f"wrote {path}")


def cmd_sweep(args, conf):
    data = _dataset(args, conf, 1000)
    cfg = refinement_from(args, conf, bench.OracleArmConfig().refinement)
    model, pair = _models(args, conf, data, cfg)
    alphas = args.alphas or bench.default_alpha_grid()
    etas = args.etas or bench.default_eta_grid(model.dim)
    grid = bench.run_sweep(data, model, pair, alphas, etas, args.rounds or 3, cfg, args.seed, args.workers)
    path = grid.to_csv(_out(args) / "sweep.csv")
    print(f"wrote {len(alphas) * len(etas)} cells to {path}")


def cmd_trace(args, conf):
    data = _dataset(args, conf, 1000)
    cfg = refinement_from(args, conf, bench.OracleArmConfig().refinement)
    model, pair = _models(args, conf, data, cfg)
    if args.instance:
        chosen = [x for x in data if x.id == args.instance]
        if not chosen:
            raise UsageError(f"no instance with id {args.instance!r}")
        records = [trace_compare(chosen[0], model, pair, cfg)]
    else:
        records = find_flip_cases(data, model, pair, cfg, limit=args.limit)
    path = export_traces(records, _out(args) / "traces.json")
    print(f"wrote {len(records)} trace(s) to {path}")


def cmd_tokens(args, conf):
    data = _dataset(args, conf, 1000)
    cfg = refinement_from(args, conf)
    report = bench.run_token_report(data, cfg, args.tokens_per_step)
    path = report.to_csv(_out(args) / "tokens.csv")
    for r in report.rows:
        print(f"{r.family}: cot {r.mean_cot:.2f}, latent {r.mean_latent:.2f} "
              f"(+{r.mean_markers:g} markers), reduction {r.reduction_pct:.2f}%")
    print(f"wrote {path}")


def cmd_cost(args, conf):
    cfg = refinement_from(args, conf, bench.MlpArmConfig().refinement)
    arm_cfg = bench.MlpArmConfig(refinement=cfg, train=train_config_from(args, conf, bench.MlpArmConfig().train))
    data = _dataset(args, conf, arm_cfg.n_train + arm_cfg.n_test)
    n_train = int(len(data) * arm_cfg.n_train / (arm_cfg.n_train + arm_cfg.n_test))
    out = _out(args)
    report = bench.run_cost_arms(data[:n_train], data[n_train:],
                                 bench.CostConfig(arm_cfg, args.extra_epochs, args.seed), out / "checkpoints")
    path = report.to_csv(out / "cost.csv")
    for r in report.rows:
        print(f"{r.arm:<20} acc {r.accuracy:6.2f}%  {r.wall_time_s:8.3f}s  {r.peak_memory_mb:8.2f} MB")
    print(f"wrote {path}")


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "trace": cmd_trace, "tokens": cmd_tokens, "cost": cmd_cost,
}


# ---------------------------------------------------------------------------
# parser


def _shared(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_flags(p, family="dag_reach"):
    p.add_argument("--data", help="JSONL instance file (otherwise instances are generated)")
    p.add_argument("--family", choices=FAMILIES, default=family)
    p.add_argument("--count", type=int)
    p.add_argument("--nodes", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--distractors", type=int)
    p.add_argument("--chain-len", dest="chain_len", type=int)
    p.add_argument("--modulus", type=int)


def _refine_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--round-policy", dest="round_policy", choices=ROUND_POLICIES)
    p.add_argument("--literal-sign", action="store_true")
    p.add_argument("--good-ckpt")
    p.add_argument("--bad-ckpt")
    p.add_argument("--model", help="main model checkpoint (mlp backend)")
    p.add_argument("--backend", choices=("oracle", "mlp"), default="oracle")
    p.add_argument("--noise", type=float, help="oracle noise level (skips calibration)")
    p.add_argument("--workers", type=int, default=1)


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--latent-weight", dest="latent_weight", type=float)
    p.add_argument("--checkpoint-epochs", dest="checkpoint_epochs", type=int, nargs="+")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-refine", description="Latent-state refinement experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a task corpus as JSONL")
    _shared(p); _data_flags(p)

    p = sub.add_parser("train", help="train the MLP backend and write epoch snapshots")
    _shared(p); _data_flags(p); _train_flags(p)
    p.add_argument("--format", choices=SUPERVISION_FORMATS, default="latent_cot")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="evaluate one refinement setting")
    _shared(p); _data_flags(p); _refine_flags(p)
    p.add_argument("--trajectories", action="store_true", help="also export full trajectories")

    p = sub.add_parser("ablate", help="accuracy of the four modes")
    _shared(p); _data_flags(p); _refine_flags(p)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("sweep", help="(alpha, eta) grid of mode=both accuracy")
    _shared(p); _data_flags(p); _refine_flags(p)
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--etas", type=float, nargs="+")

    p = sub.add_parser("trace", help="before/after answer distributions")
    _shared(p); _data_flags(p); _refine_flags(p)
    p.add_argument("--instance", help="trace this instance id instead of searching for flips")
    p.add_argument("--limit", type=int, default=5)

    p = sub.add_parser("tokens", help="emitted-token accounting")
    _shared(p); _data_flags(p, family="mod_chain"); _refine_flags(p)
    p.add_argument("--tokens-per-step", dest="tokens_per_step", type=int, default=10)

    p = sub.add_parser("cost", help="refinement at training vs inference time")
    _shared(p); _data_flags(p); _refine_flags(p); _train_flags(p)
    p.add_argument("--extra-epochs", dest="extra_epochs", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        conf = _load_config(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](args, conf)
    except (UsageError, TaskSchemaError, CheckpointError, TrainingDivergedError, ValueError, KeyError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
