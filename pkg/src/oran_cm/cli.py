"""Command-line entry point: ``oran-cm <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint as ckpt_io
from .attacks import AttackConfig
from .defense import DefenseConfig, finetune
from .evaluation import (
    AttackGrid, DataError, ExperimentPlan, load_checkpoint_file, load_scenario, run_experiment, save_scenario,
    write_manifest,
)
from .rl_train import TrainConfig, train
from .sim_env import RewardConfig, ScenarioSpec, Scenario, make_suite

log = logging.getLogger("oran_cm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from exc


def _ints(text):
    return [int(x) for x in _floats(text)]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed for this run")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--config", help="JSON file whose keys override option defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    suite = _Parser(add_help=False)
    suite.add_argument("--scenarios", nargs="+", help="scenario files or directories (default: generate)")
    suite.add_argument("--suite-seed", type=int, default=0, help="seed of a generated suite")
    suite.add_argument("--n-scenarios", type=int, default=5)

    p = _Parser(prog="oran-cm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate scenario files")
    g.add_argument("--scenarios", type=int, default=5)
    g.add_argument("--cells", type=int, default=6)
    g.add_argument("--ues", type=int, default=50)
    g.add_argument("--macros", type=int, default=2)

    t = sub.add_parser("train", parents=[common, suite], help="train a DQN checkpoint")
    t.add_argument("--episodes", type=int, default=TrainConfig.episodes)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--gamma", type=float, default=TrainConfig.gamma)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--target-sync", type=int, default=TrainConfig.target_sync)
    t.add_argument("--eval-every", type=int, default=TrainConfig.eval_every)
    t.add_argument("--lam", type=float, default=RewardConfig.lam)
    t.add_argument("--utility", choices=("log", "sum"), default=RewardConfig.utility)

    f = sub.add_parser("finetune", parents=[common, suite], help="fine-tune a checkpoint with a defense")
    f.add_argument("--model", required=True)
    f.add_argument("--kind", choices=("adversarial", "regularized"), default="regularized")
    f.add_argument("--episodes", type=int, default=DefenseConfig.finetune_episodes)
    f.add_argument("--kappa", type=float, default=DefenseConfig.kappa)
    f.add_argument("--hinge-cap", type=float, default=DefenseConfig.hinge_cap)
    f.add_argument("--pnr-range", type=_floats, default=list(DefenseConfig.pnr_train_range))
    f.add_argument("--lr", type=float, default=DefenseConfig.lr)
    f.add_argument("--raw-q", action="store_true", help="regularize raw scores instead of probabilities")

    e = sub.add_parser("eval", parents=[common, suite], help="benign evaluation of a policy")
    e.add_argument("--policy", choices=("gnn", "maxrsrp"), default="gnn")
    e.add_argument("--model", help="checkpoint (gnn policy)")
    e.add_argument("--noise-pnr", type=_floats, default=[], help="uniform-noise PNRs for maxRSRP")
    e.add_argument("--instances", type=int, default=8)

    a = sub.add_parser("attack", parents=[common, suite], help="attack a trained policy")
    a.add_argument("--model", required=True)
    a.add_argument("--surface", choices=("digital", "physical", "patch"), default="physical")
    a.add_argument("--pnr", "--budget", dest="budget", type=_floats, required=True,
                   help="budget(s): PNR in dB, or epsilon for the digital surface")
    a.add_argument("--mode", choices=("whitebox", "blackbox"), default="whitebox")
    a.add_argument("--width", type=_ints, default=[10], help="patch width(s)")
    a.add_argument("--steps", type=int, default=AttackConfig.steps)
    a.add_argument("--target", choices=("macro-overload", "worst-action"), default="macro-overload")
    a.add_argument("--surrogate-seed", type=int, default=12345)

    s = sub.add_parser("sweep", parents=[common, suite], help="run a full experiment plan")
    s.add_argument("--models", nargs="+", default=[],
                   help="checkpoints as DEFENSE:SEED:PATH (defense 'none' for undefended)")
    s.add_argument("--surfaces", nargs="+", default=["physical"],
                   help="attack grids as SURFACE[/MODE]")
    s.add_argument("--budgets", type=_floats, default=[0, 3, 6, 9, 12, 15, 18, 21])
    s.add_argument("--widths", type=_ints, default=[10, 20])
    s.add_argument("--noise-pnr", type=_floats, default=[])
    s.add_argument("--instances", type=int, default=8)
    s.add_argument("--steps", type=int, default=AttackConfig.steps)
    return p


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config``."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed config file: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError("config file must hold an object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(k.replace("-", "_") for k in doc) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})
    return parser.parse_args(argv)


def _scenarios(args) -> list[Scenario]:
    if not args.scenarios:
        return make_suite(args.n_scenarios, seed=args.suite_seed)
    files = []
    for item in args.scenarios:
        path = Path(item)
        if path.is_dir():
            files += sorted(p for p in path.glob("*.json") if p.name != "manifest.json")
        elif path.exists():
            files.append(path)
        else:
            raise DataError(f"scenario file not found: {item}")
    if not files:
        raise DataError("no scenario files found")
    return [load_scenario(f) for f in files]


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("verbose",)}


def cmd_gen(args):
    out = Path(args.out)
    paths = []
    for k in range(args.scenarios):
        sc = Scenario(ScenarioSpec(seed=args.seed + k, N=args.cells, M=args.ues, n_macro=args.macros))
        paths.append(save_scenario(sc, out / f"scenario_{k:03d}.json"))
    write_manifest(out, "gen", _config(args))
    print(f"wrote {len(paths)} scenario files to {out}")


def cmd_train(args):
    scs = _scenarios(args)
    cfg = TrainConfig(episodes=args.episodes, lr=args.lr, gamma=args.gamma, batch_size=args.batch_size,
                      target_sync=args.target_sync, eval_every=args.eval_every, seed=args.seed)
    rcfg = RewardConfig(lam=args.lam, utility=args.utility)
    res = train(scs, cfg, rcfg)
    out = Path(args.out)
    path = ckpt_io.save(ckpt_io.Checkpoint(res.params, res.norm, rcfg, asdict(cfg)), out / "model.ckpt")
    with open(out / "train_log.csv", "w") as fh:
        fh.write("episode,return,loss,eval_coverage\n")
        for r in res.log:
            fh.write(f"{r['episode']},{r['return']!r},{r['loss']!r},{r['eval_coverage']!r}\n")
    write_manifest(out, "train", _config(args))
    print(f"wrote {path} ({res.updates} updates)")


def cmd_finetune(args):
    scs = _scenarios(args)
    base = load_checkpoint_file(args.model)
    cfg = DefenseConfig(kind=args.kind, pnr_train_range=tuple(args.pnr_range), kappa=args.kappa,
                        hinge_cap=args.hinge_cap, finetune_episodes=args.episodes, lr=args.lr,
                        use_probs=not args.raw_q, seed=args.seed)
    defended = finetune(base, scs, cfg)
    path = ckpt_io.save(defended, Path(args.out) / f"{args.kind}.ckpt")
    write_manifest(args.out, "finetune", _config(args))
    print(f"wrote {path}")


def _models(args, required: bool):
    out: dict = {}
    for spec in args.models:
        try:
            defense, seed, path = spec.split(":", 2)
            seed = int(seed)
        except ValueError as exc:
            raise UsageError(f"model spec {spec!r} is not DEFENSE:SEED:PATH") from exc
        out.setdefault(defense, {})[seed] = load_checkpoint_file(path)
    if required and not out:
        raise UsageError("at least one --models entry is needed")
    return out


def cmd_eval(args):
    scs = _scenarios(args)
    if args.policy == "gnn":
        if not args.model:
            raise UsageError("--model is required for the gnn policy")
        plan = ExperimentPlan(scs, {"none": {args.seed: load_checkpoint_file(args.model)}}, ("gnn",),
                              seeds=(args.seed,))
    else:
        plan = ExperimentPlan(scs, {}, ("maxrsrp",), noise_budgets=tuple(args.noise_pnr),
                              noise_instances=args.instances, seeds=(args.seed,))
    rows, _ = run_experiment(plan, args.out)
    write_manifest(args.out, "eval", _config(args))
    pooled = [r for r in rows if r.scenario == "pooled"]
    for r in pooled:
        print(f"{r.policy} {r.surface} {r.budget:g}: coverage {r.coverage / 1e6:.2f} Mbps, "
              f"capacity {r.capacity / 1e9:.3f} Gbps")


def cmd_attack(args):
    scs = _scenarios(args)
    model = load_checkpoint_file(args.model)
    widths = tuple(args.width) if args.surface == "patch" else ()
    grid = AttackGrid(args.surface, args.mode, tuple(args.budget), widths, args.steps, args.target)
    plan = ExperimentPlan(scs, {"none": {args.seed: model}}, ("gnn",), (grid,), seeds=(args.seed,),
                          attack_seed=args.seed, surrogate_seed=args.surrogate_seed)
    rows, _ = run_experiment(plan, args.out)
    write_manifest(args.out, "attack", _config(args))
    for r in rows:
        if r.scenario == "pooled":
            print(f"{r.surface} budget {r.budget:g} width {r.patch_width}: coverage {r.coverage / 1e6:.2f} Mbps")


def cmd_sweep(args):
    scs = _scenarios(args)
    models = _models(args, required=False)
    grids = []
    for item in args.surfaces:
        surface, _, mode = item.partition("/")
        grids.append(AttackGrid(surface, mode or "whitebox", tuple(args.budgets),
                                tuple(args.widths) if surface == "patch" else (), args.steps))
    seeds = sorted({s for m in models.values() for s in m}) or [args.seed]
    policies = ("gnn", "maxrsrp") if models else ("maxrsrp",)
    plan = ExperimentPlan(scs, models, policies, tuple(grids) if models else (), tuple(args.noise_pnr),
                          args.instances, tuple(seeds), attack_seed=args.seed)
    rows, _ = run_experiment(plan, args.out)
    write_manifest(args.out, "sweep", _config(args))
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'metrics.csv'}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval,
            "attack": cmd_attack, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ckpt_io.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
