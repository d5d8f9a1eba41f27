"""Command-line entry point.

Subcommands write their outputs into ``--out-dir`` (or the config's
``out_dir``) together with a manifest that echoes the resolved config, the
seeds used, and a SHA-256 of every file written.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from typing import Dict, Optional, Sequence

from .config import RunConfig, load_config, parse_int_list
from .core import SystemConfig, particle_loss, particle_trajectory
from .dp import (
    dumps_policy,
    evaluate_sequence,
    loads_policy,
    policy_actions,
    policy_document,
)
from .errors import BudgetError, ConfigError, OcformerError
from .experiments import (
    BENCH_COLUMNS,
    ROBUSTNESS_COLUMNS,
    SWEEP_COLUMNS,
    Dataset,
    generate_dataset,
    quadratic_fit,
    quantizer_bench,
    robustness_study,
    run_training_sweep,
    train,
    write_csv,
)
from .quantization import build_action_net, build_state_grid, quantized_cost_matrix

log = logging.getLogger("ocformer")

EXIT_OK, EXIT_VALIDATION, EXIT_BUDGET, EXIT_IO = 0, 2, 3, 4

DATASET_FILE = "dataset.json"
POLICY_FILE = "policy.json"
REPORT_FILE = "report.json"
METRICS_FILE = "metrics.json"
SWEEP_FILE = "sweep.csv"
ROBUSTNESS_FILE = "robustness.csv"
BENCH_FILE = "quantizer_bench.csv"
MANIFEST_FILE = "manifest.json"


def dumps(obj) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_text(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def write_outputs(out_dir: str, files: Dict[str, str], command: str, manifest: dict) -> None:
    """Write ``files`` and a manifest hashing each of them."""
    os.makedirs(out_dir, exist_ok=True)
    for name, text in files.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    doc = dict(manifest)
    doc["command"] = command
    doc["files"] = {name: sha256(text) for name, text in sorted(files.items())}
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(doc))


def load_dataset(path: str) -> Dataset:
    try:
        data = json.loads(read_text(path))
        return Dataset.from_json(data)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, OcformerError):
            raise
        raise ConfigError(f"{path} is not a dataset file: {exc}") from None


def check_dataset(cfg: SystemConfig, ds: Dataset) -> None:
    if (ds.spec.N, ds.spec.d) != (cfg.N, cfg.d):
        raise ConfigError(
            f"dataset has N={ds.spec.N}, d={ds.spec.d} but the config has N={cfg.N}, d={cfg.d}"
        )


def resolve(args) -> RunConfig:
    """Config file plus command-line overrides."""
    rc = load_config(args.config)
    if getattr(args, "budget", None) is not None:
        rc = dataclasses.replace(rc, budget=args.budget)
    if getattr(args, "seed", None) is not None:
        rc = dataclasses.replace(rc, actions=dataclasses.replace(rc.actions, seed=args.seed))
    if getattr(args, "levels", None) is not None and args.command == "sweep":
        rc = dataclasses.replace(rc, sweep=type(rc.sweep)(tuple(parse_int_list(args.levels))))
    if getattr(args, "sizes", None) is not None and args.command == "robustness":
        rc = dataclasses.replace(
            rc, robustness=dataclasses.replace(rc.robustness, sizes=tuple(parse_int_list(args.sizes)))
        )
    return rc


def out_dir(args, rc: RunConfig) -> str:
    return args.out_dir if args.out_dir is not None else rc.out_dir


def echo(rc: RunConfig) -> dict:
    """Resolved config without the output location."""
    doc = rc.to_dict()
    doc.pop("out_dir")
    return doc


def make_net(rc: RunConfig):
    a = rc.actions
    return build_action_net(rc.system, a.mode, size=a.size, seed=a.seed, resolution=a.resolution)


# ---------------------------------------------------------------------------
# commands

def cmd_generate_data(args) -> int:
    rc = resolve(args)
    ds = generate_dataset(rc.dataset_spec(), rc.system.state_box)
    text = dumps(ds.to_json())
    write_outputs(
        out_dir(args, rc),
        {DATASET_FILE: text},
        "generate-data",
        {"config": echo(rc), "seed": rc.dataset.seed},
    )
    print(os.path.join(out_dir(args, rc), DATASET_FILE))
    return EXIT_OK


def cmd_train(args) -> int:
    rc = resolve(args)
    if args.dataset is None:
        raise ConfigError("train needs --dataset")
    ds_text = read_text(args.dataset)
    ds = load_dataset(args.dataset)
    cfg = rc.system
    check_dataset(cfg, ds)
    grid = build_state_grid(cfg.state_box, rc.quantization.n, cfg.N)
    net = make_net(rc)
    x, y = Dataset.arrays(ds.train)
    res = train(x, y, net, grid, rc.quantization.ell, cfg, budget=rc.budget)
    doc = policy_document(
        res.policy,
        echo(rc),
        {"grid": grid.describe(), "dataset_sha256": sha256(ds_text)},
    )
    report = {
        "value": res.value,
        "state_counts": res.reach.state_counts,
        "wall_seconds": res.wall_seconds,
        "action_indices": list(res.policy.action_indices),
    }
    write_outputs(
        out_dir(args, rc),
        {POLICY_FILE: dumps_policy(doc), REPORT_FILE: dumps(report)},
        "train",
        {"config": echo(rc), "seed": rc.actions.seed, "dataset_sha256": sha256(ds_text)},
    )
    print(f"value {res.value!r}  states {res.reach.state_counts}  {res.wall_seconds:.2f}s")
    return EXIT_OK


def evaluate_policy(doc: dict, ds: Dataset, model: str, split: str) -> dict:
    """Particle loss and lifted cost of a stored policy on one dataset split."""
    rc = RunConfig.from_dict(doc["config"])
    cfg = rc.system
    check_dataset(cfg, ds)
    actions = policy_actions(doc)
    if len(actions) != cfg.T:
        raise ConfigError(f"policy holds {len(actions)} layers but T={cfg.T}")
    samples = {"train": ds.train, "test": ds.test, "all": ds.train + ds.test}[split]
    x, y = Dataset.arrays(samples)
    metrics = {"model": model, "split": split, "samples": len(samples)}
    if model == "exact":
        outputs = [particle_trajectory(xi, actions, cfg)[-1] for xi in x]
        metrics["particle_loss"] = particle_loss(outputs, y)
        metrics["lifted_cost"] = evaluate_sequence(x, y, actions, "exact", cfg)
    elif model == "quantized":
        grid = build_state_grid(cfg.state_box, rc.quantization.n, cfg.N)
        cost = quantized_cost_matrix(grid, cfg.lam)
        metrics["lifted_cost"] = evaluate_sequence(
            x, y, actions, "triply-quantized", cfg, grid, rc.quantization.ell, cost
        )
    else:
        raise ConfigError(f"unknown model {model!r}")
    return metrics


def cmd_evaluate(args) -> int:
    if args.policy is None or args.dataset is None:
        raise ConfigError("evaluate needs --policy and --dataset")
    doc = loads_policy(read_text(args.policy))
    ds = load_dataset(args.dataset)
    metrics = evaluate_policy(doc, ds, args.model, args.split)
    text = dumps(metrics)
    if args.out_dir is not None:
        write_outputs(args.out_dir, {METRICS_FILE: text}, "evaluate", {"policy": sha256(read_text(args.policy))})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = resolve(args)
    cfg = rc.system
    if args.dataset is not None:
        ds = load_dataset(args.dataset)
        check_dataset(cfg, ds)
    else:
        ds = generate_dataset(rc.dataset_spec(), cfg.state_box)
    grid = build_state_grid(cfg.state_box, rc.quantization.n, cfg.N)
    rows = run_training_sweep(
        cfg, ds, grid, rc.quantization.ell, rc.sweep.levels, rc.actions.seed, rc.budget
    )
    text = write_csv(rows, SWEEP_COLUMNS)
    r2 = None
    if len(rows) >= 3:
        _, r2 = quadratic_fit([r["level"] for r in rows], [r["wall_seconds"] for r in rows])
    write_outputs(
        out_dir(args, rc),
        {SWEEP_FILE: text},
        "sweep",
        {"config": echo(rc), "seed": rc.actions.seed, "runtime_quadratic_r2": r2},
    )
    sys.stdout.write(text)
    return EXIT_OK


def cmd_robustness(args) -> int:
    rc = resolve(args)
    cfg = rc.system
    rb = rc.robustness
    grid = build_state_grid(cfg.state_box, rc.quantization.n, cfg.N)
    net = build_action_net(cfg, "sample", size=rb.net_size, seed=rc.actions.seed)
    rows = robustness_study(
        cfg,
        rc.dataset_spec(),
        cfg.state_box,
        grid,
        rc.quantization.ell,
        net,
        rb.sizes,
        rb.seeds,
        truth_size=rb.truth_size,
        truth_seed=rb.truth_seed,
        budget=rc.budget,
    )
    text = write_csv(rows, ROBUSTNESS_COLUMNS)
    write_outputs(
        out_dir(args, rc),
        {ROBUSTNESS_FILE: text},
        "robustness",
        {"config": echo(rc), "seed": rc.actions.seed, "truth_seed": rb.truth_seed},
    )
    sys.stdout.write(text)
    return EXIT_OK


def cmd_quantizer_bench(args) -> int:
    rc = resolve(args)
    atoms = parse_int_list(args.sizes) if args.sizes else [4, 16, 100, 900]
    ells = parse_int_list(args.levels) if args.levels else [rc.quantization.ell, 100]
    if any(v < 1 for v in atoms + ells):
        raise ConfigError("atom counts and levels must be >= 1")
    seed = 0 if args.seed is None else args.seed
    rows = quantizer_bench(atoms, ells, args.samples, seed)
    text = write_csv(rows, BENCH_COLUMNS)
    write_outputs(
        out_dir(args, rc),
        {BENCH_FILE: text},
        "quantizer-bench",
        {"seed": seed, "samples": args.samples},
    )
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "quantizer-bench": cmd_quantizer_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocformer",
        description="Train transformer weights by dynamic programming on a quantized measure MDP.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, policy=False):
        p.add_argument("--config", help="JSON run config (defaults used when omitted)")
        p.add_argument("--out-dir", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="action-net seed (overrides the config)")
        p.add_argument("--budget", type=int, help="max ensembles per stage")
        if dataset:
            p.add_argument("--dataset", help="dataset JSON from generate-data")
        if policy:
            p.add_argument("--policy", help="policy JSON from train")
        return p

    common(sub.add_parser("generate-data", help="draw and label a dataset"))
    common(sub.add_parser("train", help="run the dynamic program"), dataset=True)
    p = common(sub.add_parser("evaluate", help="score a stored policy"), dataset=True, policy=True)
    p.add_argument("--model", choices=("exact", "quantized"), default="exact")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p = common(sub.add_parser("sweep", help="train at increasing action levels"), dataset=True)
    p.add_argument("--levels", help="comma-separated action levels, e.g. 10,20,30")
    p = common(sub.add_parser("robustness", help="value gap versus training-set size"))
    p.add_argument("--sizes", help="comma-separated training-set sizes, e.g. 5,15,35")
    p = common(sub.add_parser("quantizer-bench", help="measure quantizer error against its bound"))
    p.add_argument("--sizes", help="comma-separated atom counts")
    p.add_argument("--levels", help="comma-separated quantization levels ell")
    p.add_argument("--samples", type=int, default=100, help="random simplex points per size")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OcformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
