"""Command-line entry point: train / eval / audit / gradcheck / collapse-check / sweep.

Exit codes: 0 ok, 1 usage or configuration error, 2 numerical failure
(diverged training, failed gradient or collapse check), 3 data error.
The dataset root comes from --data-dir or the PRPT_DATA_DIR environment
variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .audit import audit, collapse_check
from .autograd import ParamStore, gradcheck, seeded_rng
from .blocks import LinearModuleError
from .checkpoint import CheckpointError, load_training_state
from .data import DataError, load_cifar, make_synthetic
from .layers import BatchNormState
from .networks import (DepthError, NetworkConfig, build_network,
                       config_from_manifest_header, format_manifest,
                       parse_manifest, summarize)
from .tensor import ConvParams, Tensor
from .train import NumericalFailure, TrainConfig, aggregate_runs, evaluate, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_DATA = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_network_flags(p):
    p.add_argument("--arch", default="plain",
                   choices=["plain", "resnet-preact", "resnet-preact-bottleneck", "dfn-mr1"],
                   help="network family")
    p.add_argument("--depth", type=int, default=None, help="total weighted-layer count")
    p.add_argument("--stage-blocks", default=None,
                   help="custom per-stage block counts, e.g. 14,14,13 (overrides --depth)")
    p.add_argument("--module", default="paired", choices=["paired", "proportional"],
                   help="module kind; proportional removes ReLUs per --ratio/--removal-type")
    p.add_argument("--ratio", default=None,
                   help="conv:ReLU ratio N:M for the plain family (default 2:1 when proportional)")
    p.add_argument("--removal-type", default=None,
                   help="which ReLU to remove: first/second (building), 1/2/3 (bottleneck), "
                        "type1/type2 (merge-run)")
    p.add_argument("--pairing", default="post", choices=["post", "pre"],
                   help="activation placement for the plain family")
    p.add_argument("--drop-bn-with-relu", action="store_true",
                   help="also remove the batch norm adjacent to each removed ReLU")


def _add_data_flags(p):
    p.add_argument("--dataset", default="cifar10", choices=["cifar10", "cifar100", "synthetic"],
                   help="dataset to use")
    p.add_argument("--data-dir", default=None, help="dataset root (default: $PRPT_DATA_DIR or ./data)")
    p.add_argument("--subset", type=int, default=None, metavar="N",
                   help="train on a deterministic N-sample subset")
    p.add_argument("--synthetic-count", type=int, default=1024,
                   help="sample count when --dataset synthetic")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=400, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="total mini-batch size")
    p.add_argument("--lr", type=float, default=0.1, help="base learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="momentum coefficient")
    p.add_argument("--nesterov", action=argparse.BooleanOptionalAction, default=True,
                   help="use the Nesterov momentum form")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="L2 weight decay")
    p.add_argument("--workers", type=int, default=1,
                   help="data workers; 1 guarantees bit-reproducible runs")
    p.add_argument("--no-augment", action="store_true", help="disable crop/flip augmentation")


def build_parser() -> _Parser:
    parser = _Parser(prog="propmod",
                     description="Train and audit networks with proportional conv:ReLU modules.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_network_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--out", default="out", help="output directory root")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_network_flags(p)
    _add_data_flags(p)
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--ckpt", required=True, help="checkpoint file to load")
    p.add_argument("--manifest", default=None, help="network manifest to rebuild the model from")

    p = sub.add_parser("audit", help="count convs, ReLUs, FLOPs, and parameters",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_network_flags(p)
    p.add_argument("--classes", type=int, default=10, choices=[10, 100], help="classifier width")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--out", default=None, help="also write the audit as CSV here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check (double precision)",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_network_flags(p)
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--threshold", type=float, default=1e-6,
                   help="max relative error allowed; exceeding it exits nonzero")
    p.add_argument("--sample", type=int, default=64, help="coordinates checked per tensor")

    p = sub.add_parser("collapse-check", help="stacked conv pair vs composed single conv",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--in-channels", type=int, default=2, help="input channels")
    p.add_argument("--mid-channels", type=int, default=3, help="channels between the convs")
    p.add_argument("--out-channels", type=int, default=2, help="output channels")
    p.add_argument("--kernel", type=int, default=3, help="kernel extent of both convs")
    p.add_argument("--interior", default="none", choices=["none", "bn", "relu"],
                   help="what sits between the convolutions")
    p.add_argument("--probes", type=int, default=10, help="random probe inputs")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--threshold", type=float, default=1e-10,
                   help="max deviation for an affine stack to count as collapsed")

    p = sub.add_parser("sweep", help="run a grid of cells x seeds and aggregate mean/std",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("spec", help="JSON sweep specification")
    p.add_argument("--out", default="out/sweep", help="output directory")
    p.add_argument("--parallel", type=int, default=1, help="cells run in this many processes")
    return parser


# -- shared construction -------------------------------------------------------


def _network_config(args, num_classes: int) -> NetworkConfig:
    module = args.module
    removal = args.removal_type
    ratio = args.ratio
    if removal is not None or (ratio is not None and ratio != "1:1"):
        module = "proportional"
    if module == "paired":
        ratio = "1:1"
        removal = "none" if args.arch != "resnet-preact-bottleneck" else "0"
    else:
        if args.arch == "plain":
            ratio = ratio or "2:1"
            removal = "none"
        else:
            ratio = "1:1"
            removal = removal or {"resnet-preact": "first",
                                  "resnet-preact-bottleneck": "1",
                                  "dfn-mr1": "type1"}[args.arch]
    stage_blocks = None
    if args.stage_blocks:
        stage_blocks = tuple(int(x) for x in args.stage_blocks.split(","))
    return NetworkConfig(
        family=args.arch,
        depth=args.depth if stage_blocks is None else None,
        stage_blocks=stage_blocks,
        num_classes=num_classes,
        ratio=ratio,
        removal=removal,
        pairing=args.pairing,
        drop_bn_with_relu=args.drop_bn_with_relu,
        seed=args.seed,
    )


def _load_datasets(args, seed: int):
    if args.dataset == "synthetic":
        train = make_synthetic(10, args.synthetic_count, seed, split="train")
        test = make_synthetic(10, max(args.synthetic_count // 4, 10), seed + 1, split="test")
        return train, test
    subset = (args.subset, seed) if args.subset else None
    train = load_cifar(args.data_dir, args.dataset, "train", subset=subset)
    test = load_cifar(args.data_dir, args.dataset, "test")
    return train, test


def _run_id(args) -> str:
    cfgbits = [args.arch, f"d{args.depth}" if args.depth else "custom", args.module]
    if args.module == "proportional":
        cfgbits.append((args.removal_type or args.ratio or "2:1").replace(":", "-"))
    cfgbits.append(f"s{args.seed}")
    return "-".join(cfgbits)


# -- subcommands -----------------------------------------------------------------


def cmd_train(args) -> int:
    train_data, test_data = _load_datasets(args, args.seed)
    net_cfg = _network_config(args, train_data.num_classes)
    model = build_network(net_cfg)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
        momentum=args.momentum, nesterov=args.nesterov, weight_decay=args.weight_decay,
        seed=args.seed, workers=args.workers, augment=not args.no_augment,
    )
    out_dir = Path(args.out) / _run_id(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.txt").write_text(format_manifest(model))
    record = fit(model, train_data, test_data, cfg, out_dir=out_dir, resume_from=args.resume)
    print(f"run {out_dir.name}: final test accuracy {record.final_test_acc:.4f} "
          f"(best {record.best_test_acc:.4f}), wall {record.wall_time:.1f}s, "
          f"reproducibility {record.reproducibility}")
    print(f"artifacts: {out_dir}/manifest.txt curves.csv ckpt-best.bin ckpt-final.bin")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, test_data = _load_datasets(args, args.seed)
    if args.manifest:
        header, _ = parse_manifest(Path(args.manifest).read_text())
        net_cfg = config_from_manifest_header(header)
    else:
        net_cfg = _network_config(args, test_data.num_classes)
    model = build_network(net_cfg)
    load_training_state(args.ckpt, model)
    acc = evaluate(model, test_data)
    print(f"test accuracy {acc:.4f} ({len(test_data)} samples)")
    return EXIT_OK


def cmd_audit(args) -> int:
    net_cfg = _network_config(args, args.classes)
    model = build_network(net_cfg)
    summary = summarize(model)
    r = summary.report
    print(f"arch={args.arch} depth={args.depth} ratio={net_cfg.ratio} removal={net_cfg.removal}")
    print(f"param_count={r.param_count} flops_conv={r.flops_conv} flops_relu={r.flops_relu}")
    print(f"trunk_convs={r.n_conv} trunk_relus={r.n_relu} trunk_ratio={r.ratio_text}")
    print(str(summary))
    if args.out:
        lines = ["region,convs,relus,params,flops_conv"]
        lines += [f"{row.name},{row.convs},{row.relus},{row.params},{row.flops_conv}"
                  for row in summary.rows]
        lines.append(f"total,{r.total_conv},{r.total_relu},{r.param_count},{r.flops_conv}")
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.depth is None and not args.stage_blocks:
        args.depth = 11 if args.arch == "resnet-preact-bottleneck" else 8
    net_cfg = replace(_network_config(args, 10), precision="double")
    model = build_network(net_cfg)
    rng = seeded_rng(args.seed, "gradcheck-cli")
    x = rng.standard_normal((2, 3, 8, 8))
    labels = rng.integers(0, 10, size=2)
    result = gradcheck(model.loss_builder(x, labels), model.store,
                       eps=args.eps, sample=args.sample, seed=args.seed)
    status = "PASS" if result.passed(args.threshold) else "FAIL"
    print(f"gradcheck {args.arch} depth {net_cfg.depth or net_cfg.stage_blocks}: "
          f"max rel err {result.max_rel_err:.3e} over {result.checked} coords "
          f"({result.skipped} near-kink skipped) -> {status}")
    return EXIT_OK if status == "PASS" else EXIT_NUMERICAL


def cmd_collapse_check(args) -> int:
    rng = seeded_rng(args.seed, "collapse-cli")
    k = args.kernel
    a = ConvParams(Tensor(rng.standard_normal((args.mid_channels, args.in_channels, k, k))),
                   stride=1, padding=k // 2)
    b = ConvParams(Tensor(rng.standard_normal((args.out_channels, args.mid_channels, k, k))),
                   stride=1, padding=k // 2)
    interior = args.interior
    if interior == "bn":
        interior = BatchNormState(
            gamma=rng.standard_normal(args.mid_channels) * 0.5 + 1.0,
            beta=rng.standard_normal(args.mid_channels) * 0.1,
            running_mean=rng.standard_normal(args.mid_channels) * 0.1,
            running_var=np.abs(rng.standard_normal(args.mid_channels)) + 0.5,
        )
    elif interior == "none":
        interior = None
    report = collapse_check(a, b, interior=interior, probes=args.probes,
                            seed=args.seed, threshold=args.threshold)
    expected_collapse = args.interior in ("none", "bn")
    ok = report.collapsible == expected_collapse
    print(str(report))
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _cell_args(base: dict, cell: dict, seed: int, out_root: str) -> list:
    merged = {**base, **cell}
    argv = ["train", "--seed", str(seed), "--out", str(Path(out_root) / merged["name"])]
    flag_map = {
        "arch": "--arch", "depth": "--depth", "module": "--module", "ratio": "--ratio",
        "removal_type": "--removal-type", "pairing": "--pairing", "dataset": "--dataset",
        "data_dir": "--data-dir", "subset": "--subset", "synthetic_count": "--synthetic-count",
        "epochs": "--epochs", "batch_size": "--batch-size", "lr": "--lr",
        "momentum": "--momentum", "weight_decay": "--weight-decay", "workers": "--workers",
        "stage_blocks": "--stage-blocks",
    }
    for key, flag in flag_map.items():
        if merged.get(key) is not None:
            argv += [flag, str(merged[key])]
    if merged.get("drop_bn_with_relu"):
        argv.append("--drop-bn-with-relu")
    if merged.get("no_augment"):
        argv.append("--no-augment")
    if merged.get("nesterov") is False:
        argv.append("--no-nesterov")
    return argv


def _run_sweep_cell(payload):
    """One (cell, seed) run; module-level so process pools can pickle it."""
    base, cell, seed, out_root = payload
    parser = build_parser()
    args = parser.parse_args(_cell_args(base, cell, seed, out_root))
    train_data, test_data = _load_datasets(args, args.seed)
    net_cfg = _network_config(args, train_data.num_classes)
    model = build_network(net_cfg)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
        momentum=args.momentum, nesterov=args.nesterov, weight_decay=args.weight_decay,
        seed=args.seed, workers=args.workers, augment=not args.no_augment,
    )
    out_dir = Path(args.out) / f"seed{seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.txt").write_text(format_manifest(model))
    record = fit(model, train_data, test_data, cfg, out_dir=out_dir)
    return cell["name"], seed, record.final_test_acc


def cmd_sweep(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        print(f"sweep spec not found: {spec_path}", file=sys.stderr)
        return EXIT_USAGE
    spec = json.loads(spec_path.read_text())
    cells = spec.get("cells") or []
    if not cells:
        print("sweep spec has no cells", file=sys.stderr)
        return EXIT_USAGE
    repeats = int(spec.get("repeats", 5))
    base = {k: v for k, v in spec.items() if k not in ("cells", "repeats")}
    for i, cell in enumerate(cells):
        cell.setdefault("name", f"cell{i}")

    jobs = [(base, cell, seed, args.out) for cell in cells for seed in range(repeats)]
    results, failures = {}, []
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = {pool.submit(_run_sweep_cell, job): job for job in jobs}
            for future, job in futures.items():
                try:
                    name, seed, acc = future.result()
                    results.setdefault(name, []).append((seed, acc))
                except (Exception, SystemExit) as err:  # keep completed cells
                    failures.append((job[1]["name"], job[2], str(err)))
    else:
        for job in jobs:
            try:
                name, seed, acc = _run_sweep_cell(job)
                results.setdefault(name, []).append((seed, acc))
            except (Exception, SystemExit) as err:  # keep completed cells
                failures.append((job[1]["name"], job[2], str(err)))

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = ["cell,arch,depth,module,runs,acc_mean,acc_std"]
    best = (None, -1.0)
    for cell in cells:
        name = cell["name"]
        finals = [acc for _, acc in sorted(results.get(name, []))]
        if not finals:
            continue
        mean, std = aggregate_runs(finals)
        merged = {**base, **cell}
        rows.append(f"{name},{merged.get('arch', 'plain')},{merged.get('depth', '')},"
                    f"{merged.get('module', 'paired')},{len(finals)},{mean:.6f},{std:.6f}")
        if mean > best[1]:
            best = (name, mean)
    (out_root / "results.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out_root / 'results.csv'} ({len(rows) - 1} cells)")
    if best[0] is not None:
        print(f"winner: {best[0]} (mean accuracy {best[1]:.4f})")
    for name, seed, msg in failures:
        print(f"FAILED cell {name} seed {seed}: {msg}", file=sys.stderr)
    return EXIT_OK if not failures else EXIT_NUMERICAL


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
    "collapse-check": cmd_collapse_check,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (LinearModuleError, DepthError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
