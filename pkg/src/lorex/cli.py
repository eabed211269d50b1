"""Command-line lifecycle tool.

Subcommands: gen-data, pretrain-base, train-lora, train-router, restore,
eval, ablate-routing, sweep-rank. Every subcommand is deterministic given
--seed. Options resolve as flags > config file > defaults; the config file
is INI-style ``key = value`` under ``[data]``, ``[train]``, ``[router]``
and ``[eval]`` sections.

Exit codes: 0 success, 1 runtime or invariant failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import harness, persist
from .degradations import DatasetConfig, load_manifest, make_dataset, read_ppm, write_ppm
from .errors import ConfigError, LorexError
from .metrics import format_table, report_line
from .restorer import AdapterTrainer, TrainConfig, build_model, pretrain_base, \
    restore, restore_auto
from .router import build_router, train_router

DEFAULTS = {
    ("data", "seed"): 7,
    ("data", "train_per_task"): 200,
    ("data", "test_per_task"): 40,
    ("data", "mixed_pairs"): 40,
    ("data", "patch"): 32,
    ("train", "learning_rate"): 1e-3,
    ("train", "batch_size"): 8,
    ("train", "pretrain_learning_rate"): 2e-3,
    ("train", "pretrain_iterations"): 4000,
    ("train", "lora_iterations"): 2000,
    ("router", "learning_rate"): 1e-3,
    ("router", "batch_size"): 16,
    ("router", "iterations"): 6000,
    ("eval", "k"): 1,
}


class _Options:
    """flags > config file > defaults."""

    def __init__(self, args):
        self.args = args
        self.cfg = configparser.ConfigParser()
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            self.cfg.read(path)

    def get(self, section: str, key: str, cast=int):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if self.cfg.has_option(section, key):
            return cast(self.cfg.get(section, key))
        return DEFAULTS[(section, key)]


def _parse_weights(text: str) -> np.ndarray:
    try:
        return np.asarray([float(v) for v in text.split(",")], dtype=np.float32)
    except ValueError as exc:
        raise ConfigError(f"cannot parse weight vector {text!r}") from exc


def _emit(lines: list[str], out_path: str | None) -> None:
    for line in lines:
        print(line)
    if out_path:
        Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    opt = _Options(args)
    config = DatasetConfig(
        seed=opt.get("data", "seed"),
        train_per_task=opt.get("data", "train_per_task"),
        test_per_task=opt.get("data", "test_per_task"),
        mixed_pairs=opt.get("data", "mixed_pairs"),
        patch=opt.get("data", "patch"),
    )
    manifests = make_dataset(config, args.out)
    for split in ("train", "test", "mixed"):
        m = manifests[split]
        pairs = sum(len(t.pairs) for t in m.tasks)
        print(f"{split}: {len(m.tasks)} tasks, {pairs} pairs")
    return 0


def cmd_pretrain_base(args) -> int:
    opt = _Options(args)
    manifest = load_manifest(args.data)
    model = build_model(manifest.labels, seed=opt.get("data", "seed"))
    config = TrainConfig(
        learning_rate=opt.get("train", "pretrain_learning_rate", float),
        iterations=opt.get("train", "pretrain_iterations"),
        batch_size=opt.get("train", "batch_size"),
        seed=opt.get("data", "seed"),
    )
    pretrain_base(model, harness.clean_training_images(manifest), config)
    persist.save_model(args.out, model)
    print(f"saved base model ({len(manifest.labels)} tasks) to {args.out}")
    return 0


def cmd_train_lora(args) -> int:
    opt = _Options(args)
    model = persist.load_model(args.ckpt)
    manifest = load_manifest(args.data)
    targets = list(model.labels) if args.task == "all" else [args.task]
    config = TrainConfig(
        learning_rate=opt.get("train", "learning_rate", float),
        iterations=opt.get("train", "lora_iterations"),
        batch_size=opt.get("train", "batch_size"),
        seed=opt.get("data", "seed"),
    )
    for label in targets:
        if label not in model.labels:
            raise ConfigError(f"task {label!r} is not in the checkpoint labels")
        trainer = AdapterTrainer(model, model.labels.index(label),
                                 harness.load_task_data(manifest, label), config)
        trainer.run()
        tail = trainer.losses[-50:] or [float("nan")]
        print(f"{label}: final training loss {float(np.mean(tail)):.6f}")
    persist.save_model(args.out, model)
    print(f"saved model to {args.out}")
    return 0


def cmd_train_router(args) -> int:
    opt = _Options(args)
    manifest = load_manifest(args.data)
    first_image = read_ppm(manifest.tasks[0].pairs[0][1])
    patch = (first_image.dims[1], first_image.dims[2])
    state = build_router(manifest.labels, seed=opt.get("data", "seed"), patch=patch)
    config = TrainConfig(
        learning_rate=opt.get("router", "learning_rate", float),
        iterations=opt.get("router", "iterations"),
        batch_size=opt.get("router", "batch_size"),
        seed=opt.get("data", "seed"),
    )
    train_router(state, harness.router_training_set(manifest), config)
    persist.save_router(args.out, state)
    print(f"saved router ({len(state.labels)} types) to {args.out}")
    if args.eval_data:
        acc, per_task = harness.routing_accuracy(state, load_manifest(args.eval_data))
        print(f"held-out accuracy: {acc:.4f}")
        for label, value in per_task.items():
            print(f"  {label}: {value:.4f}")
    return 0


def cmd_restore(args) -> int:
    model = persist.load_model(args.ckpt)
    image = read_ppm(args.input)
    if args.auto:
        if not args.router:
            raise ConfigError("--auto requires --router")
        router = persist.load_router(args.router)
        restored, routed = restore_auto(model, router, image, args.k or 1)
        weights = ",".join(f"{v:.4f}" for v in routed.s)
        print(f"routed weights: {weights} (K={routed.k})")
    else:
        if not args.s:
            raise ConfigError("provide --s weights or --auto")
        restored = restore(model, image, _parse_weights(args.s))
    write_ppm(args.output, restored)
    print(f"wrote {args.output}")
    return 0


def _eval_lines(results, prefix: str = "") -> tuple[list[str], list]:
    lines, rows = [], []
    for label, reports in results.items():
        for metric in ("psnr", "ssim", "psnr_degraded"):
            if metric in reports:
                name = f"{prefix}{label}"
                lines.append(report_line(name, metric, reports[metric]))
                rows.append((name, metric, reports[metric]))
    return lines, rows


def cmd_eval(args) -> int:
    opt = _Options(args)
    model = persist.load_model(args.ckpt)
    manifest = load_manifest(args.data)
    router = persist.load_router(args.router) if args.router else None
    if router is not None and router.labels != model.labels:
        raise ConfigError("router and model label order disagree")
    strategy = args.strategy or ("topk" if router is not None else "oracle")
    manual = _parse_weights(args.s) if args.s else None
    fn = harness.strategy_weight_fn(strategy, model, router,
                                    k=opt.get("eval", "k"),
                                    seed=opt.get("data", "seed"), manual_s=manual)
    results = harness.evaluate_restoration(model, manifest, fn)
    lines, rows = _eval_lines(results)
    _emit(lines, args.out)
    print(format_table(rows))
    return 0


def cmd_ablate_routing(args) -> int:
    opt = _Options(args)
    model = persist.load_model(args.ckpt)
    router = persist.load_router(args.router)
    if router.labels != model.labels:
        raise ConfigError("router and model label order disagree")
    manifest = load_manifest(args.data)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    lines, rows = [], []
    for strategy in strategies:
        fn = harness.strategy_weight_fn(strategy, model, router,
                                        k=opt.get("eval", "k"),
                                        seed=opt.get("data", "seed"))
        results = harness.evaluate_restoration(model, manifest, fn, with_baseline=False)
        s_lines, s_rows = _eval_lines(results, prefix=f"{strategy}/")
        lines.extend(s_lines)
        rows.extend(s_rows)
        mean_psnr = float(np.mean([r["psnr"].mean for r in results.values()]))
        lines.append(f"{strategy}/ALL\tpsnr\t{mean_psnr:.6f}\t0.000000")
    _emit(lines, args.out)
    print(format_table(rows))
    return 0


def cmd_sweep_rank(args) -> int:
    opt = _Options(args)
    base = persist.load_model(args.ckpt)
    manifest = load_manifest(args.data)
    label = args.task or base.labels[0]
    if label not in base.labels:
        raise ConfigError(f"task {label!r} is not in the checkpoint labels")
    k = base.labels.index(label)
    task = harness.load_task_data(manifest, label)
    ranks = [int(v) for v in args.ranks.split(",")]
    seed = opt.get("data", "seed")
    config = TrainConfig(
        learning_rate=opt.get("train", "learning_rate", float),
        iterations=args.iterations,
        batch_size=opt.get("train", "batch_size"),
        seed=seed,
    )
    lines = [f"# rank sweep on {label!r}, {config.iterations} iterations"]
    for rank in ranks:
        model = build_model(base.labels, seed=seed, ranks=rank)
        for name in model.layers:
            model.layers[name].base_weight = base.layers[name].base_weight.copy()
            model.layers[name].base_bias = base.layers[name].base_bias.copy()
        trainer = AdapterTrainer(model, k, task, config)
        trainer.run()
        tail = trainer.losses[-50:] or [float("nan")]
        n_params = sum(p.size for p in model.adapter_params(k))
        lines.append(f"{rank}\t{n_params}\t{float(np.mean(tail)):.6f}")
    _emit(lines, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorex",
        description="Image restoration with composable low-rank experts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="INI config file")

    p = sub.add_parser("gen-data", help="generate the synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-task", dest="train_per_task", type=int, default=None)
    p.add_argument("--test-per-task", dest="test_per_task", type=int, default=None)
    p.add_argument("--mixed-pairs", dest="mixed_pairs", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-base", help="train the frozen base as a clean autoencoder")
    p.add_argument("--data", required=True, help="train manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", dest="pretrain_iterations", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="pretrain_learning_rate", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train-lora", help="train one task's adapter set (or all)")
    p.add_argument("--task", required=True, help="task label, or 'all'")
    p.add_argument("--data", required=True, help="train manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", dest="lora_iterations", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_train_lora)

    p = sub.add_parser("train-router", help="train the degradation-aware router")
    p.add_argument("--data", required=True, help="train manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", dest="eval_data", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("restore", help="restore one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--s", default=None, help="manual weights, e.g. 0,1,0,0,0")
    p.add_argument("--auto", action="store_true")
    p.add_argument("--router", default=None)
    p.add_argument("-K", dest="k", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="evaluate restoration quality on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--router", default=None)
    p.add_argument("--strategy", default=None,
                   choices=["oracle", "random", "average", "top1", "top2", "topk",
                            "all", "manual"])
    p.add_argument("--s", default=None)
    p.add_argument("-K", dest="k", type=int, default=None)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-routing", help="compare routing strategies")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--strategies", default="random,average,top1,top2,all")
    p.add_argument("-K", dest="k", type=int, default=None)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_ablate_routing)

    p = sub.add_parser("sweep-rank", help="train one task at several adapter ranks")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="pretrained base checkpoint")
    p.add_argument("--task", default=None)
    p.add_argument("--ranks", default="2,4,8,16")
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_sweep_rank)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LorexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
