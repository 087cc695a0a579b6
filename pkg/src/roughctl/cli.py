"""``roughctl`` command line: one entry point, one subcommand per pipeline stage.

Settings resolve as flag > ``--config`` JSON file > built-in default. Only the
output root (ROUGHCTL_OUTPUT_ROOT) and thread count (ROUGHCTL_THREADS) may
come from the environment. Every command writes a stamp with the resolved
config, the seed, input checkpoint hashes and the files it produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .builder import build_dataset, load_dataset, quantize_condition, save_dataset
from .config import RunConfig, config_hash, layered, to_dict
from .evaluation import (Method, build_eval_set, dumps, markdown_table, run_baselines, select_alpha_fix,
                         sweep_report, tile_grid)
from .io import save_rgb_png, to_uint8
from .model import PREDICTOR, sample, to_unit
from .oracle import Oracle, train_oracle_classifier
from .shapes import CLASS_NAMES, extract_condition, random_spec, render, render_aligned_set, save_aligned_set
from .training import aligned_tensors, pretrain_aligned, train_predictor, unaligned_tensors

log = logging.getLogger("roughctl")

ENV_OUTPUT_ROOT = "ROUGHCTL_OUTPUT_ROOT"
ENV_THREADS = "ROUGHCTL_THREADS"


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = _parse_value(value)
    return out


def resolve_config(args, flag_overrides: dict | None = None) -> RunConfig:
    """Defaults < --config file < --set pairs < dedicated flags."""
    overrides = _overrides(args.set)
    overrides.update({k: v for k, v in (flag_overrides or {}).items() if v is not None})
    try:
        return layered(RunConfig, args.config, overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def output_path(path: str | None, default: str) -> Path:
    p = Path(path if path is not None else default)
    if not p.is_absolute() and os.environ.get(ENV_OUTPUT_ROOT):
        p = Path(os.environ[ENV_OUTPUT_ROOT]) / p
    return p


def readable(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def class_id(name: str) -> int:
    if name in CLASS_NAMES:
        return CLASS_NAMES.index(name)
    raise UsageError(f"unknown class {name!r}; choose from {', '.join(CLASS_NAMES)}")


def write_stamp(path: Path, args, cfg: RunConfig | None, checkpoints: dict, outputs: list[Path]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = {
        "command": args.command,
        "seed": args.seed,
        "config": to_dict(cfg) if cfg is not None else None,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "checkpoints": checkpoints,
        "outputs": sorted(str(Path(o).relative_to(path.parent)) if Path(o).is_relative_to(path.parent)
                          else str(o) for o in outputs),
    }
    path.write_text(dumps(stamp))


def load_oracle(path: str | None, fallback: Path) -> tuple[Oracle, Path]:
    """Use ``path`` when given; otherwise train once and keep it at ``fallback``."""
    if path is not None:
        p = readable(path, "oracle checkpoint")
        return Oracle.load(p), p
    if not fallback.exists():
        fallback.parent.mkdir(parents=True, exist_ok=True)
        train_oracle_classifier().save(fallback)
    return Oracle.load(fallback), fallback


def load_base(path: str | None, cfg: RunConfig):
    p = readable(path, "base checkpoint (--base)")
    try:
        return checkpoint.load_model(p, guidance=cfg.model.guidance), checkpoint.file_hash(p)
    except checkpoint.CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def source_condition(source_cls: int, seed: int, kind: str, size: int):
    spec = random_spec(source_cls, np.random.default_rng(seed), size=size)
    image, m = render(spec)
    return image, m, quantize_condition(extract_condition(image, m, kind)) / 255.0


# -- subcommands ----------------------------------------------------------------


def cmd_render_shapes(args) -> None:
    out = output_path(args.out, "shapes")
    data = render_aligned_set(args.n, seed=args.seed, size=args.size)
    save_aligned_set(data, out)
    files = [out / "shapes.json", out / "hierarchy.json"]
    files += [out / f"{i:05d}_{part}.png" for i in range(len(data)) for part in ("image", "mask")]
    write_stamp(out / "stamp.json", args, None, {}, files)


def cmd_pretrain(args) -> None:
    cfg = resolve_config(args, {"pretrain.seed": args.seed, "pretrain.kind": args.kind,
                                "pretrain.n_renders": args.n_renders})
    out = output_path(args.out, "base.pt")
    pc = cfg.pretrain
    data = render_aligned_set(pc.n_renders, seed=pc.seed, size=cfg.model.image_size)
    metrics = out.with_suffix(".metrics.jsonl")
    model = pretrain_aligned(aligned_tensors(data, pc.kind), cfg.model, pc, metrics_log=metrics)
    digest = checkpoint.save_model(out, model)
    write_stamp(out.with_suffix(".stamp.json"), args, cfg, {"base": digest}, [out, metrics])


def cmd_build_dataset(args) -> None:
    cfg = resolve_config(args)
    model, base_hash = load_base(args.base, cfg)
    out = output_path(args.out, "dataset")
    oracle, oracle_path = load_oracle(args.oracle, out.parent / "oracle.pt")
    kind = args.kind or cfg.pretrain.kind
    ds = build_dataset(model, oracle, args.n, kind, cfg.sweep, args.seed, max_attempts=args.max_attempts)
    manifest = save_dataset(ds, out)
    files = [manifest] + [out / "samples" / f"{s.sample_id:05d}" / f"{name}.png"
                          for s in ds.samples for name in ("condition", "target", "m_init", "m_alt",
                                                            "m_conflict", "m_bg")]
    write_stamp(out / "stamp.json", args, cfg,
                {"base": base_hash, "oracle": checkpoint.file_hash(oracle_path)}, files)
    print(json.dumps(ds.stats.to_dict()))


def cmd_train_predictor(args) -> None:
    cfg = resolve_config(args, {"train.seed": args.seed, "train.epochs": args.epochs,
                                "train.lambda_c": args.lambda_c})
    model, base_hash = load_base(args.base, cfg)
    ds = load_dataset(readable(args.dataset, "dataset directory"))
    if args.n is not None:
        ds = ds.subset(args.n)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    out = output_path(args.out, "predictor.pt")
    metrics = out.with_suffix(".metrics.jsonl")
    train_predictor(model, unaligned_tensors(ds.samples), cfg.train,
                    granularity=args.granularity, metrics_log=metrics)
    digest = checkpoint.save_predictor(out, model, base_hash, extra={"n_samples": len(ds)})
    write_stamp(out.with_suffix(".stamp.json"), args, cfg, {"base": base_hash, "predictor": digest},
                [out, metrics])


def _scale(args, model, base_hash):
    if args.scale == PREDICTOR:
        p = readable(args.predictor, "predictor checkpoint (--predictor)")
        try:
            checkpoint.load_predictor(p, model, base_hash=base_hash)
        except checkpoint.CheckpointError as exc:
            raise UsageError(str(exc)) from exc
        return PREDICTOR, {"predictor": checkpoint.file_hash(p)}
    try:
        return float(args.scale), {}
    except ValueError:
        raise UsageError(f"--scale must be a number or 'predictor', got {args.scale!r}") from None


def cmd_generate(args) -> None:
    cfg = resolve_config(args)
    model, base_hash = load_base(args.base, cfg)
    scale, hashes = _scale(args, model, base_hash)
    kind = args.kind or cfg.pretrain.kind
    size = model.cfg.image_size
    out = output_path(args.out, "generated")
    out.mkdir(parents=True, exist_ok=True)
    target = class_id(args.target_class)
    source = class_id(args.source_class) if args.source_class else target
    _, _, cond = source_condition(source, args.seed, kind, size)
    seeds = [args.seed * 1000 + i for i in range(args.count)]
    cond_t = torch.as_tensor(np.repeat(cond[None, None], args.count, axis=0), dtype=torch.float32)
    images = to_unit(sample(model, [target] * args.count, seeds, cond=cond_t, scale=scale, steps=args.steps))
    files = []
    save_rgb_png(out / "condition.png", np.repeat(to_uint8(cond)[None], 3, axis=0))
    files.append(out / "condition.png")
    for i, img in enumerate(images):
        save_rgb_png(out / f"sample_{i:03d}.png", img)
        files.append(out / f"sample_{i:03d}.png")
    write_stamp(out / "stamp.json", args, cfg, {"base": base_hash, **hashes}, files)


def cmd_sweep(args) -> None:
    cfg = resolve_config(args)
    model, base_hash = load_base(args.base, cfg)
    out = output_path(args.out, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    oracle, oracle_path = load_oracle(args.oracle, out.parent / "oracle.pt")
    kind = args.kind or cfg.pretrain.kind
    items = [it for it in build_eval_set(args.items, kind, args.seed, cfg.eval, size=model.cfg.image_size)]
    rep = sweep_report(model, items, cfg.sweep.alpha_grid, args.seed, oracle, cfg.eval.sample_steps,
                       grid_image=out / "grid.png")
    (out / "sweep.json").write_text(dumps(rep.to_dict()))
    write_stamp(out / "stamp.json", args, cfg,
                {"base": base_hash, "oracle": checkpoint.file_hash(oracle_path)},
                [out / "grid.png", out / "sweep.json"])


def cmd_evaluate(args) -> None:
    cfg = resolve_config(args, {"eval.seeds": args.seeds, "eval.n_items": args.items})
    model, base_hash = load_base(args.base, cfg)
    out = output_path(args.eval_dir, "eval")
    out.mkdir(parents=True, exist_ok=True)
    oracle, oracle_path = load_oracle(args.oracle, out.parent / "oracle.pt")
    kind = args.kind or cfg.pretrain.kind
    size = model.cfg.image_size
    hashes = {"base": base_hash, "oracle": checkpoint.file_hash(oracle_path)}
    methods, extra = [], {}
    for name in args.methods.split(","):
        name = name.strip()
        if name == "alpha1":
            methods.append(Method("alpha=1.0", 1.0))
        elif name == "fixed":
            if args.alpha_fix is not None:
                alpha_fix = args.alpha_fix
            else:
                tune = build_eval_set(cfg.eval.n_tune, kind, args.seed + 1, cfg.eval, size=size)
                alpha_fix, rates = select_alpha_fix(model, tune, oracle, cfg.sweep, cfg.eval)
                extra["tuning"] = rates
            extra["alpha_fix"] = alpha_fix
            methods.append(Method(f"fixed alpha={alpha_fix}", float(alpha_fix)))
        elif name in ("local", "global"):
            path = args.predictor if name == "local" else args.global_predictor
            p = readable(path, f"{name} predictor checkpoint")
            checkpoint.load_predictor(p, model, base_hash=base_hash)
            methods.append(Method(name, PREDICTOR, model.detach_predictors()))
            hashes[f"{name}_predictor"] = checkpoint.file_hash(p)
        else:
            raise UsageError(f"unknown method {name!r}; use alpha1, fixed, global, local")
    items = build_eval_set(cfg.eval.n_items, kind, args.seed, cfg.eval, size=size)
    reports = run_baselines(model, items, methods, oracle, cfg.eval)
    (out / "report.json").write_text(dumps({**extra, "methods": {k: v.to_dict() for k, v in reports.items()}}))
    (out / "report.md").write_text(markdown_table(reports))
    write_stamp(out / "stamp.json", args, cfg, hashes, [out / "report.json", out / "report.md"])
    print((out / "report.md").read_text())


def cmd_ablate(args) -> None:
    from .pipeline import Pipeline

    cfg = resolve_config(args, {"train.seed": args.seed})
    root = output_path(args.root, "run")
    pipe = Pipeline(root, cfg)
    result = pipe.ablations()
    _, base_hash = pipe.base()
    write_stamp(root / "reports" / "ablations" / "stamp.json", args, cfg, {"base": base_hash},
                [root / "reports" / "ablations" / "report.json", root / "reports" / "ablations" / "report.md"])
    print(json.dumps({k: v["status"] for k, v in result.items()}))


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roughctl", description="Rough-condition control scale toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, required=True, help="random seed (required)")
        if config:
            p.add_argument("--config", type=Path, help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted config override, e.g. train.epochs=50")
        return p

    p = add("render-shapes", cmd_render_shapes, "render aligned shape images and masks", config=False)
    p.add_argument("--n", type=int, default=90)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out")

    p = add("pretrain", cmd_pretrain, "train backbone and condition branch on aligned renders")
    p.add_argument("--kind", choices=("silhouette", "edge", "depthlike"))
    p.add_argument("--n-renders", type=int)
    p.add_argument("--out")

    p = add("build-dataset", cmd_build_dataset, "sweep control scales and keep filtered unaligned samples")
    p.add_argument("--base", required=True)
    p.add_argument("--oracle")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--max-attempts", type=int)
    p.add_argument("--kind", choices=("silhouette", "edge", "depthlike"))
    p.add_argument("--out")

    p = add("train-predictor", cmd_train_predictor, "fit control scale predictors with the base frozen")
    p.add_argument("--base", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int, help="use the first N samples")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--granularity", choices=("local", "global"), default="local")
    p.add_argument("--out")

    p = add("generate", cmd_generate, "sample images for a class under a rough condition")
    p.add_argument("--base", required=True)
    p.add_argument("--predictor")
    p.add_argument("--scale", default="1.0", help="number or 'predictor'")
    p.add_argument("--class", dest="target_class", required=True, choices=CLASS_NAMES)
    p.add_argument("--source-class", choices=CLASS_NAMES, help="class the condition is drawn from")
    p.add_argument("--kind", choices=("silhouette", "edge", "depthlike"))
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out")

    p = add("sweep", cmd_sweep, "generate across the control scale grid and score each value")
    p.add_argument("--base", required=True)
    p.add_argument("--oracle")
    p.add_argument("--items", type=int, default=24)
    p.add_argument("--kind", choices=("silhouette", "edge", "depthlike"))
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "compare control scale methods on a generated eval set")
    p.add_argument("--base", required=True)
    p.add_argument("--oracle")
    p.add_argument("--methods", default="alpha1,fixed,global,local")
    p.add_argument("--predictor")
    p.add_argument("--global-predictor")
    p.add_argument("--alpha-fix", type=float)
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated")
    p.add_argument("--items", type=int)
    p.add_argument("--kind", choices=("silhouette", "edge", "depthlike"))
    p.add_argument("--eval-dir")

    p = add("ablate", cmd_ablate, "train and evaluate predictor variants (dataset size, granularity, loss)")
    p.add_argument("--root", help="run directory with cached stages")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    if os.environ.get(ENV_THREADS):
        torch.set_num_threads(int(os.environ[ENV_THREADS]))
    try:
        args.func(args)
    except UsageError as exc:
        print(f"roughctl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"roughctl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
