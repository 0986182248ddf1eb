"""Command-line entry point: ``gfflab <command> [--config PATH] [--key value ...]``.

Exit codes: 0 success, 1 usage error, 2 I/O or data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .core import io as gfft
from .core.ops import set_num_threads
from .data import CLASS_NAMES, class_pixel_counts, generate_splits, read_dataset, write_dataset
from .metrics import iou_table_csv, miou, pixel_acc
from .network import CheckpointError, build_model, count_params_flops, load_checkpoint
from .seeding import stream

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "train", "eval", "gradcheck", "gates", "ablate", "bench")

log = logging.getLogger("gfflab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gfflab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion", choices=("concat", "addition", "fpn", "gated_fpn", "gff"))
    p.add_argument("--dfp", choices=("on", "off"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--multiscale", action="store_true", help="average over the configured scales")
    p.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoint)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--samples", help="comma-separated sample ids (gates/ablate)")
    p.add_argument("--level", help="gate level to ablate (1-based) or 'all'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args, extra) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if len(extra) % 2:
        raise UsageError(f"dangling override {extra[-1]!r}; use --key value")
    for key, value in zip(extra[::2], extra[1::2]):
        if not key.startswith("--"):
            raise UsageError(f"unexpected argument {key!r}")
        try:
            cfg.set(key[2:], value)
        except cfgmod.ConfigError as e:
            raise UsageError(str(e)) from None
    for key in ("seed", "fusion", "dfp", "iterations", "batch", "threads", "out"):
        v = getattr(args, key)
        if v is not None:
            cfg.set(key, str(v))
    return cfg


# -- data helpers -------------------------------------------------------------------

def load_splits(cfg):
    if cfg.data:
        root = Path(cfg.data)
        return read_dataset(root / "train"), read_dataset(root / "test")
    return generate_splits(cfg.scene(), cfg.n_train, cfg.n_test)


def select(samples, ids):
    if not ids:
        return samples[: min(4, len(samples))]
    by_id = {s.id: s for s in samples}
    missing = [i for i in ids.split(",") if i not in by_id]
    if missing:
        raise FileNotFoundError(f"sample id(s) not found: {', '.join(missing)}")
    return [by_id[i] for i in ids.split(",")]


def load_model(cfg, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint"
    if not (ckpt / "manifest.txt").is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    if not args.config and (ckpt / "config.txt").is_file():
        saved = cfgmod.load(ckpt / "config.txt")
        for key in ("fusion", "dfp", "dfp_literal_indexing", "width", "classes",
                    "backbone_widths", "ppm_bins", "aux_weight"):
            if getattr(args, key, None) is None:
                setattr(cfg, key, getattr(saved, key))
    model = build_model(cfg.model(), stream(cfg.seed, "init"))
    load_checkpoint(model, ckpt)
    return model


# -- commands -----------------------------------------------------------------------

def cmd_synth(cfg, args):
    train, test = generate_splits(cfg.scene(), cfg.n_train, cfg.n_test)
    root = Path(cfg.data or cfg.out)
    write_dataset(train, root / "train")
    write_dataset(test, root / "test")
    print("split," + ",".join(CLASS_NAMES) + ",total")
    for name, split in (("train", train), ("test", test)):
        counts = class_pixel_counts(split)
        print(f"{name}," + ",".join(str(c) for c in counts) + f",{counts.sum()}")
    return EXIT_OK


def cmd_train(cfg, args):
    from .training import train

    train_set, _ = load_splits(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg.model(), cfg.training(), train_set, cfg.seed, out)
    (out / "checkpoint" / "config.txt").write_text(cfg.dumps(skip=("out", "data")))  # keeps the tree location-free
    first, last = result.log[0][4], result.log[-1][4]
    print(f"trained {cfg.fusion} dfp={'on' if cfg.dfp else 'off'}: loss {first:.4f} -> {last:.4f}")
    return EXIT_OK


def cmd_eval(cfg, args):
    from .training import evaluate

    model = load_model(cfg, args)
    train_set, test_set = load_splits(cfg)
    samples = train_set if args.split == "train" else test_set
    cm = evaluate(model, samples, scales=cfg.scales if args.multiscale else None)
    table = iou_table_csv(cm, CLASS_NAMES[: cfg.classes])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = "ms" if args.multiscale else "ss"
    (out / f"eval_{args.split}_{tag}.csv").write_text(table)
    print(table, end="")
    log.info("mIoU %.4f pixel acc %.4f", miou(cm), pixel_acc(cm))
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    from .checks import micro_model_gradcheck, op_gradchecks

    worst = 0.0
    for name, err in op_gradchecks(cfg.seed).items():
        print(f"{name:28s} {err:.3e} {'PASS' if err < 1e-4 else 'FAIL'}")
        worst = max(worst, err)
    rep = micro_model_gradcheck(cfg.seed)
    print(f"{'micro_model_gff_dfp':28s} {rep.max_error:.3e} {'PASS' if rep.max_error < 1e-4 else 'FAIL'}"
          f"  ({rep.checked} coordinates, {rep.skipped} skipped at relu kinks)")
    worst = max(worst, rep.max_error)
    return EXIT_OK if worst < 1e-4 else EXIT_NUMERIC


def cmd_gates(cfg, args):
    from .gates import export_gates, has_gates

    model = load_model(cfg, args)
    if not has_gates(model):
        print(f"fusion {cfg.fusion!r}: no gates")
        return EXIT_OK
    _, test_set = load_splits(cfg)
    samples = select(test_set, args.samples)
    stats = export_gates(model, samples, Path(cfg.out) / "gates")
    print("level,mean,std")
    for s in stats:
        print(f"{s['level']},{s['mean']:.4f},{s['std']:.4f}")
    return EXIT_OK


def cmd_ablate(cfg, args):
    from .gates import ablate_gate, has_gates, write_ablation

    model = load_model(cfg, args)
    if not has_gates(model):
        print(f"fusion {cfg.fusion!r}: no gates")
        return EXIT_OK
    L = model.config.levels
    if args.level in (None, "all"):
        levels = tuple(range(1, L + 1))
    else:
        try:
            levels = (int(args.level),)
        except ValueError:
            raise UsageError(f"--level must be an integer or 'all', got {args.level!r}") from None
        if not 1 <= levels[0] <= L:
            raise UsageError(f"--level {levels[0]} out of range 1..{L}")
    _, test_set = load_splits(cfg)
    samples = select(test_set, args.samples) if args.samples else test_set
    report = ablate_gate(model, samples, levels)
    tag = "all" if len(levels) == L else "_".join(str(v) for v in levels)
    write_ablation(report, samples, Path(cfg.out) / f"ablate_{tag}")
    print(f"changed pixels: {sum(report.changed)} / {report.total_pixels} ({100 * report.changed_fraction:.2f}%)")
    print("class,iou_delta")
    for name, d in zip(CLASS_NAMES, report.delta()):
        print(f"{name},{'' if d is None else f'{d:+.4f}'}")
    return EXIT_OK


def bench_rows(cfg):
    base = cfg.model()
    rows = []
    for label, fusion, dfp in (("baseline (addition)", "addition", False),
                               ("+GFF", "gff", False),
                               ("+GFF+DFP", "gff", True)):
        mc = type(base)(**{**base.to_dict(), "fusion": fusion, "dfp": dfp})
        params, macs = count_params_flops(mc, cfg.bench_size, cfg.bench_size)
        rows.append((label, params, macs))
    return rows


def cmd_bench(cfg, args):
    size = cfg.bench_size
    print(f"method,params,GMACs  # input {size}x{size}")
    for label, params, macs in bench_rows(cfg):
        print(f"{label},{params},{macs / 1e9:.4f}")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "gates": cmd_gates, "ablate": cmd_ablate, "bench": cmd_bench,
}


def main(argv=None) -> int:
    from .training import TrainingDiverged

    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        cfg = resolve_config(args, extra)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, cfgmod.ConfigError) else EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_num_threads(max(1, cfg.threads))
    try:
        return HANDLERS[args.command](cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, gfft.FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    finally:
        set_num_threads(1)


if __name__ == "__main__":
    sys.exit(main())
