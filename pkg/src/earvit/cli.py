"""Command-line entry point: synth, train, embed, eval, pv, grid-info.

Exit codes: 0 success, 1 validation error (bad config/grid/inputs),
2 runtime failure. All file outputs are written atomically, so an aborted
run leaves at most ``*.tmp`` leftovers, never a half-written report.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, load_config
from .dataset import load_dataset, load_training_data, synth_dataset
from .errors import (ConfigError, ContractError, DataFormatError, DatasetError,
                     EarvitError, GridError)
from .model import load_checkpoint, save_checkpoint
from .optim import train, write_train_log
from .patches import PatchGridSpec, pixel_multiplicity
from .report import (EvalRow, figure_path, find_row, half_stride_comparisons,
                     plot_loss, plot_pv_bars, plot_roc, read_eval_report,
                     write_eval_report, write_pv_table)
from .verify import (extract_embeddings, make_pairs, pv_record, repeat_eval,
                     roc_auc, save_embeddings, score_pairs)

_VALIDATION_ERRORS = (ConfigError, GridError, ContractError, DataFormatError, DatasetError)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {
        ("data", "root"): getattr(args, "data", None),
        ("model", "variant"): getattr(args, "variant", None),
        ("model", "patch"): getattr(args, "patch", None),
        ("model", "stride"): getattr(args, "stride", None),
        ("train", "seed"): getattr(args, "seed", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("eval", "seed"): getattr(args, "eval_seed", None),
        ("eval", "repeats"): getattr(args, "repeats", None),
    }
    return apply_overrides(cfg, overrides)


def _data_root(cfg: RunConfig) -> str:
    root = cfg.get("data", "root")
    if not root:
        raise ConfigError("data.root is not set (config key or --data flag)")
    return root


def cmd_grid_info(args) -> int:
    grid = PatchGridSpec(args.image_size, args.patch, args.stride)
    mult = pixel_multiplicity(grid)
    overlap = float((mult > 1).mean())
    print(f"grid {grid.label} at W={grid.image_size}")
    print(f"tokens: {grid.tokens} ({grid.side_count}x{grid.side_count} windows)")
    print(f"pixel multiplicity: min {int(mult.min())}, max {int(mult.max())}")
    print(f"overlap fraction: {overlap:.4f}")
    return 0


def cmd_synth(args) -> int:
    index = synth_dataset(args.out, n_ids=args.ids, imgs_per_id=args.per_id,
                          image_size=args.size, noise_std=args.noise, seed=args.seed)
    print(f"wrote {len(index.records)} images for {index.num_identities} "
          f"identities under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    root = _data_root(cfg)
    index = load_dataset(root)
    for path, message in index.errors:
        print(f"warning: skipped {path}: {message}", file=sys.stderr)
    data = load_training_data(index, cfg.get("data", "image_size"))
    model_cfg = cfg.vit_config()
    out = args.out

    def save(params, class_weights):
        save_checkpoint(out, params, extra={"class_weights": class_weights.data})

    result = train(model_cfg, cfg.train_config(), cfg.margin_spec(),
                   data.images, data.labels, data.num_classes,
                   loss_seed=cfg.loss_seed,
                   epoch_callback=lambda _e, p, w: save(p, w))
    save(result.params, result.class_weights)
    if args.log:
        write_train_log(args.log, result.history)
        plot_loss(result.history, figure_path(args.log, "loss"))
    final_loss = result.history[-1]["loss"] if result.history else float("nan")
    print(f"trained {model_cfg.label} for {cfg.get('train', 'epochs')} epochs "
          f"({len(result.history)} steps); final loss {final_loss:.4f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_run_config(args)
    params, _ = load_checkpoint(args.ckpt)
    index = load_dataset(_data_root(cfg))
    emb = extract_embeddings(params, index)
    save_embeddings(args.out, emb)
    print(f"wrote {emb.num_images} embeddings ({emb.dim}-d) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    params, _ = load_checkpoint(args.ckpt)
    root = _data_root(cfg)
    index = load_dataset(root)
    emb = extract_embeddings(params, index)
    base_seed = cfg.get("eval", "seed")
    ratio = cfg.get("eval", "impostor_ratio")
    summary = repeat_eval(emb, repeats=cfg.get("eval", "repeats"),
                          base_seed=base_seed, impostor_ratio=ratio)
    grid = params.config.grid
    row = EvalRow(model_label=params.config.label,
                  dataset=cfg.dataset_name(root),
                  patch=grid.patch_size, stride=grid.stride,
                  mean_auc=summary.mean_auc, std_auc=summary.std_auc)
    write_eval_report(args.out, [row])
    if not args.no_figures:
        pairs = make_pairs(emb, ratio, seed=base_seed)
        curve = roc_auc(*score_pairs(pairs))
        plot_roc([(row.model_label, curve)], figure_path(args.out, "roc"))
    print(f"{row.model_label} on {row.dataset}: AUC {summary.formatted()} "
          f"over {summary.repeats} repeats")
    return 0


def cmd_pv(args) -> int:
    rows = read_eval_report(args.report)
    if args.all_pairs:
        records = half_stride_comparisons(rows)
        if not records:
            raise ConfigError(f"{args.report}: no half-stride/full-stride row pairs found")
    else:
        if not (args.setting_a and args.setting_b):
            raise ConfigError("pass --all-pairs, or both --setting-a and --setting-b")
        row_a = find_row(rows, args.setting_a, args.dataset)
        row_b = find_row(rows, args.setting_b, args.dataset)
        records = [pv_record(f"{row_a.model_label}:{row_a.dataset}",
                             f"{row_b.model_label}:{row_b.dataset}",
                             row_a.mean_auc, row_b.mean_auc)]
    write_pv_table(args.out, records)
    if not args.no_figures:
        plot_pv_bars(records, figure_path(args.out, "chart"))
    for r in records:
        print(f"{r.setting_a} vs {r.setting_b}: AUC {r.auc_a:.4f} vs {r.auc_b:.4f} "
              f"-> PV {r.pv_percent:+.2f}%")
    better = sum(1 for r in records if r.pv_percent > 0)
    if len(records) > 1:
        print(f"half-stride setting ahead in {better} of {len(records)} comparisons")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="earvit",
        description="Overlapping-patch ViT training and verification evaluation.")
    parser.add_argument("--version", action="version", version=f"earvit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid-info", help="token count and overlap stats for a (W, P, S) grid")
    p.add_argument("image_size", type=int)
    p.add_argument("patch", type=int)
    p.add_argument("stride", type=int)
    p.set_defaults(fn=cmd_grid_info)

    p = sub.add_parser("synth", help="generate a deterministic synthetic identity dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--per-id", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--data", help="override data.root")
        p.add_argument("--variant", help="override model.variant")
        p.add_argument("--patch", type=int, help="override model.patch")
        p.add_argument("--stride", type=int, help="override model.stride")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", default="train_log.csv")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="extract embeddings from a checkpoint to a file")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="embeddings.bin")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("eval", help="verification AUC with repeated impostor sampling")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="eval_report.csv")
    p.add_argument("--repeats", type=int, help="override eval.repeats")
    p.add_argument("--eval-seed", type=int, help="override eval.seed")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pv", help="percentage-variation table from eval report rows")
    p.add_argument("--report", required=True)
    p.add_argument("--all-pairs", action="store_true",
                   help="compare every S=P/2 row against its S=P partner")
    p.add_argument("--setting-a", help="model label of setting A")
    p.add_argument("--setting-b", help="model label of setting B")
    p.add_argument("--dataset", help="restrict label lookup to one dataset")
    p.add_argument("--out", default="pv_report.csv")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_pv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EarvitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
