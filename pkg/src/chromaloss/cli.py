"""Command-line entry points: train, evaluate, colorize, report.

Run configs are flat TOML files whose keys mirror TrainConfig fields;
``--loss``, ``--space``, and ``--seed`` override config values. The weight
archive cache directory can be set via the CHROMALOSS_WEIGHTS_DIR
environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from PIL import Image, ImageDraw

from .colorspace import ColorSpace, ImageBatch
from .data import DataError, decode_rgb, scan
from .imageio import write_rgb_image
from .metrics import (
    SUMMARY_COLUMNS,
    EvalConfig,
    MetricReport,
    PooledConvEmbedder,
    evaluate_set,
)
from .trainer import (
    TrainConfig,
    TrainerError,
    colorize_tensor,
    evaluate,
    load_checkpoint,
    train,
)

WEIGHTS_DIR_ENV = "CHROMALOSS_WEIGHTS_DIR"

# lower is better for these summary columns, higher for the others
METRIC_DIRECTIONS = {
    "mae": "down",
    "mse": "down",
    "psnr": "up",
    "ssim": "up",
    "lpips": "down",
    "fid": "down",
}


class CliError(ValueError):
    pass


def resolve_weights_path(name: str) -> str:
    """Resolve a weight-archive name against CHROMALOSS_WEIGHTS_DIR when it
    is not already a usable path."""
    if not name or os.path.isabs(name) or os.path.exists(name):
        return name
    cache = os.environ.get(WEIGHTS_DIR_ENV)
    return str(Path(cache) / name) if cache else name


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        values = tomllib.load(fh)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = TrainConfig.from_dict(values)
    except (TrainerError, TypeError) as exc:
        raise CliError(f"bad config {path}: {exc}") from exc
    cfg.lpips_weights_archive = resolve_weights_path(cfg.lpips_weights_archive)
    return cfg


def cmd_train(args) -> int:
    overrides = {"loss": args.loss, "color_space": args.space}
    if args.seed is not None:
        overrides["data_seed"] = args.seed
        overrides["init_seed"] = args.seed
    cfg = load_config(args.config, overrides)
    manifest = scan(args.data, "train")
    val_manifest = scan(args.val_data, "val") if args.val_data else None
    run_dir = train(cfg, manifest, args.out, val_manifest=val_manifest)
    print(f"run complete: {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    embedder = PooledConvEmbedder()
    if args.predictions:
        report = _evaluate_prediction_dir(Path(args.predictions), Path(args.data), embedder)
    else:
        if not args.checkpoint:
            raise CliError("provide --checkpoint or --predictions")
        manifest = scan(args.data, "test")
        report = evaluate(
            args.checkpoint, manifest, embedder, out_dir=out_dir, save_images=args.save_images
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "per_image.csv")
    report.write_summary(out_dir / "summary.json")
    print(report.format_summary())
    return 0


def _evaluate_prediction_dir(pred_dir: Path, gt_dir: Path, embedder) -> MetricReport:
    """Score a directory of precomputed predictions against ground truth
    files of the same names."""
    pred_files = {p.name: p for p in sorted(pred_dir.iterdir()) if p.is_file()}
    gt_files = {p.name: p for p in sorted(gt_dir.iterdir()) if p.is_file()}
    extra_pred = sorted(set(pred_files) - set(gt_files))
    extra_gt = sorted(set(gt_files) - set(pred_files))
    if extra_pred or extra_gt:
        raise CliError(
            f"prediction/ground-truth mismatch: extra predictions {extra_pred}, "
            f"missing predictions for {extra_gt}"
        )

    def pairs():
        for name in sorted(pred_files):
            pred = ImageBatch(decode_rgb(pred_files[name]), ColorSpace.RGB)
            gt = ImageBatch(decode_rgb(gt_files[name]), ColorSpace.RGB)
            yield pred, gt

    return evaluate_set(pairs(), embedder, EvalConfig(), names=sorted(pred_files))


def cmd_colorize(args) -> int:
    cfg, state = load_checkpoint(args.checkpoint)
    gen = state.generator.eval()
    in_path = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in in_path.iterdir() if p.is_file()) if in_path.is_dir() else [in_path]
    if not files:
        raise CliError(f"no input files under {in_path}")
    written = 0
    for path in files:
        try:
            rgb = decode_rgb(path)
        except DataError as exc:
            print(f"skipping {path}: {exc}", file=sys.stderr)
            continue
        result = colorize_tensor(gen, rgb, cfg.target_space)
        write_rgb_image(result, out_dir / f"{path.stem}.png")
        written += 1
    if not written:
        raise CliError("no inputs could be decoded")
    print(f"colorized {written} image(s) into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Report generation


def rank_markup(values: dict[str, float], direction: str) -> dict[str, str]:
    """Bold the best value per column and underline the second best.

    Ties share the better rank: all holders of the best value are bolded,
    and the runner-up value (when distinct) is underlined.
    """
    if not values:
        return {}
    ordered = sorted(set(values.values()), reverse=(direction == "up"))
    best = ordered[0]
    second = ordered[1] if len(ordered) > 1 else None
    out = {}
    for run, v in values.items():
        if v == best:
            out[run] = "bold"
        elif second is not None and v == second:
            out[run] = "underline"
        else:
            out[run] = ""
    return out


def _decorate(text: str, markup: str) -> str:
    if markup == "bold":
        return f"**{text}**"
    if markup == "underline":
        return f"<u>{text}</u>"
    return text


def comparison_table(summaries: dict[str, dict[str, float]]) -> str:
    """Markdown table over runs; lower-is-better columns marked with arrows,
    best bold and second-best underlined per column."""
    cols = [c for c in SUMMARY_COLUMNS if all(c in s for s in summaries.values())]
    arrows = {"down": "↓", "up": "↑"}
    header = "| run | " + " | ".join(
        f"{c.upper()}{arrows[METRIC_DIRECTIONS[c]]}" for c in cols
    ) + " |"
    sep = "|---" * (len(cols) + 1) + "|"
    marks = {
        c: rank_markup({r: s[c] for r, s in summaries.items()}, METRIC_DIRECTIONS[c])
        for c in cols
    }
    lines = [header, sep]
    for run, summary in summaries.items():
        cells = [_decorate(f"{summary[c]:.4f}", marks[c][run]) for c in cols]
        lines.append("| " + " | ".join([run] + cells) + " |")
    return "\n".join(lines)


def _load_run_summary(run_dir: Path) -> tuple[str, dict[str, float]]:
    import json

    summary_path = run_dir / "reports" / "summary.json"
    if not summary_path.is_file():
        raise CliError(f"{run_dir} has no reports/summary.json (evaluate it first)")
    config_path = run_dir / "config.toml"
    label = run_dir.name
    if config_path.is_file():
        with open(config_path, "rb") as fh:
            cfg = tomllib.load(fh)
        label = f"{cfg.get('color_space', '?')}-{cfg.get('loss', '?')}"
    return label, json.loads(summary_path.read_text())


def comparison_grids(run_dirs: list[Path], labels: list[str], out_dir: Path) -> list[Path]:
    """One composite image per test sample: a labeled column per run."""
    image_sets = []
    for run_dir in run_dirs:
        img_dir = run_dir / "reports" / "images"
        image_sets.append(
            {p.name: p for p in sorted(img_dir.iterdir())} if img_dir.is_dir() else {}
        )
    common = set.intersection(*[set(s) for s in image_sets]) if image_sets else set()
    written = []
    pad, label_h = 4, 14
    for name in sorted(common):
        tiles = [Image.open(s[name]).convert("RGB") for s in image_sets]
        h = max(t.height for t in tiles)
        w = sum(t.width for t in tiles) + pad * (len(tiles) - 1)
        canvas = Image.new("RGB", (w, h + label_h), "white")
        x = 0
        draw = ImageDraw.Draw(canvas)
        for tile, label in zip(tiles, labels):
            canvas.paste(tile, (x, label_h))
            draw.text((x + 2, 1), label, fill="black")
            x += tile.width + pad
        out_path = out_dir / f"grid_{name}"
        canvas.save(out_path)
        written.append(out_path)
    return written


def cmd_report(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeled = [_load_run_summary(r) for r in run_dirs]
    summaries = dict(labeled)
    if len(summaries) != len(labeled):
        raise CliError("duplicate run labels; use distinct configs or directories")
    table = comparison_table(summaries)
    (out_dir / "report.md").write_text(table + "\n")
    grids = comparison_grids(run_dirs, [label for label, _ in labeled], out_dir)
    if grids:
        index = ["# Comparison grids", ""]
        index += [f"- [{p.name}]({p.name})" for p in grids]
        (out_dir / "grids.md").write_text("\n".join(index) + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chromaloss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True, help="training image directory")
    p_train.add_argument("--val-data", default=None)
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.add_argument("--loss", choices=["l1", "l2", "lpips", "wgan_l2", "wgan_lpips"])
    p_train.add_argument("--space", choices=["lab", "rgb"])
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint or prediction dir")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--predictions", help="directory of precomputed predictions")
    p_eval.add_argument("--data", required=True, help="ground-truth image directory")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--save-images", type=int, default=0)
    p_eval.set_defaults(func=cmd_evaluate)

    p_col = sub.add_parser("colorize", help="colorize grayscale images")
    p_col.add_argument("--checkpoint", required=True)
    p_col.add_argument("--input", required=True, help="image file or directory")
    p_col.add_argument("--out", required=True)
    p_col.set_defaults(func=cmd_colorize)

    p_rep = sub.add_parser("report", help="compare evaluated runs")
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("runs", nargs="+", help="run directories with reports")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, TrainerError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
