import argparse
import json
import os
import sys

import numpy as np
import torch
from __version__ import version
from checkpoint import load_model
from config import (
    TrainConfig,
    get_device,
    is_deterministic,
    load_train_config,
    set_reproducible_mode,
    validate_train_config,
)
from datasets import (
    KTH_TEST_PERSONS,
    KTH_TRAIN_PERSONS,
    SequenceDataset,
    frames_to_tensor,
    load_video_folder,
    read_dataset,
    tensor_to_frames,
    write_dataset,
    write_splits,
)
from errors import (
    CheckpointError,
    ContractError,
    CorruptDatasetError,
    NumericError,
    UsageError,
)
from evaluation import (
    average_reports,
    evaluate_baseline,
    evaluate_stochastic,
    report_from_dict,
    report_to_dict,
)
from filesystem import Filesystem
from glyphs import load_glyph_bank
from models import CommandResult, MetricReport
from network import parameter_count
from render import plot_curves, plot_sweep, render_grid, save_frames
from training import train
from variants import VARIANT_ORDER, VARIANTS, build_variant, get_variant

RUN_FILE = "run.json"
PERSON_SETS = {"all": None, "train": KTH_TRAIN_PERSONS, "test": KTH_TEST_PERSONS}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so dispatch owns exit codes."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vvp", description="Variational 3D ConvLSTM video prediction")
    parser.add_argument("--version", action="version", version=f"vvp {version}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("gen-data", help="generate Moving MNIST or ingest a video folder")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-train", type=int, default=10000)
    gen.add_argument("--n-val", type=int, default=1000)
    gen.add_argument("--n-test", type=int, default=1000)
    gen.add_argument("--frames", type=int, default=20)
    gen.add_argument("--digits", type=int, default=2)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--glyphs", help="MNIST idx/.npy/.npz glyph bank (default: VVP_GLYPHS)")
    gen.add_argument("--from-folder", help="ingest frame folders instead of generating")
    gen.add_argument("--persons", choices=sorted(PERSON_SETS), default="all")
    gen.add_argument("--rgb", action="store_true", help="keep colour when ingesting")

    tr = commands.add_parser("train", help="train one variant")
    _add_config_flags(tr)
    tr.add_argument("--resume", help="checkpoint to resume from")

    ev = commands.add_parser("eval", help="score a checkpoint with the sampling protocol")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--context", type=int, default=10)
    ev.add_argument("--predict", type=int, default=10)
    ev.add_argument("--samples", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default="report.json")
    ev.add_argument("--mnist-scale", action="store_true", help="headline MSE as per-image sum")
    ev.add_argument("--baseline", action="store_true", help="also score copy-last-frame")

    pr = commands.add_parser("predict", help="roll out one sequence and write frames")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", default="test")
    pr.add_argument("--index", type=int, default=0)
    pr.add_argument("--context", type=int, default=10)
    pr.add_argument("--predict", type=int, default=10)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)

    ab = commands.add_parser("ablate", help="train and evaluate the four variants")
    _add_config_flags(ab)
    ab.add_argument("--seeds", type=int, nargs="+")
    ab.add_argument("--samples", type=int, help="rollouts per test sequence")

    sw = commands.add_parser("sweep", help="train and evaluate a grid of window sizes and horizons")
    _add_config_flags(sw)
    sw.add_argument("--windows", type=int, nargs="+", default=[2, 4, 8])
    sw.add_argument("--horizons", type=int, nargs="+", default=[1, 2, 4])
    sw.add_argument("--seeds", type=int, nargs="+")
    sw.add_argument("--samples", type=int, help="rollouts per test sequence")

    re_ = commands.add_parser("render", help="draw dataset sequences or metric curves")
    source = re_.add_mutually_exclusive_group(required=True)
    source.add_argument("--data")
    source.add_argument("--reports", nargs="+")
    re_.add_argument("--split", default="test")
    re_.add_argument("--indices", type=int, nargs="+", default=[0])
    re_.add_argument("--labels", nargs="+")
    re_.add_argument("--stride", type=int, default=1)
    re_.add_argument("--out", required=True)
    return parser


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--data", help="overrides data_dir")
    parser.add_argument("--out", help="overrides out_dir")
    parser.add_argument("--variant", choices=VARIANT_ORDER)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--window", type=int, help="frames per recurrence step (3D variants)")
    parser.add_argument("--horizon", type=int, help="frames ahead of the input window")


###
# HELPERS
###


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {
        "data_dir": args.data,
        "out_dir": args.out,
        "variant": args.variant,
        "seed": args.seed,
        "epochs": args.epochs,
        "window": args.window,
        "horizon": args.horizon,
    }
    cfg = cfg._replace(**{k: v for k, v in overrides.items() if v is not None})
    return validate_train_config(cfg)


def _load_split(data_dir: str, split: str, required: bool = True) -> list | None:
    filesystem = Filesystem()
    path = os.path.join(filesystem.get_data_path(data_dir), split)
    if not os.path.isdir(path):
        if required:
            # a bare store (no split folders) serves every split
            return read_dataset(filesystem.split_path(data_dir, split))
        return None
    return read_dataset(path)


def write_run_file(out_dir: str, argv: list[str], config: dict, seeds: list[int]) -> str:
    return Filesystem().write_json(
        os.path.join(out_dir, RUN_FILE),
        {
            "argv": list(argv),
            "config": config,
            "seeds": seeds,
            "code_version": version,
            "torch_version": torch.__version__,
            "deterministic": is_deterministic(),
        },
    )


def _verified(artifacts: list[str]) -> list[str]:
    """Artifacts that are missing or empty."""
    return [
        path
        for path in artifacts
        if not os.path.exists(path)
        or (os.path.isfile(path) and os.path.getsize(path) == 0)
    ]


###
# COMMANDS
###


def cmd_gen_data(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    out = Filesystem().get_data_path(args.out)
    artifacts = []
    if args.from_folder:
        seqs = load_video_folder(
            args.from_folder,
            target_size=(args.size, args.size),
            grayscale=not args.rgb,
            persons=PERSON_SETS[args.persons],
        )
        write_dataset(
            seqs, out, seed=args.seed, params={"source": args.from_folder, "persons": args.persons}
        )
        artifacts += [os.path.join(out, "manifest.json"), os.path.join(out, "data.bin")]
        summary = f"Ingested {len(seqs)} sequences into {out}"
    else:
        sizes = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
        write_splits(
            out,
            sizes={k: v for k, v in sizes.items() if v > 0},
            n_frames=args.frames,
            n_digits=args.digits,
            seed=args.seed,
            glyph_bank=load_glyph_bank(args.glyphs),
            canvas=(args.size, args.size),
        )
        for split, count in sizes.items():
            if count > 0:
                artifacts += [
                    os.path.join(out, split, "manifest.json"),
                    os.path.join(out, split, "data.bin"),
                ]
        summary = f"Wrote Moving MNIST splits to {out}"

    config = {key: value for key, value in vars(args).items() if key != "command"}
    artifacts.append(write_run_file(out, argv, config, [args.seed]))
    return CommandResult(0, artifacts, summary)


def cmd_train(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    cfg = resolve_config(args)
    out = Filesystem().ensure_dir(Filesystem().get_runs_path(cfg.out_dir))
    artifacts = [write_run_file(out, argv, cfg._asdict(), [cfg.seed])]

    n_frames = cfg.context_frames + cfg.predict_frames
    trainset = SequenceDataset(_load_split(cfg.data_dir, "train"))
    val_seqs = _load_split(cfg.data_dir, "val", required=False)
    valset = SequenceDataset(val_seqs, n_frames=n_frames) if val_seqs else None

    model = build_variant(cfg)
    summary = train(
        model, trainset, cfg, valset=valset, out_dir=out, resume=args.resume, device=get_device()
    )
    artifacts += summary.checkpoints
    artifacts.append(os.path.join(out, "metrics.jsonl"))
    if summary.best_checkpoint:
        artifacts.append(summary.best_checkpoint)
    text = f"Trained {cfg.variant} for {summary.epochs_completed} epochs"
    if summary.best_val_mse is not None:
        text += f"; best validation MSE {summary.best_val_mse:.5f}"
    return CommandResult(0, artifacts, text)


def cmd_eval(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    model, cfg, _ = load_model(args.ckpt, get_device())
    testset = _load_split(args.data, args.split)
    report = evaluate_stochastic(
        model,
        testset,
        n_samples=args.samples,
        context_len=args.context,
        pred_len=args.predict,
        seed=args.seed,
    )
    data = report_to_dict(report)
    data["headline_mse"] = report.mse_sum if args.mnist_scale else report.mse_mean
    filesystem = Filesystem()
    out_path = os.path.abspath(args.out)
    artifacts = [filesystem.write_json(out_path, data)]
    if args.baseline:
        baseline = evaluate_baseline(testset, args.context, args.predict)
        stem, ext = os.path.splitext(out_path)
        artifacts.append(filesystem.write_json(f"{stem}_baseline{ext or '.json'}", report_to_dict(baseline)))

    config = {**cfg._asdict(), **{k: v for k, v in vars(args).items() if k != "command"}}
    artifacts.append(write_run_file(os.path.dirname(out_path), argv, config, [args.seed]))
    summary = (
        f"{cfg.variant}: SSIM {report.ssim_mean:.4f}, MSE {data['headline_mse']:.4f}, "
        f"PSNR {report.psnr_mean:.2f} over {len(testset)} sequences x {args.samples} samples"
    )
    return CommandResult(0, artifacts, summary)


def cmd_predict(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    device = get_device()
    model, cfg, _ = load_model(args.ckpt, device)
    seqs = _load_split(args.data, args.split)
    if not 0 <= args.index < len(seqs):
        raise ContractError(f"Index {args.index} outside a split of {len(seqs)} sequences")
    frames = seqs[args.index].frames
    if len(frames) < args.context:
        raise ContractError(f"Sequence has {len(frames)} frames; context {args.context} needed")

    context = frames_to_tensor(frames[: args.context]).unsqueeze(0).to(device)
    prediction = tensor_to_frames(model.rollout(context, args.predict, args.seed)[0])

    out = Filesystem().ensure_dir(os.path.abspath(args.out))
    artifacts = save_frames(prediction, out)
    npy_path = os.path.join(out, "prediction.npy")
    np.save(npy_path, prediction)
    artifacts.append(npy_path)

    rows = [("prediction", prediction)]
    truth = frames[args.context : args.context + args.predict]
    if len(truth) == args.predict:
        rows.insert(0, ("ground truth", truth))
    artifacts.append(render_grid(rows, os.path.join(out, "grid.png")))

    config = {**cfg._asdict(), **{k: v for k, v in vars(args).items() if k != "command"}}
    artifacts.append(write_run_file(out, argv, config, [args.seed]))
    return CommandResult(0, artifacts, f"Predicted {args.predict} frames into {out}")


def _ablation_table(records: list[dict]) -> str:
    lines = [
        "# Ablation on Moving MNIST",
        "",
        "| variant | SSIM | MSE | MSE (per image) | PSNR | mean prior sigma | parameters | NaN runs |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for name in VARIANT_ORDER:
        rows = [r for r in records if r["variant"] == name]
        done = [r for r in rows if not r["nan"]]

        def mean(key: str) -> str:
            values = [r[key] for r in done]
            return f"{np.mean(values):.4f}" if values else "n/a"

        params = rows[0]["parameters"] if rows else 0
        nan_runs = sum(r["nan"] for r in rows)
        lines.append(
            f"| {VARIANTS[name].label} | {mean('ssim_mean')} | {mean('mse_mean')} | "
            f"{mean('mse_sum')} | {mean('psnr_mean')} | {mean('mean_prior_sigma')} | "
            f"{params} | {nan_runs}/{len(rows)} |"
        )
    return "\n".join(lines) + "\n"


def _load_experiment_splits(cfg: TrainConfig) -> tuple[SequenceDataset, SequenceDataset | None, list]:
    n_frames = cfg.context_frames + cfg.predict_frames
    trainset = SequenceDataset(_load_split(cfg.data_dir, "train"))
    val_seqs = _load_split(cfg.data_dir, "val", required=False)
    valset = SequenceDataset(val_seqs, n_frames=n_frames) if val_seqs else None
    testset = _load_split(cfg.data_dir, "test", required=False) or val_seqs
    if not testset:
        raise ContractError(f"No test or val split under {cfg.data_dir}")
    return trainset, valset, testset


def _train_and_score(
    run_cfg: TrainConfig, trainset, valset, testset, n_samples: int
) -> tuple[dict, MetricReport | None]:
    """Train one configuration and score it on testset; a diverged run has no report."""
    model = build_variant(run_cfg)
    record = {
        "variant": run_cfg.variant,
        "label": VARIANTS[run_cfg.variant].label,
        "seed": run_cfg.seed,
        "window": run_cfg.window,
        "horizon": run_cfg.horizon,
        "parameters": parameter_count(model),
        "nan": False,
    }
    try:
        summary = train(
            model, trainset, run_cfg, valset=valset, out_dir=run_cfg.out_dir, device=get_device()
        )
    except NumericError as e:
        print(f"{run_cfg.out_dir} diverged: {e}")
        return {**record, "nan": True, "error": str(e)}, None

    # deterministic variants give the same report for any sample count
    samples = n_samples if VARIANTS[run_cfg.variant].latent else 1
    report = evaluate_stochastic(
        model,
        testset,
        n_samples=samples,
        context_len=run_cfg.context_frames,
        pred_len=run_cfg.predict_frames,
        seed=run_cfg.seed,
    )
    last = summary.history[-1] if summary.history else {}
    record.update(
        ssim_mean=report.ssim_mean,
        mse_mean=report.mse_mean,
        mse_sum=report.mse_sum,
        psnr_mean=report.psnr_mean,
        mean_prior_sigma=last.get("mean_prior_sigma", 0.0),
        samples=samples,
    )
    return record, report


def _failure_result(records: list[dict], artifacts: list[str], done: str) -> CommandResult:
    failed = [os.path.basename(r["out_dir"]) for r in records if r["nan"]]
    if failed:
        return CommandResult(1, artifacts, f"Non-finite loss in {', '.join(failed)}")
    return CommandResult(0, artifacts, done)


def cmd_ablate(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    cfg = resolve_config(args)
    seeds = args.seeds or [cfg.seed]
    n_samples = args.samples or cfg.eval_samples
    filesystem = Filesystem()
    out = filesystem.ensure_dir(filesystem.get_runs_path(cfg.out_dir))
    artifacts = [write_run_file(out, argv, cfg._asdict(), seeds)]
    trainset, valset, testset = _load_experiment_splits(cfg)

    records = []
    for seed in seeds:
        for name in VARIANT_ORDER:
            run_cfg = cfg._replace(
                variant=name, seed=seed, out_dir=os.path.join(out, f"{name}_seed{seed}")
            )
            record, report = _train_and_score(run_cfg, trainset, valset, testset, n_samples)
            records.append({**record, "out_dir": run_cfg.out_dir})
            if report is not None:
                print(f"{name} seed {seed}: SSIM {report.ssim_mean:.4f} MSE {report.mse_mean:.5f}")

    table_path = os.path.join(out, "ablation.md")
    with open(table_path, "w") as f:
        f.write(_ablation_table(records))
    artifacts.append(table_path)
    artifacts.append(filesystem.write_json(os.path.join(out, "ablation.json"), {"runs": records}))
    return _failure_result(
        records, artifacts, f"Ablation of {len(VARIANT_ORDER)} variants over seeds {seeds}"
    )


def _sweep_pairs(windows: list[int], horizons: list[int]) -> list[tuple[int, int]]:
    bad = [m for m in windows if m < 2 or m % 2]
    if bad or any(h < 1 for h in horizons):
        raise UsageError(f"windows must be even and >= 2, horizons >= 1 (got {windows}, {horizons})")
    pairs = [(m, h) for m in sorted(set(windows)) for h in sorted(set(horizons)) if h <= m]
    if not pairs:
        raise UsageError("No (window, horizon) pair with horizon <= window")
    return pairs


def _sweep_table(rows: list[dict], variant: str) -> str:
    lines = [
        f"# Window/horizon sweep ({VARIANTS[variant].label})",
        "",
        "| M | H | SSIM | MSE | MSE (per image) | PSNR | NaN runs |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in rows:
        cells = [f"{row[k]:.4f}" if row["runs"] > row["nan_runs"] else "n/a"
                 for k in ("ssim_mean", "mse_mean", "mse_sum", "psnr_mean")]
        lines.append(
            f"| {row['window']} | {row['horizon']} | {' | '.join(cells)} | "
            f"{row['nan_runs']}/{row['runs']} |"
        )
    return "\n".join(lines) + "\n"


def cmd_sweep(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    cfg = resolve_config(args)
    if get_variant(cfg.variant).conv_dims != 3:
        raise UsageError(f"{cfg.variant} has a fixed single-frame window; sweep a 3D variant")
    pairs = _sweep_pairs(args.windows, args.horizons)
    seeds = args.seeds or [cfg.seed]
    n_samples = args.samples or cfg.eval_samples
    filesystem = Filesystem()
    out = filesystem.ensure_dir(filesystem.get_runs_path(cfg.out_dir))
    artifacts = [write_run_file(out, argv, cfg._asdict(), seeds)]
    trainset, valset, testset = _load_experiment_splits(cfg)

    records, rows, curves = [], [], {}
    for window, horizon in pairs:
        reports = []
        for seed in seeds:
            run_cfg = cfg._replace(
                window=window,
                horizon=horizon,
                seed=seed,
                out_dir=os.path.join(out, f"M{window}_H{horizon}_seed{seed}"),
            )
            record, report = _train_and_score(run_cfg, trainset, valset, testset, n_samples)
            records.append({**record, "out_dir": run_cfg.out_dir})
            if report is not None:
                reports.append(report)
                print(f"M={window} H={horizon} seed {seed}: SSIM {report.ssim_mean:.4f}")

        row = {"window": window, "horizon": horizon, "runs": len(seeds)}
        row["nan_runs"] = len(seeds) - len(reports)
        if reports:
            mean = average_reports(reports)
            curves[f"M={window} H={horizon}"] = mean
            row.update(
                ssim_mean=mean.ssim_mean,
                mse_mean=mean.mse_mean,
                mse_sum=mean.mse_sum,
                psnr_mean=mean.psnr_mean,
            )
        rows.append(row)

    table_path = os.path.join(out, "sweep.md")
    with open(table_path, "w") as f:
        f.write(_sweep_table(rows, cfg.variant))
    artifacts.append(table_path)
    artifacts.append(
        filesystem.write_json(os.path.join(out, "sweep.json"), {"pairs": rows, "runs": records})
    )
    scored = [row for row in rows if row["runs"] > row["nan_runs"]]
    if scored:
        artifacts.append(plot_sweep(scored, os.path.join(out, "sweep.png")))
        artifacts.append(plot_curves(curves, os.path.join(out, "sweep_curves.png")))
    return _failure_result(records, artifacts, f"Swept {len(pairs)} window/horizon pairs over seeds {seeds}")


def cmd_render(args: argparse.Namespace, argv: list[str]) -> CommandResult:
    out_path = os.path.abspath(args.out)
    if args.reports:
        labels = args.labels or [os.path.splitext(os.path.basename(p))[0] for p in args.reports]
        if len(labels) != len(args.reports):
            raise UsageError("--labels must name every report")
        reports = {}
        for label, path in zip(labels, args.reports):
            with open(path) as f:
                reports[label] = report_from_dict(json.load(f))
        plot_curves(reports, out_path)
    else:
        seqs = _load_split(args.data, args.split)
        missing = [i for i in args.indices if not 0 <= i < len(seqs)]
        if missing:
            raise ContractError(f"Indices {missing} outside a split of {len(seqs)} sequences")
        rows = [(seqs[i].source_id, seqs[i].frames) for i in args.indices]
        render_grid(rows, out_path, stride=args.stride)

    config = {k: v for k, v in vars(args).items() if k != "command"}
    run_file = write_run_file(os.path.dirname(out_path), argv, config, [])
    return CommandResult(0, [out_path, run_file], f"Rendered {out_path}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def dispatch(argv: list[str]) -> CommandResult:
    """Run one subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage() + str(e), file=sys.stderr)
        return CommandResult(2, [], f"{parser.format_usage()}{e}")
    except SystemExit as e:
        # --help and --version
        return CommandResult(int(e.code or 0), [], "")

    set_reproducible_mode(is_deterministic())
    try:
        result = COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return CommandResult(2, [], f"{parser.format_usage()}{e}")
    except (
        ContractError,
        NumericError,
        CorruptDatasetError,
        CheckpointError,
        OSError,
        RuntimeError,
    ) as e:
        print(f"Error: {e}", file=sys.stderr)
        return CommandResult(1, [], f"{type(e).__name__}: {e}")

    missing = _verified(result.artifacts)
    if missing:
        print(f"Error: artifacts not written: {', '.join(missing)}", file=sys.stderr)
        return CommandResult(1, result.artifacts, f"Missing artifacts: {', '.join(missing)}")
    print(result.summary)
    return result
