"""Config-driven experiment runner.

Subcommands: train, eval, render, sweep, zeroshot, fewshot, attn, report.
Every run writes a manifest (config hash, seed list, per-stage wall-clock)
into its output directory, so any emitted report can be regenerated from the
manifest alone. Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .backbone import AttentionMapAccumulator
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, SyntheticSpec, make_synthetic
from .evaluation import MetricReport, aggregate, load_report, reports_to_csv, save_report
from .pipeline import build_model
from .rasterizer import RenderConfig, rasterize, write_png
from .runner import build_datasets, rendered, run_experiment, run_seed, sweep_cells
from .tokenizer import ContractViolation
from .training import load_checkpoint, save_checkpoint, set_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _StageClock:
    def __init__(self):
        self.stages: dict[str, float] = {}

    def timed(self, name: str):
        clock = self

        class _Ctx:
            def __enter__(self):
                self._t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                clock.stages[name] = clock.stages.get(name, 0.0) + time.perf_counter() - self._t0
                return False

        return _Ctx()


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, clock: _StageClock, extra: dict | None = None) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.raw,
        "seeds": list(cfg.seeds),
        "stage_seconds": clock.stages,
        **(extra or {}),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config, overrides=args.override or [])
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    clock = _StageClock()
    with clock.timed("train"):
        report_rows: dict[str, list[float]] = {}
        for seed in cfg.seeds:
            result = run_seed(cfg, seed)
            for name, value in result.metrics.items():
                report_rows.setdefault(name, []).append(value)
            save_checkpoint(out / f"checkpoint_seed{seed}.npz", result.model, cfg.train, result.log,
                            extra={"config_hash": cfg.config_hash()})
            print(f"seed {seed}: " + "  ".join(f"{k}={v:.4f}" for k, v in result.metrics.items()))
    report = MetricReport(task=cfg.task, metrics=report_rows, seeds=list(cfg.seeds))
    save_report(report, out / "metrics.json")
    reports_to_csv([report], out / "metrics.csv")
    _write_manifest(out, cfg, clock)
    print(f"wrote {out}/metrics.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    clock = _StageClock()
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint for eval: {ckpt}")
    datasets = build_datasets(cfg)
    seed = cfg.seeds[0]
    with clock.timed("eval"):
        # rebuild the architecture, then overwrite weights from the checkpoint
        result = _rebuild_for_eval(cfg, seed, datasets, ckpt)
    report = MetricReport(task=cfg.task, metrics={k: [v] for k, v in result.items()}, seeds=[seed])
    save_report(report, out / "metrics_eval.json")
    _write_manifest(out, cfg, clock, extra={"checkpoint": str(ckpt)})
    print("  ".join(f"{k}={v:.4f}" for k, v in result.items()))
    return EXIT_OK


def _rebuild_for_eval(cfg: ExperimentConfig, seed: int, datasets, ckpt: Path) -> dict[str, float]:
    from . import runner

    set_seed(seed)
    if cfg.task == "classification":
        test_ds = datasets.get("test") or datasets["train"]
        x_te, y_te = runner._class_arrays(test_ds, cfg.window.length)
        run_cfg = copy.deepcopy(cfg)
        run_cfg.num_classes = cfg.num_classes or int(max(y_te)) + 1
        model = build_model(run_cfg.pipeline_config(channels=x_te.shape[2]))
        load_checkpoint(ckpt, model)
        from .evaluation import accuracy

        return {"accuracy": accuracy(runner._predict(model, cfg, x_te), y_te)}
    # AD / forecasting: rerun the scoring path with restored weights
    result = run_seed(cfg, seed, datasets=datasets)
    load_checkpoint(ckpt, result.model)
    return result.metrics


def cmd_render(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    clock = _StageClock()
    with clock.timed("render"):
        datasets = build_datasets(cfg)
        inst = datasets["train"].instances[0]
        window = inst.values[: cfg.window.length]
        from dataclasses import replace

        for layout in ("horizontal", "grid"):
            plot = rasterize(window, replace(cfg.render, layout=layout))
            path = out / f"window_{layout}.png"
            write_png(plot, path)
            print(f"wrote {path} (plotted channels: {plot.plotted_channels})")
    _write_manifest(out, cfg, clock)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    clock = _StageClock()
    if not cfg.sweep_axes:
        raise ConfigError("sweep: config declares no sweep.axes")
    reports = []
    with clock.timed("sweep"):
        for axis_labels, cell_cfg in sweep_cells(cfg):
            cell_name = "_".join(f"{k}-{v}" for k, v in sorted(axis_labels.items())) or "base"
            report = run_experiment(cell_cfg, axis=axis_labels)
            save_report(report, out / f"metrics_{cell_name}.json")
            reports.append(report)
            summary = "  ".join(f"{name}={report.mean(name):.4f}" for name in sorted(report.metrics))
            print(f"[{cell_name}] {summary}")
    axis_for_std = args.axis or (next(iter(sorted(cfg.sweep_axes))) if len(cfg.sweep_axes) == 1 else None)
    agg = aggregate(reports, axis=axis_for_std)
    save_report(agg, out / "metrics_aggregate.json")
    reports_to_csv(reports + [agg], out / "sweep.csv")
    _write_manifest(out, cfg, clock, extra={"cells": len(reports), "rows": len(reports) * len(cfg.seeds)})
    print(f"wrote {out}/sweep.csv ({len(reports)} cells x {len(cfg.seeds)} seeds)")
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    clock = _StageClock()
    if cfg.task != "forecasting":
        raise ConfigError("zeroshot: the transfer protocol is defined for forecasting")
    if not cfg.dataset.eval_synthetic:
        raise ConfigError("zeroshot: dataset.eval_synthetic must describe the target dataset")
    with clock.timed("zeroshot"):
        datasets = build_datasets(cfg)
        report = run_experiment(cfg, axis={"transfer": args.label or _transfer_label(cfg)},
                                eval_datasets={"test": datasets["test"]})
    save_report(report, out / "metrics_zeroshot.json")
    _write_manifest(out, cfg, clock)
    print(f"[{report.axis['transfer']}] mse={report.mean('mse'):.4f} mae={report.mean('mae'):.4f}")
    return EXIT_OK


def _transfer_label(cfg: ExperimentConfig) -> str:
    src = (cfg.dataset.synthetic or {}).get("kind", "source")
    src_seed = (cfg.dataset.synthetic or {}).get("seed", 0)
    dst = (cfg.dataset.eval_synthetic or {}).get("kind", "target")
    dst_seed = (cfg.dataset.eval_synthetic or {}).get("seed", 0)
    return f"{src}{src_seed}->{dst}{dst_seed}"


def cmd_fewshot(args) -> int:
    cfg = _load(args)
    cfg.window.few_shot_fraction = args.fraction
    out = _out_dir(cfg, args)
    clock = _StageClock()
    with clock.timed("fewshot"):
        report = run_experiment(cfg, axis={"few_shot_fraction": str(args.fraction)})
    save_report(report, out / "metrics_fewshot.json")
    _write_manifest(out, cfg, clock)
    print("  ".join(f"{name}={report.mean(name):.4f}" for name in sorted(report.metrics)))
    return EXIT_OK


def cmd_attn(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    clock = _StageClock()
    seed = cfg.seeds[0]
    with clock.timed("attn"):
        result = run_seed(cfg, seed)
        model = result.model
        datasets = build_datasets(cfg)
        from . import runner

        if cfg.task == "classification":
            x, _ = runner._class_arrays(datasets.get("test") or datasets["train"], cfg.window.length)
        else:
            from .data import chronological_splits, sliding_windows

            _, _, test_i = chronological_splits(datasets["train"].instances[0])
            x = sliding_windows(test_i, cfg.window.length, stride=cfg.window.length,
                                horizon=cfg.window.horizon if cfg.task == "forecasting" else 0).x
        acc = AttentionMapAccumulator()
        images = rendered(x, cfg.render) if cfg.vision_enabled else None
        model.eval()
        with torch.no_grad():
            for lo in range(0, x.shape[0], 64):
                xb = torch.from_numpy(x[lo : lo + 64])
                ib = torch.from_numpy(images[lo : lo + 64]) if images is not None else None
                maps = model(xb, images=ib, collect_attention=True).attention
                if maps is None:
                    raise ContractViolation("backbone has no attention layers to visualize")
                acc.add(maps, xb.shape[0])
        averaged = acc.mean.numpy()
    np.save(out / "attention_maps.npy", averaged)
    _save_heatmaps(averaged, out)
    _write_manifest(out, cfg, clock, extra={"attention_shape": list(averaged.shape)})
    print(f"wrote {out}/attention_maps.npy with shape {averaged.shape}")
    return EXIT_OK


def _save_heatmaps(maps: np.ndarray, out: Path) -> None:
    from PIL import Image

    for layer in range(maps.shape[0]):
        m = maps[layer]
        lo, hi = float(m.min()), float(m.max())
        scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        img = np.rint(scaled * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").resize((256, 256), Image.NEAREST).save(out / f"attention_layer{layer}.png")


def cmd_report(args) -> int:
    in_dir = Path(args.dir)
    if not in_dir.exists():
        raise FileNotFoundError(f"no such directory: {in_dir}")
    reports = []
    for path in sorted(in_dir.glob("metrics_*.json")) + sorted(in_dir.glob("metrics.json")):
        if path.name == "metrics_aggregate.json":
            continue
        reports.append(load_report(path))
    if not reports:
        raise FileNotFoundError(f"no metric reports under {in_dir}")
    out = Path(args.out) if args.out else in_dir
    out.mkdir(parents=True, exist_ok=True)
    reports_to_csv(reports, out / "report_table.csv")
    if args.axis:
        agg = aggregate(reports, axis=args.axis)
        save_report(agg, out / "report_aggregate.json")
    print(f"wrote {out}/report_table.csv ({len(reports)} reports)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plotfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config list")
        p.add_argument("--jobs", type=int, default=1, help="reserved for parallel sweeps (serial when 1)")
        p.add_argument("--out", default=None, help="output directory (defaults to config 'out')")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field by dotted path")

    p_train = sub.add_parser("train", help="train over the seed list, write checkpoints + metrics")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_render = sub.add_parser("render", help="emit PNG plots of one window per layout")
    common(p_render)
    p_render.set_defaults(func=cmd_render)

    p_sweep = sub.add_parser("sweep", help="cartesian sweep over declared axes")
    common(p_sweep)
    p_sweep.add_argument("--axis", default=None, help="axis for the aggregate std column")
    p_sweep.set_defaults(func=cmd_sweep)

    p_zero = sub.add_parser("zeroshot", help="train on dataset A, evaluate on dataset B")
    common(p_zero)
    p_zero.add_argument("--label", default=None, help="report label (defaults to A->B)")
    p_zero.set_defaults(func=cmd_zeroshot)

    p_few = sub.add_parser("fewshot", help="train on a fraction of the training data")
    common(p_few)
    p_few.add_argument("--fraction", type=float, required=True)
    p_few.set_defaults(func=cmd_fewshot)

    p_attn = sub.add_parser("attn", help="dump test-set-averaged attention maps")
    common(p_attn)
    p_attn.set_defaults(func=cmd_attn)

    p_report = sub.add_parser("report", help="aggregate metric reports into tables")
    p_report.add_argument("--dir", required=True, help="directory holding metrics_*.json")
    p_report.add_argument("--out", default=None)
    p_report.add_argument("--axis", default=None, help="aggregate std over this axis")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
