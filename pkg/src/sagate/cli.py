"""``sagate`` command line.

Exit codes: 0 success, 1 other failure (missing files, failed gradcheck),
2 config error, 3 numeric divergence or a NaN tripwire.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Tensor
from .config import ExperimentConfig
from .data import load_shard, save_shard, stack_batch
from .errors import ConfigError, Divergence, NonFinite
from .experiments import build_data, run_noise_sweep, run_suite, train_and_eval
from .gradcheck import check_model
from .fusion import FUSION_KINDS
from .metrics import format_table, to_csv
from .model import forward
from .nn import resize_array
from .train import _inputs, evaluate, history_csv

log = logging.getLogger("sagate")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


# -- helpers ---------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = io.ensure_dir(cfg["out_dir"])
    cfg.write_resolved(out)
    return out


def _write_table(out: Path, stem: str, table) -> None:
    (out / f"{stem}.csv").write_text(table.csv())
    (out / f"{stem}.txt").write_text(table.text())
    sys.stdout.write(table.text())


def _metrics_rows(cm, class_names=None):
    ious = cm.iou_per_class()
    rows = [[f"class{k}" if class_names is None else class_names[k], float(v)] for k, v in enumerate(ious)]
    rows.append(["mIoU", cm.miou()])
    rows.append(["pixel_acc", cm.pixel_acc()])
    return rows


def _write_metrics(out: Path, cm, config_hash: str) -> None:
    rows = _metrics_rows(cm)
    header = ["metric", "value"]
    (out / "metrics.csv").write_text(to_csv(header + ["config_hash"], [r + [config_hash] for r in rows]))
    text = format_table(header, rows) + f"config hash: {config_hash}\n"
    (out / "metrics.txt").write_text(text)
    sys.stdout.write(text)


def _checkpoint_config(path) -> tuple[dict, ExperimentConfig]:
    params, extra = io.load_checkpoint(path)
    if "config" not in extra:
        raise ConfigError(f"checkpoint {path} carries no config")
    return params, ExperimentConfig.from_text(extra["config"], f"{path}/manifest.json")


# -- verbs ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    train, test = build_data(cfg)
    save_shard(train, out / "train", cfg.recipe)
    save_shard(test, out / "test", cfg.recipe)
    log.info("wrote %d train and %d test frames to %s", len(train), len(test), out)
    return EXIT_OK


def _datasets(args, cfg):
    if getattr(args, "data", None):
        root = Path(args.data)
        train, _ = load_shard(root / "train")
        test, _ = load_shard(root / "test")
        return train, test
    return build_data(cfg)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    train, test = _datasets(args, cfg)
    run = train_and_eval(cfg, train, test)
    io.save_checkpoint(out / "checkpoint", run.params, {"config": cfg.resolved_text(), "config_hash": cfg.hash()})
    (out / "history.csv").write_text(history_csv(run.train.history))
    _write_metrics(out, run.confusion, cfg.hash())
    return EXIT_OK


def cmd_eval(args) -> int:
    params, ckpt_cfg = _checkpoint_config(args.checkpoint)
    cfg = _load_config(args) if args.config else ckpt_cfg
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    out = _out_dir(cfg)
    if args.data:
        test, _ = load_shard(Path(args.data) / "test")
    else:
        test = build_data(cfg)[1]
    model_cfg = ckpt_cfg.model
    cm = evaluate(params, model_cfg, test, cfg["eval.batch_size"], cfg["eval.flip"])
    _write_metrics(out, cm, cfg.hash())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    table, _ = run_suite(args.suite, cfg, log=log.info)
    _write_table(out, f"ablate_{args.suite}", table)
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    cfg = _load_config(args)
    if args.stds:
        cfg = cfg.replace(**{"eval.noise_stds": tuple(float(s) for s in args.stds.split(","))})
    out = _out_dir(cfg)
    table, _ = run_noise_sweep(cfg, log=log.info)
    _write_table(out, "noise", table)
    return EXIT_OK


def gate_colormap(a_rgb: np.ndarray) -> np.ndarray:
    """H x W weights in [0, 1] -> H x W x 3 uint8; red for RGB, blue for HHA."""
    a = np.clip(np.asarray(a_rgb, dtype=np.float64), 0.0, 1.0)
    return io.to_uint8(np.stack([a, np.zeros_like(a), 1.0 - a], axis=-1))


def energy_map(feat: np.ndarray) -> np.ndarray:
    """Per-pixel L2 norm over channels of a C x H x W map, scaled to [0, 1] by its max."""
    e = np.sqrt((np.asarray(feat, dtype=np.float64) ** 2).sum(axis=0))
    peak = e.max()
    return e / peak if peak > 0 else e


def cmd_visualize(args) -> int:
    params, ckpt_cfg = _checkpoint_config(args.checkpoint)
    cfg = _load_config(args) if args.config else ckpt_cfg
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    out = _out_dir(cfg)
    model_cfg = ckpt_cfg.model
    gated = model_cfg.encoder.gated_stages
    if not gated:
        raise ConfigError("model has no gated stage to visualise")
    stage = gated[cfg["visualize.gate"]] if cfg["visualize.gate"] < 0 else cfg["visualize.gate"]
    if stage not in gated:
        raise ConfigError(f"stage {stage} has no gate (gated stages: {gated})")
    test = build_data(cfg)[1] if not args.data else load_shard(Path(args.data) / "test")[0]
    indices = [int(s) for s in args.samples.split(",")] if args.samples else list(cfg["visualize.samples"])
    for i in indices:
        rgb, hha, _ = stack_batch([test[i]])
        with ad.no_grad():
            _, _, enc = forward(params, model_cfg, *_inputs(model_cfg, rgb, hha))
        st = enc.stages[stage]
        size = rgb.shape[2:]
        fusion = st.fusion
        if fusion.gate is not None:
            a = resize_array(fusion.gate.a_rgb.data[0, 0], size)
            io.write_ppm(out / f"gate{stage}_sample{i}.ppm", gate_colormap(a))
        if fusion.separation is not None:
            sep = fusion.separation
            for name, before, after in (("rgb", st.rgb_raw, sep.rgb_rec), ("hha", st.hha_raw, sep.hha_rec)):
                for tag, feat in (("before", before), ("after", after)):
                    img = resize_array(energy_map(feat.data[0]), size)
                    io.write_pgm(out / f"fs{stage}_{name}_{tag}_sample{i}.pgm", io.to_uint8(img))
    log.info("wrote gate maps for stage %d to %s", stage, out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = args.variants.split(",") if args.variants else list(FUSION_KINDS)
    out = io.ensure_dir(args.out or "runs/gradcheck")
    rows, ok = [], True
    for kind in kinds:
        r = check_model(kind, seed=args.seed or 0, h=args.h)
        ok &= r.passed(args.tol)
        rows.append([kind, r.max_rel_error, r.worst, r.entries, r.kinks, r.unresolved, "pass" if r.passed(args.tol) else "FAIL"])
    header = ["variant", "max_rel_error", "worst_param", "entries", "kink_entries", "unresolved", "status"]
    (out / "gradcheck.csv").write_text(to_csv(header, rows, "{:.3e}"))
    sys.stdout.write(format_table(header, rows, "{:.3e}"))
    return EXIT_OK if ok else EXIT_FAIL


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sagate", description="RGB-D segmentation with separation-and-aggregation gates")
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("generate", parents=[common], help="write train/test dataset shards").set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one model, save checkpoint and history")
    p.add_argument("--data", help="directory written by 'generate' (default: generate in memory)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=["fs", "fa", "placement", "factors"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise-sweep", parents=[common], help="HHA noise robustness, proposed vs concat")
    p.add_argument("--stds", help="comma separated noise stds on the 0-255 scale")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("visualize", parents=[common], help="export gate and feature-energy maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--samples", help="comma separated test indices")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--variants", help="comma separated fusion kinds (default: all)")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Divergence, NonFinite) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
