"""Training/evaluation drivers shared by the CLI and the acceptance suite.

Every variant in a comparison trains on the same generated shard (paired
comparison); only the model override and the training seed change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import Sample, corrupt_depth, generate
from .metrics import ConfusionMatrix, format_table, to_csv
from .model import ModelConfig
from .train import TrainResult, evaluate, train_loop

# test frames are drawn from a disjoint index range of the same recipe
TEST_START = 100_000
BACKBONE = "ToyNet"


def build_data(cfg: ExperimentConfig) -> tuple[list[Sample], list[Sample]]:
    recipe = cfg.recipe
    train = generate(recipe, cfg["data.n_train"], start=0)
    test = generate(recipe, cfg["data.n_test"], start=TEST_START)
    return train, test


@dataclass
class RunResult:
    label: str
    seed: int
    model: ModelConfig
    train: TrainResult
    confusion: ConfusionMatrix

    @property
    def params(self):
        return self.train.params

    @property
    def miou(self) -> float:
        return self.confusion.miou()

    @property
    def iou(self) -> np.ndarray:
        return self.confusion.iou_per_class()


def train_and_eval(cfg: ExperimentConfig, train: Sequence[Sample], test: Sequence[Sample], label: str = "") -> RunResult:
    model_cfg, train_cfg = cfg.model, cfg.train
    result = train_loop(model_cfg, train, train_cfg)
    cm = evaluate(result.params, model_cfg, test, cfg["eval.batch_size"], cfg["eval.flip"])
    return RunResult(label, cfg.seed, model_cfg, result, cm)


def seeds_for(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg["ablate.num_seeds"])]


# -- ablation suites ----------------------------------------------------------------

_ALL = (True, True, True, True)
_NONE = (False, False, False, False)


def _placement_rows() -> list[tuple[str, dict]]:
    masks = [
        _NONE,
        (True, False, False, False),
        (False, True, False, False),
        (False, False, True, False),
        (False, False, False, True),
        (True, True, False, False),
        (True, True, True, False),
        _ALL,
    ]
    rows = [(BACKBONE + "*", {"model.gate_mask": m, "model.stream_heads": True}) for m in masks]
    rows.append((BACKBONE, {"model.gate_mask": _ALL, "model.stream_heads": False}))
    return rows


SUITES: dict[str, list[tuple[str, dict]]] = {
    "fs": [
        ("Concat", {"model.fusion": "concat"}),
        ("Self-global", {"model.fusion": "self-global"}),
        ("Cross-global", {"model.fusion": "cross-global"}),
        ("Product", {"model.fusion": "product"}),
        ("Proposed", {"model.fusion": "proposed"}),
    ],
    "fa": [
        ("Addition", {"model.fusion": "addition"}),
        ("Conv", {"model.fusion": "conv"}),
        ("Proposed", {"model.fusion": "proposed"}),
    ],
    "placement": _placement_rows(),
    "factors": [
        (f"{BACKBONE} (Average of Dual Path)", {"model.gate_mask": _NONE}),
        (f"{BACKBONE} + SA-Gate", {"model.fusion": "proposed", "model.bmp": False}),
        (f"{BACKBONE} + BMP", {"model.fusion": "conv", "model.bmp": True}),
        (f"{BACKBONE} + BMP + SA-Gate", {"model.fusion": "proposed", "model.bmp": True}),
    ],
}


def _pad_mask(mask: tuple, n: int) -> tuple:
    return tuple(mask[:n]) + (False,) * max(0, n - len(mask))


def suite_variants(suite: str, cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    n_stages = len(cfg["model.channels"])
    out = []
    for label, overrides in SUITES[suite]:
        upd = dict(overrides)
        if "model.gate_mask" in upd:
            upd["model.gate_mask"] = _pad_mask(upd["model.gate_mask"], n_stages)
        out.append((label, cfg.replace(**upd)))
    return out


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class Table:
    header: list[str]
    rows: list[list]
    config_hash: str

    def csv(self) -> str:
        return to_csv(self.header + ["config_hash"], [r + [self.config_hash] for r in self.rows])

    def text(self) -> str:
        return format_table(self.header, self.rows) + f"config hash: {self.config_hash}\n"


def run_suite(suite: str, cfg: ExperimentConfig, log=None) -> tuple[Table, dict[str, list[RunResult]]]:
    """Train every variant of ``suite`` for each seed; one mean/std row per variant."""
    train, test = build_data(cfg)
    seeds = seeds_for(cfg)
    variants = suite_variants(suite, cfg)
    runs: dict[str, list[RunResult]] = {}
    rows = []
    for label, vcfg in variants:
        results = []
        for s in seeds:
            results.append(train_and_eval(vcfg.replace(seed=s), train, test, label))
            if log:
                log(f"{suite} {label} seed={s} miou={results[-1].miou:.4f}")
        runs[label] = results
        mean, std = _mean_std([r.miou for r in results])
        row = [label]
        if suite == "placement":
            row += ["x" if g else "" for g in vcfg["model.gate_mask"]]
        rows.append(row + [mean, std] + [r.miou for r in results])
    header = ["Method"]
    if suite == "placement":
        header = ["Backbone"] + [f"Block{i + 1}" for i in range(len(cfg["model.channels"]))]
    header += ["mIoU_mean", "mIoU_std"] + [f"mIoU_seed{s}" for s in seeds]
    return Table(header, rows, cfg.hash()), runs


# -- noise robustness -------------------------------------------------------------------

NOISE_METHODS = (("Concat", "concat"), ("Proposed", "proposed"))


def degradation_permille(clean: float, noisy: float) -> float:
    """Relative change in per-mille; negative when the noisy score is lower."""
    return (noisy - clean) / clean * 1000.0


def noise_scores(run: RunResult, test: Sequence[Sample], stds: Sequence[float], cfg: ExperimentConfig) -> list[float]:
    """mIoU at std 0 followed by each entry of ``stds``."""
    scores = [run.miou]
    for std in stds:
        noisy = [corrupt_depth(s, std, cfg["eval.noise_seed"], cfg["eval.noise_target"]) for s in test]
        cm = evaluate(run.params, run.model, noisy, cfg["eval.batch_size"], cfg["eval.flip"])
        scores.append(cm.miou())
    return scores


def noise_table(scores: dict[str, list[list[float]]], stds: Sequence[float], config_hash: str) -> Table:
    """Seed-averaged mIoU and mean per-seed degradation for each method."""
    header = ["Method", "No Noise"] + [f"Std={int(s) if float(s).is_integer() else s}" for s in stds]
    rows = []
    for method, per_seed in scores.items():
        arr = np.asarray(per_seed)
        row = [method, f"{arr[:, 0].mean():.4f}"]
        for j in range(1, arr.shape[1]):
            deg = np.mean([degradation_permille(r[0], r[j]) for r in arr])
            row.append(f"{arr[:, j].mean():.4f}({deg:+.1f}‰)")
        rows.append(row)
    return Table(header, rows, config_hash)


def mean_degradation(per_seed: Sequence[Sequence[float]], column: int) -> float:
    return float(np.mean([degradation_permille(r[0], r[column]) for r in per_seed]))


def run_noise_sweep(cfg: ExperimentConfig, log=None, runs: dict[str, list[RunResult]] | None = None):
    """Train (or reuse) concat and proposed models per seed and score them under HHA noise."""
    stds = list(cfg["eval.noise_stds"])
    train, test = build_data(cfg)
    scores: dict[str, list[list[float]]] = {}
    for method, kind in NOISE_METHODS:
        per_seed = []
        for s in seeds_for(cfg):
            existing = runs.get(method) if runs else None
            run = next((r for r in existing if r.seed == s), None) if existing else None
            if run is None:
                run = train_and_eval(cfg.replace(**{"model.fusion": kind, "seed": s}), train, test, method)
            per_seed.append(noise_scores(run, test, stds, cfg))
            if log:
                log(f"noise {method} seed={s} " + " ".join(f"{v:.4f}" for v in per_seed[-1]))
        scores[method] = per_seed
    return noise_table(scores, stds, cfg.hash()), scores
