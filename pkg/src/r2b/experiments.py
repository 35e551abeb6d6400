"""Reduced-scale ablation over the schedule presets and its ordering check."""
from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from r2b.data import Dataset
from r2b.distill import StageSpec, preset_schedule, run_progressive
from r2b.losses import LossConfig
from r2b.network import NetConfig, NetVariant
from r2b.trainer import OptimizerPolicy, TrainConfig

ABLATION_ROWS = ("sb", "sb-att", "sb-att-hkd", "sb-g", "real-to-bin")
ORDER_TOLERANCE = 0.3

# (lower, higher, strict)
EXPECTED_ORDER = (("sb", "sb-att", True), ("sb-att", "sb-att-hkd", True), ("sb-att-hkd", "real-to-bin", False))


@dataclass
class AblationSettings:
    seeds: Tuple[int, ...] = (0, 1, 2)
    epochs: int = 60
    width: int = 64
    blocks: Tuple[int, ...] = (2, 2, 2, 2)
    batch_size: int = 128
    augment: str = "cifar-train"
    rows: Tuple[str, ...] = ABLATION_ROWS


def run_ablation(train: Dataset, test: Dataset, out_dir, settings: Optional[AblationSettings] = None) -> Dict[str, List[float]]:
    """Final test top-1 of every row for every seed.

    One real teacher is trained per seed and shared by the rows that use one.
    """
    s = settings or AblationSettings()
    out_dir = Path(out_dir)
    results: Dict[str, List[float]] = {row: [] for row in s.rows}
    tc = TrainConfig(augment=s.augment, eval_every=max(1, s.epochs // 6))
    for seed in s.seeds:
        net_cfg = NetConfig(num_classes=train.class_count, width=s.width, blocks=tuple(s.blocks),
                            in_channels=train.image_shape[0], seed=seed)
        points = sum(net_cfg.blocks)
        policy = OptimizerPolicy.stage1(batch_size=s.batch_size, seed=seed).rescaled(s.epochs)
        teacher_stage = StageSpec(NetVariant.REAL_TEACHER, None, LossConfig(1.0, 0.0, 0.0), policy,
                                  gating=False, name="teacher")
        teacher, _ = run_progressive([teacher_stage], (train, test), out_dir / f"seed{seed}" / "teacher",
                                     net_cfg, tc, deterministic=True)
        for row in s.rows:
            schedule = preset_schedule(row, epochs=s.epochs, batch_size=s.batch_size, seed=seed,
                                       num_points=points, teacher_ckpt=str(teacher))
            _, summaries = run_progressive(schedule, (train, test), out_dir / f"seed{seed}" / row,
                                           net_cfg, tc, deterministic=True)
            results[row].append(summaries[-1]["test"]["top1"])
        (out_dir / "results.json").write_text(json.dumps(results, indent=1) + "\n")
    return results


def check_ordering(results: Dict[str, Sequence[float]], tolerance: float = ORDER_TOLERANCE) -> List[str]:
    """Violations of the expected row ordering on per-row medians (empty when it holds)."""
    med = {k: statistics.median(v) for k, v in results.items()}
    problems = []
    for lo, hi, strict in EXPECTED_ORDER:
        gap = med[lo] - med[hi]
        # a strict ordering may still be reversed by up to the tolerance
        if gap > tolerance:
            problems.append(f"{lo} ({med[lo]:.2f}) should be {'<' if strict else '<='} {hi} ({med[hi]:.2f})")
    # gating alone: no gain beyond seed noise
    spread = (max(results["sb"]) - min(results["sb"])) / 2 if len(results["sb"]) > 1 else 0.0
    noise = max(tolerance, spread)
    if med["sb-g"] - med["sb"] > noise:
        problems.append(f"sb-g ({med['sb-g']:.2f}) beats sb ({med['sb']:.2f}) by more than noise ({noise:.2f})")
    return problems
