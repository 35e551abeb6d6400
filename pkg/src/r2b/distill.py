"""Progressive teacher-student schedules.

A schedule is a list of :class:`StageSpec`. Each stage trains one student
variant, optionally guided by a frozen teacher (the student of an earlier
stage or a checkpoint file), and writes ``stage<k>.r2b`` plus its metrics.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import yaml

from r2b import checkpoint
from r2b.data import Dataset
from r2b.losses import LossConfig
from r2b.network import NetConfig, Network, NetVariant
from r2b.tensor import ShapeError, Tensor, no_grad
from r2b.trainer import MetricsLog, OptimizerPolicy, TrainConfig, evaluate, train_stage

logger = logging.getLogger(__name__)

# teacher/init reference values with special meaning
PREVIOUS = "previous"
FRESH = "fresh"


class StageError(RuntimeError):
    def __init__(self, index: int, message: str):
        super().__init__(f"stage {index}: {message}")
        self.index = index


@dataclass
class StageSpec:
    student: NetVariant
    teacher: Optional[str] = None          # None | "previous" | "stage<k>" | checkpoint path
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerPolicy = field(default_factory=OptimizerPolicy)
    init: str = FRESH                      # "fresh" | "previous" | checkpoint path
    gating: Optional[bool] = None          # None keeps the network config's setting
    name: str = ""

    def __post_init__(self):
        self.student = NetVariant.parse(self.student)


class FrozenTeacher:
    """Read-only evaluator: eval-mode BatchNorm, no parameter gradients."""

    def __init__(self, net: Network):
        self.net = net
        net.eval()
        for p in net.parameters():
            p.requires_grad = False
            p.grad = None

    @property
    def training(self) -> bool:
        return False

    def eval(self):
        return self

    def train(self, mode: bool = True):
        if mode:
            raise RuntimeError("a frozen teacher cannot be put back in training mode")
        return self

    def forward_with_transfer_points(self, x):
        return self.net.forward_with_transfer_points(x)

    def __call__(self, x):
        return self.net(x)

    def parameters(self):
        return self.net.parameters()


def freeze_teacher(net: Network) -> FrozenTeacher:
    return FrozenTeacher(net)


def _shapes(net: Network) -> Dict[str, Tuple[int, ...]]:
    return {k: v.shape for k, v in net.state_dict().items()}


def run_progressive(schedule: Sequence[StageSpec], data: Tuple[Dataset, Optional[Dataset]], out_dir,
                    net_config: NetConfig, train_config: Optional[TrainConfig] = None,
                    deterministic: bool = False) -> Tuple[Path, List[dict]]:
    """Execute the stages in order; returns the final checkpoint path and per-stage summaries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_data, test_data = data
    log = MetricsLog(out_dir / "metrics.jsonl", out_dir / "metrics.csv", deterministic)
    produced: List[Path] = []
    summaries = []
    for k, spec in enumerate(schedule):
        cfg = net_config if spec.gating is None else replace(net_config, gating=spec.gating)
        student = Network(spec.student, cfg)
        init_path = _resolve_ref(spec.init, k, produced, "init")
        if init_path is not None:
            ckpt = checkpoint.load(init_path)
            want = _shapes(student)
            have = {n: a.shape for n, a in ckpt.entries.items()}
            if want != have:
                bad = sorted(set(want) ^ set(have)) or [n for n in want if want[n] != have[n]]
                raise StageError(k, f"cannot initialize {spec.student.value} from {init_path}: "
                                    f"parameter layout differs (e.g. {bad[:3]})")
            student.load_state_dict(ckpt.entries)
        teacher = None
        teacher_path = _resolve_ref(spec.teacher, k, produced, "teacher")
        if teacher_path is not None:
            teacher = freeze_teacher(checkpoint.load_network(teacher_path))
            _check_chain(k, teacher, student, train_data)
        tc = replace(train_config or TrainConfig(), stage=spec.name or f"stage{k}")
        logger.info("stage %d: %s (teacher=%s, init=%s)", k, spec.student.value, teacher_path, init_path)
        train_stage(student, train_data, spec.optimizer, spec.losses, teacher,
                    eval_data=test_data, log=log, config=tc)
        path = out_dir / f"stage{k}.r2b"
        checkpoint.save_network(student, path)
        produced.append(path)
        summary = {"stage": k, "name": tc.stage, "student": spec.student.value,
                   "teacher": str(teacher_path) if teacher_path else None,
                   "train": evaluate(student, train_data)}
        if test_data is not None:
            summary["test"] = evaluate(student, test_data)
        summaries.append(summary)
    return produced[-1], summaries


def _check_chain(k: int, teacher: FrozenTeacher, student: Network, data: Dataset) -> None:
    """Probe one sample through both networks and compare logits and transfer shapes."""
    probe = Tensor(data.images[:1])
    was_training = student.training
    student.eval()
    with no_grad():
        try:
            t_logits, t_points = teacher.forward_with_transfer_points(probe)
            s_logits, s_points = student.forward_with_transfer_points(probe)
        except ShapeError as exc:
            raise StageError(k, f"input does not fit the teacher or student: {exc}") from exc
    student.train(was_training)
    if t_logits.shape != s_logits.shape:
        raise StageError(k, f"teacher logits {t_logits.shape} vs student logits {s_logits.shape}")
    t_shapes = [t.shape for t in t_points]
    s_shapes = [t.shape for t in s_points]
    if t_shapes != s_shapes:
        raise StageError(k, f"transfer points do not line up: teacher {t_shapes} vs student {s_shapes}")


def _resolve_ref(ref: Optional[str], k: int, produced: List[Path], what: str) -> Optional[Path]:
    if ref is None or ref == FRESH:
        return None
    if ref == PREVIOUS:
        if k == 0:
            raise StageError(k, f"{what} refers to a previous stage but this is the first stage")
        return produced[k - 1]
    if ref.startswith("stage") and ref[5:].isdigit():
        j = int(ref[5:])
        if j >= k:
            raise StageError(k, f"{what} refers to {ref}, which has not run yet")
        return produced[j]
    path = Path(ref)
    if not path.exists():
        raise StageError(k, f"{what} checkpoint {path} does not exist")
    return path


# ----------------------------------------------------------------------
# schedule presets and file format
# ----------------------------------------------------------------------
PRESETS = ("sb", "sb-att", "sb-att-hkd", "sb-g", "sb-prog-ts", "real-to-bin")


def _policies(epochs: int, batch_size: int, seed: int, full_length: int = 350):
    base1 = OptimizerPolicy.stage1(batch_size=batch_size, seed=seed, epochs=full_length)
    base2 = OptimizerPolicy.stage2(batch_size=batch_size, seed=seed, epochs=full_length)
    if epochs != full_length:
        base1, base2 = base1.rescaled(epochs), base2.rescaled(epochs)
    return base1, base2


def preset_schedule(name: str, epochs: int = 350, batch_size: int = 128, seed: int = 0,
                    num_points: int = 8, teacher_ckpt: Optional[str] = None) -> List[StageSpec]:
    """Stage list for one ablation row.

    Every preset ends with a binary-activation stage followed by a
    binary-weight stage initialized from it. Presets that need a real
    teacher train one first (stage 0) unless ``teacher_ckpt`` is given.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    p1, p2 = _policies(epochs, batch_size, seed)
    ce_only = LossConfig(ce_weight=1.0, att_weight=0.0, kd_weight=0.0)
    att = LossConfig.default_for(num_points, kd_weight=0.0)
    att_kd = LossConfig.default_for(num_points)
    kd_only = LossConfig(ce_weight=0.0, att_weight=0.0, kd_weight=1.0)
    gating = name in ("sb-g", "real-to-bin")
    stages: List[StageSpec] = []

    def teacher_stage():
        if teacher_ckpt:
            return teacher_ckpt
        stages.append(StageSpec(NetVariant.REAL_TEACHER, None, ce_only, p1, FRESH, False, "teacher"))
        return f"stage{len(stages) - 1}"

    if name in ("sb", "sb-g"):
        stages.append(StageSpec(NetVariant.BIN_ACT, None, ce_only, p1, FRESH, gating, "bin_act"))
        stages.append(StageSpec(NetVariant.FULL_BIN, None, ce_only, p2, PREVIOUS, gating, "full_bin"))
    elif name in ("sb-att", "sb-att-hkd"):
        losses = att if name == "sb-att" else att_kd
        t = teacher_stage()
        stages.append(StageSpec(NetVariant.BIN_ACT, t, losses, p1, FRESH, gating, "bin_act"))
        stages.append(StageSpec(NetVariant.FULL_BIN, t, losses, p2, PREVIOUS, gating, "full_bin"))
    else:
        t = teacher_stage()
        stages.append(StageSpec(NetVariant.REAL_SOFT, t, att_kd, p1, FRESH, gating, "real_soft"))
        stages.append(StageSpec(NetVariant.BIN_ACT, PREVIOUS, att_kd, p1, PREVIOUS, gating, "bin_act"))
        stages.append(StageSpec(NetVariant.FULL_BIN, PREVIOUS, kd_only, p2, PREVIOUS, gating, "full_bin"))
    return stages


def default_schedule(teacher_ckpt: str, epochs: int = 350, **kw) -> List[StageSpec]:
    """The three teacher-student steps with an existing real-valued teacher."""
    return preset_schedule("real-to-bin", epochs=epochs, teacher_ckpt=teacher_ckpt, **kw)


def stage_to_dict(spec: StageSpec) -> dict:
    pol = asdict(spec.optimizer)
    epochs = pol.pop("epochs")
    return {
        "name": spec.name,
        "student": spec.student.value,
        "teacher": spec.teacher,
        "init": spec.init,
        "gating": spec.gating,
        "epochs": epochs,
        "losses": {"ce": spec.losses.ce_weight, "att": spec.losses.att_weight,
                   "kd": spec.losses.kd_weight, "tau": spec.losses.temperature,
                   "points": list(spec.losses.points) if spec.losses.points is not None else None},
        "optimizer": pol,
    }


def stage_from_dict(d: dict, defaults: Optional[dict] = None) -> StageSpec:
    d = {**(defaults or {}), **d}
    known = {"name", "student", "teacher", "init", "gating", "epochs", "losses", "optimizer"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown stage keys: {sorted(extra)}")
    lo = dict(d.get("losses") or {})
    losses = LossConfig(ce_weight=float(lo.pop("ce", 1.0)), att_weight=float(lo.pop("att", 0.0)),
                        kd_weight=float(lo.pop("kd", 0.0)), temperature=float(lo.pop("tau", 3.0)),
                        points=lo.pop("points", None))
    if lo:
        raise ValueError(f"unknown loss keys: {sorted(lo)}")
    opt = dict(d.get("optimizer") or {})
    epochs = int(d.get("epochs", opt.pop("epochs", OptimizerPolicy.epochs)))
    opt.pop("epochs", None)
    explicit = {k: opt.pop(k) for k in ("step_epochs", "warmup_epochs") if k in opt}
    # the default step/warm-up layout is squeezed into the requested length unless given explicitly
    policy = replace(OptimizerPolicy(**opt).rescaled(epochs), **explicit)
    return StageSpec(d["student"], d.get("teacher"), losses, policy, d.get("init") or FRESH,
                     d.get("gating"), d.get("name", ""))


def dump_schedule(schedule: Sequence[StageSpec]) -> str:
    return yaml.safe_dump({"stages": [stage_to_dict(s) for s in schedule]}, sort_keys=False)


def load_schedule(text_or_path: Union[str, Path]) -> List[StageSpec]:
    """Parse a YAML (or JSON) schedule: ``{stages: [...], defaults: {...}}``."""
    text = text_or_path
    if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path
                                          and Path(text_or_path).exists()):
        text = Path(text_or_path).read_text()
    doc = yaml.safe_load(text) or {}
    defaults = doc.get("defaults") or {}
    stages = doc.get("stages")
    if not stages:
        raise ValueError("schedule has no stages")
    return [stage_from_dict(s, defaults) for s in stages]
