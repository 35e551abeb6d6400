"""``r2b`` command line: train, distill, eval, count-ops, bench-kernel, selftest.

Run options are merged as built-in defaults < ``--config`` file < flags.
The resolved options are written to ``<out>/config.json`` before anything
runs, and ``<out>/manifest.json`` records git-style content hashes of the
config and of the final checkpoint.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import re
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from r2b import __version__, checkpoint
from r2b._accel import backend_name

logger = logging.getLogger("r2b")

DATASETS = ("cifar10", "cifar100", "synthetic")

DEFAULTS: Dict[str, Any] = {
    "dataset": "synthetic",
    "preset": "sb",
    "stage": None,
    "seed": 0,
    "epochs": None,
    "batch_size": None,
    "width": None,
    "blocks": None,
    "augment": None,
    "mixup_alpha": 0.0,
    "eval_every": 1,
    "threads": None,
    "deterministic": False,
    "init": None,
    "teacher": None,
    "data_dir": None,
    "synthetic": {"classes": 4, "n_train": 2000, "n_test": 500, "size": 16, "noise": 1.0},
    "stages": None,
}

# filled in when a key is still unset after merging
_PER_DATASET = {
    "synthetic": {"epochs": 10, "batch_size": 64, "width": 16, "blocks": [1, 1, 1, 1], "augment": "eval"},
    "cifar10": {"epochs": 350, "batch_size": 128, "width": 64, "blocks": [2, 2, 2, 2], "augment": "cifar-train"},
    "cifar100": {"epochs": 350, "batch_size": 128, "width": 64, "blocks": [2, 2, 2, 2], "augment": "cifar-train"},
}


def git_hash(data: bytes) -> str:
    """Object id git would assign to ``data`` as a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: expected a mapping at top level")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = value
    if cfg["dataset"] not in DATASETS:
        raise ValueError(f"dataset must be one of {DATASETS}")
    for key, value in _PER_DATASET[cfg["dataset"]].items():
        if cfg.get(key) is None:
            cfg[key] = value
    cfg["blocks"] = [int(b) for b in cfg["blocks"]]
    return cfg


def _config_bytes(cfg: dict) -> bytes:
    return (json.dumps(cfg, indent=1, sort_keys=True) + "\n").encode()


def _prepare_out(args, cfg: Optional[dict]) -> Path:
    out = args.out
    if out is None:
        tag = git_hash(_config_bytes(cfg))[:10] if cfg is not None else "run"
        out = Path("runs") / f"{args.command}-{tag}"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("r2b").addHandler(handler)
    if cfg is not None:
        (out / "config.json").write_bytes(_config_bytes(cfg))
    return out


def _write_manifest(out: Path, cfg: dict, final: Optional[Path], extra: Optional[dict] = None) -> None:
    manifest = {"version": __version__, "backend": backend_name(),
                "config": "config.json", "config_hash": git_hash(_config_bytes(cfg))}
    if final is not None:
        manifest["checkpoint"] = final.name
        manifest["checkpoint_hash"] = git_hash(final.read_bytes())
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


@contextlib.contextmanager
def _thread_limit(cfg: dict):
    threads = cfg.get("threads")
    if cfg.get("deterministic") and threads is None:
        threads = 1
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(threads)):
        yield


def load_data(cfg: dict):
    from r2b.data import data_dir, load_cifar, split_synthetic

    name = cfg["dataset"]
    if name == "synthetic":
        s = cfg["synthetic"]
        return split_synthetic(cfg["seed"], classes=s["classes"], n_train=s["n_train"], n_test=s["n_test"],
                               image_shape=(3, s["size"], s["size"]), noise=s["noise"])
    root = cfg.get("data_dir") or data_dir()
    if root is None:
        raise FileNotFoundError(f"{name}: set R2B_DATA_DIR (or --data-dir) to the directory holding the binary batches")
    return load_cifar(root, name)


def _net_config(cfg: dict, train_data):
    from r2b.network import NetConfig

    return NetConfig(num_classes=train_data.class_count, width=cfg["width"], blocks=tuple(cfg["blocks"]),
                     stem="cifar", in_channels=train_data.image_shape[0], seed=cfg["seed"])


def _schedule(cfg: dict, num_points: int):
    from r2b.distill import load_schedule, preset_schedule

    if cfg.get("stages"):
        return load_schedule(yaml.safe_dump({"stages": cfg["stages"]}))
    return preset_schedule(cfg["preset"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                           seed=cfg["seed"], num_points=num_points, teacher_ckpt=cfg.get("teacher"))


def _select_stage(schedule, which):
    if which is None:
        return 0
    if str(which).isdigit():
        k = int(which)
        if not 0 <= k < len(schedule):
            raise ValueError(f"stage index {k} out of range (schedule has {len(schedule)} stages)")
        return k
    names = [s.name for s in schedule]
    if which not in names:
        raise ValueError(f"no stage named {which!r}; stages are {names}")
    return names.index(which)


def _run_schedule(args, single: bool) -> int:
    from r2b.distill import FRESH, PREVIOUS, run_progressive
    from r2b.trainer import TrainConfig

    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    with _thread_limit(cfg):
        train_data, test_data = load_data(cfg)
        net_cfg = _net_config(cfg, train_data)
        schedule = _schedule(cfg, sum(net_cfg.blocks))
        if single:
            k = _select_stage(schedule, cfg["stage"])
            spec = schedule[k]
            init = cfg.get("init") or spec.init
            teacher = cfg.get("teacher") or spec.teacher
            for what, ref in (("init", init), ("teacher", teacher)):
                if ref not in (None, FRESH) and (ref == PREVIOUS or re.fullmatch(r"stage\d+", str(ref))):
                    raise ValueError(f"stage {spec.name!r} takes its {what} from an earlier stage; "
                                     f"pass --{what} CHECKPOINT or use the distill command")
            spec.init, spec.teacher = init, teacher
            schedule = [spec]
        tc = TrainConfig(augment=cfg["augment"], mixup_alpha=cfg["mixup_alpha"], eval_every=cfg["eval_every"])
        final, summaries = run_progressive(schedule, (train_data, test_data), out, net_cfg, tc,
                                           deterministic=cfg["deterministic"])
    target = out / "final.r2b"
    shutil.copyfile(final, target)
    (out / "summary.json").write_text(json.dumps(summaries, indent=1, sort_keys=True) + "\n")
    _write_manifest(out, cfg, target)
    for s in summaries:
        test = s.get("test", {})
        print(f"{s['name']:<10} {s['student']:<13} train top1 {s['train']['top1']:6.2f}"
              + (f"  test top1 {test['top1']:6.2f}" if test else ""))
    print(f"artifacts in {out}")
    return 0


def cmd_train(args) -> int:
    return _run_schedule(args, single=True)


def cmd_distill(args) -> int:
    return _run_schedule(args, single=False)


def cmd_eval(args) -> int:
    from r2b.trainer import evaluate

    cfg = resolve_config(args)
    cfg["checkpoint"] = str(args.checkpoint)
    cfg["engine"] = args.engine
    out = _prepare_out(args, cfg)
    with _thread_limit(cfg):
        net = checkpoint.load_network(args.checkpoint)
        net.set_engine(args.engine)
        train_data, test_data = load_data(cfg)
        result = {"checkpoint_hash": git_hash(Path(args.checkpoint).read_bytes()),
                  "variant": net.variant.value, "engine": args.engine,
                  "test": evaluate(net, test_data)}
    (out / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _write_manifest(out, cfg, None)
    print(f"{net.variant.value} [{args.engine}] test top1 {result['test']['top1']:.2f} top5 {result['test']['top5']:.2f}")
    return 0


def cmd_count_ops(args) -> int:
    from r2b.cost import REFERENCE_COUNTS, count_architecture

    counts = count_architecture(args.arch, args.input)
    print(counts.table())
    ref = REFERENCE_COUNTS.get(args.arch) if args.input == 224 else None
    if ref is not None:
        rel = lambda got, want: 0.0 if want == 0 and got == 0 else (got - want) / want * 100 if want else float("inf")
        print(f"published: BOPs {ref[0]:.4g} ({rel(counts.bops, ref[0]):+.2f}%)  "
              f"FLOPs {ref[1]:.4g} ({rel(counts.flops, ref[1]):+.2f}%)")
    print(json.dumps({"arch": args.arch, "input": args.input, "bops": counts.bops, "flops": counts.flops}))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ops.json").write_text(counts.to_json() + "\n")
    return 0


def cmd_bench_kernel(args) -> int:
    from r2b.bench import format_table, run_benchmark

    rows = run_benchmark(repeats=args.repeats, quick=args.quick)
    print(format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(rows, indent=1) + "\n")
    return 0


def cmd_selftest(args) -> int:
    from r2b.selftest import run_all

    ok, lines = run_all(seed=args.seed or 0)
    for line in lines:
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selftest.txt").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON file with run options")
    p.add_argument("--out", type=Path, help="run directory (default runs/<command>-<config hash>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data-dir", dest="data_dir", help="dataset root (overrides R2B_DATA_DIR)")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap")
    p.add_argument("--deterministic", action="store_true", help="single thread, zeroed wall-clock fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--blocks", type=lambda s: [int(x) for x in s.split(",")], help="blocks per stage, e.g. 2,2,2,2")
    p.add_argument("--augment", choices=("eval", "cifar-train"))
    p.add_argument("--mixup-alpha", dest="mixup_alpha", type=float)


def build_parser() -> argparse.ArgumentParser:
    from r2b.cost import ARCHITECTURES
    from r2b.distill import PRESETS

    parser = argparse.ArgumentParser(prog="r2b", description="binary ResNet training and analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("train", help="train one stage of a preset")
    _run_flags(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--stage", help="stage name or index within the preset (default: first)")
    p.add_argument("--init", help="checkpoint to initialize the student from")
    p.add_argument("--teacher", help="teacher checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="run a whole progressive schedule")
    _run_flags(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--teacher", help="pretrained real teacher (skips the teacher stage)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _run_flags(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--engine", choices=("float", "packed"), default="float")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-ops", help="per-sample BOPs/FLOPs breakdown")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="resnet18-fullbin")
    p.add_argument("--input", type=int, default=224, help="square input size")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_count_ops)

    p = sub.add_parser("bench-kernel", help="time packed binary conv against the float reference")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--quick", action="store_true", help="small shapes only")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench_kernel)

    p = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("r2b")
    root.setLevel(logging.INFO)
    root.handlers = [console]
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"r2b {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
