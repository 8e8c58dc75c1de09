"""Command-line entry points.

    saliency-nas gen-data --n 256 --res 32x24 --seed 0 --out data/
    saliency-nas train --data data/ --strategy self-kd --epochs 20 --out runs/skd
    saliency-nas eval --data data/ --arch runs/skd/arch.json --checkpoint runs/skd/checkpoint.bin --out report.json
    saliency-nas search --data data/ --max-flops 2e7 --trials 20 --out runs/search
    saliency-nas sample --n 2000 --seed 0 --out pop.csv
    saliency-nas export-arch --mode min --out min.json

Relative ``--out`` paths resolve under $SALIENCY_NAS_OUTPUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import losses, trainer
from .metrics import evaluate_maps
from .network import build_network
from .rng import stream
from .search import Budget, FinetuneEvaluator, constrained_search, population_csv, sample_population
from .space import SPACES, ArchConfig, get_space, sample_subnet
from .store import ParameterStore
from .tensor import PRECISIONS, no_grad

OUTPUT_ROOT_ENV = "SALIENCY_NAS_OUTPUT_ROOT"


class CLIError(Exception):
    """Reported as a one-line message with exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    data: str
    strategy: str
    out: str
    seed: int
    space: str
    precision: str
    arch: dict
    arch_source: str
    schedule: dict
    loss: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ paths
def output_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW, got {text!r}") from None


def _load_data(path: str) -> data_mod.SaliencyDataset:
    if not Path(path).is_dir():
        raise CLIError(f"data directory not found: {path}")
    return data_mod.load_dataset(path)


def _splits(ds: data_mod.SaliencyDataset, seed: int):
    if "split" in ds.manifest:
        return data_mod.manifest_split(ds)
    return data_mod.split(ds, (0.8, 0.2), seed)


def _read_arch(path: str) -> ArchConfig:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"arch file not found: {path}")
    try:
        return ArchConfig.from_json(p.read_text())
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CLIError(f"{path}: malformed arch JSON ({exc})") from None


# ------------------------------------------------------------------ commands
def cmd_gen_data(a) -> None:
    out = output_path(a.out)
    ds = data_mod.gen_synthetic(a.n, a.res, (a.k_min, a.k_max), a.blur_sigma, a.seed)
    data_mod.save_dataset(ds, out)
    data_mod.load_dataset(out)
    print(f"wrote {len(ds)} samples at {a.res[0]}x{a.res[1]} to {out}")


def cmd_train(a) -> None:
    out = output_path(a.out)
    space = get_space(a.space)
    ds = _load_data(a.data)
    train, val = _splits(ds, a.seed)
    if a.arch:
        arch, source = _read_arch(a.arch), a.arch
    else:
        arch, source = sample_subnet(space, a.mode, stream(a.seed, "arch")), f"sampled:{a.mode}"
    arch = replace(arch, resolution=tuple(ds.resolution))
    space.with_resolutions([arch.resolution]).validate(arch)
    sched = trainer.ScheduleConfig(lr_max=a.lr_max, lr_min=a.lr_min, T0=a.t0, epochs=a.epochs,
                                   momentum=a.momentum, batch_size=a.batch_size, alpha=a.alpha,
                                   teacher_update=a.teacher_update)
    loss_cfg = losses.LossConfig()
    run = RunConfig(a.data, a.strategy, a.out, a.seed, a.space, a.precision, arch.to_dict(), source,
                    asdict(sched), asdict(loss_cfg))
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(run.to_json())
    (out / "arch.json").write_text(arch.to_json() + "\n")
    store = ParameterStore.from_space(space, stream(a.seed, "init"), a.precision)
    log_path = out / "log.jsonl"
    log_path.write_text("")

    def on_epoch(rec, _state):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")

    kw = dict(cfg=sched, seed=a.seed, loss_cfg=loss_cfg, on_epoch=on_epoch)
    if a.strategy == "baseline":
        res = trainer.train_baseline(arch, store, train, val, **kw)
    elif a.strategy == "self-kd":
        res = trainer.train_selfkd(arch, store, train, val, **kw)
    elif a.strategy == "sandwich":
        res = trainer.train_sandwich(store, train, val, **kw)
    else:
        res = trainer.train_inplace_distill(store, train, val, **kw)
    meta = {"strategy": a.strategy, "seed": a.seed, "epochs": a.epochs, "arch": arch.to_dict()}
    res.store.save(out / "checkpoint.bin", meta)
    if res.state is not None and res.state.teacher is not None:
        res.state.teacher.save(out / "teacher.bin", dict(meta, role="teacher",
                                                         accepted_count=res.state.accepted_count))
    ParameterStore.load(out / "checkpoint.bin")
    last = res.log[-1]
    print(f"{a.strategy}: {len(res.log)} epochs, final val_loss={last['val_loss']:.6f} "
          f"val_cc={last['val_cc']:.6f}; outputs in {out}")


def cmd_eval(a) -> None:
    ds = _load_data(a.data)
    arch = _read_arch(a.arch)
    if not Path(a.checkpoint).is_file():
        raise CLIError(f"checkpoint not found: {a.checkpoint}")
    store, _ = ParameterStore.load(a.checkpoint)
    if a.split == "all":
        part = ds
    else:
        train, val = _splits(ds, a.seed)
        part = val if a.split == "val" else train
    arch = replace(arch, resolution=tuple(ds.resolution))
    net = build_network(arch, store).eval()
    preds = []
    with no_grad():
        for start in range(0, len(part), a.batch_size):
            preds.extend(net.forward(part.images[start : start + a.batch_size]).data.astype(np.float64))
    report = evaluate_maps(preds, part.densities, part.fixations)
    out = output_path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    out.with_suffix(".csv").write_text(report.to_csv())
    means = report.mean
    print(" ".join(f"{k}={v:.4f}" for k, v in means.items()) + f" (n={len(report)})")


def cmd_search(a) -> None:
    out = output_path(a.out)
    ds = _load_data(a.data)
    train, val = _splits(ds, a.seed)
    if a.checkpoint:
        if not Path(a.checkpoint).is_file():
            raise CLIError(f"checkpoint not found: {a.checkpoint}")
        store, _ = ParameterStore.load(a.checkpoint)
        space = store.space
    else:
        space = get_space(a.space)
        store = ParameterStore.from_space(space, stream(a.seed, "init"), a.precision)
    budget = Budget(a.max_flops if a.max_flops is not None else float("inf"),
                    a.max_params if a.max_params is not None else float("inf"))
    evaluator = FinetuneEvaluator(store, train, val, steps=a.finetune_steps, batch_size=a.batch_size,
                                  seed=a.seed)
    res = constrained_search(space, budget, evaluator, a.trials, a.seed, method=a.method,
                             resolution=tuple(ds.resolution))
    out.mkdir(parents=True, exist_ok=True)
    (out / "best_arch.json").write_text(res.best.config.to_json() + "\n")
    (out / "trace.jsonl").write_text(res.trace_lines())
    if any(not budget.admits(c.flops, c.params) for c in res.trace):
        raise CLIError("internal error: trace contains an over-budget candidate")
    print(f"best score {res.best.score:.6f} at flops={res.best.flops} params={res.best.params} "
          f"({len(res.trace)} evaluated, {res.rejected} rejected)")


def cmd_sample(a) -> None:
    space = get_space(a.space)
    rows = sample_population(space, a.n, a.seed, resolution=a.res)
    out = output_path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(population_csv(rows))
    print(f"wrote {len(rows)} rows to {out}")


def cmd_export_arch(a) -> None:
    space = get_space(a.space)
    cfg = sample_subnet(space, a.mode, stream(a.seed, "arch"))
    space.validate(cfg)
    out = output_path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cfg.to_json() + "\n")
    print(f"wrote {a.mode} config to {out}")


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saliency-nas", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    spaces = sorted(SPACES)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--res", type=_parse_res, default=(32, 24))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k-min", type=int, default=1)
    g.add_argument("--k-max", type=int, default=3)
    g.add_argument("--blur-sigma", type=float, default=1.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a subnet or the supernet")
    t.add_argument("--data", required=True)
    t.add_argument("--strategy", choices=trainer.STRATEGIES, default="self-kd")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--t0", type=float, default=10)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--lr-max", type=float, default=0.1)
    t.add_argument("--lr-min", type=float, default=0.0)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--teacher-update", choices=("running-mean", "pairwise"), default="running-mean")
    t.add_argument("--arch", help="ArchConfig JSON (default: sampled with --mode)")
    t.add_argument("--mode", choices=("min", "max", "random"), default="min")
    t.add_argument("--space", choices=spaces, default="desk")
    t.add_argument("--precision", choices=sorted(PRECISIONS), default="standard")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--arch", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", help="budget-constrained subnet search")
    s.add_argument("--data", required=True)
    s.add_argument("--max-flops", type=float)
    s.add_argument("--max-params", type=float)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--method", choices=("random", "evolution"), default="random")
    s.add_argument("--finetune-steps", type=int, default=4)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--checkpoint", help="supernet checkpoint (default: fresh initialization)")
    s.add_argument("--space", choices=spaces, default="desk")
    s.add_argument("--precision", choices=sorted(PRECISIONS), default="standard")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    m = sub.add_parser("sample", help="sample a subnet population with costs (CSV)")
    m.add_argument("--n", type=int, default=2000)
    m.add_argument("--space", choices=spaces, default="full")
    m.add_argument("--res", type=_parse_res, default=None, help="fixed resolution (default: sampled)")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_sample)

    x = sub.add_parser("export-arch", help="write an ArchConfig JSON")
    x.add_argument("--mode", choices=("min", "max", "random"), required=True)
    x.add_argument("--space", choices=spaces, default="full")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_arch)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
