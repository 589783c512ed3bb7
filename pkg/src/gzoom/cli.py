"""Command-line surface for the whole pipeline.

Commands: gen-data, train, build-pool, train-evidence, refine, viz. Every
command reads an optional line-oriented key=value config file (sections in
brackets, # comments) and flags override the file. All randomness flows
from one root --seed; each stage derives its own seed from a stable stage
name, so reruns with the same seed reproduce byte-identical artifacts.

Exit codes: 0 success, 1 runtime or I/O failure (including missing input
artifacts, which are checked before any long stage starts), 2 bad
configuration or usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import pool as pool_mod
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, GzoomError, UsageError
from .grounding import (GroundingConfig, RiseConfig, erase, ground,
                        rise_masks)
from .network import conventional_spec
from .refinement import RefinementConfig, evaluate
from .training import TrainConfig, accuracy, eval_view
from .training import train as train_model
from .util import derive_seed
from .viz import write_pgm, write_ppm_overlay


# ---------------------------------------------------------------------------
# config file


def parse_config_file(path) -> dict:
    """Line-oriented key=value sections: {section: {key: raw string}}."""
    sections: dict = {"": {}}
    current = ""
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        sections[current][key.strip()] = value.strip()
    return sections


def _coerce_value(name: str, text: str, target_type):
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is bool:
            return text.lower() in ("1", "true", "yes", "on")
        if target_type is tuple or name == "weights":
            return tuple(float(v) for v in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def _build_config(cls, section: dict, **overrides):
    """Instantiate a config dataclass from raw strings plus typed overrides."""
    import typing

    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} key: {key}")
        kwargs[key] = _coerce_value(key, text, hints.get(key, str))
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    return cls(**kwargs)


def parse_weights(text: str, levels: int) -> tuple:
    """Comma list, normalized to sum 1; count must be levels + 2."""
    values = _coerce_value("weights", text, tuple)
    if len(values) != levels + 2:
        raise ConfigError(
            f"need {levels + 2} weights for levels={levels}, got {len(values)}")
    total = float(sum(values))
    if not np.isfinite(total) or total <= 0:
        raise ConfigError(f"weights must have a positive finite sum: {text!r}")
    return tuple(v / total for v in values)


@dataclass
class RunConfig:
    """Merged view of one command's effective configuration."""

    seed: int = 0
    threads: int = 1
    train: TrainConfig | None = None
    grounding: GroundingConfig | None = None
    refine: RefinementConfig | None = None
    data: data_mod.SyntheticSpec | None = None
    paths: dict = field(default_factory=dict)

    def validate_inputs(self, *keys) -> None:
        """Check input artifacts before any long-running stage starts."""
        for key in keys:
            p = self.paths.get(key)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"missing artifact: {p}")

    def echo(self) -> dict:
        out: dict = {"seed": self.seed, "threads": self.threads,
                     "paths": {k: str(v) for k, v in self.paths.items() if v}}
        for name in ("train", "grounding", "refine", "data"):
            cfg = getattr(self, name)
            if cfg is not None:
                out[name] = asdict(cfg)
        return out


def _resolve_threads(arg_value) -> int:
    if arg_value is not None:
        n = arg_value
    else:
        raw = os.environ.get("GZ_THREADS", "1")
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"GZ_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"threads must be >= 1, got {n}")
    # The numeric core is single-threaded; the cap also propagates to any
    # BLAS pool a child library might spin up later.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _load_sections(args) -> dict:
    cfg_path = getattr(args, "config", None) or getattr(args, "spec", None)
    if cfg_path:
        if not Path(cfg_path).exists():
            raise FileNotFoundError(f"missing artifact: {cfg_path}")
        return parse_config_file(cfg_path)
    return {"": {}}


def _grounding_config(sections: dict, args, seed: int, stage: str) -> GroundingConfig:
    rise_sec = dict(sections.get("rise", {}))
    rise_sec.setdefault("seed", str(derive_seed(seed, stage + ".rise")))
    rise = _build_config(RiseConfig, rise_sec)
    method = getattr(args, "method", None)
    overrides = {"rise": rise}
    if method and method != "ensemble":
        overrides["method"] = method
    return _build_config(GroundingConfig, sections.get("grounding", {}), **overrides)


def _write_report(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _report_path(out_path) -> Path:
    return Path(str(out_path) + ".report.json")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    sections = _load_sections(args)
    data_sec = dict(sections.get("data", {}))
    data_sec.setdefault("seed", str(derive_seed(args.seed, "data")))
    spec = _build_config(data_mod.SyntheticSpec, data_sec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = data_mod.generate(spec)
    data_mod.save_dataset(train, out / "train.gzds")
    data_mod.save_dataset(test, out / "test.gzds")
    manifest = data_mod.dataset_manifest(spec, train, test)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {out / 'train.gzds'} ({len(train)} images)")
    print(f"wrote {out / 'test.gzds'} ({len(test)} images)")
    print(f"wrote {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    sections = _load_sections(args)
    train_sec = dict(sections.get("train", {}))
    train_sec.setdefault("seed", str(derive_seed(args.seed, args.stage_name)))
    overrides = {k: getattr(args, k) for k in
                 ("lr", "iterations", "batch_size") if getattr(args, k, None) is not None}
    tcfg = _build_config(TrainConfig, train_sec, **overrides)
    run = RunConfig(seed=args.seed, threads=_resolve_threads(args.threads),
                    train=tcfg, paths={"data": args.data, "out": args.out})
    run.validate_inputs("data")

    if args.stage_name == "train":
        ds = data_mod.load_dataset(args.data)
        spec = conventional_spec(ds.num_classes)
        model, trace = train_model(ds, spec, tcfg)
        train_acc = accuracy(model, ds.images, ds.labels)
    else:
        pl = pool_mod.load_pool(args.data)
        model, trace = pool_mod.train_evidence_cnn(pl, tcfg)
        ds = pool_mod.pool_dataset(pl)
        train_acc = accuracy(model, ds.images, ds.labels)

    save_checkpoint(model, args.out)
    report = {
        "command": args.stage_name,
        "config": run.echo(),
        "checkpoint": str(args.out),
        "checkpoint_hash": checkpoint_hash(args.out),
        "train_accuracy": train_acc,
        "loss_first": trace["loss"][0],
        "loss_last": trace["loss"][-1],
        "iterations": tcfg.iterations,
    }
    if args.eval_data:
        run.paths["eval_data"] = args.eval_data
        run.validate_inputs("eval_data")
        eval_ds = data_mod.load_dataset(args.eval_data)
        report["eval_accuracy"] = accuracy(model, eval_ds.images, eval_ds.labels)
    _write_report(_report_path(args.out), report)
    print(f"wrote {args.out} (train accuracy {train_acc:.4f})")
    return 0


def cmd_build_pool(args) -> int:
    sections = _load_sections(args)
    gcfg = _grounding_config(sections, args, args.seed, "pool")
    run = RunConfig(seed=args.seed, threads=_resolve_threads(args.threads),
                    grounding=gcfg,
                    paths={"data": args.data, "checkpoint": args.checkpoint,
                           "out": args.out})
    run.validate_inputs("data", "checkpoint")

    ds = data_mod.load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    chash = checkpoint_hash(args.checkpoint)
    if args.method == "ensemble":
        if args.levels != 0:
            raise ConfigError("ensemble pools are level-0 only; pass --L 0")
        pl = pool_mod.build_ensemble_pool(model, ds, gcfg, checkpoint_hash=chash)
    else:
        pl = pool_mod.build_pool(model, ds, gcfg, levels=args.levels,
                                 checkpoint_hash=chash)
    pool_mod.save_pool(pl, args.out)
    report = {
        "command": "build-pool",
        "config": run.echo(),
        "method": args.method,
        "levels": args.levels,
        "patches": len(pl),
        "level_counts": {str(k): v for k, v in sorted(pl.level_counts().items())},
        "checkpoint_hash": chash,
    }
    _write_report(_report_path(args.out), report)
    print(f"wrote {args.out} ({len(pl)} patches)")
    return 0


def cmd_refine(args) -> int:
    sections = _load_sections(args)
    refine_sec = dict(sections.get("refine", {}))
    levels = args.levels if args.levels is not None else int(refine_sec.get("levels", 2))
    weights_text = args.weights or refine_sec.get("weights", "0.4,0.3,0.2,0.1")
    rcfg = RefinementConfig(
        k=args.k if args.k is not None else int(refine_sec.get("k", 3)),
        levels=levels,
        weights=parse_weights(weights_text, levels),
    )
    gcfg = _grounding_config(sections, args, args.seed, "refine")
    run = RunConfig(seed=args.seed, threads=_resolve_threads(args.threads),
                    grounding=gcfg, refine=rcfg,
                    paths={"data": args.data, "checkpoint": args.checkpoint,
                           "evidence": args.evidence, "out": args.out})
    run.validate_inputs("data", "checkpoint", "evidence")

    ds = data_mod.load_dataset(args.data)
    conv = load_checkpoint(args.checkpoint)
    evid = load_checkpoint(args.evidence)
    report_obj = evaluate(conv, evid, ds, rcfg, gcfg)
    payload = report_obj.to_dict()
    payload["command"] = "refine"
    payload["weights_given"] = weights_text
    payload["config"] = run.echo()
    payload["checkpoint_hashes"] = {
        "conventional": checkpoint_hash(args.checkpoint),
        "evidence": checkpoint_hash(args.evidence),
    }
    _write_report(args.out, payload)
    print(f"baseline top-1 {report_obj.baseline_top1:.4f}  "
          f"top-{rcfg.k} {report_obj.baseline_topk:.4f}  "
          f"refined top-1 {report_obj.refined_top1:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_viz(args) -> int:
    sections = _load_sections(args)
    gcfg = _grounding_config(sections, args, args.seed, "viz")
    run = RunConfig(seed=args.seed, threads=_resolve_threads(args.threads),
                    grounding=gcfg,
                    paths={"data": args.data, "checkpoint": args.checkpoint,
                           "out": args.out})
    run.validate_inputs("data", "checkpoint")

    ds = data_mod.load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = [int(v) for v in args.images.split(",")]
    masks = rise_masks(gcfg.rise, model.spec.input_size) \
        if gcfg.method == "rise" else None

    written = []
    views = eval_view(ds.images, model.spec.input_size)
    for idx in indices:
        if not 0 <= idx < len(ds):
            raise ConfigError(f"image index {idx} out of range 0..{len(ds) - 1}")
        image = views[idx]
        target = args.target if args.target is not None else int(ds.labels[idx])
        current = image
        for level in range(args.levels + 1):
            smap = ground(model, current, target, gcfg, masks=masks)
            stem = f"img{idx:04d}_cls{target}_{gcfg.method}_l{level}"
            write_pgm(smap.grid, out / f"{stem}.pgm")
            write_ppm_overlay(current, smap.grid, out / f"{stem}.ppm")
            written.append(stem)
            if level < args.levels:
                if smap.is_degenerate:
                    break
                flat = int(np.argmax(smap.grid))
                pk = divmod(flat, smap.grid.shape[1])
                current = erase(current, pk, gcfg.erase_size)
    for stem in written:
        print(f"wrote {out / stem}.pgm and .ppm")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gzoom",
        description="Saliency-grounded evidence pools and top-k refinement.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file with [sections]")
        sp.add_argument("--seed", type=int, default=0, help="root seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap (env GZ_THREADS mirrors this)")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--spec", help="config file with a [data] section")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the whole-image classifier")
    common(t)
    t.add_argument("--data", required=True, help="training dataset (.gzds)")
    t.add_argument("--eval-data", help="held-out dataset for the report")
    t.add_argument("--out", required=True, help="checkpoint path (.gzck)")
    t.add_argument("--lr", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.set_defaults(fn=cmd_train, stage_name="train")

    te = sub.add_parser("train-evidence", help="train the patch classifier")
    common(te)
    te.add_argument("--data", required=True, help="evidence pool (.gzpl)")
    te.add_argument("--eval-data", help="held-out dataset for the report")
    te.add_argument("--out", required=True, help="checkpoint path (.gzck)")
    te.add_argument("--lr", type=float)
    te.add_argument("--iterations", type=int)
    te.add_argument("--batch-size", type=int, dest="batch_size")
    te.set_defaults(fn=cmd_train, stage_name="train-evidence")

    b = sub.add_parser("build-pool", help="mine an evidence pool")
    common(b)
    b.add_argument("--data", required=True, help="training dataset (.gzds)")
    b.add_argument("--checkpoint", required=True, help="classifier (.gzck)")
    b.add_argument("--out", required=True, help="pool path (.gzpl)")
    b.add_argument("--method", default="ceb",
                   choices=["eb", "ceb", "gradcam", "rise", "ensemble"])
    b.add_argument("--L", type=int, default=2, dest="levels",
                   help="erasing levels (ensemble requires 0)")
    b.set_defaults(fn=cmd_build_pool)

    r = sub.add_parser("refine", help="evaluate top-k refinement")
    common(r)
    r.add_argument("--data", required=True, help="evaluation dataset (.gzds)")
    r.add_argument("--checkpoint", required=True, help="whole-image model")
    r.add_argument("--evidence", required=True, help="evidence model")
    r.add_argument("--out", required=True, help="metrics report (.json)")
    r.add_argument("--k", type=int)
    r.add_argument("--L", type=int, dest="levels")
    r.add_argument("--weights", help="comma list w,w0,..,wL (normalized)")
    r.add_argument("--method", choices=["eb", "ceb", "gradcam", "rise"])
    r.set_defaults(fn=cmd_refine)

    v = sub.add_parser("viz", help="write saliency maps and overlays")
    common(v)
    v.add_argument("--data", required=True, help="dataset (.gzds)")
    v.add_argument("--checkpoint", required=True, help="classifier (.gzck)")
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--images", default="0", help="comma list of indices")
    v.add_argument("--method", choices=["eb", "ceb", "gradcam", "rise"])
    v.add_argument("--target", type=int, help="class id (default: true label)")
    v.add_argument("--L", type=int, default=0, dest="levels",
                   help="erasing levels to visualize")
    v.set_defaults(fn=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GzoomError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
