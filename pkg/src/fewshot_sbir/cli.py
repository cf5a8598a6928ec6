"""Command-line front end.

Every experiment knob lives in an INI-style config file with the sections
``[data]``, ``[model]``, ``[train]``, ``[eval]`` and ``[ablate]``; flags only
pick the command, paths, seed and thread count. All artifacts go under
``--out`` with fixed names, so later commands find what earlier ones wrote::

    data/dataset.jsonl  data/semantic.json  data/split.json      gen-data
    baseline.ckpt       baseline_curve.csv                        pretrain
    meta.ckpt           meta_curve.csv                            meta-train
    maml.ckpt           maml_curve.csv                            meta-train --method maml-full
    report.csv          report.json                               eval
    ablation.csv        ablation.json                             ablate
    gradcheck.json                                                check-grads

Each command also writes ``manifest-<command>.json`` (resolved config, seed,
SHA-256 of every artifact it wrote). Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .episodes import (GeneratorSpec, SpecError, load_dataset, load_semantic, load_split, save_dataset,
                       save_semantic, save_split, synth_generate)
from .evalharness import (METHODS, REG_GRID, EvalConfig, ablation_suite, emit_report, evaluate_method)
from .gradcheck import hypergradient_suite, primitive_suite
from .metatrain import (Checkpoint, CheckpointError, TrainConfig, load_checkpoint, meta_train,
                        pretrain_baseline, save_checkpoint)
from .model import ModelConfig

log = logging.getLogger("fewshot_sbir")

OUT_ENV = "FEWSHOT_SBIR_OUT"
CURVE_COLUMNS = ("stage", "epoch", "loss", "val_loss", "reg", "margin", "tasks")


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


@dataclass
class AblateConfig:
    steps: tuple[int, ...] = (1, 2, 4)
    ks: tuple[int, ...] = (1, 5, 10)
    k: int = 5
    dims: tuple[int, ...] = (16, 64, 256)
    # ';'-separated regularizer combos, "mode" for the full grid of the mode, "" to skip
    reg_grid: str = "mode"


SECTIONS = {"data": GeneratorSpec, "model": ModelConfig, "train": TrainConfig,
            "eval": EvalConfig, "ablate": AblateConfig}
EXTRA_KEYS = {"eval": {"methods"}}


@dataclass
class RunConfig:
    data: GeneratorSpec
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    ablate: AblateConfig
    methods: tuple[str, ...] = METHODS
    explicit_model: frozenset = frozenset()

    def snapshot(self) -> dict:
        return {"data": asdict(self.data), "model": asdict(self.model), "train": asdict(self.train),
                "eval": asdict(self.eval), "ablate": asdict(self.ablate),
                "methods": list(self.methods)}


def _coerce(raw: str, annotation: str, where: str):
    text = raw.strip()
    try:
        if annotation == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation.startswith("tuple"):
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        return {"int": int, "float": float, "str": str}[annotation](text)
    except (ValueError, KeyError):
        raise UsageError(f"{where}: cannot read {raw!r} as {annotation}") from None


def _split_methods(text: str, where: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise UsageError(f"{where}: unknown method(s) {unknown or text!r}; choose from {', '.join(METHODS)}")
    return methods


def load_config(path: str | None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       comment_prefixes=("#",))
    parser.optionxform = str
    source = "<defaults>"
    if path is not None:
        source = path
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from None
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    methods = METHODS
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"{source}: unknown section [{section}]")
        known = {f.name: f.type for f in fields(SECTIONS[section])}
        for key, raw in parser.items(section):
            where = f"{source} [{section}] {key}"
            if key in EXTRA_KEYS.get(section, ()):
                methods = _split_methods(raw, where)
            elif key in known:
                values[section][key] = _coerce(raw, str(known[key]), where)
            else:
                raise UsageError(f"{source}: unknown key {key!r} in [{section}]")
    try:
        cfg = RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()},
                        methods=methods, explicit_model=frozenset(values["model"]))
        cfg.data.validate()
        cfg.train.validate()
    except (SpecError, ValueError, TypeError) as exc:
        raise UsageError(f"{source}: {exc}") from None
    return cfg


# -- files ---------------------------------------------------------------------------

def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_curve(history: list[dict], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, extrasaction="ignore",
                                lineterminator="\n")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})


def write_manifest(out: Path, name: str, cfg: RunConfig, seed: int | None,
                   artifacts: list[Path], extra: dict | None = None) -> Path:
    doc = {"command": name, "seed": seed, "config": cfg.snapshot(),
           "artifacts": {p.relative_to(out).as_posix(): sha256(p) for p in artifacts}}
    if extra:
        doc.update(extra)
    path = out / f"manifest-{name}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Workspace:
    def __init__(self, out: Path):
        self.out = out
        self.data_dir = out / "data"

    @property
    def data_files(self) -> tuple[Path, Path, Path]:
        d = self.data_dir
        return d / "dataset.jsonl", d / "semantic.json", d / "split.json"

    def load_data(self):
        ds, sem, sp = self.data_files
        if not ds.exists():
            raise FileNotFoundError(f"no dataset under {self.data_dir}; run gen-data first")
        return load_dataset(ds), load_semantic(sem), load_split(sp)

    def checkpoint(self, name: str, hint: str) -> Checkpoint:
        path = self.out / f"{name}.ckpt"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}; run {hint} first")
        return load_checkpoint(path)


def _model_config(cfg: RunConfig, dataset, semantic) -> ModelConfig:
    """Input and semantic widths follow the data unless the config pins them."""
    derived = {"input_dim": dataset.dim, "semantic_dim": semantic.dim}
    for key, value in derived.items():
        if key in cfg.explicit_model and getattr(cfg.model, key) != value:
            raise UsageError(f"[model] {key}={getattr(cfg.model, key)} but the data has {value}")
    return replace(cfg.model, **derived)


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(ws: Workspace, cfg: RunConfig, args) -> tuple[list[Path], dict]:
    dataset, semantic, split = synth_generate(cfg.data)
    ws.data_dir.mkdir(parents=True, exist_ok=True)
    ds, sem, sp = ws.data_files
    save_dataset(dataset, ds)
    save_semantic(semantic, sem)
    save_split(split, sp)
    log.info("wrote %d items, %d train / %d test units", len(dataset), len(split.train_units),
             len(split.test_units))
    return [ds, sem, sp], {}


def _pretrain(cfg: RunConfig, dataset, semantic, split, model_cfg: ModelConfig) -> Checkpoint:
    return pretrain_baseline(dataset, split, cfg.train, model_cfg)


def cmd_pretrain(ws: Workspace, cfg: RunConfig, args) -> tuple[list[Path], dict]:
    dataset, semantic, split = ws.load_data()
    cp = _pretrain(cfg, dataset, semantic, split, _model_config(cfg, dataset, semantic))
    ckpt, curve = ws.out / "baseline.ckpt", ws.out / "baseline_curve.csv"
    save_checkpoint(cp, ckpt)
    write_curve(cp.history, curve)
    return [ckpt, curve], {}


def _variant(train: TrainConfig, method: str) -> TrainConfig:
    if method == "maml-full":
        return replace(train, inner_scope="all", margin_mode="fixed", regularizers="none")
    return train


def cmd_meta_train(ws: Workspace, cfg: RunConfig, args) -> tuple[list[Path], dict]:
    dataset, semantic, split = ws.load_data()
    name = {"ours": "meta", "maml-full": "maml"}[args.method]
    ckpt, curve = ws.out / f"{name}.ckpt", ws.out / f"{name}_curve.csv"
    train = _variant(cfg.train, args.method)
    start = ws.checkpoint("baseline", "pretrain")
    if args.resume and ckpt.exists():
        start = load_checkpoint(ckpt)
        log.info("resuming %s at epoch %d", ckpt, start.epoch)
    cp = meta_train(dataset, split, train, start, semantic, checkpoint_path=ckpt)
    if cp is start:  # nothing left to run; still leave a checkpoint behind
        save_checkpoint(cp, ckpt)
    write_curve(cp.history, curve)
    return [ckpt, curve], {"method": args.method}


METHOD_CHECKPOINT = {"ours": ("meta", "meta-train"), "fixed-margin": ("meta", "meta-train"),
                     "no-adapt": ("baseline", "pretrain"), "fine-tune": ("baseline", "pretrain"),
                     "maml-full": ("maml", "meta-train --method maml-full")}


def cmd_eval(ws: Workspace, cfg: RunConfig, args) -> tuple[list[Path], dict]:
    dataset, _, split = ws.load_data()
    methods = _split_methods(args.methods, "--methods") if args.methods else cfg.methods
    ks = tuple(args.k) if args.k else cfg.eval.ks
    checkpoints = {m: ws.checkpoint(*METHOD_CHECKPOINT[m]) for m in methods}
    reports = []
    for method in methods:
        for k in ks:
            rep = evaluate_method(method, checkpoints[method], dataset, split, k, cfg.eval)
            log.info("%s k=%d acc@1 %.2f acc@5 %.2f", method, k, rep.mean_acc1, rep.mean_acc5)
            print(f"{method:13s} k={k:<3d} acc@1 {rep.mean_acc1:6.2f}  acc@5 {rep.mean_acc5:6.2f}")
            reports.append(rep)
    csv_path, json_path = ws.out / "report.csv", ws.out / "report.json"
    emit_report(reports, csv_path, "csv")
    emit_report(reports, json_path, "json")
    return [csv_path, json_path], {"config_hashes": {f"{r.method}/k{r.k}": r.config_hash for r in reports}}


def cmd_ablate(ws: Workspace, cfg: RunConfig, args) -> tuple[list[Path], dict]:
    dataset, semantic, split = ws.load_data()
    base = ws.checkpoint("baseline", "pretrain")
    meta = ws.checkpoint("meta", "meta-train")
    model_cfg = _model_config(cfg, dataset, semantic)

    def trainer(overrides: dict) -> Checkpoint:
        start = base
        if "embed_dim" in overrides:
            start = _pretrain(cfg, dataset, semantic, split,
                              replace(model_cfg, embed_dim=overrides["embed_dim"]))
        train = replace(cfg.train, **{k: v for k, v in overrides.items() if k != "embed_dim"})
        log.info("ablation run %s", overrides)
        return meta_train(dataset, split, train, start, semantic)

    ab = cfg.ablate
    grid = REG_GRID[split.mode] if ab.reg_grid == "mode" else tuple(
        c.strip() for c in ab.reg_grid.split(";") if c.strip())
    res = ablation_suite(meta, dataset, split, cfg.eval, trainer if (ab.dims or grid) else None,
                         steps=ab.steps, ks=ab.ks, dims=ab.dims, reg_grid=grid, k=ab.k)
    reports = res.all_reports()
    for rep in reports:
        print(f"{rep.label:20s} k={rep.k:<3d} acc@1 {rep.mean_acc1:6.2f}")
    print(f"margin std across test units: {res.margin_std:.4f}")
    csv_path, json_path = ws.out / "ablation.csv", ws.out / "ablation.json"
    emit_report(reports, csv_path, "csv")
    summary = {"margins": res.margins, "margin_std": res.margin_std,
               "mean_acc1": {r.label: r.mean_acc1 for r in reports}}
    json_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path], {}


def cmd_check_grads(ws: Workspace, cfg: RunConfig, args) -> tuple[list[Path], dict]:
    suites = [primitive_suite(), hypergradient_suite()]
    for s in suites:
        print(f"{s.name:14s} {'PASS' if s.passed else 'FAIL'}  max rel err {s.max_rel_error:.2e}"
              f" (tol {s.tolerance:.0e})")
    path = ws.out / "gradcheck.json"
    # timings stay out of the artifact so reruns are byte-identical
    body = [{k: v for k, v in s.as_dict().items() if k != "seconds"} for s in suites]
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return [path], {"passed": all(s.passed for s in suites)}


HELP = {"gen-data": "generate the synthetic dataset, semantic table and split",
        "pretrain": "train the baseline encoder and head",
        "meta-train": "meta-train from the baseline (or the maml-full competitor)",
        "eval": "adapt and score methods on the test units",
        "ablate": "sweep steps, shots, embedding width and regularizers",
        "check-grads": "finite-difference check of the autodiff engine"}

COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "meta-train": cmd_meta_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "check-grads": cmd_check_grads}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults are used when omitted)")
    common.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="worker threads; 1 is deterministic")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="fewshot-sbir", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "meta-train":
            p.add_argument("--method", choices=("ours", "maml-full"), default="ours")
            p.add_argument("--resume", action="store_true", help="continue an existing checkpoint")
        if name == "eval":
            p.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
            p.add_argument("--k", type=int, action="append", help="shots (repeatable)")
    return parser


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.data = replace(cfg.data, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg.train = replace(cfg.train, threads=args.threads)
        cfg.eval = replace(cfg.eval, threads=args.threads)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
        out.mkdir(parents=True, exist_ok=True)
        ws = Workspace(out)
        artifacts, extra = COMMANDS[args.command](ws, cfg, args)
        name = args.command
        if getattr(args, "method", "ours") != "ours":
            name = f"{name}-{args.method}"
        write_manifest(out, name, cfg, args.seed, artifacts, extra)
    except UsageError as exc:
        print(f"fewshot-sbir: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, ValueError, RuntimeError, ArithmeticError,
            OSError, KeyError) as exc:
        print(f"fewshot-sbir: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    if args.command == "check-grads" and not extra.get("passed"):
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
