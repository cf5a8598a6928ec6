"""Few-shot test-time adaptation, Acc@q retrieval scoring, baselines and ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, gradient, no_grad
from .episodes import Dataset, Split, hard_negatives
from .losses import triplet_loss
from .metatrain import (HEAD_KEYS, Checkpoint, adapt_steps, alpha_for_head, inner_adapt)
from .model import Params, encode, group, head, predict_margin

METHODS = ("ours", "no-adapt", "fine-tune", "maml-full", "fixed-margin")
REPORT_COLUMNS = ("method", "mode", "k", "seed", "acc1", "acc5", "adapt_ms")


class MissingCheckpointError(KeyError):
    pass


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (1, 5, 10)
    seeds: int = 5
    steps: int = 1
    fixed_margin: float = 0.3
    finetune_steps: int = 5
    finetune_lr: float = 1e-4
    threads: int = 1
    timing: bool = True  # False writes adapt_ms = 0 so reports are reproducible byte for byte


# -- scoring ---------------------------------------------------------------------

def _distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))


def retrieve(params: Mapping[str, Tensor], sketch: np.ndarray, gallery: np.ndarray,
             gallery_ids: Sequence[str]) -> list[str]:
    """Gallery ids by ascending embedding distance to ``sketch``; ties by id."""
    if len(gallery_ids) == 0:
        raise ValueError("retrieve: empty gallery")
    with no_grad():
        q = embed_np(params, np.atleast_2d(sketch))
        g = embed_np(params, gallery)
    d = _distances(q, g)[0]
    order = sorted(range(len(gallery_ids)), key=lambda i: (d[i], gallery_ids[i]))
    return [gallery_ids[i] for i in order]


def embed_np(params: Mapping[str, Tensor], x: np.ndarray) -> np.ndarray:
    with no_grad():
        return head(params, encode(params, Tensor(x))).data


def true_match_ranks(query_emb: np.ndarray, gallery_emb: np.ndarray, true_col: np.ndarray,
                     gallery_ids: Sequence[str]) -> np.ndarray:
    """1-based rank of each query's true match under the (distance, id) ordering."""
    d = _distances(query_emb, gallery_emb)
    ids = np.asarray(gallery_ids, dtype=object)
    dt = d[np.arange(len(d)), true_col][:, None]
    idt = ids[true_col][:, None]
    ahead = (d < dt) | ((d == dt) & (ids[None, :] < idt))
    return 1 + ahead.sum(axis=1)


def acc_at_q(ranks: Iterable[int], q: int) -> float:
    """Percentage of queries whose true match ranks within the top ``q``."""
    ranks = np.asarray(list(ranks))
    if ranks.size == 0:
        raise ValueError("acc_at_q: no rankings")
    return 100.0 * float(np.mean(ranks <= q))


# -- adaptation ------------------------------------------------------------------

@dataclass
class AdaptationSet:
    unit: str
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def digest(self, dataset: Dataset) -> str:
        ids = [dataset.ids(a) for a in (self.anchor, self.positive, self.negative)]
        return hashlib.sha256(json.dumps([self.unit, ids]).encode()).hexdigest()


def adaptation_set(dataset: Dataset, split: Split, unit: str, k: int, seed: int) -> AdaptationSet:
    """k fine-tune pairs of ``unit`` with random negatives, fixed by (unit, k, seed).

    Method independent, so every method adapts on identical data.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sketches = dataset.indices(split.finetune[unit])
    if len(sketches) == 0:
        raise ValueError(f"unit {unit}: empty fine-tune set")
    rng = np.random.default_rng([seed, k, zlib.crc32(unit.encode())])
    order = rng.permutation(sketches)
    _, first = np.unique(dataset.pair_id[order], return_index=True)
    pairs = order[np.sort(first)][:k]
    if len(pairs) < k:
        raise ValueError(f"unit {unit}: only {len(pairs)} fine-tune pairs for k={k}")
    positives = dataset.match(pairs)
    photos = np.unique(dataset.match(sketches))
    return AdaptationSet(unit, pairs, positives, hard_negatives(dataset, positives, photos, rng))


def adapt(checkpoint: Checkpoint | Params, aset: AdaptationSet, dataset: Dataset,
          method: str = "ours", cfg: EvalConfig | None = None,
          info: dict | None = None) -> Params:
    """Specialised parameters for one unit (regularizer heads are not used)."""
    cfg = cfg or EvalConfig()
    params = checkpoint.tensors(False) if isinstance(checkpoint, Checkpoint) else dict(checkpoint)
    tcfg = checkpoint.train_config if isinstance(checkpoint, Checkpoint) else None
    tau = tcfg.tau if tcfg else 0.05
    if method == "no-adapt":
        return params
    x = Tensor(dataset.features[np.concatenate([aset.anchor, aset.positive, aset.negative])])
    k = len(aset.anchor)
    if method in ("ours", "fixed-margin"):
        with no_grad():
            lat = encode(params, x)
        a, p, n = (Tensor(lat.data[i * k:(i + 1) * k]) for i in range(3))
        if method == "ours" and k >= 2 and (tcfg is None or tcfg.margin_mode == "learned"):
            with no_grad():
                mu = predict_margin(params, a, p, cfg.fixed_margin)
        else:
            mu = Tensor(cfg.fixed_margin)
        if info is not None:
            info["margin"] = float(mu.data)
        head_params = {key: Tensor(params[key].data, requires_grad=True) for key in HEAD_KEYS}
        adapted = inner_adapt(head_params, alpha_for_head(params), a, p, n, mu, cfg.steps, tau,
                              "smooth", create_graph=False)
        return {**params, **{key: v.detach() for key, v in adapted.items()}}
    if method == "maml-full":
        inner = {key: Tensor(v.data, requires_grad=True) for key, v in group(params, "F", "M").items()}
        rate = tcfg.maml_lr if tcfg else 0.01

        def loss_fn(q):
            emb = head(q, encode(q, x))
            return triplet_loss(emb[:k], emb[k:2 * k], emb[2 * k:], cfg.fixed_margin, "hard")

        adapted = adapt_steps(inner, rate, loss_fn, cfg.steps, create_graph=False)
        return {**params, **{key: v.detach() for key, v in adapted.items()}}
    if method == "fine-tune":
        trainable = {key: Tensor(v.data, requires_grad=True) for key, v in group(params, "F", "M").items()}
        state = AdamState.init(trainable, lr=cfg.finetune_lr)
        for _ in range(cfg.finetune_steps):
            merged = {**params, **trainable}
            emb = head(merged, encode(merged, x))
            loss = triplet_loss(emb[:k], emb[k:2 * k], emb[2 * k:], cfg.fixed_margin, "hard")
            trainable, state = adam_step(state, trainable, gradient(loss, trainable))
        return {**params, **{key: v.detach() for key, v in trainable.items()}}
    raise ValueError(f"unknown method {method!r}")


# -- reports ---------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    mode: str
    k: int
    acc1: list[float] = field(default_factory=list)
    acc5: list[float] = field(default_factory=list)
    adapt_ms: list[float] = field(default_factory=list)
    config_hash: str = ""
    margins: dict[str, list[float]] = field(default_factory=dict)
    label: str = ""

    @property
    def mean_acc1(self) -> float:
        return float(np.mean(self.acc1))

    @property
    def mean_acc5(self) -> float:
        return float(np.mean(self.acc5))

    def rows(self) -> list[dict]:
        return [{"method": self.label or self.method, "mode": self.mode, "k": self.k, "seed": s,
                 "acc1": a1, "acc5": a5, "adapt_ms": ms}
                for s, (a1, a5, ms) in enumerate(zip(self.acc1, self.acc5, self.adapt_ms))]


def config_hash(*objs) -> str:
    blob = json.dumps([o if isinstance(o, (dict, list, str, int, float)) else asdict(o) for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _unit_eval_data(dataset: Dataset, split: Split, unit: str):
    q = dataset.indices(split.queries[unit])
    g = dataset.indices(split.gallery[unit])
    col = {int(j): i for i, j in enumerate(g)}
    true_col = np.array([col[int(m)] for m in dataset.match(q)], dtype=np.int64)
    return q, g, true_col


def evaluate_method(method: str, checkpoint: Checkpoint, dataset: Dataset, split: Split, k: int,
                    cfg: EvalConfig | None = None, seeds: int | None = None) -> EvalReport:
    """Adapt per test unit and seed, then score held-out queries (pooled over units)."""
    if checkpoint is None:
        raise MissingCheckpointError(f"no checkpoint for method {method!r}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    cfg = cfg or EvalConfig()
    n_seeds = cfg.seeds if seeds is None else seeds
    report = EvalReport(method, split.mode, k,
                        config_hash=config_hash(checkpoint.config, asdict(cfg), method, k))
    base = checkpoint.tensors(False)
    units = sorted(split.test_units)
    data = {u: _unit_eval_data(dataset, split, u) for u in units}
    head_only = method in ("ours", "fixed-margin", "no-adapt")
    latents = {}
    if head_only:
        with no_grad():
            for u in units:
                q, g, _ = data[u]
                latents[u] = (encode(base, Tensor(dataset.features[q])).data,
                              encode(base, Tensor(dataset.features[g])).data)

    def run_unit(u: str, seed: int):
        q, g, true_col = data[u]
        info: dict = {}
        t0 = time.perf_counter()
        if method == "no-adapt":
            params = base
        else:
            params = adapt(checkpoint, adaptation_set(dataset, split, u, k, seed), dataset,
                           method, cfg, info)
        ms = 1000.0 * (time.perf_counter() - t0) if cfg.timing else 0.0
        with no_grad():
            if head_only:
                qe = head(params, Tensor(latents[u][0])).data
                ge = head(params, Tensor(latents[u][1])).data
            else:
                qe = embed_np(params, dataset.features[q])
                ge = embed_np(params, dataset.features[g])
        ranks = true_match_ranks(qe, ge, true_col, dataset.ids(g))
        return ranks, ms, info.get("margin")

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for seed in range(n_seeds):
            jobs = [(u, seed) for u in units]
            outs = list(pool.map(lambda a: run_unit(*a), jobs)) if pool else [run_unit(*a) for a in jobs]
            ranks = np.concatenate([o[0] for o in outs])
            report.acc1.append(acc_at_q(ranks, 1))
            report.acc5.append(acc_at_q(ranks, 5))
            report.adapt_ms.append(float(np.mean([o[1] for o in outs])))
            for u, o in zip(units, outs):
                if o[2] is not None:
                    report.margins.setdefault(u, []).append(o[2])
    finally:
        if pool is not None:
            pool.shutdown()
    return report


# -- ablations ---------------------------------------------------------------------

@dataclass
class AblationResults:
    steps: list[EvalReport] = field(default_factory=list)
    shots: list[EvalReport] = field(default_factory=list)
    embed_dim: list[EvalReport] = field(default_factory=list)
    regularizers: list[EvalReport] = field(default_factory=list)
    margins: dict[str, float] = field(default_factory=dict)

    @property
    def margin_std(self) -> float:
        return float(np.std(list(self.margins.values()))) if self.margins else 0.0

    def all_reports(self) -> list[EvalReport]:
        return self.steps + self.shots + self.embed_dim + self.regularizers


REG_GRID = {"category": ("none", "D", "C", "S", "D,C", "D,S", "C,S", "D,C,S"),
            "user": ("none", "D", "T", "D,T")}


def ablation_suite(checkpoint: Checkpoint, dataset: Dataset, split: Split,
                   cfg: EvalConfig | None = None,
                   trainer: Callable[[dict], Checkpoint] | None = None,
                   steps: Sequence[int] = (1, 2, 4), ks: Sequence[int] = (1, 5, 10),
                   dims: Sequence[int] = (16, 64, 256), reg_grid: Sequence[str] | None = None,
                   k: int = 5) -> AblationResults:
    """Sweep test-time steps and shots on ``checkpoint``; dims and regularizers via ``trainer``.

    ``trainer(overrides)`` must return a meta-trained checkpoint for the given
    config overrides (``{"embed_dim": d}`` or ``{"regularizers": "D,C"}``);
    without it those sweeps are skipped.
    """
    cfg = cfg or EvalConfig()
    res = AblationResults()
    for s in steps:
        rep = evaluate_method("ours", checkpoint, dataset, split, k, _with(cfg, steps=s))
        rep.label = f"ours-steps{s}"
        res.steps.append(rep)
    for kk in ks:
        rep = evaluate_method("ours", checkpoint, dataset, split, kk, cfg)
        rep.label = f"ours-k{kk}"
        res.shots.append(rep)
        if kk == k:
            res.margins = {u: float(np.mean(v)) for u, v in sorted(rep.margins.items())}
    if trainer is not None:
        for d in dims:
            rep = evaluate_method("ours", trainer({"embed_dim": d}), dataset, split, k, cfg)
            rep.label = f"ours-d{d}"
            res.embed_dim.append(rep)
        for combo in (reg_grid or REG_GRID[split.mode]):
            rep = evaluate_method("ours", trainer({"regularizers": combo}), dataset, split, k, cfg)
            rep.label = f"ours-reg[{combo}]"
            res.regularizers.append(rep)
    return res


def _with(cfg: EvalConfig, **changes) -> EvalConfig:
    return EvalConfig(**{**asdict(cfg), **changes})


# -- report files ----------------------------------------------------------------------

def emit_report(reports: Iterable[EvalReport], path, fmt: str = "csv") -> None:
    rows = [row for r in reports for row in r.rows()]
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, **{c: repr(float(row[c])) for c in ("acc1", "acc5", "adapt_ms")}})
    elif fmt == "json":
        path.write_text(json.dumps([{c: row[c] for c in REPORT_COLUMNS} for row in rows], indent=1),
                        encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def load_report(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    with path.open(newline="", encoding="utf-8") as fh:
        return [{"method": r["method"], "mode": r["mode"], "k": int(r["k"]), "seed": int(r["seed"]),
                 "acc1": float(r["acc1"]), "acc5": float(r["acc5"]), "adapt_ms": float(r["adapt_ms"])}
                for r in csv.DictReader(fh)]
