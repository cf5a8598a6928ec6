"""Baseline pretraining and bi-level meta-training of the retrieval model.

The inner loop adapts only the embedding head ``M`` on a task's support
triplets, with a task margin predicted by ``R`` and per-parameter rates
``alpha``. The outer loop scores the adapted head on the validation triplets,
adds the weighted regularizer over all episode items, and differentiates the
sum through the inner update.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import (AdamState, NumericDomainError, Tensor, adam_step, concat, gradient,
                       sgd_step)
from .episodes import Dataset, SemanticTable, Split, TaskEpisode, sample_task
from .losses import (REG_COMPONENTS, ConfigurationError, RoleBatch, UserPairs,
                     classification_loss, reg_loss, triplet_loss)
from .model import ModelConfig, Params, encode, group, head, init_params, predict_margin

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "fewshot-sbir-checkpoint/1"
HEAD_KEYS = ("M.w", "M.b")


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    mode: str = "category"
    K: int = 5
    meta_batch: int = 8
    inner_steps: int = 1
    outer_lr: float = 1e-4
    alpha_lr: float = 0.0  # 0: same as outer_lr
    meta_epochs: int = 40
    steps_per_epoch: int = 25
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-4
    pretrain_batch: int = 16
    pretrain_margin: float = 0.3
    pretrain_cls_weight: float = 0.0
    outer_margin: float = 0.3
    reg_weight: float = 0.5
    tau: float = 0.05
    grl_lambda: float = 1.0
    style_margin: float = 0.2
    margin_mode: str = "learned"
    fixed_margin: float = 0.3
    maml_lr: float = 0.01  # scalar inner rate of the maml-full competitor
    learn_alpha: bool = True
    first_order: bool = False
    inner_scope: str = "head"
    regularizers: str = ""
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.mode not in ("category", "user"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.margin_mode not in ("learned", "fixed"):
            raise ValueError(f"unknown margin_mode {self.margin_mode!r}")
        if self.inner_scope not in ("head", "all"):
            raise ValueError(f"unknown inner_scope {self.inner_scope!r}")
        if self.inner_steps < 0 or self.tau <= 0:
            raise ValueError("inner_steps must be >= 0 and tau > 0")

    @property
    def reg_components(self) -> tuple[str, ...]:
        if not self.regularizers:
            return REG_COMPONENTS[self.mode]
        if self.regularizers == "none":
            return ()
        return tuple(c.strip() for c in self.regularizers.split(",") if c.strip())

    def trainable_groups(self) -> tuple[str, ...]:
        if self.inner_scope == "all":
            return ("F", "M")
        groups = ["F", "M"]
        if self.margin_mode == "learned":
            groups.append("R")
        if self.learn_alpha:
            groups.append("alpha")
        comps = self.reg_components
        groups += [g for g, c in (("D", "D"), ("C", "C"), ("G", "S"), ("T", "T")) if c in comps]
        return tuple(groups)


# -- shared pieces ----------------------------------------------------------------

def _labels(dataset: Dataset, idx: np.ndarray, classes: list[str]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup.get(c, -1) for c in dataset.category[idx]], dtype=np.int64)


def inner_adapt(head_params: Mapping[str, Tensor], alpha: Mapping[str, Tensor],
                anchor: Tensor, positive: Tensor, negative: Tensor, margin, steps: int = 1,
                tau: float = 0.05, hinge: str = "smooth", create_graph: bool = True) -> Params:
    """``steps`` Meta-SGD updates of the head on latent support triplets.

    ``alpha`` is keyed like ``head_params`` (``"M.w"``...). Returns new tensors;
    the inputs are untouched. With ``create_graph`` the result is differentiable
    w.r.t. the head, ``alpha``, the margin, and the latents.
    """
    def loss_fn(p):
        return triplet_loss(head(p, anchor), head(p, positive), head(p, negative), margin, hinge, tau)

    return adapt_steps(dict(head_params), alpha, loss_fn, steps, create_graph)


def adapt_steps(params: Params, rates, loss_fn: Callable[[Params], Tensor], steps: int,
                create_graph: bool) -> Params:
    # the inner gradient is needed even when the caller is not tracking these tensors
    params = {k: v if v.requires_grad else Tensor(v.data, requires_grad=True)
              for k, v in params.items()}
    for _ in range(steps):
        grads = gradient(loss_fn(params), params, create_graph=create_graph)
        for name, g in grads.items():
            if not np.all(np.isfinite(g.data)):
                raise NonFiniteGradient(f"inner gradient for {name} is not finite")
        params = sgd_step(params, grads, rates)
    return params


def alpha_for_head(params: Mapping[str, Tensor]) -> Params:
    return {k: params[f"alpha.{k}"] for k in HEAD_KEYS}


# -- stage 1: baseline -------------------------------------------------------------

def training_triplets(dataset: Dataset, split: Split, mode: str, rng: np.random.Generator):
    """One hard triplet per training sketch (negative: another photo of the unit)."""
    rows = []
    for unit in split.train_units:
        sketches = dataset.unit_sketches(mode, unit)
        photos = dataset.unit_photos(mode, unit)
        if len(photos) < 2:
            continue
        pos = dataset.match(sketches)
        for s, p in zip(sketches, pos):
            candidates = photos[photos != p]
            rows.append((s, p, candidates[rng.integers(len(candidates))]))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    config: dict
    classes: list[str]
    epoch: int = 0
    kind: str = "baseline"
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    version: str = CHECKPOINT_VERSION

    def tensors(self, requires_grad: bool = True) -> Params:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    @property
    def train_config(self) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.config.items() if k in known})


def pretrain_baseline(dataset: Dataset, split: Split, train_cfg: TrainConfig,
                      model_cfg: ModelConfig, params: Params | None = None,
                      on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Adam on hard triplets (fixed margin, hard hinge) for ``F`` and ``M``."""
    if len(dataset) == 0:
        raise ValueError("pretrain_baseline: empty dataset")
    rng = np.random.default_rng(train_cfg.seed)
    classes = sorted(split.train_units) if train_cfg.mode == "category" else []
    model_cfg.n_classes = max(1, len(classes))
    params = init_params(model_cfg, rng) if params is None else params
    groups = ("F", "M", "C") if train_cfg.pretrain_cls_weight > 0 else ("F", "M")
    trainable = group(params, *groups)
    state = AdamState.init(trainable, lr=train_cfg.pretrain_lr)
    feats = dataset.features
    history = []
    for epoch in range(train_cfg.pretrain_epochs):
        rows = training_triplets(dataset, split, train_cfg.mode, rng)
        rows = rows[rng.permutation(len(rows))]
        losses = []
        for lo in range(0, len(rows), train_cfg.pretrain_batch):
            batch = rows[lo:lo + train_cfg.pretrain_batch]
            n = len(batch)
            x = Tensor(feats[batch.T.reshape(-1)])
            merged = {**params, **trainable}
            lat = encode(merged, x)
            emb = head(merged, lat)
            loss = triplet_loss(emb[:n], emb[n:2 * n], emb[2 * n:], train_cfg.pretrain_margin)
            if train_cfg.pretrain_cls_weight > 0 and classes:
                labels = _labels(dataset, batch.T.reshape(-1), classes)
                loss = loss + train_cfg.pretrain_cls_weight * classification_loss(merged, lat, labels)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"pretrain epoch {epoch}: loss {loss.item()}")
            grads = gradient(loss, trainable)
            trainable, state = adam_step(state, trainable, grads)
            losses.append(loss.item())
        record = {"stage": "pretrain", "epoch": epoch + 1, "loss": float(np.mean(losses))}
        history.append(record)
        log.info("pretrain epoch %d loss %.5f", epoch + 1, record["loss"])
        if on_epoch:
            on_epoch(record)
    params = {**params, **trainable}
    return Checkpoint(params={k: v.data.copy() for k, v in params.items()},
                      model_config=model_cfg.to_dict(), config=asdict(train_cfg),
                      classes=classes, epoch=train_cfg.pretrain_epochs, kind="baseline",
                      history=history)


# -- stage 2: meta-optimisation -----------------------------------------------------

@dataclass
class TaskResult:
    loss: float
    val_loss: float
    reg: float
    margin: float
    grads: dict[str, np.ndarray] | None = None


def _roles(dataset: Dataset, ep: TaskEpisode, lat: dict[str, Tensor], classes: list[str],
           semantic: SemanticTable | None) -> dict[str, RoleBatch]:
    roles = {}
    for role, key, dom in (("a", "anchor", 0), ("p", "positive", 1), ("n", "negative", 1)):
        idx = np.concatenate([getattr(ep.support, key), getattr(ep.validation, key)])
        latent = concat([lat[f"s.{role}"], lat[f"v.{role}"]], axis=0)
        sem = semantic.lookup(dataset.category[idx]) if semantic is not None else None
        roles[role] = RoleBatch(latent, np.full(len(idx), dom), _labels(dataset, idx, classes), sem)
    return roles


def task_objective(params: Params, dataset: Dataset, ep: TaskEpisode, cfg: TrainConfig,
                   classes: list[str], semantic: SemanticTable | None = None,
                   info: dict | None = None) -> Tensor:
    """Validation triplet loss of the adapted model plus the weighted regularizer."""
    parts = [ep.support.anchor, ep.support.positive, ep.support.negative,
             ep.validation.anchor, ep.validation.positive, ep.validation.negative]
    K = [len(p) for p in parts]
    idx = np.concatenate(parts + [ep.foreign_sketch, ep.foreign_photo])
    x = Tensor(dataset.features[idx])
    bounds = np.cumsum([0] + K)

    if cfg.inner_scope == "all":
        return _maml_full_objective(params, x, bounds, cfg, info)

    lat_all = encode(params, x)
    names = ["s.a", "s.p", "s.n", "v.a", "v.p", "v.n"]
    lat = {n: lat_all[int(lo):int(hi)] for n, lo, hi in zip(names, bounds[:-1], bounds[1:])}
    if cfg.margin_mode == "learned":
        mu = predict_margin(params, lat["s.a"], lat["s.p"], cfg.fixed_margin)
    else:
        mu = Tensor(cfg.fixed_margin)
    alpha = alpha_for_head(params) if cfg.learn_alpha else cfg_alpha(params)
    adapted = inner_adapt({k: params[k] for k in HEAD_KEYS}, alpha, lat["s.a"], lat["s.p"],
                          lat["s.n"], mu, cfg.inner_steps, cfg.tau, "smooth",
                          create_graph=not cfg.first_order)
    val = triplet_loss(head(adapted, lat["v.a"]), head(adapted, lat["v.p"]),
                       head(adapted, lat["v.n"]), cfg.outer_margin, "hard")
    total = val
    reg_value = 0.0
    comps = cfg.reg_components
    if cfg.reg_weight > 0 and comps:
        roles = _roles(dataset, ep, lat, classes, semantic if cfg.mode == "category" else None)
        pairs = None
        if cfg.mode == "user":
            n_sup = bounds[6]
            n_for = len(ep.foreign_sketch)
            pairs = UserPairs(
                concat([lat["s.a"], lat["v.a"]], axis=0), concat([lat["s.p"], lat["v.p"]], axis=0),
                dataset.user[np.concatenate([ep.support.anchor, ep.validation.anchor])],
                lat_all[int(n_sup):int(n_sup + n_for)] if n_for else None,
                lat_all[int(n_sup + n_for):] if n_for else None,
                dataset.user[ep.foreign_sketch] if n_for else None)
        reg = reg_loss(cfg.mode, params, roles, cfg.grl_lambda, pairs, cfg.style_margin,
                       components=comps)
        reg_value = reg.item()
        total = total + reg * cfg.reg_weight
    if info is not None:
        info.update(val_loss=val.item(), reg=reg_value, margin=float(mu.data))
    return total


def cfg_alpha(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Frozen inner rates (alpha not meta-learned)."""
    return {k: Tensor(params[f"alpha.{k}"].data) for k in HEAD_KEYS}


def _maml_full_objective(params: Params, x: Tensor, bounds: np.ndarray, cfg: TrainConfig,
                         info: dict | None) -> Tensor:
    """Plain MAML: every F and M tensor adapted, fixed margin and hard hinge in both loops."""
    n_sup = int(bounds[3])
    inner = group(params, "F", "M")
    rate = cfg.maml_lr

    def support_loss(p):
        emb = head(p, encode(p, x[:n_sup]))
        k = n_sup // 3
        return triplet_loss(emb[:k], emb[k:2 * k], emb[2 * k:], cfg.fixed_margin, "hard")

    adapted = adapt_steps(inner, rate, support_loss, cfg.inner_steps, not cfg.first_order)
    emb = head(adapted, encode(adapted, x[n_sup:int(bounds[6])]))
    k = (int(bounds[6]) - n_sup) // 3
    val = triplet_loss(emb[:k], emb[k:2 * k], emb[2 * k:], cfg.outer_margin, "hard")
    if info is not None:
        info.update(val_loss=val.item(), reg=0.0, margin=cfg.fixed_margin)
    return val


def task_gradient(params: Params, trainable: Params, dataset: Dataset, ep: TaskEpisode,
                  cfg: TrainConfig, classes: list[str], semantic: SemanticTable | None) -> TaskResult:
    info: dict = {}
    merged = {**params, **trainable}
    loss = task_objective(merged, dataset, ep, cfg, classes, semantic, info)
    with warnings.catch_warnings():
        # heads switched off by the config are legitimately unreachable
        warnings.simplefilter("ignore")
        grads = gradient(loss, trainable)
    out = {k: g.data for k, g in grads.items()}
    for k, g in out.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"outer gradient for {k} is not finite")
    return TaskResult(loss.item(), info["val_loss"], info["reg"], info["margin"], out)


def outer_step(params: Params, trainable_names: list[str], state: AdamState,
               episodes: list[TaskEpisode], dataset: Dataset, cfg: TrainConfig,
               classes: list[str], semantic: SemanticTable | None,
               pool: ThreadPoolExecutor | None = None) -> tuple[Params, list[TaskResult]]:
    """One meta-update from the mean of the per-task outer gradients."""
    trainable = {k: params[k] for k in trainable_names}

    def run(ep):
        try:
            return task_gradient(params, trainable, dataset, ep, cfg, classes, semantic)
        except (NumericDomainError, NonFiniteGradient) as exc:
            log.warning("dropping task %s: %s", ep.unit, exc)
            return None

    results = list(pool.map(run, episodes)) if pool is not None else [run(ep) for ep in episodes]
    kept = [r for r in results if r is not None]
    if not kept:
        raise TrainingDiverged("every task in the meta-batch was non-finite")
    mean_grads = {}
    for k in trainable_names:
        acc = np.zeros(params[k].shape)
        for r in kept:
            acc += r.grads[k]
        mean_grads[k] = acc / len(kept)
    updated, _ = adam_step(state, trainable, mean_grads)
    for r in kept:
        r.grads = None
    return {**params, **updated}, kept


def meta_train(dataset: Dataset, split: Split, cfg: TrainConfig, start: Checkpoint,
               semantic: SemanticTable | None = None, checkpoint_path: Path | None = None,
               on_epoch: Callable[[dict], None] | None = None, epochs: int | None = None) -> Checkpoint:
    """Run meta-epochs from ``start`` (a baseline or a meta checkpoint to resume).

    Each epoch is ``steps_per_epoch`` outer steps over ``meta_batch`` tasks.
    ``epochs`` limits how many epochs this call runs (default: until
    ``cfg.meta_epochs``).
    """
    cfg.validate()
    if cfg.mode == "category" and "S" in cfg.reg_components and cfg.reg_weight > 0 and semantic is None:
        raise ConfigurationError("category mode with the semantic regularizer needs a semantic table")
    params = start.tensors()
    names = sorted(group(params, *cfg.trainable_groups()))
    resuming = start.kind != "baseline"
    if resuming and start.optimizer is not None:
        state = start.optimizer
    else:
        state = AdamState.init({k: params[k] for k in names}, lr=cfg.outer_lr)
        if cfg.alpha_lr > 0:
            state.lr_by_name = {k: cfg.alpha_lr for k in names if k.startswith("alpha.")}
    rng = np.random.default_rng(cfg.seed + 1)
    if resuming and start.rng_state is not None:
        rng.bit_generator.state = start.rng_state
    epoch = start.epoch if resuming else 0
    history = list(start.history)
    last = cfg.meta_epochs if epochs is None else min(cfg.meta_epochs, epoch + epochs)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    kind = {"head": "ours", "all": "maml-full"}[cfg.inner_scope]
    if cfg.inner_scope == "head" and cfg.margin_mode == "fixed":
        kind = "fixed-margin"
    cp = start
    try:
        while epoch < last:
            results = []
            for _ in range(cfg.steps_per_epoch):
                episodes = [sample_task(dataset, split, cfg.mode, cfg.K, rng)
                            for _ in range(cfg.meta_batch)]
                params, kept = outer_step(params, names, state, episodes, dataset, cfg,
                                          start.classes, semantic, pool)
                results += kept
            epoch += 1
            record = {"stage": "meta", "epoch": epoch,
                      "loss": float(np.mean([r.loss for r in results])),
                      "val_loss": float(np.mean([r.val_loss for r in results])),
                      "reg": float(np.mean([r.reg for r in results])),
                      "margin": float(np.mean([r.margin for r in results])),
                      "tasks": len(results)}
            history.append(record)
            log.info("meta epoch %d loss %.5f val %.5f margin %.3f", epoch, record["loss"],
                     record["val_loss"], record["margin"])
            cp = Checkpoint(params={k: v.data.copy() for k, v in params.items()},
                            model_config=dict(start.model_config), config=asdict(cfg),
                            classes=list(start.classes), epoch=epoch, kind=kind,
                            optimizer=state, rng_state=rng.bit_generator.state,
                            history=list(history))
            if checkpoint_path is not None:
                save_checkpoint(cp, checkpoint_path)
            if on_epoch:
                on_epoch(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return cp


# -- checkpoint files ---------------------------------------------------------------

def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _unpack(rec: dict) -> np.ndarray:
    return np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])


def save_checkpoint(cp: Checkpoint, path) -> None:
    doc = {
        "version": cp.version,
        "kind": cp.kind,
        "epoch": cp.epoch,
        "config": cp.config,
        "model_config": cp.model_config,
        "classes": cp.classes,
        "history": cp.history,
        "rng_state": cp.rng_state,
        "tensors": {k: _pack(v) for k, v in sorted(cp.params.items())},
        "optimizer": None if cp.optimizer is None else {
            "lr": cp.optimizer.lr, "beta1": cp.optimizer.beta1, "beta2": cp.optimizer.beta2,
            "eps": cp.optimizer.eps, "step": cp.optimizer.step,
            "lr_by_name": dict(sorted(cp.optimizer.lr_by_name.items())),
            "m": {k: _pack(v) for k, v in sorted(cp.optimizer.m.items())},
            "v": {k: _pack(v) for k, v in sorted(cp.optimizer.v.items())},
        },
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise CheckpointError(f"{path}: missing version tag")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {doc['version']!r}")
    try:
        opt = doc.get("optimizer")
        state = None
        if opt is not None:
            state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                              step=opt["step"], m={k: _unpack(v) for k, v in opt["m"].items()},
                              v={k: _unpack(v) for k, v in opt["v"].items()},
                              lr_by_name=dict(opt.get("lr_by_name", {})))
        return Checkpoint(params={k: _unpack(v) for k, v in doc["tensors"].items()},
                          model_config=doc["model_config"], config=doc["config"],
                          classes=doc["classes"], epoch=doc["epoch"], kind=doc["kind"],
                          optimizer=state, rng_state=doc.get("rng_state"),
                          history=doc.get("history", []), version=doc["version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None

