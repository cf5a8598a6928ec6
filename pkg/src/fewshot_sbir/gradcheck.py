"""Finite-difference suites behind ``check-grads`` and the acceptance tests.

Each primitive case builds a scalar function of a few leaf tensors; inputs of
kinked ops are kept away from their kinks so central differences are valid.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, away_from_kinks, finite_difference_check
from .episodes import GeneratorSpec, sample_task, synth_generate
from .metatrain import TrainConfig, task_objective
from .model import ModelConfig, count, group, init_params

Case = Callable[[np.random.Generator], tuple[Callable[[dict], Tensor], dict[str, Tensor]]]


def _w(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _unary(op, sample=None):
    def build(rng):
        x = Tensor(sample(rng) if sample else rng.normal(size=(3, 4)))
        w = _w(rng, x.shape)
        return (lambda p: ad.tsum(op(p["x"]) * w)), {"x": x}
    return build


def _binary(op, b_sample=None, b_shape=(3, 4)):
    def build(rng):
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(b_sample(rng, b_shape) if b_sample else rng.normal(size=b_shape))
        w = _w(rng, (3, 4))
        return (lambda p: ad.tsum(op(p["a"], p["b"]) * w)), {"a": a, "b": b}
    return build


def _positive(rng, shape=(3, 4)):
    return rng.uniform(0.5, 2.0, size=shape)


def _distinct(rng):
    # well separated values so the argmax cannot flip under a 1e-5 probe
    return rng.permutation(12).reshape(3, 4) * 0.5 + rng.uniform(0, 0.1, size=(3, 4))


def _matmul(rng):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    w = _w(rng, (3, 2))
    return (lambda p: ad.tsum(ad.matmul(p["a"], p["b"]) * w)), {"a": a, "b": b}


def _reduction(op, **kw):
    def build(rng):
        x = Tensor(rng.normal(size=(3, 4)))
        out_shape = op(x, **kw).shape
        w = _w(rng, out_shape)
        return (lambda p: ad.tsum(op(p["x"], **kw) * w)), {"x": x}
    return build


def _structural(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    y = Tensor(rng.normal(size=(2, 4)))
    w = _w(rng, (4, 5))

    def f(p):
        z = ad.concat([p["x"], p["y"]], axis=0)           # (5, 4)
        z = ad.transpose(z)                                # (4, 5)
        z = ad.reshape(z, (2, 10)).reshape(4, 5)
        return ad.tsum(z[:, 1:4] * w[:, 1:4]) + ad.tsum(ad.broadcast_to(p["y"][0:1], (3, 4)))
    return f, {"x": x, "y": y}


def _scatter(rng):
    x = Tensor(rng.normal(size=(3,)))
    w = _w(rng, (5,))
    idx = np.array([0, 2, 2])
    return (lambda p: ad.tsum(ad.scatter(p["x"], (5,), idx) * w)), {"x": x}


def _sum_to(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    w = _w(rng, (1, 4))
    return (lambda p: ad.tsum(ad.sum_to(p["x"], (1, 4)) * w)), {"x": x}


def _grl(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    w = _w(rng, (3, 4))
    # reversal is only visible to gradients; the FD oracle sees the identity map,
    # so the forward is checked against grad_reverse(-lam) composed twice
    return (lambda p: ad.tsum(ad.grad_reverse(ad.grad_reverse(p["x"], 0.7), 1 / 0.7) * w)), {"x": x}


def _gru(rng):
    xs = Tensor(rng.normal(size=(3, 2)))
    p = {"w_ih": Tensor(rng.normal(size=(2, 6)) * 0.5), "b_ih": Tensor(rng.normal(size=6) * 0.1),
         "w_hh": Tensor(rng.normal(size=(2, 6)) * 0.5), "b_hh": Tensor(rng.normal(size=6) * 0.1)}
    w = _w(rng, (3, 2))
    return (lambda q: ad.tsum(ad.gru_sequence(xs, q["w_ih"], q["b_ih"], q["w_hh"], q["b_hh"],
                                              reverse=True) * w)), p


PRIMITIVES: dict[str, Case] = {
    "add": _binary(ad.add),
    "add-broadcast": _binary(ad.add, b_shape=(1, 4)),
    "sub": _binary(ad.sub, b_shape=(4,)),
    "mul": _binary(ad.mul),
    "mul-broadcast": _binary(ad.mul, b_shape=(3, 1)),
    "div": _binary(ad.div, b_sample=_positive),
    "neg": _unary(ad.neg),
    "matmul": _matmul,
    "sum": _reduction(ad.tsum, axis=1),
    "sum-keepdims": _reduction(ad.tsum, axis=0, keepdims=True),
    "mean": _reduction(ad.mean, axis=0),
    "max": _unary(lambda x: ad.tmax(x, axis=1, keepdims=True), _distinct),
    "relu": _unary(ad.relu, lambda r: away_from_kinks(r, (3, 4), 1e-2)),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, _positive),
    "reciprocal": _unary(ad.reciprocal0, _positive),
    "sqrt": _unary(ad.sqrt, _positive),
    # inputs on the scale of tau, where the smooth hinge actually bends
    "softplus": _unary(lambda x: ad.softplus(x, 0.05), lambda r: r.normal(scale=0.05, size=(3, 4))),
    "softplus-tau1": _unary(ad.softplus),
    "clip": _unary(lambda x: ad.clip(x, -0.5, 0.5),
                   lambda r: away_from_kinks(r, (3, 4), 1e-2) + 0.5 * np.sign(r.normal(size=(3, 4)))),
    "grad-reverse": _grl,
    "structural": _structural,
    "scatter": _scatter,
    "sum-to": _sum_to,
    "l2-normalize": _unary(ad.l2_normalize),
    "log-softmax": _unary(ad.log_softmax),
    "gru": _gru,
}


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float
    per_case: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "max_rel_error": self.max_rel_error,
                "tolerance": self.tolerance, "seconds": round(self.seconds, 3),
                "per_case": self.per_case}


def primitive_suite(seeds: int = 10, tolerance: float = 1e-5) -> SuiteResult:
    t0 = time.perf_counter()
    per_case = {}
    for name, build in PRIMITIVES.items():
        worst = 0.0
        for seed in range(seeds):
            f, params = build(np.random.default_rng([seed, 17]))
            worst = max(worst, finite_difference_check(f, params, tolerance=tolerance).max_rel_error)
        per_case[name] = worst
    return SuiteResult("primitives", max(per_case.values()), tolerance,
                       time.perf_counter() - t0, per_case)


# -- hypergradient on a tiny model -----------------------------------------------------

TINY_MODEL = dict(input_dim=4, encoder_hidden=3, latent_dim=2, embed_dim=2, n_classes=2,
                  semantic_dim=3, semantic_hidden=2, disc_hidden=2, style_hidden=2, style_dim=2,
                  gru_hidden=1, alpha_init=0.5)

TINY_DATA = dict(n_categories=3, n_train=2, photos_per_category=8, sketches_per_photo=1,
                 n_users=3, dim=4, semantic_dim=3, subspace_rank=2, finetune_photos=3)


def tiny_problem(seed: int = 0):
    """A ≤200-parameter model, one K=2 episode and a scalar outer objective of the params."""
    dataset, semantic, split = synth_generate(GeneratorSpec(**TINY_DATA, seed=seed))
    params = init_params(ModelConfig(**TINY_MODEL), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    episode = sample_task(dataset, split, "category", 2, rng)
    cfg = TrainConfig(K=2, reg_weight=0.5)
    classes = sorted(split.train_units)

    def objective(p: dict) -> Tensor:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return task_objective({**params, **p}, dataset, episode, cfg, classes, semantic)

    return params, objective


def hypergradient_suite(seeds: int = 3, tolerance: float = 1e-3,
                        groups: tuple[str, ...] = ("M", "alpha", "R")) -> SuiteResult:
    t0 = time.perf_counter()
    per_case = {}
    for seed in range(seeds):
        params, objective = tiny_problem(seed)
        if count(params) > 200:
            raise AssertionError(f"tiny model has {count(params)} parameters")
        wrt = group(params, *groups)
        report = finite_difference_check(objective, wrt, step=1e-5, tolerance=tolerance)
        for name, err in report.per_param.items():
            per_case[name] = max(per_case.get(name, 0.0), err)
    return SuiteResult("hypergradient", max(per_case.values()), tolerance,
                       time.perf_counter() - t0, per_case)
