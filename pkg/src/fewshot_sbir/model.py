"""Parameters and forward passes for the retrieval network and its heads.

Parameters live in one flat ``dict[str, Tensor]`` keyed ``"<group>.<name>"``:

====== ===========================================================
F      encoder: 2-layer MLP with a channel-gate attention residual
M      embedding head: linear c -> d, then l2 normalization
R      margin network: bidirectional GRU + linear + sigmoid
alpha  per-parameter inner-loop rates, one tensor per M tensor
D      domain discriminator (used through a gradient reversal)
C      category classifier
G      semantic decoder, three linear layers with relu
T      user-style embedding of a concatenated (sketch, photo) latent
====== ===========================================================
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .autodiff import (Tensor, concat, grad_reverse, gru_sequence, l2_normalize, linear,
                       max_over_time, relu, sigmoid)

Params = dict[str, Tensor]

GROUPS = ("F", "M", "R", "alpha", "D", "C", "G", "T")


class MarginFallbackWarning(UserWarning):
    """Fewer than two support pairs: the margin network cannot form pair rows."""


@dataclass
class ModelConfig:
    input_dim: int = 32
    encoder_hidden: int = 256
    latent_dim: int = 128
    embed_dim: int = 64
    n_classes: int = 20
    semantic_dim: int = 300
    semantic_hidden: int = 128
    disc_hidden: int = 64
    style_hidden: int = 64
    style_dim: int = 64
    gru_hidden: int = 32
    alpha_init: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


def group(params: Mapping[str, Tensor], *names: str) -> Params:
    """Sub-dict of the tensors whose group prefix is one of ``names``."""
    return {k: v for k, v in params.items() if k.split(".", 1)[0] in names}


def count(params: Mapping[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(scale=gain * np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    c, h, d = cfg.latent_dim, cfg.encoder_hidden, cfg.embed_dim
    H = cfg.gru_hidden
    raw: dict[str, np.ndarray] = {
        "F.w1": _dense(rng, cfg.input_dim, h, np.sqrt(2.0)),
        "F.b1": np.zeros(h),
        "F.w2": _dense(rng, h, c),
        "F.b2": np.zeros(c),
        "F.wa": _dense(rng, c, c),
        "F.ba": np.zeros(c),
        "M.w": _dense(rng, c, d),
        "M.b": np.zeros(d),
    }
    for direction in ("fw", "bw"):
        raw[f"R.{direction}.w_ih"] = _dense(rng, 4 * c, 3 * H)
        raw[f"R.{direction}.b_ih"] = np.zeros(3 * H)
        raw[f"R.{direction}.w_hh"] = _dense(rng, H, 3 * H)
        raw[f"R.{direction}.b_hh"] = np.zeros(3 * H)
    raw["R.out.w"] = _dense(rng, 2 * H, 1)
    raw["R.out.b"] = np.zeros(1)
    raw["D.w1"] = _dense(rng, c, cfg.disc_hidden, np.sqrt(2.0))
    raw["D.b1"] = np.zeros(cfg.disc_hidden)
    raw["D.w2"] = _dense(rng, cfg.disc_hidden, 1)
    raw["D.b2"] = np.zeros(1)
    raw["C.w"] = _dense(rng, c, cfg.n_classes)
    raw["C.b"] = np.zeros(cfg.n_classes)
    sh = cfg.semantic_hidden
    raw["G.w1"] = _dense(rng, c, sh, np.sqrt(2.0))
    raw["G.b1"] = np.zeros(sh)
    raw["G.w2"] = _dense(rng, sh, sh, np.sqrt(2.0))
    raw["G.b2"] = np.zeros(sh)
    raw["G.w3"] = _dense(rng, sh, cfg.semantic_dim)
    raw["G.b3"] = np.zeros(cfg.semantic_dim)
    raw["T.w1"] = _dense(rng, 2 * c, cfg.style_hidden, np.sqrt(2.0))
    raw["T.b1"] = np.zeros(cfg.style_hidden)
    raw["T.w2"] = _dense(rng, cfg.style_hidden, cfg.style_dim)
    raw["T.b2"] = np.zeros(cfg.style_dim)
    for name in ("M.w", "M.b"):
        raw[f"alpha.{name}"] = np.full(raw[name].shape, cfg.alpha_init)
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def _check_dim(x: Tensor, dim: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what}: expected (N, {dim}) input, got {x.shape}")


def encode(params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Latent features ``h + h * sigmoid(gate(h))`` for a batch of rows (N, D_in)."""
    _check_dim(x, params["F.w1"].shape[0], "encode")
    hidden = relu(linear(x, params["F.w1"], params["F.b1"]))
    h = linear(hidden, params["F.w2"], params["F.b2"])
    return h + h * sigmoid(linear(h, params["F.wa"], params["F.ba"]))


def head(head_params: Mapping[str, Tensor], latent: Tensor) -> Tensor:
    """Embedding head; ``head_params`` holds ``M.w`` and ``M.b`` (possibly adapted)."""
    return l2_normalize(linear(latent, head_params["M.w"], head_params["M.b"]))


def embed(params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    return head(params, encode(params, x))


def pair_rows(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Ordered distinct index pairs (m, n), m != n, in lexicographic order."""
    m, n = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    keep = m != n
    return m[keep], n[keep]


def relation_matrix(sketch_latent: Tensor, photo_latent: Tensor) -> Tensor:
    """Rows ``concat(f_m, f_n)`` with ``f_k = concat(F(x_k), F(y_k))``; shape (K(K-1), 4c)."""
    f = concat([sketch_latent, photo_latent], axis=1)
    m, n = pair_rows(f.shape[0])
    return concat([f[m], f[n]], axis=1)


def predict_margin(params: Mapping[str, Tensor], sketch_latent: Tensor, photo_latent: Tensor,
                   fallback: float = 0.3) -> Tensor:
    """Task margin in (0, 1) from the support pairs' latents."""
    k = sketch_latent.shape[0]
    if k < 2:
        warnings.warn(f"predict_margin: K={k} < 2, using fixed margin {fallback}",
                      MarginFallbackWarning, stacklevel=2)
        return Tensor(fallback)
    rows = relation_matrix(sketch_latent, photo_latent)
    fw = gru_sequence(rows, params["R.fw.w_ih"], params["R.fw.b_ih"],
                      params["R.fw.w_hh"], params["R.fw.b_hh"])
    bw = gru_sequence(rows, params["R.bw.w_ih"], params["R.bw.b_ih"],
                      params["R.bw.w_hh"], params["R.bw.b_hh"], reverse=True)
    pooled = max_over_time(concat([fw, bw], axis=1))
    logit = linear(pooled.reshape(1, -1), params["R.out.w"], params["R.out.b"])
    return sigmoid(logit).reshape(())


def discriminate(params: Mapping[str, Tensor], latent: Tensor, grl_lambda: float = 1.0) -> Tensor:
    """P(photo) per latent row; gradients into ``latent`` are reversed and scaled."""
    x = grad_reverse(latent, grl_lambda)
    hidden = relu(linear(x, params["D.w1"], params["D.b1"]))
    return sigmoid(linear(hidden, params["D.w2"], params["D.b2"])).reshape(-1)


def classify(params: Mapping[str, Tensor], latent: Tensor) -> Tensor:
    return linear(latent, params["C.w"], params["C.b"])


def decode_semantic(params: Mapping[str, Tensor], latent: Tensor) -> Tensor:
    x = relu(linear(latent, params["G.w1"], params["G.b1"]))
    x = relu(linear(x, params["G.w2"], params["G.b2"]))
    return linear(x, params["G.w3"], params["G.b3"])


def style_embed(params: Mapping[str, Tensor], sketch_latent: Tensor, photo_latent: Tensor) -> Tensor:
    x = concat([sketch_latent, photo_latent], axis=1)
    return linear(relu(linear(x, params["T.w1"], params["T.b1"])), params["T.w2"], params["T.b2"])
