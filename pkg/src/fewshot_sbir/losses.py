"""Training objectives: triplet, domain, classification, user-style, semantic, and the regularizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Mapping

import numpy as np

from .autodiff import (Tensor, as_tensor, clip, concat, cosine_similarity, euclidean_distance, log,
                       log_softmax, mean, relu, softplus, distance_matrix, tsum)
from .model import classify, decode_semantic, discriminate, style_embed

Hinge = Literal["hard", "smooth"]

PROB_CLAMP = 1e-7

# D: domain, C: classification, S: semantic, T: user-style
REG_COMPONENTS = {"category": ("D", "C", "S"), "user": ("D", "T")}


class ConfigurationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


def hinge(x: Tensor, mode: Hinge = "hard", tau: float = 0.05) -> Tensor:
    if mode == "hard":
        return relu(x)
    if mode == "smooth":
        return softplus(x, tau)
    raise ValueError(f"unknown hinge mode {mode!r}")


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin,
                 mode: Hinge = "hard", tau: float = 0.05) -> Tensor:
    """Mean over rows of ``hinge(margin + d(a, p) - d(a, n))`` on embeddings."""
    if anchor.shape[0] == 0:
        raise ValueError("triplet_loss: empty batch")
    if not (anchor.shape == positive.shape == negative.shape):
        raise ValueError(f"triplet_loss: shapes {anchor.shape}, {positive.shape}, {negative.shape}")
    margin = as_tensor(margin)
    if np.any(margin.data < 0):
        raise ValueError("triplet_loss: negative margin")
    slack = margin + euclidean_distance(anchor, positive) - euclidean_distance(anchor, negative)
    return mean(hinge(slack, mode, tau))


def domain_loss(params: Mapping[str, Tensor], latent: Tensor, domain: np.ndarray,
                grl_lambda: float = 1.0) -> Tensor:
    """Mean binary cross-entropy of the discriminator; labels 0 = sketch, 1 = photo."""
    t = np.asarray(domain, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("domain_loss: labels must be 0 (sketch) or 1 (photo)")
    p = clip(discriminate(params, latent, grl_lambda), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -mean(t * log(p) + (1.0 - t) * log(1.0 - p))


def classification_loss(params: Mapping[str, Tensor], latent: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = params["C.w"].shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"classification_loss: label outside [0, {n_classes})")
    logp = log_softmax(classify(params, latent), axis=-1)
    return -mean(logp[np.arange(len(labels)), labels])


def semantic_loss(params: Mapping[str, Tensor], latent: Tensor, target: np.ndarray) -> Tensor:
    """Mean of ``(1 - cos(G(latent), target)) / 2``, in [0, 1]."""
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if np.any(np.linalg.norm(target, axis=1) == 0):
        raise ValueError("semantic_loss: zero semantic vector")
    return mean(1.0 - cosine_similarity(decode_semantic(params, latent), Tensor(target))) * 0.5


def user_triplet_loss(params: Mapping[str, Tensor], anchor: tuple[Tensor, Tensor],
                      positive: tuple[Tensor, Tensor], negative: tuple[Tensor, Tensor],
                      margin: float = 0.2, users: tuple | None = None) -> Tensor:
    """Hinge triplet loss on style embeddings of (sketch, photo) latent pairs.

    ``users`` optionally gives (anchor, positive, negative) user ids per row and
    is checked: anchor and positive share a user, the negative does not.
    """
    if users is not None:
        ua, up, un = (np.asarray(u) for u in users)
        if np.any(ua != up):
            raise SamplingError("user_triplet_loss: anchor and positive from different users")
        if np.any(ua == un):
            raise SamplingError("user_triplet_loss: negative from the anchor's user")
    ea, ep, en = (style_embed(params, *pair) for pair in (anchor, positive, negative))
    return mean(relu(euclidean_distance(ea, ep) - euclidean_distance(ea, en) + margin))


def all_user_triplets_loss(params: Mapping[str, Tensor], sketch: Tensor, photo: Tensor,
                           users: np.ndarray, foreign_sketch: Tensor, foreign_photo: Tensor,
                           foreign_users: np.ndarray, margin: float = 0.2) -> Tensor | None:
    """Average user-style hinge over every (a, p, n) formable from the given pairs.

    Anchors/positives are distinct pairs of the same user; negatives are any
    pair (own set or foreign set) of a different user. Returns None when no
    triplet can be formed.
    """
    users = np.asarray(users)
    e_own = style_embed(params, sketch, photo)
    e_neg, all_users = e_own, users
    if foreign_sketch is not None and foreign_sketch.shape[0]:
        e_neg = concat([e_own, style_embed(params, foreign_sketch, foreign_photo)], axis=0)
        all_users = np.concatenate([users, np.asarray(foreign_users)])
    valid = ((users[:, None] == users[None, :]) & ~np.eye(len(users), dtype=bool))[:, :, None] \
        & (users[:, None, None] != all_users[None, None, :])
    if not valid.any():
        return None
    pos = distance_matrix(e_own, e_own)
    neg = distance_matrix(e_own, e_neg)
    n_own, n_all = len(users), len(all_users)
    slack = pos.reshape(n_own, n_own, 1) - neg.reshape(n_own, 1, n_all) + margin
    return tsum(relu(slack) * valid.astype(np.float64)) * (1.0 / valid.sum())


@dataclass
class RoleBatch:
    """Latents and labels for the items playing one triplet role (a, p or n)."""

    latent: Tensor
    domain: np.ndarray
    labels: np.ndarray | None = None
    semantic: np.ndarray | None = None


@dataclass
class UserPairs:
    sketch: Tensor
    photo: Tensor
    users: np.ndarray
    foreign_sketch: Tensor | None = None
    foreign_photo: Tensor | None = None
    foreign_users: np.ndarray | None = None


def reg_loss(mode: Literal["category", "user"], params: Mapping[str, Tensor],
             roles: Mapping[str, RoleBatch], grl_lambda: float = 1.0,
             user_pairs: UserPairs | None = None, style_margin: float = 0.2,
             parts: dict | None = None, components: Iterable[str] | None = None) -> Tensor:
    """Regularizer over the anchor/positive/negative roles of an episode's items.

    category: sum over roles of (L_D + L_C + L_S) / 3.
    user:     sum over roles of L_D / 3, plus the user-style triplet term.
    ``parts``, when given, receives the unweighted component values.
    ``components`` restricts the terms used (subset of D, C, S, T); by default
    all terms of the mode are used.
    """
    if mode not in ("category", "user"):
        raise ValueError(f"unknown mode {mode!r}")
    use = set(REG_COMPONENTS[mode] if components is None else components)
    if mode == "category" and "S" in use and any(b.semantic is None for b in roles.values()):
        raise ConfigurationError("reg_loss: category mode needs semantic vectors")
    total = Tensor(0.0)
    for role, batch in roles.items():
        terms = []
        if "D" in use:
            terms.append(("L_D", domain_loss(params, batch.latent, batch.domain, grl_lambda)))
        if mode == "category" and "C" in use:
            if batch.labels is None:
                raise ConfigurationError("reg_loss: category mode needs class labels")
            terms.append(("L_C", classification_loss(params, batch.latent, batch.labels)))
        if mode == "category" and "S" in use:
            terms.append(("L_S", semantic_loss(params, batch.latent, batch.semantic)))
        for name, value in terms:
            if parts is not None:
                parts[f"{name}.{role}"] = value.item()
            total = total + value * (1.0 / 3.0)
    if mode == "user" and "T" in use and user_pairs is not None:
        lud = all_user_triplets_loss(params, user_pairs.sketch, user_pairs.photo, user_pairs.users,
                                     user_pairs.foreign_sketch, user_pairs.foreign_photo,
                                     user_pairs.foreign_users, style_margin)
        if lud is not None:
            total = total + lud
            if parts is not None:
                parts["L_ud"] = lud.item()
    return total
