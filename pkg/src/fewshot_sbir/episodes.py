"""Cross-modal dataset, file formats, synthetic generator and episodic task sampling.

A *unit* is what a task adapts to: a category (category mode) or a sketcher
(user mode). Every sketch carries the ``pair_id`` of exactly one photo, its
true match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

Mode = Literal["category", "user"]
SKETCH, PHOTO = "sketch", "photo"


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class IntegrityError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    id: str
    domain: str
    category: str
    user: str | None
    pair_id: str
    features: tuple[float, ...]

    def to_record(self) -> dict:
        return {"id": self.id, "domain": self.domain, "category": self.category,
                "user": self.user, "pair_id": self.pair_id, "features": list(self.features)}


class Dataset:
    """Immutable collection of items with array views for fast indexing."""

    def __init__(self, items: Iterable[Item]):
        self.items: list[Item] = list(items)
        self.index = {it.id: i for i, it in enumerate(self.items)}
        if len(self.index) != len(self.items):
            raise IntegrityError("duplicate item ids")
        dim = {len(it.features) for it in self.items}
        if len(dim) > 1:
            raise IntegrityError(f"mixed feature dimensions {sorted(dim)}")
        self.dim = dim.pop() if dim else 0
        self.features = (np.array([it.features for it in self.items], dtype=np.float64)
                         if self.items else np.zeros((0, 0)))
        self.is_photo = np.array([it.domain == PHOTO for it in self.items], dtype=bool)
        self.category = np.array([it.category for it in self.items], dtype=object)
        self.user = np.array([it.user for it in self.items], dtype=object)
        self.pair_id = np.array([it.pair_id for it in self.items], dtype=object)
        self.photo_of: dict[str, int] = {}
        for i, it in enumerate(self.items):
            if it.domain not in (SKETCH, PHOTO):
                raise IntegrityError(f"item {it.id}: unknown domain {it.domain!r}")
            if it.domain == PHOTO:
                if it.pair_id in self.photo_of:
                    raise IntegrityError(f"pair_id {it.pair_id} has more than one photo")
                self.photo_of[it.pair_id] = i
        for it in self.items:
            if it.domain == SKETCH:
                j = self.photo_of.get(it.pair_id)
                if j is None:
                    raise IntegrityError(f"dangling pair_id {it.pair_id} (sketch {it.id})")
                if self.items[j].category != it.category:
                    raise IntegrityError(f"sketch {it.id} and its photo differ in category")

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.items == other.items

    @property
    def categories(self) -> list[str]:
        return sorted(set(self.category.tolist()))

    def ids(self, idx) -> list[str]:
        return [self.items[i].id for i in np.atleast_1d(idx)]

    def indices(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self.index[i] for i in ids], dtype=np.int64)

    def match(self, sketch_idx) -> np.ndarray:
        """Index of each sketch's true-match photo."""
        return np.array([self.photo_of[self.items[i].pair_id] for i in np.atleast_1d(sketch_idx)],
                        dtype=np.int64)

    def unit_sketches(self, mode: Mode, unit: str) -> np.ndarray:
        key = self.category if mode == "category" else self.user
        return np.flatnonzero(~self.is_photo & (key == unit))

    def unit_photos(self, mode: Mode, unit: str) -> np.ndarray:
        if mode == "category":
            return np.flatnonzero(self.is_photo & (self.category == unit))
        return np.unique(self.match(self.unit_sketches(mode, unit)))


# -- files ------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in dataset.items:
            fh.write(json.dumps(it.to_record()) + "\n")


def load_dataset(path) -> Dataset:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(Item(id=str(rec["id"]), domain=rec["domain"],
                                  category=str(rec["category"]),
                                  user=None if rec.get("user") is None else str(rec["user"]),
                                  pair_id=str(rec["pair_id"]),
                                  features=tuple(float(v) for v in rec["features"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(path, lineno, f"malformed record ({exc})") from None
    return Dataset(items)


@dataclass
class SemanticTable:
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        for cat, vec in self.vectors.items():
            if not np.any(vec):
                raise IntegrityError(f"semantic vector for {cat!r} is zero")

    @property
    def dim(self) -> int:
        return len(next(iter(self.vectors.values()))) if self.vectors else 0

    def lookup(self, categories) -> np.ndarray:
        return np.stack([self.vectors[c] for c in categories])

    def covers(self, categories) -> bool:
        return all(c in self.vectors for c in categories)


def save_semantic(table: SemanticTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cat in sorted(table.vectors):
            fh.write(json.dumps({"category": cat, "vector": table.vectors[cat].tolist()}) + "\n")


def load_semantic(path) -> SemanticTable:
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vectors[str(rec["category"])] = np.array(rec["vector"], dtype=np.float64)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(path, lineno, f"malformed record ({exc})") from None
    return SemanticTable(vectors)


@dataclass
class Split:
    """Train/test units plus per-test-unit adaptation and evaluation item ids.

    ``finetune`` holds the sketches available for adaptation (their photos come
    along); ``queries`` and ``gallery`` are the held-out evaluation items.
    """

    mode: Mode
    train_units: list[str]
    test_units: list[str]
    finetune: dict[str, list[str]] = field(default_factory=dict)
    queries: dict[str, list[str]] = field(default_factory=dict)
    gallery: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train_units) & set(self.test_units)
        if overlap:
            raise IntegrityError(f"train and test units overlap: {sorted(overlap)}")

    def validate(self, dataset: Dataset) -> None:
        for unit in self.test_units:
            ft = set(self.finetune.get(unit, []))
            if ft & set(self.queries.get(unit, [])):
                raise IntegrityError(f"unit {unit}: fine-tune sketches reused as queries")
            ft_photos = {dataset.items[i].id for i in dataset.match(dataset.indices(ft))} if ft else set()
            if ft_photos & set(self.gallery.get(unit, [])):
                raise IntegrityError(f"unit {unit}: fine-tune photos present in gallery")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def save_split(split: Split, path) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=1, sort_keys=True), encoding="utf-8")


def load_split(path) -> Split:
    return Split(**json.loads(Path(path).read_text(encoding="utf-8")))


# -- synthetic generator -------------------------------------------------------

@dataclass
class GeneratorSpec:
    """Knobs of the synthetic cross-modal generator (key=value file)."""

    mode: str = "category"
    n_categories: int = 25
    n_train: int = 20
    photos_per_category: int = 40
    sketches_per_photo: int = 2
    n_users: int = 10
    sketches_per_user: int = 20
    dim: int = 32
    semantic_dim: int = 300
    subspace_rank: int = 6
    noisy_dims: int = 0
    stroke_noise: float = 1.0
    sketch_shift: float = 3.0
    prototype_scale: float = 0.2
    domain_gap: float = 0.2
    spread_min: float = 0.5
    spread_max: float = 1.5
    noise: float = 0.15
    style: float = 0.1
    style_rank: int = 2
    semantic_noise: float = 0.1
    finetune_photos: int = 10
    seed: int = 0

    def validate(self) -> None:
        positive = ("n_categories", "photos_per_category", "sketches_per_photo", "n_users", "dim",
                    "semantic_dim", "subspace_rank", "finetune_photos", "sketches_per_user")
        for name in positive:
            if getattr(self, name) <= 0:
                raise SpecError(f"{name} must be positive")
        for name in ("noise", "stroke_noise", "style", "spread_min", "semantic_noise", "prototype_scale",
                     "domain_gap", "sketch_shift"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be non-negative")
        if self.spread_max < self.spread_min:
            raise SpecError("spread_max < spread_min")
        if self.mode not in ("category", "user"):
            raise SpecError(f"mode must be category or user, got {self.mode!r}")
        units = self.n_categories if self.mode == "category" else self.n_users
        if not 0 < self.n_train < units:
            raise SpecError("n_train must leave at least one test unit")
        if self.subspace_rank > self.dim:
            raise SpecError("subspace_rank exceeds dim")
        if not 0 <= self.noisy_dims <= self.subspace_rank:
            raise SpecError("noisy_dims must lie in [0, subspace_rank]")
        if self.mode == "category" and self.finetune_photos >= self.photos_per_category:
            raise SpecError("finetune_photos must leave evaluation photos")
        if self.mode == "user" and self.finetune_photos >= self.sketches_per_user:
            raise SpecError("finetune_photos must leave evaluation sketches")


def _coerce(value: str, kind):
    kind = {"int": int, "float": float, "str": str}.get(kind, kind)
    return kind(value)


def parse_keyvalue(text: str, spec_cls=GeneratorSpec, source: str = "<config>"):
    """Parse ``key = value`` lines (``#`` comments) into a dataclass instance."""
    known = {f.name: f for f in fields(spec_cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise SpecError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(value, known[key].type)
        except ValueError:
            raise SpecError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    return spec_cls(**values)


def _orthogonal(rng: np.random.Generator, n: int, k: int | None = None) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    return q if k is None else q[:, :k]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotation(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    a = rng.normal(size=(n, n)) * (scale / np.sqrt(n))
    a = a - a.T
    eye = np.eye(n)
    return np.linalg.solve(eye + a, eye - a)


@dataclass
class SyntheticWorld:
    """Generator latents kept for oracle checks (not saved with the dataset)."""

    cross_map: np.ndarray
    spreads: dict[str, float]
    subspaces: dict[str, np.ndarray]
    noisy: dict[str, np.ndarray]
    shifts: dict[str, np.ndarray]
    sketch_shift: float = 0.0

    def sketch_to_photo(self, sketch: np.ndarray, category: str) -> np.ndarray:
        """Invert the noise-free part of the sketch model (exact when style = 0)."""
        offset = self.sketch_shift * self.spreads[category] * self.shifts[category]
        return self.cross_map.T @ sketch - offset


def synth_generate(spec: GeneratorSpec, rng: np.random.Generator | None = None,
                   return_world: bool = False):
    """Build (dataset, semantic table, split[, world]) from ``spec``.

    photo  = prototype[c] + spread[c] * U[c] @ z             (U[c]: rank-r basis)
    sketch = Q @ (photo + stroke_noise * spread[c] * V[c] @ w
                  + sketch_shift * spread[c] * b[c])
             + style * S[u] @ photo + noise * e

    Q is the Cayley rotation of a random skew matrix scaled by ``domain_gap``:
    the identity at 0, a generic rotation for large values.

    ``V[c]`` is a random ``noisy_dims``-column subset of ``U[c]``: instance
    directions that sketches of that category render unreliably. The best
    retrieval metric therefore differs per category. ``b[c]`` is a unit
    direction inside span U[c]: a drawing bias shared by all sketches of c.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    D, r = spec.dim, spec.subspace_rank
    Q = _rotation(rng, D, spec.domain_gap)
    n_cat = spec.n_categories if spec.mode == "category" else 1
    cats = [f"c{i:03d}" for i in range(n_cat)]
    users = [f"u{i:03d}" for i in range(spec.n_users)]
    spreads = np.linspace(spec.spread_min, spec.spread_max, n_cat)
    rng.shuffle(spreads)
    protos = rng.normal(scale=spec.prototype_scale, size=(n_cat, D))
    bases = [_orthogonal(rng, D, r) for _ in range(n_cat)]
    styles = []
    for _ in users:
        a = rng.normal(size=(D, spec.style_rank))
        b = rng.normal(size=(D, spec.style_rank))
        styles.append(a @ b.T / (D * np.sqrt(spec.style_rank)) * np.sqrt(D))
    proj = rng.normal(size=(spec.semantic_dim, D)) / np.sqrt(D)

    def photo_feat(ci: int) -> np.ndarray:
        z = rng.normal(size=r)
        return protos[ci] + spreads[ci] * (bases[ci] @ z)

    noisy = [b[:, np.sort(rng.choice(r, size=spec.noisy_dims, replace=False))] for b in bases]
    shifts = [b @ _unit(rng.normal(size=r)) for b in bases]

    def sketch_feat(photo: np.ndarray, ci: int, ui: int) -> np.ndarray:
        strokes = spec.stroke_noise * spreads[ci] * (noisy[ci] @ rng.normal(size=spec.noisy_dims))
        strokes = strokes + spec.sketch_shift * spreads[ci] * shifts[ci]
        return (Q @ (photo + strokes) + spec.style * (styles[ui] @ photo)
                + spec.noise * rng.normal(size=D))

    items: list[Item] = []
    split_units: tuple[list[str], list[str]]
    if spec.mode == "category":
        for ci, cat in enumerate(cats):
            for j in range(spec.photos_per_category):
                pid = f"{cat}-p{j:04d}"
                pf = photo_feat(ci)
                items.append(Item(pid, PHOTO, cat, None, pid, tuple(pf.tolist())))
                for s in range(spec.sketches_per_photo):
                    ui = int(rng.integers(spec.n_users))
                    sf = sketch_feat(pf, ci, ui)
                    items.append(Item(f"{pid}-s{s}", SKETCH, cat, users[ui], pid, tuple(sf.tolist())))
        order = rng.permutation(n_cat)
        train = sorted(cats[i] for i in order[:spec.n_train])
        test = sorted(cats[i] for i in order[spec.n_train:])
    else:
        n_test_users = spec.n_users - spec.n_train
        order = rng.permutation(spec.n_users)
        train = sorted(users[i] for i in order[:spec.n_train])
        test = sorted(users[i] for i in order[spec.n_train:])
        n_photos = spec.photos_per_category
        n_test_photos = max(spec.sketches_per_user, int(round(n_photos * n_test_users / spec.n_users)))
        photo_ids = [f"{cats[0]}-p{j:04d}" for j in range(n_photos)]
        feats = {}
        for pid in photo_ids:
            feats[pid] = photo_feat(0)
            items.append(Item(pid, PHOTO, cats[0], None, pid, tuple(feats[pid].tolist())))
        pools = {"test": photo_ids[:n_test_photos], "train": photo_ids[n_test_photos:]}
        if len(pools["train"]) < spec.sketches_per_user:
            raise SpecError("photos_per_category too small for the user split")
        for ui, user in enumerate(users):
            pool = pools["test" if user in test else "train"]
            chosen = rng.choice(len(pool), size=spec.sketches_per_user, replace=False)
            for s, j in enumerate(sorted(chosen)):
                pid = pool[j]
                sf = sketch_feat(feats[pid], 0, ui)
                items.append(Item(f"{user}-s{s:03d}", SKETCH, cats[0], user, pid, tuple(sf.tolist())))
    dataset = Dataset(items)
    semantic = SemanticTable({
        cat: proj @ protos[ci] + spec.semantic_noise * rng.normal(size=spec.semantic_dim)
        for ci, cat in enumerate(cats)})
    split = make_split(dataset, spec.mode, train, test, spec.finetune_photos, rng)
    if return_world:
        world = SyntheticWorld(Q, dict(zip(cats, spreads.tolist())), dict(zip(cats, bases)),
                               dict(zip(cats, noisy)), dict(zip(cats, shifts)), spec.sketch_shift)
        return dataset, semantic, split, world
    return dataset, semantic, split


def make_split(dataset: Dataset, mode: Mode, train: list[str], test: list[str],
               finetune_count: int, rng: np.random.Generator) -> Split:
    """Carve per-test-unit fine-tune sets; the rest of the unit is evaluation data.

    Category mode: ``finetune_count`` photos with all their sketches.
    User mode: ``finetune_count`` of the user's sketches; the gallery is the
    pool of photos sketched by test users, minus the fine-tune photos.
    """
    split = Split(mode, list(train), list(test))
    if mode == "user":
        pool = np.unique(np.concatenate([dataset.unit_photos(mode, u) for u in test]))
    for unit in test:
        sketches = dataset.unit_sketches(mode, unit)
        if mode == "category":
            photos = dataset.unit_photos(mode, unit)
            ft_photos = np.sort(rng.choice(photos, size=finetune_count, replace=False))
            ft_pairs = set(dataset.pair_id[ft_photos])
            in_ft = np.array([dataset.pair_id[i] in ft_pairs for i in sketches], dtype=bool)
            gallery = np.setdiff1d(photos, ft_photos)
        else:
            in_ft = np.zeros(len(sketches), dtype=bool)
            in_ft[rng.choice(len(sketches), size=finetune_count, replace=False)] = True
            gallery = np.setdiff1d(pool, dataset.match(sketches[in_ft]))
        # a query whose true match went into the fine-tune set cannot be scored
        is_query = ~in_ft & np.isin(dataset.match(sketches), gallery)
        split.finetune[unit] = dataset.ids(sketches[in_ft])
        split.queries[unit] = dataset.ids(sketches[is_query])
        split.gallery[unit] = dataset.ids(gallery)
    split.validate(dataset)
    return split


# -- episodes ------------------------------------------------------------------

@dataclass
class Triplets:
    """Dataset indices: sketch anchors, true-match positives, hard negatives."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)


@dataclass
class TaskEpisode:
    unit: str
    support: Triplets
    validation: Triplets
    # user mode: (sketch, photo) pairs from other training users for the style triplets
    foreign_sketch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    foreign_photo: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _distinct_pairs(dataset: Dataset, sketches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One random sketch per distinct pair_id, in random order."""
    order = rng.permutation(sketches)
    _, first = np.unique(dataset.pair_id[order], return_index=True)
    return order[np.sort(first)]


def hard_negatives(dataset: Dataset, positives: np.ndarray, photos: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """For each positive photo, a different photo drawn from ``photos``."""
    if len(photos) < 2:
        raise SamplingError("need at least two photos to form a hard negative")
    out = np.empty(len(positives), dtype=np.int64)
    for i, p in enumerate(positives):
        candidates = photos[dataset.pair_id[photos] != dataset.pair_id[p]]
        out[i] = candidates[rng.integers(len(candidates))]
    return out


def triplets_from_sketches(dataset: Dataset, sketches: np.ndarray, photos: np.ndarray,
                           rng: np.random.Generator) -> Triplets:
    pos = dataset.match(sketches)
    return Triplets(np.asarray(sketches, dtype=np.int64), pos, hard_negatives(dataset, pos, photos, rng))


def sample_task(dataset: Dataset, split: Split, mode: Mode, K: int, rng: np.random.Generator,
                max_retries: int = 20) -> TaskEpisode:
    """Random training unit; K support and K validation pairs with hard negatives."""
    if K < 1:
        raise ValueError("K must be >= 1")
    units = split.train_units
    for _ in range(max_retries):
        unit = units[rng.integers(len(units))]
        pairs = _distinct_pairs(dataset, dataset.unit_sketches(mode, unit), rng)
        photos = dataset.unit_photos(mode, unit)
        if len(pairs) >= 2 * K and len(photos) >= K + 1:
            break
    else:
        raise SamplingError(f"no training unit with {2 * K} pairs after {max_retries} draws")
    support = triplets_from_sketches(dataset, pairs[:K], photos, rng)
    validation = triplets_from_sketches(dataset, pairs[K:2 * K], photos, rng)
    episode = TaskEpisode(unit, support, validation)
    if mode == "user":
        others = np.flatnonzero(~dataset.is_photo & np.isin(dataset.user, [u for u in units if u != unit]))
        if len(others):
            pick = rng.choice(others, size=min(K, len(others)), replace=False)
            episode.foreign_sketch = pick
            episode.foreign_photo = dataset.match(pick)
    return episode
