"""Class pools, episodic task sampling and permutation combinatorics.

Labels are 1-based everywhere in the public interface: an N-way episode
uses labels 1..N, and a :class:`Permutation` maps 1..N onto itself.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError

MAX_ENUMERATION_N = 8
SPLITS = ("base", "validation", "novel")

POOL_MAGIC = b"FSCP"
POOL_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ClassPool:
    """A set of classes, each holding a (count, dim) array of examples."""

    class_ids: tuple[int, ...]
    examples: tuple[np.ndarray, ...]
    dim: int
    split: str = "base"
    means: np.ndarray | None = None

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if len(self.class_ids) != len(self.examples):
            raise ValueError("class_ids and examples differ in length")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("global class ids must be unique within a pool")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for cid, ex in zip(self.class_ids, self.examples):
            if ex.ndim != 2 or ex.shape[1] != self.dim:
                raise ValueError(f"class {cid}: examples must have shape (count, {self.dim})")

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def min_examples(self) -> int:
        return min((len(ex) for ex in self.examples), default=0)

    def subset(self, class_ids, split: str) -> ClassPool:
        index = {cid: i for i, cid in enumerate(self.class_ids)}
        missing = [c for c in class_ids if c not in index]
        if missing:
            raise ValueError(f"class ids not in pool: {missing[:5]}")
        rows = [index[c] for c in class_ids]
        means = None if self.means is None else _frozen(self.means[rows])
        return ClassPool(
            class_ids=tuple(int(c) for c in class_ids),
            examples=tuple(self.examples[r] for r in rows),
            dim=self.dim,
            split=split,
            means=means,
        )


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise ValueError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.q_query < 1:
            raise ValueError(f"q_query must be >= 1, got {self.q_query}")


@dataclass(frozen=True, eq=False)
class Episode:
    """One N-way K-shot task.

    ``assignment[c - 1]`` is the global class id carrying label ``c``.
    Support and query rows are stored class-major in the order the classes
    were drawn, so relabeling never moves a feature vector.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    assignment: tuple[int, ...]

    @property
    def n_way(self) -> int:
        return len(self.assignment)

    def same_as(self, other: Episode) -> bool:
        return (
            self.assignment == other.assignment
            and np.array_equal(self.support_x, other.support_x)
            and np.array_equal(self.support_y, other.support_y)
            and np.array_equal(self.query_x, other.query_x)
            and np.array_equal(self.query_y, other.query_y)
        )


@dataclass(frozen=True)
class Permutation:
    """A bijection of {1..n}; ``mapping[c - 1] == pi(c)``."""

    mapping: tuple[int, ...]
    _check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self._check and sorted(self.mapping) != list(range(1, len(self.mapping) + 1)):
            raise ValueError(f"not a permutation of 1..{len(self.mapping)}: {self.mapping}")

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls(tuple(range(1, n + 1)))

    @property
    def n(self) -> int:
        return len(self.mapping)

    def __call__(self, c: int) -> int:
        return self.mapping[c - 1]

    def apply(self, labels: np.ndarray) -> np.ndarray:
        """Map an array of 1-based labels through the permutation."""
        table = np.asarray((0,) + self.mapping, dtype=np.int64)
        return table[labels]

    def compose(self, other: Permutation) -> Permutation:
        """``(self ∘ other)(c) == self(other(c))``."""
        if other.n != self.n:
            raise ValueError("cannot compose permutations of different sizes")
        return Permutation(tuple(self(other(c)) for c in range(1, self.n + 1)))

    def inverse(self) -> Permutation:
        inv = [0] * self.n
        for c, image in enumerate(self.mapping, start=1):
            inv[image - 1] = c
        return Permutation(tuple(inv))

    def is_identity(self) -> bool:
        return all(image == c for c, image in enumerate(self.mapping, start=1))

    def fixed_points(self) -> int:
        return sum(image == c for c, image in enumerate(self.mapping, start=1))


def episode_seed(global_seed: int, phase: str, index: int) -> int:
    """Counter-based per-episode seed, independent of evaluation order."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(phase.encode()), int(index)])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def generate_synthetic_pool(
    n_classes: int,
    dim: int,
    per_class: int,
    sigma: float,
    seed: int,
    first_id: int = 0,
    split: str = "base",
) -> ClassPool:
    """Gaussian blobs around class means drawn from Uniform[-1, 1]^dim."""
    if dim <= 0 or per_class <= 0 or n_classes <= 0:
        raise ValueError("n_classes, dim and per_class must be positive")
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be a finite non-negative scalar, got {sigma}")
    if n_classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes with at least 2 examples each")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(n_classes, dim))
    noise = rng.standard_normal(size=(n_classes, per_class, dim))
    examples = tuple(_frozen(means[c] + sigma * noise[c]) for c in range(n_classes))
    return ClassPool(
        class_ids=tuple(range(first_id, first_id + n_classes)),
        examples=examples,
        dim=dim,
        split=split,
        means=_frozen(means),
    )


def split_pool(pool: ClassPool, n_base: int, n_validation: int, n_novel: int) -> dict[str, ClassPool]:
    """Disjoint base/validation/novel pools, taken in class-id order."""
    if n_base + n_validation + n_novel > pool.n_classes:
        raise CapacityError(
            f"pool has {pool.n_classes} classes, split needs {n_base + n_validation + n_novel}"
        )
    ids = pool.class_ids
    bounds = np.cumsum([0, n_base, n_validation, n_novel])
    return {
        name: pool.subset(ids[bounds[i] : bounds[i + 1]], name)
        for i, name in enumerate(SPLITS)
    }


def sample_episode(pool: ClassPool, spec: EpisodeSpec, seed: int) -> Episode:
    """Draw N classes, label them by a random bijection, split support/query."""
    if pool.n_classes < spec.n_way:
        raise CapacityError(f"pool has {pool.n_classes} classes, episode needs {spec.n_way}")
    need = spec.k_shot + spec.q_query
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool.n_classes, size=spec.n_way, replace=False)
    labels = rng.permutation(spec.n_way) + 1

    sx, sy, qx, qy = [], [], [], []
    assignment = [0] * spec.n_way
    for row, label in zip(chosen, labels):
        ex = pool.examples[row]
        if len(ex) < need:
            raise CapacityError(
                f"class {pool.class_ids[row]} has {len(ex)} examples, episode needs {need}"
            )
        picks = rng.permutation(len(ex))[:need]
        sx.append(ex[picks[: spec.k_shot]])
        qx.append(ex[picks[spec.k_shot :]])
        sy.append(np.full(spec.k_shot, label, dtype=np.int64))
        qy.append(np.full(spec.q_query, label, dtype=np.int64))
        assignment[label - 1] = pool.class_ids[row]

    return Episode(
        support_x=_frozen(np.concatenate(sx)),
        support_y=_frozen(np.concatenate(sy)),
        query_x=_frozen(np.concatenate(qx)),
        query_y=_frozen(np.concatenate(qy)),
        assignment=tuple(assignment),
    )


def apply_permutation(ep: Episode, pi: Permutation) -> Episode:
    """Relabel every example: label ``y`` becomes ``pi(y)``."""
    if pi.n != ep.n_way:
        raise ValueError(f"permutation of size {pi.n} applied to a {ep.n_way}-way episode")
    assignment = [0] * ep.n_way
    for c, cid in enumerate(ep.assignment, start=1):
        assignment[pi(c) - 1] = cid
    return Episode(
        support_x=ep.support_x,
        support_y=_frozen(pi.apply(ep.support_y)),
        query_x=ep.query_x,
        query_y=_frozen(pi.apply(ep.query_y)),
        assignment=tuple(assignment),
    )


def sorted_label_order(ep: Episode) -> Permutation:
    """The relabeling that makes labels ascend with global class id."""
    rank = {cid: r for r, cid in enumerate(sorted(ep.assignment), start=1)}
    return Permutation(tuple(rank[cid] for cid in ep.assignment))


def with_sorted_labels(ep: Episode) -> Episode:
    return apply_permutation(ep, sorted_label_order(ep))


def _check_enumerable(n: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > MAX_ENUMERATION_N:
        raise CapacityError(f"refusing to enumerate {n}! permutations (limit n <= {MAX_ENUMERATION_N})")


def enumerate_permutations(n: int) -> list[Permutation]:
    """All n! permutations, lexicographic in their mapping arrays."""
    _check_enumerable(n)
    return [Permutation(p, _check=False) for p in itertools.permutations(range(1, n + 1))]


def rotated_permutations(n: int) -> list[Permutation]:
    """The n cyclic shifts c -> ((c + gamma) mod n) + 1 for gamma = 1..n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [
        Permutation(tuple((c + gamma) % n + 1 for c in range(1, n + 1)))
        for gamma in range(1, n + 1)
    ]


def fixed_point_histogram(n: int) -> dict[int, int]:
    """Number of permutations of [n] with exactly k fixed points, for each k."""
    _check_enumerable(n)
    counts = Counter(p.fixed_points() for p in enumerate_permutations(n))
    return {k: counts[k] for k in sorted(counts, reverse=True)}


# --- pool files -------------------------------------------------------------


def save_pool(pool: ClassPool, path: str | Path) -> None:
    """Write the binary pool format (examples stored as float32)."""
    parts = [POOL_MAGIC, struct.pack("<III", POOL_VERSION, pool.n_classes, pool.dim)]
    for cid, ex in zip(pool.class_ids, pool.examples):
        parts.append(struct.pack("<II", cid, len(ex)))
        parts.append(np.asarray(ex, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_pool(path: str | Path, split: str = "base") -> ClassPool:
    data = Path(path).read_bytes()
    if data[:4] != POOL_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", offset=0)
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, n_classes, dim = struct.unpack_from("<III", data, 4)
    if version != POOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive", offset=12)
    offset = 16
    ids, examples = [], []
    for _ in range(n_classes):
        if offset + 8 > len(data):
            raise FormatError(f"{path}: truncated class header", offset=offset)
        cid, count = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = 4 * count * dim
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: class {cid} truncated", offset=offset)
        ex = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
        examples.append(_frozen(ex.astype(np.float64).reshape(count, dim)))
        ids.append(cid)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset=offset)
    try:
        return ClassPool(tuple(ids), tuple(examples), dim, split=split)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}", offset=16) from exc


def save_manifest(splits: dict[str, ClassPool], path: str | Path) -> None:
    manifest = {name: list(splits[name].class_ids) for name in SPLITS if name in splits}
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def load_split(pool_path: str | Path, manifest_path: str | Path, split: str) -> ClassPool:
    """Load the pool file and keep only the classes the manifest lists for ``split``."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    manifest = json.loads(Path(manifest_path).read_text())
    pool = load_pool(pool_path, split=split)
    return pool.subset(manifest[split], split)
