"""
Datasets, seeded random streams and the index partitions used by
cross-fitting and tuning.

Every randomized operation in the package takes an :class:`RngStream`.
A stream is a ``(seed, stream_id)`` pair; child streams are derived by
hashing labels into a new ``stream_id`` so that repetition ``r``, fold
``k`` and learner ``l`` each receive an independent, reproducible
generator regardless of execution order.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidArgumentError, StratificationError

_MASK64 = (1 << 64) - 1

ArrayLike = Sequence[float] | NDArray


# =============================================================================
# RANDOM STREAMS
# =============================================================================

def _hash64(*parts: object) -> int:
    h = hashlib.blake2b("\x1f".join(repr(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Same pair, same draws. Distinct pairs seed distinct entropy pools via
    :class:`numpy.random.SeedSequence`, which gives statistically
    independent PCG64 generators.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def derive(self, *labels: object) -> "RngStream":
        """Child stream keyed by arbitrary hashable labels (ints, strings)."""
        return RngStream(self.seed, _hash64(self.stream_id, *labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=[self.seed, self.stream_id])
        return np.random.Generator(np.random.PCG64(ss))

    def int_seed(self) -> int:
        """A 63-bit integer seed for consumers that need a plain int (numba kernels)."""
        return _hash64(self.seed, self.stream_id, "int") >> 1


def as_stream(rng: RngStream | int | None) -> RngStream:
    if rng is None:
        return RngStream(0)
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


# =============================================================================
# DATASET
# =============================================================================

class TreatmentKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class ModelKind(str, Enum):
    PLR = "plr"
    IRM = "irm"


class Scheme(str, Enum):
    FULL_SAMPLE = "full_sample"
    SPLIT_SAMPLE = "split_sample"
    ON_FOLDS = "on_folds"


def _frozen(a: ArrayLike, ndim: int, name: str) -> NDArray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise InvalidArgumentError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Observed data ``W = (Y, D, X)``.

    Arrays are copied and made read-only at construction, so instances
    can be shared freely between workers.
    """

    y: NDArray
    d: NDArray
    x: NDArray
    treatment_kind: TreatmentKind = TreatmentKind.CONTINUOUS
    check_classes: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        y = _frozen(self.y, 1, "y")
        d = _frozen(self.d, 1, "d")
        x = _frozen(self.x, 2, "x")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "treatment_kind", TreatmentKind(self.treatment_kind))
        n = y.shape[0]
        if d.shape[0] != n or x.shape[0] != n:
            raise InvalidArgumentError(
                f"length mismatch: y={n}, d={d.shape[0]}, x rows={x.shape[0]}"
            )
        if x.shape[1] < 1:
            raise InvalidArgumentError("x needs at least one column")
        for name, arr in (("y", y), ("d", d), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} contains non-finite values")
        if self.treatment_kind is TreatmentKind.BINARY:
            if not np.all((d == 0.0) | (d == 1.0)):
                raise InvalidArgumentError("binary treatment must be exactly 0 or 1")
            if self.check_classes and (d.min() == d.max()):
                raise InvalidArgumentError("binary treatment needs both classes present")
        if self.check_classes and n < 2:
            raise InvalidArgumentError("a dataset needs at least 2 rows")

    @classmethod
    def from_arrays(cls, y: ArrayLike, d: ArrayLike, x: ArrayLike,
                    treatment_kind: TreatmentKind | str | None = None) -> "Dataset":
        """Build a dataset, inferring a binary treatment when D is 0/1 valued."""
        if treatment_kind is None:
            dd = np.asarray(d, dtype=float)
            binary = dd.size > 0 and np.all((dd == 0.0) | (dd == 1.0)) and dd.min() != dd.max()
            treatment_kind = TreatmentKind.BINARY if binary else TreatmentKind.CONTINUOUS
        return cls(y=y, d=d, x=x, treatment_kind=TreatmentKind(treatment_kind))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def binary(self) -> bool:
        return self.treatment_kind is TreatmentKind.BINARY


@dataclass(frozen=True)
class DgpTruth:
    """Ground truth attached to a synthetic :class:`Dataset`."""

    theta0: float
    ell0: NDArray
    m0: NDArray
    g0_0: NDArray
    g0_1: NDArray
    eps: NDArray
    v: NDArray

    def __post_init__(self) -> None:
        n = None
        for name in ("ell0", "m0", "g0_0", "g0_1", "eps", "v"):
            arr = _frozen(getattr(self, name), 1, name)
            object.__setattr__(self, name, arr)
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise InvalidArgumentError(f"truth field {name} has length {arr.shape[0]} != {n}")

    @property
    def n(self) -> int:
        return int(self.m0.shape[0])


# =============================================================================
# PARTITIONS
# =============================================================================

@dataclass(frozen=True)
class FoldPartition:
    """K disjoint index sets covering ``{0, ..., n-1}``."""

    folds: tuple[NDArray, ...]
    n: int
    seed: int = 0

    def __post_init__(self) -> None:
        folds = []
        for f in self.folds:
            arr = np.array(f, dtype=np.int64)
            arr.setflags(write=False)
            folds.append(arr)
        object.__setattr__(self, "folds", tuple(folds))

    @property
    def k(self) -> int:
        return len(self.folds)

    def complement(self, k: int) -> NDArray:
        """Training indices ``I_k^C`` in ascending order."""
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[k]] = False
        return np.flatnonzero(mask)

    def fold_of(self) -> NDArray:
        out = np.empty(self.n, dtype=np.int64)
        for k, f in enumerate(self.folds):
            out[f] = k
        return out

    def is_valid(self) -> bool:
        if not self.folds:
            return False
        allidx = np.concatenate(self.folds)
        return allidx.size == self.n and np.array_equal(np.sort(allidx), np.arange(self.n))


def make_kfold(n: int, k: int, rng: RngStream) -> FoldPartition:
    """Shuffled K-fold partition with fold sizes differing by at most one."""
    if k < 2 or k > n:
        raise InvalidArgumentError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = rng.generator().permutation(n)
    return FoldPartition(tuple(np.array_split(perm, k)), n=n, seed=rng.seed)


def make_stratified_kfold(d: ArrayLike, k: int, rng: RngStream) -> FoldPartition:
    """K-fold partition dealing each treatment class round-robin over folds.

    Per-class counts differ by at most one across folds. The second class
    continues the deal where the first stopped so total fold sizes stay
    balanced too.
    """
    d = np.asarray(d, dtype=float)
    if k < 2 or k > d.size:
        raise InvalidArgumentError(f"need 2 <= k <= n, got k={k}, n={d.size}")
    if not np.all((d == 0.0) | (d == 1.0)):
        raise InvalidArgumentError("stratification needs a 0/1 treatment")
    gen = rng.generator()
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in (0.0, 1.0):
        members = np.flatnonzero(d == cls)
        if members.size < k:
            raise StratificationError(
                f"class {int(cls)} has {members.size} members, fewer than k={k}"
            )
        members = gen.permutation(members)
        for j, idx in enumerate(members):
            buckets[(offset + j) % k].append(int(idx))
        offset = (offset + members.size) % k
    folds = tuple(np.array(gen.permutation(b), dtype=np.int64) for b in buckets)
    return FoldPartition(folds, n=int(d.size), seed=rng.seed)


def split_half(n: int, rng: RngStream) -> tuple[NDArray, NDArray]:
    """Disjoint (tune, estimate) index sets of sizes ceil(n/2) and floor(n/2)."""
    if n < 4:
        raise InvalidArgumentError(f"split_half needs n >= 4, got {n}")
    perm = rng.generator().permutation(n)
    cut = math.ceil(n / 2)
    return perm[:cut].astype(np.int64), perm[cut:].astype(np.int64)


def subset(data: Dataset, idx: Iterable[int]) -> Dataset:
    """Rows of ``data`` in the order given by ``idx``.

    The both-classes rule is not re-checked here; consumers that need
    both treatment classes check it themselves.
    """
    idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
    if idx.size == 0:
        raise InvalidArgumentError("subset index set must be nonempty")
    if idx.min() < 0 or idx.max() >= data.n:
        raise InvalidArgumentError(f"subset index out of range for n={data.n}")
    return Dataset(y=data.y[idx], d=data.d[idx], x=data.x[idx],
                   treatment_kind=data.treatment_kind, check_classes=False)


# =============================================================================
# CSV INGESTION
# =============================================================================

def read_csv(path: str | Path, treatment_kind: TreatmentKind | str | None = None) -> Dataset:
    """Load a dataset with header ``y, d, x1, ..., xp``.

    Any unparsable cell aborts with its 1-based data row and column name.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidArgumentError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "y" or header[1] != "d":
            raise InvalidArgumentError(f"{path}: header must start with y,d,x1 (got {header[:3]})")
        expected = [f"x{j}" for j in range(1, len(header) - 1)]
        if header[2:] != expected:
            raise InvalidArgumentError(f"{path}: covariate columns must be named x1..x{len(expected)}")
        rows = []
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidArgumentError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise InvalidArgumentError(
                        f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise InvalidArgumentError(f"{path}: no data rows")
    arr = np.array(rows)
    return Dataset.from_arrays(arr[:, 0], arr[:, 1], arr[:, 2:], treatment_kind)


def write_csv(data: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = ["y", "d"] + [f"x{j}" for j in range(1, data.p + 1)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            w.writerow([repr(float(data.y[i])), repr(float(data.d[i]))]
                       + [repr(float(v)) for v in data.x[i]])
