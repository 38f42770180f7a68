"""Bag/instance data model, synthetic bag generator, pseudo-bag partitioning,
and the line-oriented JSON dataset format.

Synthetic bags emulate the weakly-labeled regime: a bag is positive iff at
least one of its instances was drawn from the positive blob, and only the
bag-level label is ever visible to training.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class DatasetParseError(ValueError):
    """Malformed dataset file; carries the 1-based offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetSchemaError(ValueError):
    """Structurally valid file whose records contradict the manifest."""


# Features are stored with 9 significant digits; quantizing at generation
# time makes save/load an exact round trip.
def _quantize(x: float) -> float:
    return float(f"{x:.9g}")


_quantize_vec = np.vectorize(_quantize, otypes=[np.float64])


@dataclass(eq=False)
class Instance:
    """One element of a bag. `latent_positive` is generator-side ground truth,
    present only for synthetic data and never serialized."""

    features: np.ndarray
    latent_positive: bool | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).ravel()


@dataclass(eq=False)
class Bag:
    id: str
    instances: list[Instance]
    label: np.ndarray  # soft label over C classes

    def __post_init__(self):
        if len(self.instances) < 1:
            raise ValueError(f"bag {self.id!r} has no instances")
        self.label = np.asarray(self.label, dtype=np.float64).ravel()
        if (self.label < -1e-12).any() or (self.label > 1 + 1e-12).any():
            raise ValueError(f"bag {self.id!r} has label entries outside [0, 1]")
        if abs(self.label.sum() - 1.0) > 1e-9:
            raise ValueError(f"bag {self.id!r} label does not sum to 1")

    def __len__(self) -> int:
        return len(self.instances)


def features_matrix(bag) -> np.ndarray:
    """K x d matrix of a bag's instance features."""
    return np.stack([inst.features for inst in bag.instances])


@dataclass
class Dataset:
    bags: list[Bag]
    d_raw: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bitwise equality on ids, labels, and features."""
    if (a.d_raw, a.num_classes, len(a)) != (b.d_raw, b.num_classes, len(b)):
        return False
    for x, y in zip(a.bags, b.bags):
        if x.id != y.id or not np.array_equal(x.label, y.label):
            return False
        if len(x) != len(y):
            return False
        for ix, iy in zip(x.instances, y.instances):
            if not np.array_equal(ix.features, iy.features):
                return False
    return True


@dataclass
class PseudoBagPartition:
    """Balanced random split of a bag's instance indices into n groups."""

    bag_id: str
    groups: list[list[int]]

    @property
    def num_empty(self) -> int:
        return sum(1 for g in self.groups if not g)


def partition_pseudobags(bag, n: int, rng: np.random.Generator) -> PseudoBagPartition:
    """Uniformly random partition into n groups with sizes differing by <= 1.

    Bags smaller than n yield singleton groups plus empty ones (flagged via
    `num_empty`); indices are sorted within each group.
    """
    if n < 1:
        raise ValueError(f"pseudo-bag count must be >= 1, got {n}")
    k = len(bag.instances)
    order = rng.permutation(k)
    base, extra = divmod(k, n)
    groups: list[list[int]] = []
    start = 0
    for g in range(n):
        size = base + (1 if g < extra else 0)
        groups.append(sorted(int(i) for i in order[start:start + size]))
        start += size
    return PseudoBagPartition(bag.id, groups)


@dataclass
class SyntheticSpec:
    """Parameters of the two-Gaussian-blob bag generator.

    `rho` is the positive-instance ratio inside positive bags; `delta` is the
    distance between the class means; features get isotropic noise of scale
    `noise`.
    """

    num_bags: int
    instances_per_bag: int | tuple[int, int] = 50
    d_raw: int = 16
    rho: float = 0.10
    delta: float = 1.0
    noise: float = 1.0
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_bags < 1:
            raise ValueError(f"num_bags must be >= 1, got {self.num_bags}")
        if self.d_raw < 1:
            raise ValueError(f"d_raw must be >= 1, got {self.d_raw}")
        if not (0.0 < self.rho <= 1.0):
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not (0.0 <= self.positive_fraction <= 1.0):
            raise ValueError(
                f"positive_fraction must be in [0, 1], got {self.positive_fraction}"
            )
        k = self.instances_per_bag
        if isinstance(k, int):
            if k < 1:
                raise ValueError(f"instances_per_bag must be >= 1, got {k}")
        else:
            lo, hi = k
            if lo < 1 or hi < lo:
                raise ValueError(f"bad instances_per_bag range {k}")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset: negative bags hold only negative-blob
    instances, positive bags hold ceil(rho * K) positive-blob instances."""
    rng = np.random.default_rng(spec.seed)
    d = spec.d_raw
    # class means separated by exactly `delta` along the diagonal direction
    half = spec.delta / (2.0 * math.sqrt(d))
    mean_pos = np.full(d, half)
    mean_neg = np.full(d, -half)

    num_pos_bags = int(round(spec.positive_fraction * spec.num_bags))
    bags: list[Bag] = []
    for b in range(spec.num_bags):
        positive = b < num_pos_bags
        if isinstance(spec.instances_per_bag, int):
            k = spec.instances_per_bag
        else:
            lo, hi = spec.instances_per_bag
            k = int(rng.integers(lo, hi + 1))
        n_pos = math.ceil(spec.rho * k) if positive else 0
        flags = np.zeros(k, dtype=bool)
        flags[:n_pos] = True
        rng.shuffle(flags)
        instances = []
        for flag in flags:
            mean = mean_pos if flag else mean_neg
            feats = mean + spec.noise * rng.standard_normal(d)
            instances.append(Instance(_quantize_vec(feats), latent_positive=bool(flag)))
        label = np.array([0.0, 1.0]) if positive else np.array([1.0, 0.0])
        bags.append(Bag(id=f"bag{b:04d}", instances=instances, label=label))
    return Dataset(bags=bags, d_raw=d, num_classes=2)


def save_dataset(ds: Dataset, path) -> None:
    """Write the line-oriented JSON format: manifest line, then one record
    per bag with features at 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        manifest = {"d_raw": ds.d_raw, "C": ds.num_classes, "count": len(ds.bags)}
        fh.write(json.dumps(manifest) + "\n")
        for bag in ds.bags:
            record = {
                "id": bag.id,
                "label": [float(v) for v in bag.label],
                "features": [
                    [_quantize(v) for v in inst.features] for inst in bag.instances
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a dataset file; raises DatasetParseError (with line number) on
    malformed or truncated input, DatasetSchemaError on manifest mismatches."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("missing manifest", 1)
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"bad manifest: {exc.msg}", 1) from exc
    for key in ("d_raw", "C", "count"):
        if key not in manifest:
            raise DatasetParseError(f"manifest missing {key!r}", 1)
    d_raw = int(manifest["d_raw"])
    num_classes = int(manifest["C"])
    count = int(manifest["count"])
    if len(lines) - 1 < count:
        raise DatasetParseError(
            f"truncated file: manifest promises {count} records, found {len(lines) - 1}",
            len(lines) + 1,
        )
    if len(lines) - 1 > count:
        raise DatasetParseError(
            f"trailing data: manifest promises {count} records, found {len(lines) - 1}",
            count + 2,
        )
    bags = []
    for lineno, raw in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"bad record: {exc.msg}", lineno) from exc
        try:
            bag_id = rec["id"]
            label = np.asarray(rec["label"], dtype=np.float64)
            feats = rec["features"]
        except (KeyError, TypeError) as exc:
            raise DatasetParseError(f"bad record structure: {exc}", lineno) from exc
        if label.size != num_classes:
            raise DatasetSchemaError(
                f"line {lineno}: label length {label.size} != C={num_classes}"
            )
        instances = []
        for row in feats:
            vec = np.asarray(row, dtype=np.float64)
            if vec.size != d_raw:
                raise DatasetSchemaError(
                    f"line {lineno}: feature length {vec.size} != d_raw={d_raw}"
                )
            instances.append(Instance(vec))
        bags.append(Bag(id=bag_id, instances=instances, label=label))
    return Dataset(bags=bags, d_raw=d_raw, num_classes=num_classes)


def _allocate(total: int, fractions) -> list[int]:
    # largest-remainder allocation; ties broken by split order
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    short = total - sum(counts)
    remainders = sorted(
        range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def split_dataset(ds: Dataset, fractions, seed: int):
    """Stratified (by hard bag label) split into train/val/test.

    Fractions must be non-negative and sum to 1. Strata smaller than the
    number of non-empty splits get a best-effort assignment with a warning.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError(f"expected 3 fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1: {fractions}")

    rng = np.random.default_rng(seed)
    strata: dict[int, list[Bag]] = {}
    for bag in ds.bags:
        strata.setdefault(int(np.argmax(bag.label)), []).append(bag)

    parts: tuple[list[Bag], list[Bag], list[Bag]] = ([], [], [])
    wanted = sum(1 for f in fractions if f > 0)
    for cls in sorted(strata):
        members = strata[cls]
        order = rng.permutation(len(members))
        if len(members) < wanted:
            warnings.warn(
                f"stratum {cls} has {len(members)} bags for {wanted} splits; "
                "assigning best-effort"
            )
        counts = _allocate(len(members), fractions)
        start = 0
        for part, c in zip(parts, counts):
            part.extend(members[i] for i in order[start:start + c])
            start += c
    return tuple(
        Dataset(bags=part, d_raw=ds.d_raw, num_classes=ds.num_classes)
        for part in parts
    )
