"""Bag-level augmentation: pseudo-bag masking and mix-up of bag pairs.

A single binary mask over the n pseudo-bag slots drives both sources: bag A
keeps the slots where the mask is 1, bag B the slots where it is 0. With a
Beta-sampled coefficient lambda, floor(lambda*n) slots go to B and the rest
to A, so the fused bag always carries exactly n pseudo-bags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bagdata import Bag, Instance, partition_pseudobags


@dataclass
class AugmentConfig:
    n: int = 4                     # pseudo-bags per source bag
    alpha_beta: float = 1.0        # Beta(alpha, alpha) parameter for lambda
    gamma: float = 0.5             # probability of the single-masked-bag branch
    label_mode: str = "lambda_weighted"  # or "kept_fraction"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.alpha_beta <= 0:
            raise ValueError(f"alpha_beta must be > 0, got {self.alpha_beta}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.label_mode not in ("lambda_weighted", "kept_fraction"):
            raise ValueError(f"unknown label_mode: {self.label_mode!r}")


@dataclass
class Provenance:
    source_a: str
    source_b: str | None
    lam: float
    mask: tuple[int, ...]          # per slot: 1 = kept from A, 0 = kept from B
    origins: list = field(default_factory=list)  # (source id, instance index) per instance
    kept_a_groups: int = 0
    kept_b_groups: int = 0


@dataclass(eq=False)
class AugmentedBag:
    id: str
    instances: list[Instance]
    label: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        if len(self.instances) < 1:
            raise ValueError(f"augmented bag {self.id!r} has no instances")
        self.label = np.asarray(self.label, dtype=np.float64).ravel()
        if (self.label < -1e-12).any() or (self.label > 1 + 1e-12).any():
            raise ValueError(f"augmented bag {self.id!r} label outside [0, 1]")
        if abs(self.label.sum() - 1.0) > 1e-9:
            raise ValueError(f"augmented bag {self.id!r} label does not sum to 1")

    def __len__(self) -> int:
        return len(self.instances)


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw lambda ~ Beta(alpha, alpha), strictly inside (0, 1)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    lam = float(rng.beta(alpha, alpha))
    while lam <= 0.0 or lam >= 1.0:  # boundary draws have measure ~0
        lam = float(rng.beta(alpha, alpha))
    return lam


def _draw_mask(n: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    # mask==0 on floor(lam*n) uniformly chosen slots (those go to B)
    zeros = math.floor(lam * n)
    mask = np.ones(n, dtype=np.int64)
    if zeros > 0:
        drop = rng.choice(n, size=zeros, replace=False)
        mask[drop] = 0
    return mask


def _gather(bag, groups, keep_slots) -> tuple[list[Instance], list]:
    instances: list[Instance] = []
    origins: list = []
    for slot in keep_slots:
        for idx in groups[slot]:
            instances.append(bag.instances[idx])
            origins.append((bag.id, idx))
    return instances, origins


def _fallback_nonempty(bag, groups, rng) -> tuple[list[Instance], list, int]:
    # all kept slots were empty; keep one uniformly chosen non-empty group
    nonempty = [i for i, g in enumerate(groups) if g]
    slot = int(rng.choice(nonempty))
    inst, origins = _gather(bag, groups, [slot])
    return inst, origins, slot


def mixup_bags(a: Bag, b: Bag, lam: float, config: AugmentConfig,
               rng: np.random.Generator, partitions=None) -> AugmentedBag:
    """Fuse masked pseudo-bags of two distinct bags.

    Label modes: `lambda_weighted` mixes labels as lam*y_A + (1-lam)*y_B;
    `kept_fraction` weights each label by that source's share of kept slots.
    Fresh partitions are drawn per call unless a fixed pair is supplied.
    """
    if a.id == b.id:
        raise ValueError(f"mixup requires two distinct bags, got {a.id!r} twice")
    n = config.n
    if partitions is None:
        part_a = partition_pseudobags(a, n, rng)
        part_b = partition_pseudobags(b, n, rng)
    else:
        part_a, part_b = partitions
        if len(part_a.groups) != n or len(part_b.groups) != n:
            raise ValueError(
                f"supplied partitions have {len(part_a.groups)}/{len(part_b.groups)} "
                f"groups, config expects {n}"
            )
    mask = _draw_mask(n, lam, rng)
    keep_a = [i for i in range(n) if mask[i] == 1]
    keep_b = [i for i in range(n) if mask[i] == 0]

    inst_a, orig_a = _gather(a, part_a.groups, keep_a)
    inst_b, orig_b = _gather(b, part_b.groups, keep_b)
    instances = inst_a + inst_b
    origins = orig_a + orig_b
    if not instances:
        # both kept sides empty (tiny bags); keep one non-empty group overall
        pool = [(a, part_a.groups, i) for i, g in enumerate(part_a.groups) if g]
        pool += [(b, part_b.groups, i) for i, g in enumerate(part_b.groups) if g]
        src, groups, slot = pool[int(rng.integers(len(pool)))]
        instances, origins = _gather(src, groups, [slot])

    if config.label_mode == "lambda_weighted":
        label = lam * a.label + (1.0 - lam) * b.label
    else:
        label = (len(keep_a) / n) * a.label + (len(keep_b) / n) * b.label

    prov = Provenance(
        source_a=a.id, source_b=b.id, lam=lam, mask=tuple(int(m) for m in mask),
        origins=origins, kept_a_groups=len(keep_a), kept_b_groups=len(keep_b),
    )
    return AugmentedBag(
        id=f"mix({a.id},{b.id})", instances=instances, label=label, provenance=prov,
    )


def masked_single_bag(b: Bag, lam: float, config: AugmentConfig,
                      rng: np.random.Generator, partition=None) -> AugmentedBag:
    """The single-masked-bag branch: keep floor(lam*n) pseudo-bags of `b`,
    labeled y_B. Falls back to one non-empty group if the mask empties the bag."""
    n = config.n
    part = partition_pseudobags(b, n, rng) if partition is None else partition
    mask = _draw_mask(n, lam, rng)
    keep = [i for i in range(n) if mask[i] == 0]
    instances, origins = _gather(b, part.groups, keep)
    if not instances:
        instances, origins, slot = _fallback_nonempty(b, part.groups, rng)
        keep = [slot]
    prov = Provenance(
        source_a=b.id, source_b=None, lam=lam, mask=tuple(int(m) for m in mask),
        origins=origins, kept_a_groups=0, kept_b_groups=len(keep),
    )
    return AugmentedBag(
        id=f"masked({b.id})", instances=instances, label=b.label.copy(), provenance=prov,
    )


def augment_pair(a: Bag, b: Bag, config: AugmentConfig,
                 rng: np.random.Generator, partitions=None) -> AugmentedBag:
    """Sample lambda and either return the masked B (probability gamma) or the
    mix-up fusion of the pair."""
    if a.id == b.id:
        raise ValueError(f"augmentation requires two distinct bags, got {a.id!r} twice")
    lam = sample_lambda(config.alpha_beta, rng)
    if rng.random() < config.gamma:
        return masked_single_bag(b, lam, config, rng,
                                 None if partitions is None else partitions[1])
    return mixup_bags(a, b, lam, config, rng, partitions)
