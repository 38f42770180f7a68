"""MIL backbone: instance embedder MLP, pooling aggregators, bag classifier.

Every aggregator realizes the bag representation as H = sum_k a_k h_k with
normalized scores a: mean pooling uses a_k = 1/K, max pooling a one-hot at
the instance with the highest positive-class logit, and gated attention a
softmax over omega^T (tanh(V1 h_k) * sigm(V2 h_k)). Backward passes are
hand-derived; tests check them against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gradcore import (
    Param,
    _sigmoid,
    activation_backward,
    activation_forward,
    linear_backward,
    linear_forward,
    softmax,
    softmax_rows,
)

BACKBONES = ("mean", "max", "gated_attention")


def init_uniform(param: Param, rng: np.random.Generator, fan_in: int) -> None:
    scale = 1.0 / math.sqrt(fan_in)
    param.value[:] = rng.uniform(-scale, scale, size=param.value.shape)


class Embedder:
    """MLP mapping raw instance features to M-dim representations.

    `dims` runs input -> hidden... -> M; hidden layers use `activation`, the
    output layer is linear.
    """

    def __init__(self, dims: Sequence[int], activation: str = "tanh"):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2:
            raise ValueError(f"embedder needs at least input and output dims: {dims}")
        self.activation = activation
        self.layers: list[tuple[Param, Param]] = []
        for i, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            w = Param(np.zeros((din, dout)), name=f"emb.l{i}.w")
            b = Param(np.zeros((1, dout)), name=f"emb.l{i}.b")
            self.layers.append((w, b))

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    @property
    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer]

    def init(self, rng: np.random.Generator) -> None:
        for w, b in self.layers:
            fan_in = w.value.shape[0]
            init_uniform(w, rng, fan_in)
            init_uniform(b, rng, fan_in)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"embedder expects (K, {self.in_dim}) input, got {x.shape}"
            )
        cache = []
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            z = linear_forward(h, w, b)
            cache.append((h, z))
            h = activation_forward(z, self.activation) if i < last else z
        return h, cache

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        g = upstream
        last = len(self.layers) - 1
        for i in reversed(range(len(self.layers))):
            x, z = cache[i]
            if i < last:
                g = activation_backward(z, self.activation, g)
            g = linear_backward(x, self.layers[i][0], self.layers[i][1], g)
        return g


class BagClassifier:
    """Single linear layer mapping a bag representation to class logits."""

    def __init__(self, embed_dim: int, num_classes: int):
        self.w = Param(np.zeros((embed_dim, num_classes)), name="clf.w")
        self.b = Param(np.zeros((1, num_classes)), name="clf.b")

    @property
    def params(self) -> list[Param]:
        return [self.w, self.b]

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.w.value.shape[0]
        init_uniform(self.w, rng, fan_in)
        init_uniform(self.b, rng, fan_in)

    def logits(self, h: np.ndarray) -> np.ndarray:
        return linear_forward(h, self.w, self.b)

    def probs(self, h: np.ndarray) -> np.ndarray:
        return softmax_rows(self.logits(h))

    def backward(self, h: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        return linear_backward(h, self.w, self.b, dlogits)


class MeanPooling:
    kind = "mean"
    params: list[Param] = []

    def init(self, rng) -> None:
        pass

    def forward(self, h: np.ndarray, classifier: BagClassifier | None = None):
        k = h.shape[0]
        if k == 0:
            raise ValueError("cannot aggregate an empty bag")
        a = np.full(k, 1.0 / k)
        return h.mean(axis=0, keepdims=True), a, k

    def backward(self, cache, d_bag: np.ndarray) -> np.ndarray:
        k = cache
        return np.repeat(d_bag / k, k, axis=0)


class MaxPooling:
    """One-hot attention at the instance with the highest positive-class
    logit under the current classifier; the selection itself carries no
    gradient."""

    kind = "max"
    params: list[Param] = []

    def __init__(self, positive_class: int = 1):
        self.positive_class = positive_class

    def init(self, rng) -> None:
        pass

    def forward(self, h: np.ndarray, classifier: BagClassifier | None = None):
        if h.shape[0] == 0:
            raise ValueError("cannot aggregate an empty bag")
        if classifier is None:
            raise ValueError("max pooling needs the classifier to rank instances")
        logits = h @ classifier.w.value[:, self.positive_class]
        logits += classifier.b.value[0, self.positive_class]
        k_star = int(np.argmax(logits))
        a = np.zeros(h.shape[0])
        a[k_star] = 1.0
        return h[k_star:k_star + 1].copy(), a, (h.shape[0], k_star)

    def backward(self, cache, d_bag: np.ndarray) -> np.ndarray:
        k, k_star = cache
        dh = np.zeros((k, d_bag.shape[1]))
        dh[k_star] = d_bag[0]
        return dh


class GatedAttention:
    """Tanh/sigmoid-gated attention with softmax-normalized scores."""

    kind = "gated_attention"

    def __init__(self, embed_dim: int, attn_dim: int):
        self.embed_dim = embed_dim
        self.attn_dim = attn_dim
        self.v1 = Param(np.zeros((attn_dim, embed_dim)), name="attn.v1")
        self.v2 = Param(np.zeros((attn_dim, embed_dim)), name="attn.v2")
        self.w = Param(np.zeros((attn_dim, 1)), name="attn.w")

    @property
    def params(self) -> list[Param]:
        return [self.v1, self.v2, self.w]

    def init(self, rng: np.random.Generator) -> None:
        init_uniform(self.v1, rng, self.embed_dim)
        init_uniform(self.v2, rng, self.embed_dim)
        init_uniform(self.w, rng, self.attn_dim)

    def gate_scores(self, h: np.ndarray):
        t = np.tanh(h @ self.v1.value.T)
        s = _sigmoid(h @ self.v2.value.T)
        g = t * s
        e = (g @ self.w.value).ravel()
        return e, (t, s, g)

    def forward(self, h: np.ndarray, classifier: BagClassifier | None = None):
        if h.shape[0] == 0:
            raise ValueError("cannot aggregate an empty bag")
        e, (t, s, g) = self.gate_scores(h)
        a = softmax(e)
        bag = a[None, :] @ h
        return bag, a, (h, t, s, g, a)

    def backward(self, cache, d_bag: np.ndarray) -> np.ndarray:
        h, t, s, g, a = cache
        da = (h @ d_bag.T).ravel()
        de = a * (da - float(a @ da))       # softmax Jacobian
        self.w.grad += (g.T @ de)[:, None]
        dg = np.outer(de, self.w.value.ravel())
        dt = dg * s
        ds = dg * t
        du = dt * (1.0 - t * t)
        dv = ds * s * (1.0 - s)
        self.v1.grad += du.T @ h
        self.v2.grad += dv.T @ h
        return a[:, None] * d_bag + du @ self.v1.value + dv @ self.v2.value


@dataclass
class ModelConfig:
    d_raw: int
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 32
    attn_dim: int = 16
    num_classes: int = 2
    backbone: str = "gated_attention"
    activation: str = "tanh"
    positive_class: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.backbone not in BACKBONES:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}"
            )


@dataclass
class BagForwardTrace:
    """Everything produced by one bag forward pass, including the caches the
    backward pass needs."""

    instance_reps: np.ndarray    # K x M
    attention: np.ndarray        # K, sums to 1
    bag_rep: np.ndarray          # 1 x M
    probs: np.ndarray            # C, class distribution
    logits: np.ndarray           # 1 x C
    embed_cache: object = None
    agg_cache: object = None


def _make_aggregator(config: ModelConfig):
    if config.backbone == "mean":
        return MeanPooling()
    if config.backbone == "max":
        return MaxPooling(config.positive_class)
    return GatedAttention(config.embed_dim, config.attn_dim)


class MilModel:
    """Embedder + aggregator + bag classifier with explicit phase boundaries:
    the trainer chooses which parameter group an optimizer touches."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.embedder = Embedder(
            (config.d_raw, *config.hidden, config.embed_dim), config.activation
        )
        self.aggregator = _make_aggregator(config)
        self.classifier = BagClassifier(config.embed_dim, config.num_classes)

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "MilModel":
        model = cls(config)
        model.init(rng)
        return model

    def init(self, rng: np.random.Generator) -> None:
        self.embedder.init(rng)
        self.aggregator.init(rng)
        self.classifier.init(rng)

    def init_head(self, rng: np.random.Generator) -> None:
        self.aggregator.init(rng)
        self.classifier.init(rng)

    @property
    def head_params(self) -> list[Param]:
        return [*self.aggregator.params, *self.classifier.params]

    @property
    def all_params(self) -> list[Param]:
        return [*self.embedder.params, *self.head_params]

    def head_forward(self, h: np.ndarray):
        bag_rep, a, agg_cache = self.aggregator.forward(h, self.classifier)
        logits = self.classifier.logits(bag_rep)
        probs = softmax(logits.ravel())
        return bag_rep, a, logits, probs, agg_cache

    def head_backward(self, h: np.ndarray, bag_rep: np.ndarray,
                      agg_cache, dlogits: np.ndarray) -> np.ndarray:
        d_bag = self.classifier.backward(bag_rep, dlogits)
        return self.aggregator.backward(agg_cache, d_bag)

    def bag_forward(self, x: np.ndarray) -> BagForwardTrace:
        h, embed_cache = self.embedder.forward(x)
        bag_rep, a, logits, probs, agg_cache = self.head_forward(h)
        return BagForwardTrace(
            instance_reps=h, attention=a, bag_rep=bag_rep, probs=probs,
            logits=logits, embed_cache=embed_cache, agg_cache=agg_cache,
        )

    def bag_backward(self, trace: BagForwardTrace, dlogits: np.ndarray,
                     train_embedder: bool = False) -> None:
        dh = self.head_backward(
            trace.instance_reps, trace.bag_rep, trace.agg_cache, dlogits
        )
        if train_embedder:
            self.embedder.backward(trace.embed_cache, dh)


def _features(bag) -> np.ndarray:
    return np.stack([inst.features for inst in bag.instances])


def embed(instances, embedder: Embedder) -> np.ndarray:
    """K x M representations for a feature matrix or a list of instances."""
    if isinstance(instances, np.ndarray):
        x = instances
    else:
        x = np.stack([inst.features for inst in instances])
    h, _ = embedder.forward(x)
    return h


def aggregate(h: np.ndarray, aggregator, classifier: BagClassifier | None = None):
    """Collapse instance representations into (H, attention scores)."""
    bag_rep, a, _ = aggregator.forward(h, classifier)
    return bag_rep, a


def classify(bag_rep: np.ndarray, classifier: BagClassifier) -> np.ndarray:
    """Class distribution for a single bag representation."""
    return softmax(classifier.logits(bag_rep).ravel())


def bag_forward(bag, embedder: Embedder, aggregator,
                classifier: BagClassifier) -> BagForwardTrace:
    """Full forward pass over one bag (or anything with `.instances`)."""
    h, embed_cache = embedder.forward(_features(bag))
    bag_rep, a, agg_cache = aggregator.forward(h, classifier)
    logits = classifier.logits(bag_rep)
    probs = softmax(logits.ravel())
    return BagForwardTrace(
        instance_reps=h, attention=a, bag_rep=bag_rep, probs=probs,
        logits=logits, embed_cache=embed_cache, agg_cache=agg_cache,
    )
