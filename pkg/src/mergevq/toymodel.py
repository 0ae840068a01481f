"""Random-weight causal transformer used as a stand-in AR generator.

Inputs are ``(kind, id)`` pairs: image tokens (``"image"``), the class token
(``"class"``), the merge-instruction token (``"merge"``) and position
instructions (``"pos"``) for random-order decoding. Each kind has its own
embedding table; a learned absolute position embedding is added on top.

With ``content_kv=True`` (the default) every layer computes keys and values
from the input's content embedding rather than from the residual stream, so
equal inputs yield equal cache rows regardless of where they occur. That
property is what makes duplicate collapsing with a ``log s`` bias lossless.
With ``content_kv=False`` the model is an ordinary pre-norm transformer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomStream, attention64, layer_norm, softmax
from .tome import LayerWeights

KINDS = ("image", "class", "merge", "pos")
DEFAULT_MAX_BYTES = 64 * 2**20


@dataclass
class ToyARModel:
    vocab: int
    dim: int
    l_max: int
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    cls_emb: np.ndarray
    merge_emb: np.ndarray
    pos_instr_emb: np.ndarray
    layers: list[LayerWeights]
    head: np.ndarray
    content_kv: bool = True
    _f64: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def table(self, kind: str) -> np.ndarray:
        tables = {
            "image": self.tok_emb,
            "class": self.cls_emb,
            "merge": self.merge_emb,
            "pos": self.pos_instr_emb,
        }
        if kind not in tables:
            raise ValueError(f"unknown input kind {kind!r}")
        return tables[kind]

    def content(self, kind: str, ident: int) -> np.ndarray:
        t = self.table(kind)
        if not 0 <= ident < t.shape[0]:
            raise ValueError(f"{kind} id {ident} outside [0, {t.shape[0]})")
        return t[ident].astype(np.float64)

    def weights64(self, i: int):
        if i not in self._f64:
            w = self.layers[i]
            self._f64[i] = tuple(m.astype(np.float64) for m in (w.wq, w.wk, w.wv, w.wo, w.w1, w.w2))
        return self._f64[i]


def param_bytes(vocab, embed_dim, layers, l_max, n_classes=16, n_merge=16) -> int:
    per_layer = 4 * embed_dim * embed_dim + 2 * embed_dim * 2 * embed_dim
    tables = (2 * vocab + 2 * l_max + n_classes + n_merge) * embed_dim
    return 4 * (tables + layers * per_layer)


def init_model(
    seed: int,
    vocab: int = 64,
    embed_dim: int = 64,
    layers: int = 4,
    l_max: int = 256,
    n_classes: int = 16,
    n_merge: int = 16,
    content_kv: bool = True,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> ToyARModel:
    for name, v in (("vocab", vocab), ("embed_dim", embed_dim), ("layers", layers),
                    ("l_max", l_max), ("n_classes", n_classes), ("n_merge", n_merge)):
        if v < 1:
            raise ValueError(f"init_model: {name} must be >= 1")
    if vocab < 2:
        raise ValueError("init_model: vocab must be >= 2")
    need = param_bytes(vocab, embed_dim, layers, l_max, n_classes, n_merge)
    if need > max_bytes:
        raise ValueError(
            f"init_model: parameters need {need / 2**20:.1f} MiB, above the {max_bytes / 2**20:.1f} MiB bound"
        )
    rng = RandomStream(seed)
    d = embed_dim
    return ToyARModel(
        vocab=vocab,
        dim=d,
        l_max=l_max,
        tok_emb=rng.matrix(vocab, d),
        pos_emb=rng.matrix(l_max, d, 0.5),
        cls_emb=rng.matrix(n_classes, d),
        merge_emb=rng.matrix(n_merge, d),
        pos_instr_emb=rng.matrix(l_max, d),
        layers=[LayerWeights.init(d, rng) for _ in range(layers)],
        head=rng.matrix(d, vocab, 1.0 / math.sqrt(d)),
        content_kv=content_kv,
    )


class KvCache:
    """Per-layer key/value rows with a size counter and raster position per row."""

    def __init__(self, model: ToyARModel, capacity: int | None = None):
        cap = capacity or model.l_max
        self.n_layers = model.n_layers
        self.keys = np.zeros((model.n_layers, cap, model.dim))
        self.values = np.zeros((model.n_layers, cap, model.dim))
        self.sizes = np.zeros(cap, dtype=np.int64)
        self.positions = np.full(cap, -1, dtype=np.int64)
        self.length = 0

    def __len__(self):
        return self.length

    @property
    def capacity(self) -> int:
        return self.sizes.size

    def bias(self, n: int) -> np.ndarray:
        return np.log(self.sizes[:n].astype(np.float64))

    def represented(self) -> int:
        return int(self.sizes[: self.length].sum())


def forward_step(
    model: ToyARModel,
    ident: int,
    position: int,
    cache: KvCache,
    kind: str = "image",
    merge_into: int | None = None,
    compensate: bool = True,
) -> np.ndarray:
    """Feed one input and return next-token logits (float64, length V).

    By default the input's K/V rows are appended to ``cache``. With
    ``merge_into`` set, no row is added: the input is treated as a duplicate
    of that cache row, whose size is incremented when ``compensate`` is true
    (attention then sees it with bias ``log s``) and left alone otherwise.
    """
    if not 0 <= position < model.l_max:
        raise ValueError(f"forward_step: position {position} outside [0, {model.l_max})")
    n = cache.length
    if n and cache.positions[n - 1] >= position:
        raise ValueError(f"forward_step: position {position} not after cached {cache.positions[n - 1]}")
    if merge_into is None:
        if n >= cache.capacity:
            raise ValueError("forward_step: cache is full")
        row, n_after = n, n + 1
    else:
        if not 0 <= merge_into < n:
            raise ValueError(f"forward_step: merge_into={merge_into} not a cached row (have {n})")
        row, n_after = None, n
        if compensate:
            cache.sizes[merge_into] += 1
    if n_after == 0:
        raise ValueError("forward_step: nothing to attend to")

    content = model.content(kind, ident)
    h = content + model.pos_emb[position].astype(np.float64)
    if row is not None:
        cache.sizes[row] = 1
        cache.positions[row] = position
    bias = cache.bias(n_after)
    for i in range(model.n_layers):
        wq, wk, wv, wo, w1, w2 = model.weights64(i)
        hn = layer_norm(h)
        if row is not None:
            src = layer_norm(content) if model.content_kv else hn
            cache.keys[i, row] = src @ wk
            cache.values[i, row] = src @ wv
        a = attention64((hn @ wq)[None, :], cache.keys[i, :n_after], cache.values[i, :n_after], bias=bias)[0]
        h = h + a @ wo
        h = h + np.maximum(layer_norm(h) @ w1, 0.0) @ w2
    cache.length = n_after
    return layer_norm(h) @ model.head.astype(np.float64)


def full_forward(model: ToyARModel, inputs, start: int = 0, mask=None) -> np.ndarray:
    """Whole-sequence causal forward over ``inputs`` = [(kind, id), ...].

    Positions run from ``start``. ``mask`` overrides the causal mask (it must
    be lower-triangular). Returns logits for every input, shape (n, V).
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("full_forward: no inputs")
    if start + n > model.l_max:
        raise ValueError(f"full_forward: {n} inputs from {start} exceed l_max={model.l_max}")
    content = np.stack([model.content(kind, ident) for kind, ident in inputs])
    h = content + model.pos_emb[start:start + n].astype(np.float64)
    causal = np.tril(np.ones((n, n), dtype=bool)) if mask is None else np.asarray(mask, dtype=bool)
    for i in range(model.n_layers):
        wq, wk, wv, wo, w1, w2 = model.weights64(i)
        hn = layer_norm(h)
        src = layer_norm(content) if model.content_kv else hn
        h = h + attention64(hn @ wq, src @ wk, src @ wv, mask=causal) @ wo
        h = h + np.maximum(layer_norm(h) @ w1, 0.0) @ w2
    return layer_norm(h) @ model.head.astype(np.float64)


def choose_token(logits, temperature: float | None = None, rng: RandomStream | None = None) -> int:
    """Greedy argmax (lowest id on ties) or temperature sampling via ``rng``."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature is None:
        return int(np.argmax(logits))
    if rng is None:
        raise ValueError("choose_token: sampling needs an rng")
    p = softmax(logits, temperature)
    return int(min(np.searchsorted(np.cumsum(p), rng.uniform(1)[0], side="right"), p.size - 1))

