"""GIN graph encoder over operator graphs, with an explicit reverse pass.

Parameters live in a flat ordered mapping of named numpy arrays. That order is
the checkpoint layout::

    embedding            V x d
    gin{l}.W1, gin{l}.b1 d x d, d      for l = 0..L-1
    gin{l}.W2, gin{l}.b2 d x d, d
    gin{l}.eps           1
    head.W, head.b       d x d, d
"""

from __future__ import annotations

import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .augmentation import MASK_TOKEN, is_wildcard
from .formula_ir import OpgGraph

UNK_TOKEN = "[UNK]"
WILD_TOKEN = "[WILD]"
RESERVED_TOKENS = (UNK_TOKEN, MASK_TOKEN, WILD_TOKEN)
UNK, MASK, WILD = range(3)

HEAD_ORDERS = ("relu_normalize", "normalize_relu")
CHECKPOINT_MAGIC = b"SSEMB1"


@dataclass(frozen=True)
class NodeVocab:
    """Label vocabulary; indices 0..2 are ``[UNK]``, ``[MASK]``, ``[WILD]``."""

    labels: tuple[str, ...]
    min_frequency: int = 11
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.labels[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def index(self, label: str) -> int:
        if is_wildcard(label):
            return WILD
        return self._index.get(label, UNK)


def build_vocab(corpus: Iterable[OpgGraph], min_frequency: int = 11) -> NodeVocab:
    """Keep labels occurring on at least ``min_frequency`` graph nodes.

    Ordering is by descending frequency, ties broken by UTF-8 bytes.
    """
    counts: Counter[str] = Counter()
    n_graphs = 0
    for g in corpus:
        n_graphs += 1
        counts.update(g.labels)
    if n_graphs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [
        lab
        for lab, c in counts.items()
        if c >= min_frequency and lab not in RESERVED_TOKENS and not is_wildcard(lab)
    ]
    kept.sort(key=lambda lab: (-counts[lab], lab.encode("utf-8")))
    return NodeVocab(RESERVED_TOKENS + tuple(kept), min_frequency)


@dataclass
class ModelParams:
    vocab: NodeVocab
    arrays: dict[str, np.ndarray]
    head_order: str = "relu_normalize"

    @property
    def dim(self) -> int:
        return self.arrays["embedding"].shape[1]

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.arrays if k.endswith(".eps"))

    def copy(self, dtype=None) -> ModelParams:
        arrays = {k: (v.astype(dtype) if dtype else v.copy()) for k, v in self.arrays.items()}
        return ModelParams(self.vocab, arrays, self.head_order)


def param_names(n_layers: int) -> list[str]:
    names = ["embedding"]
    for layer in range(n_layers):
        names += [f"gin{layer}.{p}" for p in ("W1", "b1", "W2", "b2", "eps")]
    return names + ["head.W", "head.b"]


def init_params(
    vocab: NodeVocab,
    dim: int = 400,
    n_layers: int = 2,
    rng: np.random.Generator | int | None = 0,
    head_order: str = "relu_normalize",
) -> ModelParams:
    """Random initialisation.

    Embedding rows are uniform in ``[-sqrt(3/d), sqrt(3/d)]``; affine maps use
    fan-in uniform ``[-1/sqrt(d), 1/sqrt(d)]`` for weights and biases; GIN
    epsilons start at 0.
    """
    if dim < 1 or n_layers < 1:
        raise ValueError("dim and n_layers must be positive")
    if head_order not in HEAD_ORDERS:
        raise ValueError(f"head_order must be one of {HEAD_ORDERS}")
    rng = np.random.default_rng(rng)
    a = np.sqrt(3.0 / dim)
    bound = 1.0 / np.sqrt(dim)
    arrays = {"embedding": rng.uniform(-a, a, size=(len(vocab), dim))}
    for layer in range(n_layers):
        arrays[f"gin{layer}.W1"] = rng.uniform(-bound, bound, size=(dim, dim))
        arrays[f"gin{layer}.b1"] = rng.uniform(-bound, bound, size=dim)
        arrays[f"gin{layer}.W2"] = rng.uniform(-bound, bound, size=(dim, dim))
        arrays[f"gin{layer}.b2"] = rng.uniform(-bound, bound, size=dim)
        arrays[f"gin{layer}.eps"] = np.zeros(1)
    arrays["head.W"] = rng.uniform(-bound, bound, size=(dim, dim))
    arrays["head.b"] = rng.uniform(-bound, bound, size=dim)
    return ModelParams(vocab, {k: v.astype(np.float32) for k, v in arrays.items()}, head_order)


class GraphBatch:
    """Disjoint union of graphs: node label ids, symmetric adjacency, graph offsets."""

    def __init__(self, graphs: Sequence[OpgGraph], vocab: NodeVocab):
        if not graphs:
            raise ValueError("empty batch")
        sizes = np.fromiter((g.node_count for g in graphs), dtype=np.int64, count=len(graphs))
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.n_nodes = int(sizes.sum())
        self.label_ids = np.fromiter(
            (vocab.index(lab) for g in graphs for lab in g.labels), dtype=np.int64, count=self.n_nodes
        )
        rows, cols = [], []
        for base, g in zip(self.offsets.tolist(), graphs):
            for p, c, _ in g.edges:
                rows.append(base + p)
                cols.append(base + c)
        rows_a = np.asarray(rows, dtype=np.int64)
        cols_a = np.asarray(cols, dtype=np.int64)
        # undirected message passing; parallel edges are summed
        self.adjacency = sp.csr_matrix(
            (np.ones(2 * len(rows)), (np.concatenate([rows_a, cols_a]), np.concatenate([cols_a, rows_a]))),
            shape=(self.n_nodes, self.n_nodes),
        )
        self.adjacency.sum_duplicates()

    def __len__(self) -> int:
        return len(self.sizes)


def _normalize_rows(v):
    norm = np.sqrt(np.einsum("ij,ij->i", v, v))[:, None]
    return v / np.maximum(norm, 1e-12), norm


def _normalize_rows_backward(z, norm, dz):
    dot = np.einsum("ij,ij->i", z, dz)[:, None]
    return (dz - z * dot) / np.maximum(norm, 1e-12)


def forward(params: ModelParams, batch: GraphBatch, head: bool = False, dtype=np.float64):
    """Run the encoder. Returns ``(h, z, cache)``; ``z`` is None unless ``head``."""
    arr = params.arrays
    A = batch.adjacency
    x = arr["embedding"].astype(dtype, copy=False)[batch.label_ids]
    layers = []
    for layer in range(params.n_layers):
        W1 = arr[f"gin{layer}.W1"].astype(dtype, copy=False)
        W2 = arr[f"gin{layer}.W2"].astype(dtype, copy=False)
        eps = float(arr[f"gin{layer}.eps"][0])
        s = (1.0 + eps) * x + A @ x
        pre = s @ W1 + arr[f"gin{layer}.b1"].astype(dtype, copy=False)
        r = np.maximum(pre, 0.0)
        out = r @ W2 + arr[f"gin{layer}.b2"].astype(dtype, copy=False)
        layers.append((x, s, pre, r))
        x = out
    h = np.add.reduceat(x, batch.offsets, axis=0) / batch.sizes[:, None]
    cache = {"layers": layers, "h": h, "nodes": x}
    if not head:
        return h, None, cache
    u = h @ arr["head.W"].astype(dtype, copy=False) + arr["head.b"].astype(dtype, copy=False)
    if params.head_order == "relu_normalize":
        r = np.maximum(u, 0.0)
        z, norm = _normalize_rows(r)
        cache.update(u=u, head=[("relu", u), ("norm", z, norm)])
    else:
        n1, norm1 = _normalize_rows(u)
        r = np.maximum(n1, 0.0)
        z, norm2 = _normalize_rows(r)
        cache.update(u=u, head=[("norm", n1, norm1), ("relu", n1), ("norm", z, norm2)])
    return h, z, cache


def backward(params: ModelParams, batch: GraphBatch, cache, dh=None, dz=None) -> dict[str, np.ndarray]:
    """Reverse pass of :func:`forward`; returns float64 gradients keyed like ``params.arrays``."""
    arr = params.arrays
    grads: dict[str, np.ndarray] = {}
    h = cache["h"]
    dh = np.zeros_like(h) if dh is None else np.array(dh, dtype=h.dtype)
    if dz is not None:
        g = dz
        for step in reversed(cache["head"]):
            if step[0] == "relu":
                g = g * (step[1] > 0)
            else:
                g = _normalize_rows_backward(step[1], step[2], g)
        grads["head.W"] = h.T @ g
        grads["head.b"] = g.sum(axis=0)
        dh = dh + g @ arr["head.W"].astype(h.dtype).T
    else:
        grads["head.W"] = np.zeros(arr["head.W"].shape)
        grads["head.b"] = np.zeros(arr["head.b"].shape)

    dx = np.repeat(dh / batch.sizes[:, None], batch.sizes, axis=0)
    A = batch.adjacency
    for layer in range(params.n_layers - 1, -1, -1):
        x_in, s, pre, r = cache["layers"][layer]
        W1 = arr[f"gin{layer}.W1"].astype(h.dtype)
        W2 = arr[f"gin{layer}.W2"].astype(h.dtype)
        eps = float(arr[f"gin{layer}.eps"][0])
        grads[f"gin{layer}.W2"] = r.T @ dx
        grads[f"gin{layer}.b2"] = dx.sum(axis=0)
        dpre = (dx @ W2.T) * (pre > 0)
        grads[f"gin{layer}.W1"] = s.T @ dpre
        grads[f"gin{layer}.b1"] = dpre.sum(axis=0)
        ds = dpre @ W1.T
        grads[f"gin{layer}.eps"] = np.array([np.sum(ds * x_in)])
        # adjacency is symmetric, so A^T ds == A ds
        dx = (1.0 + eps) * ds + A @ ds
    demb = np.zeros(arr["embedding"].shape)
    np.add.at(demb, batch.label_ids, dx)
    grads["embedding"] = demb
    return {k: grads[k] for k in arr}


def relu_preactivations(cache) -> list[np.ndarray]:
    """Every array fed into a ReLU during the forward pass (for kink detection)."""
    out = [pre for _, _, pre, _ in cache["layers"]]
    out += [step[1] for step in cache.get("head", []) if step[0] == "relu"]
    return out


@dataclass
class GraphEmbedding:
    h: np.ndarray
    z: np.ndarray | None = None


def encode(g: OpgGraph, params: ModelParams, mode: str = "inference") -> GraphEmbedding:
    if mode not in ("train", "inference"):
        raise ValueError("mode must be 'train' or 'inference'")
    h, z, _ = forward(params, GraphBatch([g], params.vocab), head=mode == "train")
    return GraphEmbedding(h[0], None if z is None else z[0])


def embed_corpus(graphs: Sequence[OpgGraph], params: ModelParams, batch_size: int = 2048) -> np.ndarray:
    """Unit-normalised inference embeddings (pre-head), one row per graph."""
    out = np.empty((len(graphs), params.dim))
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start : start + batch_size]
        h, _, _ = forward(params, GraphBatch(chunk, params.vocab))
        out[start : start + len(chunk)] = h
    out, _ = _normalize_rows(out)
    return out


# ---------------------------------------------------------------------------
# checkpoint format: magic, (V, d, L) u32 LE, head-order byte, labels as
# u32 length + UTF-8 bytes, then tensors as f32 LE row-major in param_names order


def save_checkpoint(params: ModelParams, path_or_file) -> None:
    buf = io.BytesIO()
    V, d = params.arrays["embedding"].shape
    L = params.n_layers
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<III", V, d, L))
    buf.write(struct.pack("<B", HEAD_ORDERS.index(params.head_order)))
    buf.write(struct.pack("<I", params.vocab.min_frequency))
    for lab in params.vocab.labels:
        raw = lab.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    for name in param_names(L):
        buf.write(np.ascontiguousarray(params.arrays[name], dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_file) -> ModelParams:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        V, d, L = struct.unpack_from("<III", data, pos)
        pos += 12
        (order,) = struct.unpack_from("<B", data, pos)
        (min_freq,) = struct.unpack_from("<I", data, pos + 1)
        pos += 5
        labels = []
        for _ in range(V):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            labels.append(data[pos : pos + n].decode("utf-8"))
            pos += n
        shapes = {"embedding": (V, d)}
        for layer in range(L):
            shapes.update({f"gin{layer}.W1": (d, d), f"gin{layer}.b1": (d,), f"gin{layer}.W2": (d, d),
                           f"gin{layer}.b2": (d,), f"gin{layer}.eps": (1,)})
        shapes.update({"head.W": (d, d), "head.b": (d,)})
        arrays = {}
        for name in param_names(L):
            count = int(np.prod(shapes[name]))
            arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shapes[name]).astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return ModelParams(NodeVocab(tuple(labels), min_freq), arrays, HEAD_ORDERS[order])
