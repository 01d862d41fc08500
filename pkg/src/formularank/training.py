"""Contrastive training of the graph encoder."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augmentation import AugmentConfig, augment_pair
from .encoder import (
    GraphBatch,
    ModelParams,
    NodeVocab,
    backward,
    build_vocab,
    embed_corpus,
    forward,
    init_params,
    relu_preactivations,
    save_checkpoint,
)
from .formula_ir import OpgGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 2560
    learning_rate: float = 1e-4
    temperature: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dim: int = 400
    n_layers: int = 2
    min_frequency: int = 11
    head_order: str = "relu_normalize"
    min_nodes: int = 3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be non-negative")


def _pair_index(n_rows: int) -> np.ndarray:
    return np.arange(n_rows) ^ 1


def _check_views(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] % 2:
        raise ValueError("expected a 2N x d matrix of paired views")
    if Z.shape[0] < 4:
        raise ValueError("need at least two pairs so every anchor has a negative")
    if not np.all(np.isfinite(Z)):
        raise ValueError("non-finite embeddings")
    return Z


def info_nce_loss(Z: np.ndarray, temperature: float) -> float:
    """NT-Xent over rows paired as (2k, 2k+1); other rows of the batch are negatives."""
    return info_nce_grad(Z, temperature)[0]


def info_nce_grad(Z: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``Z``."""
    Z = _check_views(Z)
    n = Z.shape[0]
    logits = (Z @ Z.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    lse = np.log(denom)[:, 0] + row_max[:, 0]
    pos = _pair_index(n)
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, pos]))
    g = expd / denom
    g[rows, pos] -= 1.0
    g /= n
    dZ = (g + g.T) @ Z / temperature
    return loss, dZ


@dataclass
class BatchLossReport:
    loss: float
    pos_cos: float
    neg_cos: float
    grad_norm: float


def pair_cosines(Z: np.ndarray) -> tuple[float, float]:
    """Mean cosine of positive pairs and of all other off-diagonal pairs."""
    sims = Z @ Z.T
    n = Z.shape[0]
    pos = sims[np.arange(n), _pair_index(n)]
    off = ~np.eye(n, dtype=bool)
    off[np.arange(n), _pair_index(n)] = False
    return float(pos.mean()), float(sims[off].mean())


def views_batch(graphs: Sequence[OpgGraph], cfg: AugmentConfig, rng: np.random.Generator) -> list[OpgGraph]:
    views = []
    for g in graphs:
        a, b = augment_pair(g, cfg, rng)
        views += [a.graph, b.graph]
    return views


def contrastive_loss(params: ModelParams, batch: GraphBatch, temperature: float):
    """Forward pass plus loss; returns ``(loss, dZ, z, cache)``."""
    _, z, cache = forward(params, batch, head=True)
    loss, dz = info_nce_grad(z, temperature)
    return loss, dz, z, cache


def loss_and_grads(params: ModelParams, views: Sequence[OpgGraph], temperature: float):
    batch = GraphBatch(views, params.vocab)
    loss, dz, z, cache = contrastive_loss(params, batch, temperature)
    grads = backward(params, batch, cache, dz=dz)
    return loss, grads, z


class Adam:
    def __init__(self, arrays: dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    pos_cos: float
    neg_cos: float
    grad_norm: float
    wallclock_s: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochLog] = field(default_factory=list)


def trainable(graphs: Sequence[OpgGraph], min_nodes: int = 3) -> list[OpgGraph]:
    """Training view of a corpus: graphs with more than two nodes by default."""
    return [g for g in graphs if g.node_count >= min_nodes]


def train(
    corpus: Sequence[OpgGraph],
    aug: AugmentConfig | None = None,
    cfg: TrainConfig | None = None,
    vocab: NodeVocab | None = None,
    checkpoint_path=None,
    log_path=None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    aug = aug or AugmentConfig()
    cfg = cfg or TrainConfig()
    graphs = trainable(corpus, cfg.min_nodes)
    if not graphs:
        raise ValueError("no training graphs left after the node-count filter")
    if len(graphs) < 2:
        raise ValueError("need at least two training graphs for in-batch negatives")
    vocab = vocab or build_vocab(graphs, cfg.min_frequency)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(vocab, cfg.dim, cfg.n_layers, rng, cfg.head_order)
    master = params.copy(np.float64)
    opt = Adam(master.arrays, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult(params)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(graphs))
            starts = list(range(0, len(order), cfg.batch_size))
            # a trailing singleton batch has no negatives; fold it into the previous one
            if len(starts) > 1 and len(order) - starts[-1] < 2:
                starts.pop()
            reports = []
            for i, s in enumerate(starts):
                end = starts[i + 1] if i + 1 < len(starts) else len(order)
                views = views_batch([graphs[j] for j in order[s:end]], aug, rng)
                loss, grads, z = loss_and_grads(master, views, cfg.temperature)
                gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
                if not (np.isfinite(loss) and np.isfinite(gnorm)):
                    raise FloatingPointError(
                        f"non-finite loss/gradient at epoch {epoch}, batch {i} (loss={loss}, |g|={gnorm})"
                    )
                pos, neg = pair_cosines(z)
                reports.append(BatchLossReport(loss, pos, neg, gnorm))
                opt.step(master.arrays, grads)
            entry = EpochLog(
                epoch,
                float(np.mean([r.loss for r in reports])),
                float(np.mean([r.pos_cos for r in reports])),
                float(np.mean([r.neg_cos for r in reports])),
                float(np.mean([r.grad_norm for r in reports])),
                time.perf_counter() - t0,
            )
            result.history.append(entry)
            result.params = master.copy(np.float32)
            log.info("epoch %d loss %.4f pos %.3f neg %.3f", epoch, entry.mean_loss, entry.pos_cos, entry.neg_cos)
            if log_fh:
                log_fh.write(json.dumps(asdict(entry)) + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_checkpoint(result.params, checkpoint_path)
            if on_epoch:
                on_epoch(entry)
    finally:
        if log_fh:
            log_fh.close()
    return result


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    checked: int
    skipped_kinks: int
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _relu_masks(params, batch, temperature):
    _, _, cache = forward(params, batch, head=True)
    return [p > 0 for p in relu_preactivations(cache)]


def grad_check(
    params: ModelParams,
    views: Sequence[OpgGraph],
    temperature: float = 0.2,
    n_coords: int = 200,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    seed: int = 0,
    grads: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences at float64.

    Coordinates whose +/- perturbation flips any ReLU are skipped (the loss is
    not differentiable there) and replaced by fresh samples. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. Pass ``grads`` to check a supplied
    gradient instead of the one computed here.
    """
    p64 = params.copy(np.float64)
    batch = GraphBatch(views, p64.vocab)
    if grads is None:
        _, dz, _, cache = contrastive_loss(p64, batch, temperature)
        grads = backward(p64, batch, cache, dz=dz)
    base_masks = _relu_masks(p64, batch, temperature)
    rng = np.random.default_rng(seed)

    used_rows = np.unique(batch.label_ids)
    pools = []
    for name, arr in p64.arrays.items():
        if name == "embedding":
            pools.append((name, [(int(r), int(c)) for r in used_rows for c in range(arr.shape[1])]))
        else:
            pools.append((name, list(np.ndindex(arr.shape))))

    checked = skipped = 0
    worst_err, worst = 0.0, None
    attempts = 0
    while checked < n_coords and attempts < 20 * n_coords:
        attempts += 1
        name, pool = pools[attempts % len(pools)]
        idx = tuple(pool[rng.integers(len(pool))])
        arr = p64.arrays[name]
        orig = arr[idx]
        values = []
        kink = False
        for delta in (step, -step):
            arr[idx] = orig + delta
            loss, _, _, cache = contrastive_loss(p64, batch, temperature)
            masks = [p > 0 for p in relu_preactivations(cache)]
            kink |= any(not np.array_equal(m, b) for m, b in zip(masks, base_masks))
            values.append(loss)
        arr[idx] = orig
        if kink:
            skipped += 1
            continue
        numeric = (values[0] - values[1]) / (2 * step)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        checked += 1
        if err >= worst_err:
            worst_err, worst = err, (name, idx)
    return GradCheckReport(checked, skipped, worst_err, worst, tolerance)


# ---------------------------------------------------------------------------
# diagnostics


def view_retrieval(
    params: ModelParams,
    graphs: Sequence[OpgGraph],
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Query each graph's fresh augmented view against the clean corpus.

    Returns recall@1 of the source graph, the mean cosine between two views
    of the same graph, and the mean cosine between distinct graphs.
    """
    corpus = embed_corpus(graphs, params)
    pairs = [augment_pair(g, aug, rng) for g in graphs]
    v1 = embed_corpus([a.graph for a, _ in pairs], params)
    v2 = embed_corpus([b.graph for _, b in pairs], params)
    sims = v1 @ corpus.T
    hits = np.argmax(sims, axis=1) == np.arange(len(graphs))
    view_cos = float(np.mean(np.einsum("ij,ij->i", v1, v2)))
    gram = corpus @ corpus.T
    off = ~np.eye(len(graphs), dtype=bool)
    return {
        "recall_at_1": float(hits.mean()),
        "view_cos": view_cos,
        "random_cos": float(gram[off].mean()),
    }
