"""Pretraining objectives and the optimization step.

Two self-supervised losses are combined with unit weights: a node-level
contrastive loss pairing each eligible batch node's [CLS] with one true
neighbor against one in-batch non-neighbor, and a token-level masked
reconstruction loss on final-layer hidden states. The text encoder and the
graph-aggregation stages train under separate learning rates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ParamSet
from .fusion import LayerSchedule, odin_forward, tokenize_nodes
from .graph import TextGraph
from .rngutil import generator
from .sampler import sample_frontiers

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    """Token positions to hide (with their original ids) and, per masked
    node, (positive neighbor, in-batch negative) contrast pairs."""

    token_targets: dict[int, tuple[tuple[int, int], ...]]  # node -> ((pos, orig_id), ...)
    node_pairs: dict[int, tuple[tuple[int, int], ...]]     # node -> ((v_pos, v_neg), ...)
    skipped_no_negative: int = 0

    @property
    def num_masked_tokens(self) -> int:
        return sum(len(v) for v in self.token_targets.values())

    @property
    def num_pairs(self) -> int:
        return sum(len(v) for v in self.node_pairs.values())


def plan_masks(
    tokens_by_node,
    graph: TextGraph,
    mask_ratio: float,
    seed: int,
    mask_id: int,
    all_positive_neighbors: bool = False,
    neighbor_pool=None,
):
    """Choose masked token positions and node contrast pairs for one batch.

    Returns (plan, masked_tokens) where masked_tokens has [MASK] substituted
    at the chosen positions. Position 0 ([CLS]) is never masked; every node
    with at least one maskable position gets at least one mask.

    Contrast pairs: positives come from neighbor_pool (normally the sampled
    subgraph's restricted adjacency, whose states the forward pass computes)
    or, when None, from true neighbors inside the batch. Negatives are always
    batch members not adjacent to the node. Nodes lacking either side are
    skipped and counted.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must be in (0, 1)")
    batch = sorted(tokens_by_node)
    batch_set = set(batch)
    token_targets: dict[int, tuple] = {}
    masked: dict[int, np.ndarray] = {}
    for v in batch:
        ids = np.asarray(tokens_by_node[v])
        rng = generator(seed, "mask_tokens", v)
        maskable = np.arange(1, len(ids))
        if len(maskable) == 0:
            masked[v] = ids
            continue
        hit = maskable[rng.random(len(maskable)) < mask_ratio]
        if len(hit) == 0:
            hit = np.array([rng.choice(maskable)])
        out = ids.copy()
        targets = tuple((int(p), int(ids[p])) for p in hit)
        out[hit] = mask_id
        token_targets[v] = targets
        masked[v] = out

    node_pairs: dict[int, tuple] = {}
    skipped = 0
    for v in batch:
        if neighbor_pool is None:
            nbrs = sorted(set(graph.neighbors(v)) & batch_set)
        else:
            nbrs = sorted(neighbor_pool.get(v, ()))
        non = sorted(batch_set - set(graph.neighbors(v)) - {v})
        if not nbrs or not non:
            skipped += 1
            continue
        rng = generator(seed, "mask_nodes", v)
        if all_positive_neighbors:
            pairs = tuple((p, int(non[rng.integers(len(non))])) for p in nbrs)
        else:
            pairs = ((int(nbrs[rng.integers(len(nbrs))]),
                      int(non[rng.integers(len(non))])),)
        node_pairs[v] = pairs
    return MaskPlan(token_targets, node_pairs, skipped), masked


def mnp_loss(cls_by_node, plan: MaskPlan) -> Tensor:
    """Sum over contrast pairs of -log( e^{s+} / (e^{s+} + e^{s-}) ) where the
    scores are [CLS] dot products. Zero when the plan has no pairs."""
    if plan.num_pairs == 0:
        log.warning("contrastive plan is empty; node loss is 0")
        return Tensor(0.0)
    total = None
    for v in sorted(plan.node_pairs):
        anchor = cls_by_node[v]
        for v_pos, v_neg in plan.node_pairs[v]:
            s_pos = (anchor * cls_by_node[v_pos]).sum()
            s_neg = (anchor * cls_by_node[v_neg]).sum()
            term = ad.softplus(s_neg - s_pos)  # = -log sigmoid(s+ - s-)
            total = term if total is None else total + term
    return total


def nmlm_loss(final_states: Tensor, batch_nodes, plan: MaskPlan, params: ParamSet) -> Tensor:
    """Cross-entropy of the vocabulary scores at masked positions of the
    final-layer states, summed over masked tokens."""
    if plan.num_masked_tokens == 0:
        log.warning("token mask plan is empty; reconstruction loss is 0")
        return Tensor(0.0)
    row_of = {v: i for i, v in enumerate(batch_nodes)}
    n, t, d = final_states.shape
    rows, targets = [], []
    for v in sorted(plan.token_targets):
        for pos, orig in plan.token_targets[v]:
            rows.append(row_of[v] * t + pos)
            targets.append(orig)
    flat = ad.reshape(final_states, (n * t, d))
    hidden = ad.take_rows(flat, np.array(rows, dtype=np.intp))
    logits = ad.matmul(hidden, params.mlm_weight().T)
    lse = ad.logsumexp(logits, axis=-1)
    gold = ad.gather_elements(logits, np.arange(len(rows)), np.array(targets))
    return (lse - gold).sum()


def total_loss(l1: Tensor, l2: Tensor) -> Tensor:
    """Unit-weight sum of the two objectives."""
    return l1 + l2


# -- optimizers ---------------------------------------------------------------


@dataclass
class PretrainHyper:
    batch_size: int = 32
    epochs: int = 10
    mask_ratio: float = 0.15
    lr_encoder: float = 1e-5
    lr_gnn: float = 1e-3
    fanout: int = 5
    optimizer: str = "sgd"
    all_positive_neighbors: bool = False


def _group_lr(name: str, hyper: PretrainHyper) -> float:
    return hyper.lr_gnn if name.startswith("stages.") else hyper.lr_encoder


class Sgd:
    """Plain gradient descent with per-group learning rates."""

    kind = "sgd"

    def __init__(self, hyper: PretrainHyper):
        self.hyper = hyper

    def step(self, params: ParamSet):
        for name, p in params.named_parameters():
            if p.grad is not None:
                p.data -= _group_lr(name, self.hyper) * p.grad

    def state_dict(self):
        return {}

    def load_state_dict(self, state):
        pass


class Adam:
    """Adam with per-group learning rates; optional, not the default."""

    kind = "adam"

    def __init__(self, hyper: PretrainHyper, beta1=0.9, beta2=0.999, eps=1e-8):
        self.hyper = hyper
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.named_parameters():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m[:] = b1 * m + (1 - b1) * p.grad
            v[:] = b2 * v + (1 - b2) * p.grad**2
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data -= _group_lr(name, self.hyper) * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def make_optimizer(hyper: PretrainHyper):
    if hyper.optimizer == "sgd":
        return Sgd(hyper)
    if hyper.optimizer == "adam":
        return Adam(hyper)
    raise ValueError(f"unknown optimizer {hyper.optimizer!r}")


# -- one training step -----------------------------------------------------------


def pretrain_step(
    batch,
    graph: TextGraph,
    params: ParamSet,
    schedule: LayerSchedule,
    optimizer,
    hyper: PretrainHyper,
    vocab,
    step_seed: int,
) -> dict:
    """One gradient step of the joint objective on one node batch."""
    started = time.perf_counter()
    sub = sample_frontiers(graph, batch, schedule.hop_count, hyper.fanout, step_seed)
    tokens = tokenize_nodes(graph, sub.base, vocab, params.dims.max_len)
    plan, masked = plan_masks(
        {v: tokens[v] for v in sub.batch}, graph, hyper.mask_ratio,
        step_seed, vocab.mask_id, hyper.all_positive_neighbors,
        neighbor_pool=sub.sampled_adj,
    )
    tokens.update(masked)
    res = odin_forward(graph, sub, tokens, params, schedule)
    l1 = mnp_loss(res.cls_by_node_base(), plan)
    l2 = nmlm_loss(res.final_states, res.batch_nodes, plan, params)
    loss = total_loss(l1, l2)
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"non-finite loss (node={l1.data!r}, token={l2.data!r}) on batch "
            f"{tuple(batch)[:8]}..."
        )
    params.zero_grad()
    loss.backward()
    optimizer.step(params)
    return {
        "l1": float(l1.data),
        "l2": float(l2.data),
        "total": float(loss.data),
        "pairs": plan.num_pairs,
        "masked_tokens": plan.num_masked_tokens,
        "encoded_nodes": len(res.base_nodes),
        "wall_ms": (time.perf_counter() - started) * 1e3,
    }
