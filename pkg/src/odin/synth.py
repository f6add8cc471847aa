"""Synthetic text-attributed graph generator.

Class-conditioned word distributions make text and structure correlated:
every class owns a slice of the vocabulary, nodes draw a mix of class words
and shared words, and edges are intra-class with the configured homophily
probability (falling back to uniform random pairs otherwise, so homophily 0
means class-blind wiring, not anti-correlation).
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import TextGraph
from .rngutil import generator


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 200
    n_classes: int = 4
    homophily: float = 0.8
    vocab_size: int = 120
    words_per_node: int = 10
    seed: int = 0
    avg_degree: float = 6.0
    n_coarse: int | None = None  # None: coarse labels equal fine labels
    class_word_prob: float = 0.5
    min_words_per_node: int | None = None  # set for jittered text lengths
    ensure_connected: bool = False

    def __post_init__(self):
        if not 0.0 <= self.homophily <= 1.0:
            raise ValueError("homophily must lie in [0, 1]")
        if self.n_classes < 1 or self.n_nodes < self.n_classes:
            raise ValueError("need at least one node per class")
        if self.vocab_size < 2 * self.n_classes:
            raise ValueError("vocabulary too small for class-specific word pools")
        if self.min_words_per_node is not None and not (
            1 <= self.min_words_per_node <= self.words_per_node
        ):
            raise ValueError("min_words_per_node must lie in [1, words_per_node]")


def _word(i: int) -> str:
    return f"w{i:04d}"


def _pools(spec: SyntheticSpec):
    """First half of the vocabulary is split across classes, rest is shared."""
    per_class = (spec.vocab_size // 2) // spec.n_classes
    pools = [
        [_word(c * per_class + j) for j in range(per_class)]
        for c in range(spec.n_classes)
    ]
    shared = [_word(i) for i in range(per_class * spec.n_classes, spec.vocab_size)]
    return pools, shared


def generate(spec: SyntheticSpec) -> TextGraph:
    rng = generator(spec.seed, "synth")
    n, c = spec.n_nodes, spec.n_classes
    fine = tuple(int(x) for x in rng.integers(0, c, size=n))
    members = [[v for v in range(n) if fine[v] == cls] for cls in range(c)]

    pools, shared = _pools(spec)
    texts = []
    for v in range(n):
        count = spec.words_per_node
        if spec.min_words_per_node is not None:
            count = int(rng.integers(spec.min_words_per_node, spec.words_per_node + 1))
        words = []
        for _ in range(count):
            if shared and rng.random() >= spec.class_word_prob:
                words.append(shared[rng.integers(len(shared))])
            else:
                pool = pools[fine[v]]
                words.append(pool[rng.integers(len(pool))])
        texts.append(" ".join(words))

    edges: set[tuple[int, int]] = set()
    if spec.ensure_connected and n > 1:
        # uniform random recursive tree; class-blind, so homophily of the
        # remaining edges is measured without these
        perm = rng.permutation(n)
        for i in range(1, n):
            u, v = int(perm[rng.integers(0, i)]), int(perm[i])
            edges.add((min(u, v), max(u, v)))
    target = max(0, round(n * spec.avg_degree / 2) - len(edges))
    made = 0
    while made < target:
        placed = False
        for _ in range(80):
            u = int(rng.integers(n))
            if rng.random() < spec.homophily:
                pool = members[fine[u]]
                if len(pool) < 2:
                    continue
                v = pool[rng.integers(len(pool))]
            else:
                v = int(rng.integers(n))
            if u == v:
                continue
            key = (min(u, v), max(u, v))
            if key not in edges:
                edges.add(key)
                placed = True
                break
        made += 1
        if not placed:
            break  # graph is saturated; accept fewer edges

    if spec.n_coarse is None:
        coarse = fine
    else:
        coarse = tuple(lab * spec.n_coarse // c for lab in fine)
    label_names = {
        cls: f"topic {cls} " + " ".join(pools[cls][:3]) for cls in range(c)
    }
    return TextGraph(tuple(texts), frozenset(edges), fine, coarse, label_names)


def intra_class_fraction(graph: TextGraph) -> float:
    labels = graph.labels("fine")
    if not graph.edges:
        return 0.0
    same = sum(1 for u, v in graph.edges if labels[u] == labels[v])
    return same / graph.num_edges
