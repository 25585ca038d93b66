"""Graph and knowledge-graph datasets: TSV loaders/writers, generators, splits.

Node-graph directory layout (UTF-8, tab separated, LF line endings)::

    edges.tsv     u<TAB>v
    features.tsv  node_id<TAB>f_1<TAB>...<TAB>f_d
    labels.tsv    node_id<TAB>class
    split.tsv     node_id<TAB>train|val|test

Knowledge-graph layout: ``train.tsv``, ``valid.tsv``, ``test.tsv`` with
``head<TAB>relation<TAB>tail`` string triples.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

MAX_TREE_NODES = 5_000_000
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    pass


@dataclass
class Graph:
    n: int
    edges: np.ndarray  # (m, 2) int64, u < v, unique
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,), -1 = unlabeled
    train_mask: np.ndarray = None
    val_mask: np.ndarray = None
    test_mask: np.ndarray = None

    def __post_init__(self):
        self.edges = canonical_edges(self.edges, self.n)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for name in ("train_mask", "val_mask", "test_mask"):
            mask = getattr(self, name)
            setattr(self, name, np.zeros(self.n, bool) if mask is None else np.asarray(mask, bool))
        if self.features.shape[0] != self.n or self.labels.shape != (self.n,):
            raise DataFormatError("features/labels do not match node count")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("features must be finite")
        overlap = (self.train_mask & self.val_mask) | (self.train_mask & self.test_mask) | (self.val_mask & self.test_mask)
        if overlap.any():
            raise DataFormatError("split masks overlap")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if (self.labels >= 0).any() else 0

    def equals(self, other: "Graph") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(getattr(self, m), getattr(other, m)) for m in ("train_mask", "val_mask", "test_mask"))
        )


def canonical_edges(edges, n: int) -> np.ndarray:
    """Undirected, deduplicated edge list with u < v; self-loops dropped."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise DataFormatError(f"edge endpoint out of range [0, {n})")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0) if len(e) else e.reshape(0, 2)


def _read_rows(path: Path, min_fields: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < min_fields:
                raise DataFormatError(f"{path.name}:{lineno}: expected {min_fields} fields, got {len(parts)}")
            yield lineno, parts


def _int(path: Path, lineno: int, s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise DataFormatError(f"{path.name}:{lineno}: not an integer: {s!r}") from None


def load_node_graph(path) -> Graph:
    path = Path(path)
    feats: dict[int, list[float]] = {}
    dim = None
    fpath = path / "features.tsv"
    for lineno, parts in _read_rows(fpath, 1):
        node = _int(fpath, lineno, parts[0])
        try:
            row = [float(v) for v in parts[1:]]
        except ValueError:
            raise DataFormatError(f"features.tsv:{lineno}: bad float") from None
        if dim is None:
            dim = len(row)
        elif len(row) != dim:
            raise DataFormatError(f"features.tsv:{lineno}: expected {dim} features, got {len(row)}")
        feats[node] = row
    n = len(feats)
    if sorted(feats) != list(range(n)):
        raise DataFormatError("features.tsv must list node ids 0..n-1 exactly once")
    features = np.array([feats[i] for i in range(n)], dtype=np.float64).reshape(n, dim or 0)

    epath = path / "edges.tsv"
    edges = []
    for ln, p in _read_rows(epath, 2):
        u, v = _int(epath, ln, p[0]), _int(epath, ln, p[1])
        if not (0 <= u < n and 0 <= v < n):
            raise DataFormatError(f"edges.tsv:{ln}: edge ({u}, {v}) outside node range")
        edges.append((u, v))

    labels = np.full(n, -1, dtype=np.int64)
    lpath = path / "labels.tsv"
    if lpath.exists():
        for ln, p in _read_rows(lpath, 2):
            labels[_int(lpath, ln, p[0])] = _int(lpath, ln, p[1])

    masks = {s: np.zeros(n, bool) for s in SPLITS}
    spath = path / "split.tsv"
    if spath.exists():
        for ln, p in _read_rows(spath, 2):
            if p[1] not in masks:
                raise DataFormatError(f"split.tsv:{ln}: unknown split {p[1]!r}")
            masks[p[1]][_int(spath, ln, p[0])] = True
    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels,
                 masks["train"], masks["val"], masks["test"])


def write_node_graph(graph: Graph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{u}\t{v}\n" for u, v in graph.edges)
    with open(path / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(graph.features):
            fh.write("\t".join([str(i)] + [repr(float(v)) for v in row]) + "\n")
    with open(path / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i}\t{y}\n" for i, y in enumerate(graph.labels) if y >= 0)
    with open(path / "split.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for name, mask in zip(SPLITS, (graph.train_mask, graph.val_mask, graph.test_mask)):
            fh.writelines(f"{i}\t{name}\n" for i in np.flatnonzero(mask))


def load_karate() -> Graph:
    """The bundled Zachary karate-club fixture (34 nodes, 78 edges, 2 classes)."""
    with resources.as_file(resources.files("pseudopoincare") / "fixtures" / "karate") as p:
        return load_node_graph(p)


def gen_balanced_tree(branching: int, depth: int, feature_dim: int = 16, seed: int = 0,
                      noise: float = 0.01) -> Graph:
    """Balanced tree in breadth-first id order; labels are node depths.

    Features are the one-hot node id truncated (or zero-padded) to
    ``feature_dim`` plus Gaussian noise of scale ``noise``.
    """
    if branching < 1 or depth < 1:
        raise ValueError("branching and depth must be >= 1")
    n = depth + 1 if branching == 1 else (branching ** (depth + 1) - 1) // (branching - 1)
    if n > MAX_TREE_NODES:
        raise ValueError(f"tree with {n} nodes exceeds the {MAX_TREE_NODES} node limit")
    level_sizes = [branching**level for level in range(depth + 1)]
    labels = np.repeat(np.arange(depth + 1), level_sizes)
    children = np.arange(1, n)
    parents = (children - 1) // branching
    edges = np.stack([parents, children], axis=1)
    rng = np.random.default_rng(seed)
    features = np.zeros((n, feature_dim))
    k = min(n, feature_dim)
    features[np.arange(k), np.arange(k)] = 1.0
    features += noise * rng.standard_normal(features.shape)
    return Graph(n, edges, features, labels)


def gen_cora_like(n: int = 2708, num_classes: int = 7, feature_dim: int = 1433,
                  num_edges: int = 5278, homophily: float = 0.8, words_per_node: int = 18,
                  seed: int = 0) -> Graph:
    """Citation-style stand-in: planted-partition edges, bag-of-words features."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    by_class = [np.flatnonzero(labels == k) for k in range(num_classes)]
    edges = set()
    while len(edges) < num_edges:
        u = int(rng.integers(n))
        if rng.random() < homophily:
            pool = by_class[labels[u]]
            v = int(pool[rng.integers(len(pool))])
        else:
            v = int(rng.integers(n))
        if u != v:
            edges.add((min(u, v), max(u, v)))
    if feature_dim < num_classes:
        raise ValueError("need at least one feature word per class")
    # every class owns a disjoint, non-empty slice of the vocabulary
    topic = rng.permutation(np.arange(feature_dim) % num_classes)
    features = np.zeros((n, feature_dim))
    for i in range(n):
        on_topic = np.flatnonzero(topic == labels[i])
        k_topic = words_per_node // 2
        words = np.concatenate([rng.choice(on_topic, k_topic), rng.integers(0, feature_dim, words_per_node - k_topic)])
        features[i, words] = 1.0
    return Graph(n, np.array(sorted(edges)), features, labels)


def make_splits(graph: Graph, fractions=(0.6, 0.2, 0.2), seed: int = 0, strict: bool = True) -> Graph:
    """Class-stratified node splits; returns a new Graph with masks set.

    Per class the cut points are ``round(cumsum(fractions) * class_size)``, so
    each split is within one node of its target. With ``strict`` a class with
    fewer members than there are non-empty splits is an error.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-12:
        raise ValueError("fractions must be three non-negative numbers summing to <= 1")
    rng = np.random.default_rng(seed)
    masks = [np.zeros(graph.n, bool) for _ in range(3)]
    slots = sum(f > 0 for f in fractions)
    cuts = np.cumsum(fractions)
    for k in np.unique(graph.labels[graph.labels >= 0]):
        members = np.flatnonzero(graph.labels == k)
        if strict and len(members) < slots:
            raise ValueError(f"class {k} has {len(members)} members but {slots} splits need one each")
        members = rng.permutation(members)
        bounds = [0] + [int(round(c * len(members))) for c in cuts]
        for j in range(3):
            masks[j][members[bounds[j]:bounds[j + 1]]] = True
    return replace(graph, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


@dataclass
class EdgeSplit:
    train_pos: np.ndarray
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray
    train_graph_edges: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.train_graph_edges is None:
            self.train_graph_edges = self.train_pos


def sample_non_edges(n: int, k: int, forbidden: set[tuple[int, int]], rng: np.random.Generator) -> np.ndarray:
    out: list[tuple[int, int]] = []
    seen = set()
    max_pairs = n * (n - 1) // 2 - len(forbidden)
    if k > max_pairs:
        raise ValueError("not enough non-edges to sample from")
    while len(out) < k:
        u, v = (int(a) for a in rng.integers(0, n, 2))
        if u == v:
            continue
        pair = (min(u, v), max(u, v))
        if pair in forbidden or pair in seen:
            continue
        seen.add(pair)
        out.append(pair)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def split_edges(graph: Graph, fractions=(0.85, 0.05, 0.10), seed: int = 0) -> EdgeSplit:
    """Random edge split with equally many uniformly sampled non-edges for val/test."""
    rng = np.random.default_rng(seed)
    edges = rng.permutation(graph.edges)
    m = len(edges)
    n_val = int(round(fractions[1] * m))
    n_test = int(round(fractions[2] * m))
    val, test, train = edges[:n_val], edges[n_val:n_val + n_test], edges[n_val + n_test:]
    forbidden = {tuple(e) for e in graph.edges.tolist()}
    negs = sample_non_edges(graph.n, n_val + n_test, forbidden, rng)
    return EdgeSplit(train, val, negs[:n_val], test, negs[n_val:])


@dataclass
class KGDataset:
    entities: list[str]
    relations: list[str]
    train: np.ndarray  # (k, 3) ids: head, relation, tail
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3))
        train = {tuple(t) for t in self.train.tolist()}
        if any(tuple(t) in train for t in self.test.tolist()):
            raise DataFormatError("test triples leak into the training split")

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def counts(self) -> dict[str, int]:
        return {"entities": self.num_entities, "relations": self.num_relations,
                "train": len(self.train), "valid": len(self.valid), "test": len(self.test)}


def load_kg(path) -> KGDataset:
    path = Path(path)
    raw = {}
    for split in ("train", "valid", "test"):
        fpath = path / f"{split}.tsv"
        if not fpath.exists():
            raise FileNotFoundError(fpath)
        raw[split] = [tuple(p[:3]) for _, p in _read_rows(fpath, 3)]
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    for split in ("train", "valid", "test"):
        for h, r, t in raw[split]:
            ent.setdefault(h, len(ent))
            rel.setdefault(r, len(rel))
            ent.setdefault(t, len(ent))
    ids = {s: [(ent[h], rel[r], ent[t]) for h, r, t in raw[s]] for s in raw}
    return KGDataset(list(ent), list(rel), ids["train"], ids["valid"], ids["test"])


def write_kg(kg: KGDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        with open(path / f"{split}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for h, r, t in getattr(kg, split):
                fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


def _split_triples(triples: np.ndarray, fractions, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    triples = np.unique(triples, axis=0)
    triples = triples[rng.permutation(len(triples))]
    m = len(triples)
    n_val = int(round(fractions[1] * m))
    n_test = int(round(fractions[2] * m))
    return triples[n_val + n_test:], triples[:n_val], triples[n_val:n_val + n_test]


def gen_tree_kg(branching: int = 3, depth: int = 6, seed: int = 0, fractions=(0.8, 0.1, 0.1),
                siblings: bool = True) -> KGDataset:
    """Hierarchical KG over a balanced tree: child_of, parent_of and sibling_of."""
    tree = gen_balanced_tree(branching, depth, feature_dim=1, seed=seed)
    parent, child = tree.edges[:, 0], tree.edges[:, 1]
    triples = [np.stack([child, np.zeros_like(child), parent], 1),
               np.stack([parent, np.ones_like(parent), child], 1)]
    relations = ["child_of", "parent_of"]
    if siblings:
        pairs = []
        for p in range(tree.n):
            kids = child[parent == p]
            pairs += [(a, 2, b) for a in kids for b in kids if a != b]
        if pairs:
            triples.append(np.array(pairs))
            relations.append("sibling_of")
    rng = np.random.default_rng(seed)
    train, valid, test = _split_triples(np.concatenate(triples), fractions, rng)
    return KGDataset([f"n{i}" for i in range(tree.n)], relations, train, valid, test)


def subsample_kg(kg: KGDataset, num_triples: int, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> KGDataset:
    """Seeded subsample of all triples, re-split and re-indexed."""
    rng = np.random.default_rng(seed)
    everything = np.unique(kg.all_triples(), axis=0)
    pick = everything[np.sort(rng.choice(len(everything), min(num_triples, len(everything)), replace=False))]
    ents = np.unique(pick[:, [0, 2]])
    rels = np.unique(pick[:, 1])
    emap = {int(e): i for i, e in enumerate(ents)}
    rmap = {int(r): i for i, r in enumerate(rels)}
    remapped = np.array([(emap[h], rmap[r], emap[t]) for h, r, t in pick.tolist()]).reshape(-1, 3)
    train, valid, test = _split_triples(remapped, fractions, rng)
    return KGDataset([kg.entities[e] for e in ents], [kg.relations[r] for r in rels], train, valid, test)
