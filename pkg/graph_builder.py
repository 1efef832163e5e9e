"""
Layout graph over token box centers.

Edges come from the Gabriel graph (beta-skeleton with beta = 1): p and q are
joined unless some third point lies strictly inside the disk with diameter pq.
Each vertex then keeps its nearest neighbors up to a cap, and every directed
edge carries an 11-value geometric feature vector.
"""

import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from doc_model import BoundingBox, Document, Token
from errors import InvalidInputError

logger = logging.getLogger(__name__)

EDGE_FEATURE_NAMES = [
    "d_center_x",
    "d_center_y",
    "d_topleft_x",
    "d_topleft_y",
    "d_bottomright_x",
    "d_bottomright_y",
    "gap_h",
    "gap_v",
    "aspect_k",
    "aspect_l",
    "aspect_union",
]
EDGE_DIM = len(EDGE_FEATURE_NAMES)
GEOMETRY_NAMES = ["x0", "y0", "x1", "y1", "height", "width"]
NODE_DIM = 1 + len(GEOMETRY_NAMES)
MIN_WIDTH = 1e-6
NORMALIZED_LIMIT = 1.0 + 1e-9
DEFAULT_MAX_NEIGHBORS = 8


@dataclass(frozen=True)
class EdgeFeature:
    d_center: Tuple[float, float]
    d_topleft: Tuple[float, float]
    d_bottomright: Tuple[float, float]
    gap_h: float
    gap_v: float
    aspect_k: float
    aspect_l: float
    aspect_union: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                *self.d_center,
                *self.d_topleft,
                *self.d_bottomright,
                self.gap_h,
                self.gap_v,
                self.aspect_k,
                self.aspect_l,
                self.aspect_union,
            ],
            dtype=np.float64,
        )


@dataclass
class LayoutGraph:
    n: int
    edges: np.ndarray  # [E, 2] directed (k, l): k receives the message from l
    edge_features: np.ndarray  # [E, EDGE_DIM]
    node_features: np.ndarray  # [n, NODE_DIM]; column 0 holds the vocab id

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def vocab_ids(self) -> np.ndarray:
        return self.node_features[:, 0].astype(np.int64)

    @property
    def geometry(self) -> np.ndarray:
        return self.node_features[:, 1:]

    def edge_set(self) -> Set[Tuple[int, int]]:
        return {(int(k), int(l)) for k, l in self.edges}

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n) if self.num_edges else np.zeros(self.n, dtype=np.int64)


# ---------------------------------------------------------------------------
# Skeleton
# ---------------------------------------------------------------------------
def _squared_distances(points: np.ndarray) -> np.ndarray:
    diff_x = points[:, 0][:, None] - points[:, 0][None, :]
    diff_y = points[:, 1][:, None] - points[:, 1][None, :]
    return diff_x * diff_x + diff_y * diff_y


def _as_points(centers: Sequence[Sequence[float]]) -> np.ndarray:
    points = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("centers must be finite")
    return points


def beta_skeleton_edges(centers: Sequence[Sequence[float]]) -> Set[Tuple[int, int]]:
    """Undirected Gabriel edges as (i, j) with i < j."""
    points = _as_points(centers)
    n = len(points)
    if n < 2:
        return set()
    d2 = _squared_distances(points)
    edges: Set[Tuple[int, int]] = set()
    for i in range(n - 1):
        # blocked[j] is true when some r has d(i,r)^2 + d(j,r)^2 < d(i,j)^2
        through = d2[i][None, :] + d2[i + 1 :]
        blocked = (through < d2[i, i + 1 :][:, None]).any(axis=1)
        for offset in np.flatnonzero(~blocked):
            edges.add((i, i + 1 + int(offset)))
    return edges


def brute_force_skeleton_edges(centers: Sequence[Sequence[float]]) -> Set[Tuple[int, int]]:
    """O(n^3) lune test over all triples."""
    points = _as_points(centers)
    n = len(points)
    d2 = _squared_distances(points)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if not any(d2[i, r] + d2[j, r] < d2[i, j] for r in range(n) if r != i and r != j):
                edges.add((i, j))
    return edges


def cap_neighbors(
    edges: Iterable[Tuple[int, int]], centers: Sequence[Sequence[float]], k: int = DEFAULT_MAX_NEIGHBORS
) -> List[Tuple[int, int]]:
    """
    Symmetrize, then keep for every vertex the k nearest skeleton neighbors
    (squared center distance, ties by lower index). Returns sorted directed pairs.
    """
    if k <= 0:
        return []
    points = _as_points(centers)
    neighbors: Dict[int, Set[int]] = {}
    for a, b in edges:
        if a == b:
            continue
        neighbors.setdefault(a, set()).add(b)
        neighbors.setdefault(b, set()).add(a)
    out: List[Tuple[int, int]] = []
    for v in sorted(neighbors):
        ranked = sorted(
            neighbors[v],
            key=lambda u: (float(np.sum((points[u] - points[v]) ** 2)), u),
        )
        out.extend((v, u) for u in ranked[:k])
    return sorted(out)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------
def _aspect(height: float, width: float) -> float:
    return height / max(width, MIN_WIDTH)


def node_feature(token: Token) -> np.ndarray:
    box = token.box
    coords = (box.x0, box.y0, box.x1, box.y1)
    if max(coords) > NORMALIZED_LIMIT:
        raise InvalidInputError(f"token {token.text!r} has unnormalized box {list(coords)}")
    return np.array([token.vocab_id, *coords, box.height, box.width], dtype=np.float64)


def edge_feature(box_k: BoundingBox, box_l: BoundingBox) -> EdgeFeature:
    """Offsets are l minus k; gaps are zero when the boxes overlap on that axis."""
    ck, cl = box_k.center, box_l.center
    union = BoundingBox(
        min(box_k.x0, box_l.x0), min(box_k.y0, box_l.y0), max(box_k.x1, box_l.x1), max(box_k.y1, box_l.y1)
    )
    return EdgeFeature(
        d_center=(cl[0] - ck[0], cl[1] - ck[1]),
        d_topleft=(box_l.x0 - box_k.x0, box_l.y0 - box_k.y0),
        d_bottomright=(box_l.x1 - box_k.x1, box_l.y1 - box_k.y1),
        gap_h=max(0.0, max(box_k.x0, box_l.x0) - min(box_k.x1, box_l.x1)),
        gap_v=max(0.0, max(box_k.y0, box_l.y0) - min(box_k.y1, box_l.y1)),
        aspect_k=_aspect(box_k.height, box_k.width),
        aspect_l=_aspect(box_l.height, box_l.width),
        aspect_union=_aspect(union.height, union.width),
    )


def build_layout_graph(doc: Document, max_neighbors: int = DEFAULT_MAX_NEIGHBORS) -> LayoutGraph:
    """Skeleton, cap and features for a normalized document; vertex i is doc.tokens[i]."""
    tokens = doc.tokens
    n = len(tokens)
    nodes = np.stack([node_feature(t) for t in tokens]) if n else np.zeros((0, NODE_DIM))
    centers = [t.box.center for t in tokens]
    skeleton = beta_skeleton_edges(centers)
    directed = cap_neighbors(skeleton, centers, max_neighbors)
    edges = np.array(directed, dtype=np.int64).reshape(-1, 2)
    feats = (
        np.stack([edge_feature(tokens[k].box, tokens[l].box).as_vector() for k, l in directed])
        if directed
        else np.zeros((0, EDGE_DIM))
    )
    if not np.all(np.isfinite(feats)):
        raise InvalidInputError("non-finite edge feature")
    logger.debug("Layout graph: %d vertices, %d skeleton edges, %d directed after cap", n, len(skeleton), len(edges))
    return LayoutGraph(n=n, edges=edges, edge_features=feats, node_features=nodes)


# ---------------------------------------------------------------------------
# Graph queries
# ---------------------------------------------------------------------------
def _adjacency(n: int, edges: Iterable[Tuple[int, int]]) -> List[List[int]]:
    adj: List[List[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[int(a)].append(int(b))
        adj[int(b)].append(int(a))
    return adj


def connected_components(n: int, edges: Iterable[Tuple[int, int]]) -> List[int]:
    """Component label per vertex, treating edges as undirected."""
    adj = _adjacency(n, edges)
    labels = [-1] * n
    current = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        labels[start] = current
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for u in adj[v]:
                if labels[u] < 0:
                    labels[u] = current
                    queue.append(u)
        current += 1
    return labels


def graph_distances(n: int, edges: Iterable[Tuple[int, int]], source: int) -> List[Optional[int]]:
    """Hop counts from ``source`` over undirected edges; None when unreachable."""
    adj = _adjacency(n, edges)
    dist: List[Optional[int]] = [None] * n
    dist[source] = 0
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for u in adj[v]:
            if dist[u] is None:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def dump_graph(graph: LayoutGraph, out_dir: str, stem: str = "graph") -> Tuple[str, str]:
    """Write "k l" edge lines and the edge feature table."""
    os.makedirs(out_dir, exist_ok=True)
    edge_path = os.path.join(out_dir, f"{stem}_edges.txt")
    feat_path = os.path.join(out_dir, f"{stem}_edge_features.csv")
    with open(edge_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(k)} {int(l)}\n" for k, l in graph.edges)
    df = pd.DataFrame(graph.edge_features, columns=EDGE_FEATURE_NAMES)
    df.insert(0, "l", graph.edges[:, 1] if graph.num_edges else [])
    df.insert(0, "k", graph.edges[:, 0] if graph.num_edges else [])
    df.to_csv(feat_path, index=False)
    return edge_path, feat_path
