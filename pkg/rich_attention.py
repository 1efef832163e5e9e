"""
Attention scores with layout penalties.

On top of the scaled dot product, each head scores every token pair on the x
and y axes of the page:

* order: the head predicts the probability p that token i sits before token j
  and is charged o·ln p + (1 − o)·ln(1 − p) for the observed order o;
* distance: the head predicts an ideal log-distance μ and is charged
  −θ²(d − μ)²/2 for the observed log-distance d.

Both predictions are affines of the concatenated query and key rows. The
global token has no box, so its rows and columns carry the dot product only.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import autodiff as ad
from autodiff import ParameterStore, Tensor
from doc_model import Token
from errors import InvalidInputError, ShapeError

logger = logging.getLogger(__name__)

PREFIX = "richattn"
GRID = 1000.0
AXES = ("x", "y")
FEATURES = ("order_x", "order_y", "distance_x", "distance_y")

Numeric = Union[np.ndarray, float, Tensor]


@dataclass
class PairFeatures:
    order_x: np.ndarray  # [n, n], 1 where center_x(i) < center_x(j)
    order_y: np.ndarray
    logdist_x: np.ndarray  # [n, n], ln(1 + |center_x(i) − center_x(j)|) on the grid
    logdist_y: np.ndarray

    @property
    def n(self) -> int:
        return int(self.order_x.shape[0])

    def order(self, axis: str) -> np.ndarray:
        return self.order_x if axis == "x" else self.order_y

    def logdist(self, axis: str) -> np.ndarray:
        return self.logdist_x if axis == "x" else self.logdist_y

    def padded(self, num_global: int) -> "PairFeatures":
        """Prepend zero rows/columns for the global positions."""
        if num_global == 0:
            return self
        m = self.n + num_global

        def pad(a: np.ndarray) -> np.ndarray:
            out = np.zeros((m, m))
            out[num_global:, num_global:] = a
            return out

        return PairFeatures(pad(self.order_x), pad(self.order_y), pad(self.logdist_x), pad(self.logdist_y))


def grid_centers(tokens: Sequence[Token]) -> np.ndarray:
    return np.array([t.box.center for t in tokens], dtype=np.float64).reshape(-1, 2) * GRID


def pair_features(tokens: Sequence[Token]) -> PairFeatures:
    """Order and log-distance on both axes for every pair of normalized tokens."""
    centers = grid_centers(tokens)
    feats = []
    for axis in range(2):
        c = centers[:, axis]
        diff = c[None, :] - c[:, None]  # c_j − c_i
        feats.append(((c[:, None] < c[None, :]).astype(np.float64), np.log1p(np.abs(diff))))
    (ox, dx), (oy, dy) = feats
    return PairFeatures(order_x=ox, order_y=oy, logdist_x=dx, logdist_y=dy)


# ---------------------------------------------------------------------------
# Score terms
# ---------------------------------------------------------------------------
def order_score(o: Numeric, p: Optional[Numeric] = None, *, logits: Optional[Numeric] = None) -> Numeric:
    """o·ln p + (1 − o)·ln(1 − p).

    Pass either p strictly inside (0, 1) or `logits` with p = sigmoid(logits).
    Both go through one log-sigmoid expression, so a logit scores the same in
    the attention layer and in the derivation checks. Tensors in, tensor out.
    """
    if (p is None) == (logits is None):
        raise InvalidInputError("order_score needs exactly one of p or logits")
    if logits is None:
        p = np.asarray(p, dtype=np.float64)
        if np.any(p <= 0.0) or np.any(p >= 1.0) or not np.all(np.isfinite(p)):
            raise InvalidInputError("order probability must lie strictly in (0, 1)")
        logits = np.log(p) - np.log1p(-p)
    o = np.asarray(o, dtype=np.float64)
    if isinstance(logits, Tensor):
        return _order_from_logits(o, logits)
    return _order_from_logits(o, ad.constant(logits)).values


def _order_from_logits(o: np.ndarray, logits: Tensor) -> Tensor:
    # log-sigmoid keeps saturated logits finite
    return ad.log_sigmoid(logits) * o + ad.log_sigmoid(-logits) * (1.0 - o)


def distance_score(d: Numeric, mu: Numeric, theta: Numeric) -> Numeric:
    """−θ²(d − μ)²/2; works on arrays and on graph tensors alike."""
    gap = d - mu
    return -(theta * theta) * (gap * gap) * 0.5


DistanceFn = Callable[[Numeric, Numeric, Numeric], Numeric]


@dataclass
class RichAttnHeadParams:
    """One head's tensors. Query/key projections live with the backbone."""

    query_w: Tensor
    query_b: Tensor
    key_w: Tensor
    key_b: Tensor
    affines: Dict[str, Tuple[Tensor, Tensor]]  # feature name -> (w [2·d_head, 1], b [1])
    theta: Dict[str, Tensor]  # axis -> [1]

    @property
    def head_dim(self) -> int:
        return int(self.query_w.shape[1])


def head_prefix(layer: int, head: int) -> str:
    return f"{PREFIX}/layer{layer}/head{head}"


def init_head_params(
    store: ParameterStore, layer: int, head: int, head_dim: int, rng: np.random.Generator, std: float = 0.02
) -> None:
    p = head_prefix(layer, head)
    for feature in FEATURES:
        store.create(f"{p}/{feature}/w", (2 * head_dim, 1), rng, std=std)
        store.create(f"{p}/{feature}/b", (1,), init="zeros")
    for axis in AXES:
        store.create(f"{p}/theta_{axis}", (1,), init="constant", value=1.0)


def gather_head_params(store: ParameterStore, query: Tuple[Tensor, Tensor], key: Tuple[Tensor, Tensor], layer: int, head: int) -> RichAttnHeadParams:
    p = head_prefix(layer, head)
    return RichAttnHeadParams(
        query_w=query[0],
        query_b=query[1],
        key_w=key[0],
        key_b=key[1],
        affines={f: (store[f"{p}/{f}/w"], store[f"{p}/{f}/b"]) for f in FEATURES},
        theta={axis: store[f"{p}/theta_{axis}"] for axis in AXES},
    )


def pair_affine(q: Tensor, k: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """affine([q_i; k_j]) for every (i, j), without materializing the concatenation."""
    dh = q.shape[1]
    return (q @ w[:dh]) + (k @ w[dh:]).T + b


def ideal_order(q: Tensor, k: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.sigmoid(pair_affine(q, k, w, b))


def ideal_distance(q: Tensor, k: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return pair_affine(q, k, w, b)


def local_pair_mask(m: int, num_global: int) -> np.ndarray:
    mask = np.zeros((m, m))
    mask[num_global:, num_global:] = 1.0
    return mask


def project(states: Tensor, head: RichAttnHeadParams) -> Tuple[Tensor, Tensor]:
    return ad.affine(states, head.query_w, head.query_b), ad.affine(states, head.key_w, head.key_b)


def layout_terms(
    q: Tensor,
    k: Tensor,
    features: PairFeatures,
    head: RichAttnHeadParams,
    distance_fn: DistanceFn = distance_score,
) -> Dict[str, Tensor]:
    """Per-feature penalty matrices over all (padded) positions, before the local-pair mask."""
    terms: Dict[str, Tensor] = {}
    for axis in AXES:
        w_o, b_o = head.affines[f"order_{axis}"]
        terms[f"order_{axis}"] = order_score(features.order(axis), logits=pair_affine(q, k, w_o, b_o))
        w_d, b_d = head.affines[f"distance_{axis}"]
        mu = ideal_distance(q, k, w_d, b_d)
        terms[f"distance_{axis}"] = distance_fn(features.logdist(axis), mu, head.theta[axis])
    return terms


def rich_scores(
    states: Tensor,
    features: Optional[PairFeatures],
    mask: np.ndarray,
    head: RichAttnHeadParams,
    num_global: int = 1,
    distance_fn: DistanceFn = distance_score,
) -> Tensor:
    """
    Pre-softmax scores for one head over [global; local] rows.
    ``features`` covers the local tokens only; None gives the plain scaled dot product.
    The caller applies ``mask`` in the softmax.
    """
    m = states.shape[0]
    if np.shape(mask) != (m, m):
        raise ShapeError("rich_scores", states.shape, np.shape(mask), "mask must be square over all positions")
    q, k = project(states, head)
    scores = (q @ k.T) * (1.0 / math.sqrt(head.head_dim))
    if features is None:
        return scores
    if features.n + num_global != m:
        raise ShapeError("rich_scores", (features.n + num_global,), (m,), "pair features do not cover the sequence")
    padded = features.padded(num_global)
    local = local_pair_mask(m, num_global)
    penalty = None
    for term in layout_terms(q, k, padded, head, distance_fn).values():
        penalty = term if penalty is None else penalty + term
    return scores + penalty * local


def score_terms(
    states: Tensor, features: PairFeatures, head: RichAttnHeadParams, num_global: int = 1
) -> Dict[str, np.ndarray]:
    """Local-by-local penalty matrices for one head, as plain arrays."""
    q, k = project(states, head)
    terms = layout_terms(q, k, features.padded(num_global), head)
    return {name: t.values[num_global:, num_global:].copy() for name, t in terms.items()}


def dump_score_terms(terms: Dict[str, np.ndarray], out_dir: str, stem: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, matrix in terms.items():
        path = os.path.join(out_dir, f"{stem}_{name}.csv")
        pd.DataFrame(matrix).to_csv(path, index_label="i")
        paths.append(path)
    logger.info("Wrote %d score matrices to %s", len(paths), out_dir)
    return paths
