"""Geometric GNN encoder: attention-weighted message passing over
(possibly diffused) residue neighborhoods.

Per layer and head: a_ij = q_i . k_ij / sqrt(d_head) with
k_ij = [h_j; e_ij] W_k, alpha row-softmaxed over N(i), and

    h_i' = GELU(W_s h_i + concat_heads(sum_j alpha_ij [h_j; e_ij] W_m) + b)

Nodes with empty neighborhoods attend to themselves with alpha = 1 and a
zero edge-feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch

__all__ = ["GnnLayerParams", "flatten_neighborhoods", "geometric_scores", "gnn_layer", "gnn_encode"]


@dataclass
class GnnLayerParams:
    """One layer's tensors; per-head lists hold the d/H-dim column splits."""

    w_self: object  # (d, d)
    bias: object  # (d,)
    w_query: list  # per head (d, d_head)
    w_key: list  # per head (d + d_e, d_head)
    w_msg: list  # per head (d + d_e, d_head)

    @property
    def heads(self) -> int:
        return len(self.w_query)


def flatten_neighborhoods(nbrs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten per-node neighbor lists to (src, dst, is_fallback) edge arrays.

    Empty neighborhoods produce a single self-edge flagged as fallback; edges
    are ordered by source node, fallback self-edges appended last so zero
    edge-feature rows can be concatenated onto the real ones.
    """
    src, dst, fb_src = [], [], []
    for i, nb in enumerate(nbrs):
        if len(nb) == 0:
            fb_src.append(i)
        else:
            src.extend([i] * len(nb))
            dst.extend(int(j) for j in nb)
    src = np.array(src + fb_src, dtype=np.intp)
    dst = np.array(dst + fb_src, dtype=np.intp)
    fallback = np.zeros(len(src), dtype=bool)
    if fb_src:
        fallback[-len(fb_src):] = True
    return src, dst, fallback


def _edge_matrix_from_map(edge_feats: dict, src: np.ndarray, dst: np.ndarray,
                          fallback: np.ndarray, d_e: int):
    rows = []
    for i, j, fb in zip(src, dst, fallback):
        rows.append(np.zeros(d_e) if fb else np.asarray(edge_feats[(int(i), int(j))]))
    return np.array(rows).reshape(len(src), d_e)


def _segment_softmax(scores: ad.Node, seg: np.ndarray, n: int) -> ad.Node:
    """Softmax over variable-size segments, max-shifted per segment."""
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, seg, scores.value)
    e = ad.exp(ad.sub(scores, ad.constant(shift[seg])))
    denom = ad.segment_sum(ad.reshape(e, (-1, 1)), seg, n)
    return ad.div(e, ad.reshape(ad.rows(denom, seg), (-1,)))


def geometric_scores_nodes(h, edge_mat, src, dst, lp: GnnLayerParams, L: int) -> list[ad.Node]:
    """Per-head edge attention weights alpha (flat, aligned with src/dst)."""
    h = ad.as_node(h)
    edge_mat = ad.as_node(edge_mat)
    d_head = ad.value(lp.w_query[0]).shape[1]
    hj_e = ad.concat([ad.rows(h, dst), edge_mat], axis=1)
    alphas = []
    for hd in range(lp.heads):
        q = ad.rows(ad.matmul(h, lp.w_query[hd]), src)
        k = ad.matmul(hj_e, lp.w_key[hd])
        scores = ad.mul(ad.sum_(ad.mul(q, k), axis=1), 1.0 / np.sqrt(d_head))
        alphas.append(_segment_softmax(scores, src, L))
    return alphas


def geometric_scores(h, edge_feats: dict, nbrs: list[np.ndarray], lp: GnnLayerParams) -> list[list[np.ndarray]]:
    """Attention weights per head per node, aligned with each node's sorted
    neighbor list (a singleton [1.0] for fallback self-attention)."""
    h = np.asarray(h, dtype=np.float64)
    L = h.shape[0]
    src, dst, fallback = flatten_neighborhoods(nbrs)
    d_e = ad.value(lp.w_key[0]).shape[0] - h.shape[1]
    edge_mat = _edge_matrix_from_map(edge_feats, src, dst, fallback, d_e)
    alphas = geometric_scores_nodes(h, edge_mat, src, dst, lp, L)
    out = []
    for a in alphas:
        av = a.value
        per_node = [av[src == i] for i in range(L)]
        out.append(per_node)
    return out


def gnn_layer_nodes(h, edge_mat, src, dst, lp: GnnLayerParams, L: int) -> ad.Node:
    h = ad.as_node(h)
    edge_mat = ad.as_node(edge_mat)
    if ad.value(lp.w_self).shape[0] != h.value.shape[1]:
        raise ShapeMismatch(
            f"w_self expects dim {ad.value(lp.w_self).shape[0]}, input has {h.value.shape[1]}"
        )
    hj_e = ad.concat([ad.rows(h, dst), edge_mat], axis=1)
    alphas = geometric_scores_nodes(h, edge_mat, src, dst, lp, L)
    head_outs = []
    for hd in range(lp.heads):
        msg = ad.matmul(hj_e, lp.w_msg[hd])
        weighted = ad.mul(msg, ad.reshape(alphas[hd], (-1, 1)))
        head_outs.append(ad.segment_sum(weighted, src, L))
    agg = ad.concat(head_outs, axis=1)
    return ad.gelu(ad.add(ad.add(ad.matmul(h, lp.w_self), agg), lp.bias))


def gnn_layer(h, edge_feats: dict, nbrs: list[np.ndarray], lp: GnnLayerParams) -> np.ndarray:
    """One message-passing layer on plain arrays (see module docstring)."""
    h = np.asarray(h, dtype=np.float64)
    if ad.value(lp.w_self).shape[0] != h.shape[1]:
        raise ShapeMismatch(
            f"w_self expects dim {ad.value(lp.w_self).shape[0]}, input has {h.shape[1]}"
        )
    src, dst, fallback = flatten_neighborhoods(nbrs)
    d_e = ad.value(lp.w_key[0]).shape[0] - h.shape[1]
    edge_mat = _edge_matrix_from_map(edge_feats, src, dst, fallback, d_e)
    return gnn_layer_nodes(h, edge_mat, src, dst, lp, h.shape[0]).value


def gnn_encode(
    h0,
    layer_params: list[GnnLayerParams],
    nbrs_per_layer: list[list[np.ndarray]],
    edge_feats_per_layer: list[dict],
    in_proj=None,
    in_bias=None,
) -> np.ndarray:
    """Apply the input projection then each layer with its own neighborhoods."""
    h = np.asarray(h0, dtype=np.float64)
    if in_proj is not None:
        h = h @ np.asarray(ad.value(in_proj))
        if in_bias is not None:
            h = h + np.asarray(ad.value(in_bias))
    for lp, nbrs, ef in zip(layer_params, nbrs_per_layer, edge_feats_per_layer):
        h = gnn_layer(h, ef, nbrs, lp)
    return h
