"""Mutation-specific aggregation of the two encoder outputs and the MLP head.

Three context vectors are built around the 1-based mutation position p:

* local: mean over the window [max(1, p-w), min(L, p+w)] of [H^G_i; H^T_i]
* global: [column-wise max over H^G rows; column-wise mean over H^T rows]
* mutation: [embed(wt); embed(mut); sinusoidal encoding of p/L]

Each is linearly projected to width d and concatenated (3d), then scored by
a three-layer MLP: GELU, GELU + dropout (training only), linear to a scalar
ddG in kcal/mol.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import MissingParam, PositionOutOfRange, ShapeMismatch
from .protein_io import AA_INDEX, MutationRecord

__all__ = ["positional_encoding_scalar", "aggregate", "predict_head"]


def _get(params, name: str):
    try:
        return params[name]
    except KeyError:
        raise MissingParam(name) from None


def positional_encoding_scalar(x: float, k: int = 8) -> np.ndarray:
    """[sin(2^j x), cos(2^j x)] for j = 0..k-1; a 2k-dim encoding of a scalar."""
    freqs = 2.0 ** np.arange(k)
    return np.concatenate([np.sin(freqs * x), np.cos(freqs * x)])


def aggregate_nodes(hg, ht, m: MutationRecord, params, window: int, pos_k: int = 8) -> ad.Node:
    hg = ad.as_node(hg)
    ht = ad.as_node(ht)
    L = hg.value.shape[0]
    if ht.value.shape[0] != L:
        raise ShapeMismatch("encoder outputs disagree on length")
    if not 1 <= m.position <= L:
        raise PositionOutOfRange(f"position {m.position} outside 1..{L}")

    lo = max(1, m.position - window) - 1
    hi = min(L, m.position + window)
    idx = np.arange(lo, hi, dtype=np.intp)
    local = ad.mean(ad.concat([ad.rows(hg, idx), ad.rows(ht, idx)], axis=1), axis=0)

    glob = ad.concat([ad.max_(hg, axis=0), ad.mean(ht, axis=0)], axis=0)

    table = ad.as_node(_get(params, "embed.aa_tf"))
    wt_mut = ad.reshape(
        ad.rows(table, np.array([AA_INDEX[m.wt], AA_INDEX[m.mut]], dtype=np.intp)), (-1,)
    )
    pos = ad.constant(positional_encoding_scalar(m.position / L, pos_k))
    mut = ad.concat([wt_mut, pos], axis=0)

    parts = []
    for vec, name in ((local, "local"), (glob, "global"), (mut, "mut")):
        w = _get(params, f"fus.p_{name}_w")
        b = _get(params, f"fus.p_{name}_b")
        parts.append(ad.add(ad.matmul(vec, w), b))
    return ad.concat(parts, axis=0)


def aggregate(hg, ht, m: MutationRecord, params, window: int = 3, pos_k: int = 8) -> np.ndarray:
    """Fused 3d feature vector for one mutation (see module docstring)."""
    return aggregate_nodes(hg, ht, m, params, window, pos_k).value


def predict_head_nodes(
    h,
    params,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.1,
) -> ad.Node:
    h = ad.as_node(h)
    if h.value.shape[0] != ad.value(_get(params, "head.w1")).shape[0]:
        raise ShapeMismatch(
            f"head expects {ad.value(_get(params, 'head.w1')).shape[0]} inputs, got {h.value.shape[0]}"
        )
    z1 = ad.gelu(ad.add(ad.matmul(h, _get(params, "head.w1")), _get(params, "head.b1")))
    z2 = ad.gelu(ad.add(ad.matmul(z1, _get(params, "head.w2")), _get(params, "head.b2")))
    if training and dropout > 0.0:
        z2 = ad.dropout(z2, dropout, rng)
    out = ad.add(ad.matmul(z2, _get(params, "head.w3")), _get(params, "head.b3"))
    return ad.reshape(out, ())


def predict_head(
    h,
    params,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.1,
) -> float:
    """Scalar ddG (kcal/mol) from the fused feature vector."""
    return float(predict_head_nodes(h, params, training, rng, dropout).value)
