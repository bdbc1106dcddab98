"""Sequence encoder: token + sinusoidal position embedding and pre-norm
multi-head self-attention layers with an override hook for diffused attention.

Layer layout (pre-norm; the residual stream is never normalized in place):

    Xn = LN1(X);  A_h = softmax(Q_h K_h^T / sqrt(d_head))  per head
    X1 = X + [A_1 V_1; ...; A_H V_H] W_o + b_o
    X' = X1 + FFN(LN2(X1))         FFN(x) = GELU(x W1 + b1) W2 + b2

When per-head override matrices are supplied (the diffused attention), they
replace the computed scores; every consumed attention matrix is row-
renormalized, and overrides must already be row-stochastic to 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonStochasticOverride, ShapeMismatch, UnknownResidue
from .protein_io import AA_INDEX

__all__ = ["AttnLayerParams", "sinusoidal_pe", "embed_tokens", "mhsa_scores", "transformer_layer"]


@dataclass
class AttnLayerParams:
    """One transformer layer's tensors; per-head lists are d/H-dim splits."""

    ln1_scale: object
    ln1_shift: object
    w_query: list  # per head (d, d_head)
    w_key: list
    w_value: list
    w_out: object  # (d, d)
    b_out: object  # (d,)
    ln2_scale: object
    ln2_shift: object
    ffn_w1: object  # (d, d_ffn)
    ffn_b1: object
    ffn_w2: object  # (d_ffn, d)
    ffn_b2: object

    @property
    def heads(self) -> int:
        return len(self.w_query)


def sinusoidal_pe(L: int, d: int) -> np.ndarray:
    """PE(p, 2i) = sin(p / 10000^(2i/d)), PE(p, 2i+1) = cos(...); 1-based p."""
    pos = np.arange(1, L + 1, dtype=np.float64)[:, None]
    pe = np.zeros((L, d))
    two_i = np.arange(0, d, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, two_i / d)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : pe[:, 1::2].shape[1]])
    return pe


def embed_tokens_nodes(seq: str, table) -> ad.Node:
    for a in seq:
        if a not in AA_INDEX:
            raise UnknownResidue(f"unknown amino acid letter {a!r}")
    idx = np.array([AA_INDEX[a] for a in seq], dtype=np.intp)
    d = ad.value(table).shape[1]
    return ad.add(ad.rows(ad.as_node(table), idx), ad.constant(sinusoidal_pe(len(seq), d)))


def embed_tokens(seq: str, table) -> np.ndarray:
    """Token embedding plus sinusoidal positional encoding, L x d."""
    return embed_tokens_nodes(seq, table).value


def layer_norm_nodes(x, scale, shift, eps: float = 1e-5) -> ad.Node:
    x = ad.as_node(x)
    mu = ad.mean(x, axis=1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.square(xc), axis=1, keepdims=True)
    return ad.add(ad.mul(ad.div(xc, ad.sqrt(ad.add(var, eps))), scale), shift)


def mhsa_scores_nodes(x, lp: AttnLayerParams) -> list[ad.Node]:
    x = ad.as_node(x)
    d_head = ad.value(lp.w_query[0]).shape[1]
    if ad.value(lp.w_query[0]).shape[0] != x.value.shape[1]:
        raise ShapeMismatch("query projection does not match input width")
    heads = []
    for hd in range(lp.heads):
        q = ad.matmul(x, lp.w_query[hd])
        k = ad.matmul(x, lp.w_key[hd])
        heads.append(ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_head))))
    return heads


def mhsa_scores(x, lp: AttnLayerParams) -> list[np.ndarray]:
    """Per-head attention matrices softmax(Q K^T / sqrt(d_head)); rows sum to 1."""
    return [h.value for h in mhsa_scores_nodes(x, lp)]


def _validate_override(a_override, L: int, heads: int):
    if len(a_override) != heads:
        raise ShapeMismatch(f"expected {heads} override heads, got {len(a_override)}")
    for a in a_override:
        av = ad.value(a)
        if av.shape != (L, L):
            raise ShapeMismatch(f"override shape {av.shape} != ({L}, {L})")
        sums = av.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise NonStochasticOverride(
                f"override row sums deviate from 1 by {np.max(np.abs(sums - 1.0)):.3e}"
            )


def _renorm_rows(a) -> ad.Node:
    a = ad.as_node(a)
    return ad.div(a, ad.sum_(a, axis=1, keepdims=True))


def transformer_layer_nodes(
    x,
    lp: AttnLayerParams,
    a_override: list | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[ad.Node, list[ad.Node]]:
    x = ad.as_node(x)
    L = x.value.shape[0]
    xn = layer_norm_nodes(x, lp.ln1_scale, lp.ln1_shift)
    if a_override is not None:
        _validate_override(a_override, L, lp.heads)
        a_used = [ad.as_node(a) for a in a_override]
    else:
        a_used = mhsa_scores_nodes(xn, lp)
    a_used = [_renorm_rows(a) for a in a_used]
    contexts = [ad.matmul(a_used[hd], ad.matmul(xn, lp.w_value[hd])) for hd in range(lp.heads)]
    attn_out = ad.add(ad.matmul(ad.concat(contexts, axis=1), lp.w_out), lp.b_out)
    if training and dropout > 0.0:
        attn_out = ad.dropout(attn_out, dropout, rng)
    x1 = ad.add(x, attn_out)
    hidden = ad.gelu(ad.add(ad.matmul(layer_norm_nodes(x1, lp.ln2_scale, lp.ln2_shift), lp.ffn_w1), lp.ffn_b1))
    if training and dropout > 0.0:
        hidden = ad.dropout(hidden, dropout, rng)
    ffn_out = ad.add(ad.matmul(hidden, lp.ffn_w2), lp.ffn_b2)
    return ad.add(x1, ffn_out), a_used


def transformer_layer(
    x,
    lp: AttnLayerParams,
    a_override: list | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """One encoder layer; returns (X', per-head attention actually used)."""
    out, a_used = transformer_layer_nodes(x, lp, a_override, dropout, rng, training)
    return out.value, [a.value for a in a_used]
