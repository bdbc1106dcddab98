"""End-to-end model: config, parameter registry, the coupled forward pass,
regularized loss, reverse-mode gradients, and checkpoint serialization.

The forward pass interleaves the two encoders layer by layer. At coupled
layer l (up to min(gnn_layers, tf_layers)):

1. GNN layer l runs on the current neighborhoods (contact graph at l=1,
   diffused neighborhoods afterwards).
2. Transformer scores A_l are computed, their normalized row entropy feeds
   the rate kernel, and each head is diffused against the original
   normalized affinity for T steps, then row-renormalized and consumed by
   transformer layer l as an attention override.
3. The consumed heads are averaged/thresholded into a pseudo-graph which
   diffuses the affinity; the result defines the next layer's neighborhoods.

When the stacks have unequal depth, the deeper stack keeps consuming its
last diffused artifact. With `diffusion.enabled = False` the block is
bypassed; forcing beta = gamma = 0 reproduces the bypassed model bit-exactly.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import numerics
from .diffusion import (
    DiffusionConfig,
    DiffusionKernelParams,
    attention_pseudo_graph,
    diffuse_attention,
    diffuse_graph,
    diffused_neighborhoods,
    diffusion_rate,
    renormalize_rows,
)
from .errors import (
    EmptyBatch,
    InvalidConfig,
    IoError,
    LengthMismatch,
    MissingParam,
    PositionOutOfRange,
)
from .fusion import aggregate_nodes, positional_encoding_scalar, predict_head_nodes
from .gnn import GnnLayerParams, flatten_neighborhoods, gnn_layer_nodes
from .protein_io import (
    AA_INDEX,
    Structure,
    StructureGraph,
    build_contact_graph,
    edge_mlp_nodes,
    node_features_nodes,
    pair_geometry_block,
)
from .transformer import (
    AttnLayerParams,
    embed_tokens_nodes,
    layer_norm_nodes,
    mhsa_scores_nodes,
    transformer_layer_nodes,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "AttentionState",
    "StructureCache",
    "build_cache",
    "init_params",
    "forward",
    "loss",
    "gradients",
    "predict_batch",
    "save_checkpoint",
    "load_checkpoint",
    "is_penalized",
]

CHECKPOINT_MAGIC = b"DGTN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the defaults are the desk-scale profile.

    `ModelConfig.paper()` gives the full-scale configuration (hidden 256,
    8 heads, 4 GNN + 6 transformer layers, FFN 1024, head 768-384-192-1).
    """

    d: int = 32
    heads: int = 2
    gnn_layers: int = 2
    tf_layers: int = 2
    d_ffn: int = 128
    d_a: int = 32
    d_p: int = 16
    d_f: int = 3
    d_e: int = 16
    rbf_k: int = 8
    rbf_gamma: float = 0.25
    rbf_span: float | None = None  # distance range of the radial basis; defaults to r_c
    angle_k: int = 4
    angle_gamma: float = 1.0
    r_c: float = 10.0
    sigma: float = 5.0
    window: int = 3
    pos_k: int = 8
    dropout: float = 0.1
    l2_lambda: float = 0.0
    seed: int = 0
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        if self.d < 1 or self.d % self.heads != 0:
            raise InvalidConfig("d must be positive and divisible by heads")
        if min(self.gnn_layers, self.tf_layers) < 0:
            raise InvalidConfig("layer counts must be nonnegative")
        if (3 * self.d) % 4 != 0:
            raise InvalidConfig("3*d must be divisible by 4 for the head dims")
        for name in ("d_a", "d_p", "d_f", "d_e", "rbf_k", "angle_k", "pos_k"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.r_c <= 0 or self.sigma <= 0:
            raise InvalidConfig("r_c and sigma must be positive")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(d=256, heads=8, gnn_layers=4, tf_layers=6, d_ffn=1024)
        base.update(overrides)
        return cls(**base)

    @property
    def d_node(self) -> int:
        return self.d_a + self.d_p + self.d_f

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def head_dims(self) -> tuple[int, int]:
        return (3 * self.d) // 2, (3 * self.d) // 4

    @property
    def n_couple(self) -> int:
        return min(self.gnn_layers, self.tf_layers)

    @property
    def rbf_centers(self) -> np.ndarray:
        return np.linspace(0.0, self.rbf_span if self.rbf_span is not None else self.r_c,
                           self.rbf_k)

    @property
    def angle_centers(self) -> np.ndarray:
        return np.linspace(0.0, math.pi, self.angle_k)


@dataclass
class ModelParams:
    """Named tensor registry spanning all modules; names sort deterministically."""

    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise MissingParam(name) from None

    def names(self) -> list[str]:
        return sorted(self.tensors)


def is_penalized(name: str, arr: np.ndarray) -> bool:
    """Weight matrices enter the L2 penalty; biases, gains, logit vectors and
    embedding tables do not."""
    return arr.ndim == 2 and not name.startswith("embed.")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dh, de = cfg.d, cfg.d_head, cfg.d_e
    shapes: dict[str, tuple[int, ...]] = {
        "embed.aa_gnn": (20, cfg.d_a),
        "embed.aa_tf": (20, d),
        "node.coord_w1": (3, cfg.d_p),
        "node.coord_b1": (cfg.d_p,),
        "node.coord_w2": (cfg.d_p, cfg.d_p),
        "node.coord_b2": (cfg.d_p,),
        "edge.w1": (cfg.rbf_k + 3 + cfg.angle_k, de),
        "edge.b1": (de,),
        "edge.w2": (de, de),
        "edge.b2": (de,),
        "gnn.in_w": (cfg.d_node, d),
        "gnn.in_b": (d,),
    }
    for l in range(cfg.gnn_layers):
        shapes[f"gnn{l}.ws"] = (d, d)
        shapes[f"gnn{l}.b"] = (d,)
        for h in range(cfg.heads):
            shapes[f"gnn{l}.wq{h}"] = (d, dh)
            shapes[f"gnn{l}.wk{h}"] = (d + de, dh)
            shapes[f"gnn{l}.wm{h}"] = (d + de, dh)
    for l in range(cfg.tf_layers):
        shapes[f"tf{l}.ln1_g"] = (d,)
        shapes[f"tf{l}.ln1_b"] = (d,)
        for h in range(cfg.heads):
            shapes[f"tf{l}.wq{h}"] = (d, dh)
            shapes[f"tf{l}.wk{h}"] = (d, dh)
            shapes[f"tf{l}.wv{h}"] = (d, dh)
        shapes[f"tf{l}.wo"] = (d, d)
        shapes[f"tf{l}.bo"] = (d,)
        shapes[f"tf{l}.ln2_g"] = (d,)
        shapes[f"tf{l}.ln2_b"] = (d,)
        shapes[f"tf{l}.ffn_w1"] = (d, cfg.d_ffn)
        shapes[f"tf{l}.ffn_b1"] = (cfg.d_ffn,)
        shapes[f"tf{l}.ffn_w2"] = (cfg.d_ffn, d)
        shapes[f"tf{l}.ffn_b2"] = (d,)
    if cfg.n_couple > 0:
        if cfg.diffusion.kernel_enabled:
            shapes["diff.w_beta"] = (2,)
            shapes["diff.b_beta"] = ()
        else:
            shapes["diff.beta_logits"] = (cfg.n_couple,)
        shapes["diff.gamma_logits"] = (cfg.n_couple,)
    h1, h2 = cfg.head_dims
    shapes.update({
        "fus.p_local_w": (2 * d, d),
        "fus.p_local_b": (d,),
        "fus.p_global_w": (2 * d, d),
        "fus.p_global_b": (d,),
        "fus.p_mut_w": (2 * d + 2 * cfg.pos_k, d),
        "fus.p_mut_b": (d,),
        "head.w1": (3 * d, h1),
        "head.b1": (h1,),
        "head.w2": (h1, h2),
        "head.b2": (h2,),
        "head.w3": (h2, 1),
        "head.b3": (1,),
    })
    return shapes


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def init_params(cfg: ModelConfig) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit norm gains, and diffusion
    logits placed at sigmoid(logit) = (0.1 + 0.5) / 2 = midpoint of the
    allowed init range. Deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    tensors: dict[str, np.ndarray] = {}
    beta_logit = _logit(cfg.diffusion.beta_init)
    gamma_logit = _logit(cfg.diffusion.gamma_init)
    shapes = param_shapes(cfg)
    for name in sorted(shapes):
        shape = shapes[name]
        if name in ("diff.b_beta", "diff.beta_logits"):
            tensors[name] = np.full(shape, beta_logit)
        elif name == "diff.gamma_logits":
            tensors[name] = np.full(shape, gamma_logit)
        elif name == "diff.w_beta":
            tensors[name] = np.zeros(shape)
        elif len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-bound, bound, shape)
        elif name.endswith(("ln1_g", "ln2_g")):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(tensors)


@dataclass
class AttentionState:
    """Per-layer attention diagnostics from one forward pass."""

    attention: list[list[np.ndarray]]  # pre-diffusion heads per coupled layer
    diffused: list[list[np.ndarray]]  # renormalized heads actually consumed
    betas: list[float]
    gammas: list[float]
    step_residuals: list[np.ndarray]  # head-mean ||A^(t) - A^(t-1)||_F per step


@dataclass
class StructureCache:
    """Geometry constants reused across forward passes of one structure."""

    structure: Structure
    graph: StructureGraph
    pair_block: np.ndarray  # (n_pairs, rbf_k + 3 + angle_k) for all i != j
    pair_row: np.ndarray  # (L, L) index into pair_block, -1 on the diagonal


def build_cache(structure: Structure, cfg: ModelConfig) -> StructureCache:
    graph = build_contact_graph(structure, cfg.r_c, cfg.sigma)
    L = structure.L
    src, dst = np.nonzero(~np.eye(L, dtype=bool))
    block = pair_geometry_block(
        structure, src, dst, cfg.rbf_centers, cfg.rbf_gamma, cfg.angle_centers, cfg.angle_gamma
    )
    pair_row = np.full((L, L), -1, dtype=np.intp)
    pair_row[src, dst] = np.arange(len(src))
    return StructureCache(structure, graph, block, pair_row)


class _TapeParams(Mapping):
    """Mapping view that lazily registers tensors on a tape as autodiff leaves."""

    def __init__(self, tape: ad.Tape, params: ModelParams):
        self._tape = tape
        self._params = params

    def __getitem__(self, name: str) -> ad.Node:
        try:
            return self._tape.param(name, self._params.tensors[name])
        except KeyError:
            raise MissingParam(name) from None

    def __iter__(self):
        return iter(self._params.tensors)

    def __len__(self):
        return len(self._params.tensors)


def _gnn_lp(p: Mapping, cfg: ModelConfig, l: int) -> GnnLayerParams:
    return GnnLayerParams(
        w_self=p[f"gnn{l}.ws"],
        bias=p[f"gnn{l}.b"],
        w_query=[p[f"gnn{l}.wq{h}"] for h in range(cfg.heads)],
        w_key=[p[f"gnn{l}.wk{h}"] for h in range(cfg.heads)],
        w_msg=[p[f"gnn{l}.wm{h}"] for h in range(cfg.heads)],
    )


def _tf_lp(p: Mapping, cfg: ModelConfig, l: int) -> AttnLayerParams:
    return AttnLayerParams(
        ln1_scale=p[f"tf{l}.ln1_g"],
        ln1_shift=p[f"tf{l}.ln1_b"],
        w_query=[p[f"tf{l}.wq{h}"] for h in range(cfg.heads)],
        w_key=[p[f"tf{l}.wk{h}"] for h in range(cfg.heads)],
        w_value=[p[f"tf{l}.wv{h}"] for h in range(cfg.heads)],
        w_out=p[f"tf{l}.wo"],
        b_out=p[f"tf{l}.bo"],
        ln2_scale=p[f"tf{l}.ln2_g"],
        ln2_shift=p[f"tf{l}.ln2_b"],
        ffn_w1=p[f"tf{l}.ffn_w1"],
        ffn_b1=p[f"tf{l}.ffn_b1"],
        ffn_w2=p[f"tf{l}.ffn_w2"],
        ffn_b2=p[f"tf{l}.ffn_b2"],
    )


def _kernel(p: Mapping, cfg: ModelConfig) -> DiffusionKernelParams:
    dc = cfg.diffusion
    return DiffusionKernelParams(
        w_beta=p["diff.w_beta"] if dc.kernel_enabled else None,
        b_beta=p["diff.b_beta"] if dc.kernel_enabled else None,
        beta_logits=None if dc.kernel_enabled else p["diff.beta_logits"],
        gamma_logits=p["diff.gamma_logits"],
    )


def _attention_entropy(heads: list[ad.Node], L: int) -> ad.Node:
    """Mean row entropy over heads, normalized by ln L, in [0, 1]."""
    acc = None
    for a in heads:
        ent = ad.neg(ad.mean(ad.sum_(ad.mul(a, ad.log(ad.add(a, 1e-300))), axis=1)))
        acc = ent if acc is None else ad.add(acc, ent)
    return ad.mul(acc, 1.0 / (len(heads) * math.log(L)))


def _edge_matrix(e_all: ad.Node, cache: StructureCache, src, dst, fallback, d_e: int) -> ad.Node:
    real = ~fallback
    pieces = []
    if real.any():
        pieces.append(ad.rows(e_all, cache.pair_row[src[real], dst[real]]))
    n_fb = int(fallback.sum())
    if n_fb:
        pieces.append(ad.constant(np.zeros((n_fb, d_e))))
    return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)


def _step_residuals(a0: np.ndarray, s_norm: np.ndarray, beta: float, steps: int) -> np.ndarray:
    res = []
    restart = (1.0 - beta) * a0
    a = a0
    for _ in range(steps):
        nxt = restart + beta * (s_norm @ a)
        res.append(numerics.frobenius(nxt - a))
        a = nxt
    return np.array(res)


def _encode_nodes(
    p: Mapping,
    cache: StructureCache,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    collect_state: bool = False,
) -> tuple[ad.Node, ad.Node, AttentionState | None]:
    """Run the coupled encoder stacks; returns (H^G, H^T, optional state)."""
    st = cache.structure
    L = st.L
    dc = cfg.diffusion
    state = AttentionState([], [], [], [], []) if collect_state else None

    hg = ad.add(ad.matmul(node_features_nodes(st, p), p["gnn.in_w"]), p["gnn.in_b"])
    x = embed_tokens_nodes(st.seq, p["embed.aa_tf"])
    e_all = edge_mlp_nodes(cache.pair_block, p)

    s_norm_const = ad.constant(cache.graph.S_norm)
    nbrs = cache.graph.neighbors
    kernel = _kernel(p, cfg) if cfg.n_couple > 0 and dc.enabled else None
    last_override = None

    for l in range(max(cfg.gnn_layers, cfg.tf_layers)):
        if l < cfg.gnn_layers:
            src, dst, fallback = flatten_neighborhoods(nbrs)
            e_mat = _edge_matrix(e_all, cache, src, dst, fallback, cfg.d_e)
            hg = gnn_layer_nodes(hg, e_mat, src, dst, _gnn_lp(p, cfg, l), L)
        if l < cfg.tf_layers:
            lp = _tf_lp(p, cfg, l)
            coupled = l < cfg.n_couple and dc.enabled
            if coupled:
                heads = mhsa_scores_nodes(layer_norm_nodes(x, lp.ln1_scale, lp.ln1_shift), lp)
                if dc.force_beta is not None:
                    beta = float(dc.force_beta)
                else:
                    entropy = _attention_entropy(heads, L)
                    beta = diffusion_rate(l + 1, cfg.n_couple, entropy, kernel, dc)
                diffused = [
                    renormalize_rows(diffuse_attention(a, s_norm_const, beta, dc.steps))
                    for a in heads
                ]
                x, used = transformer_layer_nodes(x, lp, diffused, cfg.dropout, rng, training)
                last_override = diffused

                if dc.force_gamma is not None:
                    gamma = float(dc.force_gamma)
                else:
                    gamma = ad.sigmoid(ad.rows(kernel.gamma_logits, np.array([l])))
                pseudo = attention_pseudo_graph(used, dc.tau, self_loops=True)
                s_diff = diffuse_graph(s_norm_const, pseudo, gamma, dc.steps)
                nbrs = diffused_neighborhoods(s_diff, dc.eps_nbr, dc.k_max)

                if collect_state:
                    beta_v = beta if isinstance(beta, float) else float(np.mean(ad.value(beta)))
                    gamma_v = gamma if isinstance(gamma, float) else float(np.mean(ad.value(gamma)))
                    state.attention.append([h.value.copy() for h in heads])
                    state.diffused.append([u.value.copy() for u in used])
                    state.betas.append(beta_v)
                    state.gammas.append(gamma_v)
                    state.step_residuals.append(
                        np.mean(
                            [
                                _step_residuals(h.value, cache.graph.S_norm, beta_v, dc.steps)
                                for h in heads
                            ],
                            axis=0,
                        )
                    )
            elif l < cfg.n_couple:
                # diffusion disabled: same layer-wise loop, raw attention
                heads = mhsa_scores_nodes(layer_norm_nodes(x, lp.ln1_scale, lp.ln1_shift), lp)
                override = [renormalize_rows(a) for a in heads]
                x, used = transformer_layer_nodes(x, lp, override, cfg.dropout, rng, training)
                last_override = override
                nbrs = diffused_neighborhoods(cache.graph.S_norm, dc.eps_nbr, dc.k_max)
                if collect_state:
                    state.attention.append([h.value.copy() for h in heads])
                    state.diffused.append([u.value.copy() for u in used])
                    state.betas.append(0.0)
                    state.gammas.append(0.0)
                    state.step_residuals.append(np.zeros(dc.steps))
            else:
                # beyond the coupling points the transformer reuses its last
                # diffused attention when one exists
                x, _ = transformer_layer_nodes(x, lp, last_override, cfg.dropout, rng, training)
    return hg, x, state


def _records_head_nodes(
    hg: ad.Node,
    ht: ad.Node,
    records,
    p: Mapping,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Node:
    """Aggregate + head for all records of one structure in one subgraph.

    Equivalent to per-record `fusion.aggregate_nodes` + `predict_head_nodes`
    (up to float summation order); one gather/segment pass serves the batch.
    """
    L = hg.value.shape[0]
    n = len(records)
    win_idx, seg, counts = [], [], []
    for k, r in enumerate(records):
        if not 1 <= r.position <= L:
            raise PositionOutOfRange(f"position {r.position} outside 1..{L}")
        lo = max(1, r.position - cfg.window) - 1
        hi = min(L, r.position + cfg.window)
        win_idx.extend(range(lo, hi))
        seg.extend([k] * (hi - lo))
        counts.append(hi - lo)
    paired = ad.concat([hg, ht], axis=1)
    sums = ad.segment_sum(ad.rows(paired, np.array(win_idx, dtype=np.intp)),
                          np.array(seg, dtype=np.intp), n)
    local = ad.mul(sums, ad.constant(1.0 / np.array(counts, dtype=np.float64)[:, None]))

    glob = ad.concat([ad.max_(hg, axis=0), ad.mean(ht, axis=0)], axis=0)
    glob_rows = ad.rows(ad.reshape(glob, (1, -1)), np.zeros(n, dtype=np.intp))

    table = ad.as_node(p["embed.aa_tf"])
    wt = ad.rows(table, np.array([AA_INDEX[r.wt] for r in records], dtype=np.intp))
    mut = ad.rows(table, np.array([AA_INDEX[r.mut] for r in records], dtype=np.intp))
    e_pos = np.array([positional_encoding_scalar(r.position / L, cfg.pos_k) for r in records])
    mut_block = ad.concat([wt, mut, ad.constant(e_pos)], axis=1)

    fused = ad.concat([
        ad.add(ad.matmul(local, p["fus.p_local_w"]), p["fus.p_local_b"]),
        ad.add(ad.matmul(glob_rows, p["fus.p_global_w"]), p["fus.p_global_b"]),
        ad.add(ad.matmul(mut_block, p["fus.p_mut_w"]), p["fus.p_mut_b"]),
    ], axis=1)
    z1 = ad.gelu(ad.add(ad.matmul(fused, p["head.w1"]), p["head.b1"]))
    z2 = ad.gelu(ad.add(ad.matmul(z1, p["head.w2"]), p["head.b2"]))
    if training and cfg.dropout > 0.0:
        z2 = ad.dropout(z2, cfg.dropout, rng)
    out = ad.add(ad.matmul(z2, p["head.w3"]), p["head.b3"])
    return ad.reshape(out, (n,))


def _check_inputs(structure: Structure, sequence: str, position: int):
    if len(sequence) != structure.L:
        raise LengthMismatch(f"sequence length {len(sequence)} != structure length {structure.L}")
    if sequence != structure.seq:
        raise LengthMismatch("sequence letters do not match the structure residues")


def forward(
    structure: Structure,
    sequence: str,
    m,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    cache: StructureCache | None = None,
) -> tuple[float, AttentionState]:
    """Predict ddG (kcal/mol) for one mutation; returns attention diagnostics."""
    _check_inputs(structure, sequence, m.position)
    if cache is None:
        cache = build_cache(structure, cfg)
    tape = ad.Tape()
    p = _TapeParams(tape, params)
    hg, ht, state = _encode_nodes(p, cache, cfg, training, rng, collect_state=True)
    h = aggregate_nodes(hg, ht, m, p, cfg.window, cfg.pos_k)
    out = predict_head_nodes(h, p, training, rng, cfg.dropout)
    return float(out.value), state


def loss(preds, targets, params: ModelParams, lam: float) -> float:
    """Mean squared error plus lam * sum of squared weight-matrix norms."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise EmptyBatch("loss needs at least one sample")
    if preds.shape != targets.shape:
        raise LengthMismatch("predictions and targets differ in length")
    mse = float(np.mean((preds - targets) ** 2))
    if lam:
        mse += lam * sum(
            float((v * v).sum()) for k, v in params.tensors.items() if is_penalized(k, v)
        )
    return mse


def _batch_loss_nodes(
    records,
    structures: Mapping[str, Structure],
    p: Mapping,
    params: ModelParams,
    cfg: ModelConfig,
    caches: dict[str, StructureCache],
    training: bool,
    rng: np.random.Generator | None,
) -> tuple[ad.Node, np.ndarray]:
    if not records:
        raise EmptyBatch("empty batch")
    by_sid: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_sid.setdefault(r.structure_id, []).append(i)
    parts = []
    order = []
    for sid in sorted(by_sid):
        st = structures[sid]
        if sid not in caches:
            caches[sid] = build_cache(st, cfg)
        hg, ht, _ = _encode_nodes(p, caches[sid], cfg, training, rng)
        idx = by_sid[sid]
        parts.append(_records_head_nodes(hg, ht, [records[i] for i in idx], p, cfg, training, rng))
        order.extend(idx)
    pred_vec = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    targets = np.array([records[i].ddg for i in order], dtype=np.float64)
    err = ad.sub(pred_vec, ad.constant(targets))
    total = ad.mean(ad.square(err))
    if cfg.l2_lambda:
        for name in sorted(params.tensors):
            if is_penalized(name, params.tensors[name]):
                total = ad.add(total, ad.mul(ad.sum_(ad.square(p[name])), cfg.l2_lambda))
    return total, pred_vec.value


def gradients(
    records,
    structures: Mapping[str, Structure],
    params: ModelParams,
    cfg: ModelConfig,
    caches: dict[str, StructureCache] | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and reverse-mode gradients for a batch of mutation records.

    Structures shared by several records are encoded once; gradients
    accumulate through the shared subgraph. Every registered parameter
    appears in the returned dict with a gradient of matching shape.
    """
    caches = {} if caches is None else caches
    tape = ad.Tape()
    p = _TapeParams(tape, params)
    for name in sorted(params.tensors):
        p[name]  # register every tensor so the gradient registry is total
    total, _ = _batch_loss_nodes(records, structures, p, params, cfg, caches, training, rng)
    tape.backward(total)
    return float(total.value), tape.gradients()


def predict_batch(
    records,
    structures: Mapping[str, Structure],
    params: ModelParams,
    cfg: ModelConfig,
    caches: dict[str, StructureCache] | None = None,
) -> np.ndarray:
    """Deterministic inference-mode predictions for a list of records.

    Records are grouped by structure so each structure is encoded once;
    one tape per structure keeps the recorded graph bounded.
    """
    caches = {} if caches is None else caches
    out = np.empty(len(records))
    by_sid: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_sid.setdefault(r.structure_id, []).append(i)
    for sid in sorted(by_sid):
        if sid not in caches:
            caches[sid] = build_cache(structures[sid], cfg)
        tape = ad.Tape()
        p = _TapeParams(tape, params)
        hg, ht, _ = _encode_nodes(p, caches[sid], cfg)
        idx = by_sid[sid]
        preds = _records_head_nodes(hg, ht, [records[i] for i in idx], p, cfg)
        out[idx] = preds.value
    return out


# ---------------------------------------------------------------------------
# checkpoint serialization (.dgt)


def _config_to_text(cfg: ModelConfig) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = []
    for f in fields(ModelConfig):
        if f.name == "diffusion":
            for df in fields(DiffusionConfig):
                lines.append(f"diffusion.{df.name} = {fmt(getattr(cfg.diffusion, df.name))}")
        else:
            lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def config_from_mapping(items: Mapping[str, str]) -> ModelConfig:
    """Build a ModelConfig from flat 'key -> value text' pairs; nested
    diffusion fields use the 'diffusion.' prefix. Unknown keys are errors."""
    model_fields = {f.name for f in fields(ModelConfig)}
    diff_fields = {f.name for f in fields(DiffusionConfig)}
    kwargs: dict = {}
    diff_kwargs: dict = {}
    for key, val in items.items():
        if key.startswith("diffusion."):
            sub = key[len("diffusion."):]
            if sub not in diff_fields:
                raise InvalidConfig(f"unknown config key {key!r}")
            diff_kwargs[sub] = _parse_value(val)
        else:
            if key not in model_fields or key == "diffusion":
                raise InvalidConfig(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(val)
    kwargs["diffusion"] = DiffusionConfig(**diff_kwargs)
    return ModelConfig(**kwargs)


def parse_config_lines(text: str) -> dict[str, str]:
    """Parse 'key = value' lines with '#' comments into a flat dict."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"config line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        items[key] = val
    return items


def _config_from_text(text: str) -> ModelConfig:
    return config_from_mapping(parse_config_lines(text))


def _parse_value(val: str):
    if val == "true":
        return True
    if val == "false":
        return False
    if val == "none":
        return None
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        raise InvalidConfig(f"cannot parse config value {val!r}") from None


def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig) -> None:
    """Binary checkpoint: magic, version, tensor table, trailing config text."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    names = sorted(params.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(params.tensors[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes())
    buf.write(_config_to_text(cfg).encode("utf-8"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise IoError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise IoError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        tensors[name] = arr.astype(np.float64).copy()
    cfg = _config_from_text(data[off:].decode("utf-8"))
    expected = param_shapes(cfg)
    if set(expected) != set(tensors):
        raise IoError(f"{path}: tensor names do not match the stored config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise IoError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return ModelParams(tensors), cfg
