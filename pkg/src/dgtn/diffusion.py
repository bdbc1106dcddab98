"""Bidirectional diffusion: structure-guided attention mixing, learnable rates,
attention-derived pseudo-graphs, graph diffusion, and fixed-point utilities.

The iterative maps here are linear:

    attention:  A <- (1-beta) * A + beta * Sn @ A
    graph:      S <- (1-gamma) * S + gamma * Gn @ S

For `beta * lambda_max(Sn) < 1` the attention recurrence contracts to the
unique fixed point ``A* = (1-beta) (I - beta Sn)^{-1} A0`` at geometric rate
``beta * lambda_max``; `attention_fixed_point`, `convergence_profile` and
`lipschitz_check` make those statements executable.

Functions that the model differentiates through accept `autodiff.Node`
inputs and return Nodes; with plain arrays they compute in plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics
from .errors import (
    AllBelowThreshold,
    BoundViolated,
    DegenerateResidual,
    InvalidConfig,
    ShapeMismatch,
)

__all__ = [
    "DiffusionConfig",
    "DiffusionKernelParams",
    "DiffusionTrace",
    "LipschitzReport",
    "diffuse_attention",
    "attention_fixed_point",
    "convergence_profile",
    "diffusion_rate",
    "attention_pseudo_graph",
    "diffuse_graph",
    "diffused_neighborhoods",
    "renormalize_rows",
    "lipschitz_check",
]


@dataclass(frozen=True)
class DiffusionConfig:
    """Knobs of the bidirectional diffusion block.

    `enabled=False` bypasses the block entirely (the no-diffusion ablation);
    `force_beta` / `force_gamma` pin the rates to constants, overriding the
    learnable parameters (0.0 reproduces the bypassed model bit-exactly).
    """

    steps: int = 5
    tau: float = 0.02
    eps_nbr: float = 1e-3
    k_max: int = 16
    kernel_enabled: bool = True
    beta_init: float = 0.25
    gamma_init: float = 0.25
    enabled: bool = True
    force_beta: float | None = None
    force_gamma: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfig("diffusion steps must be >= 1")
        if not 0.0 <= self.tau < 1.0:
            raise InvalidConfig("tau must lie in [0, 1)")
        if not (0.1 <= self.beta_init <= 0.5 and 0.1 <= self.gamma_init <= 0.5):
            raise InvalidConfig("beta_init and gamma_init must lie in [0.1, 0.5]")
        if self.k_max < 1:
            raise InvalidConfig("k_max must be >= 1")


@dataclass
class DiffusionKernelParams:
    """Learnable rate parameters: kernel weights plus per-layer fallback logits."""

    w_beta: np.ndarray  # weights over [depth fraction, attention entropy]
    b_beta: float
    beta_logits: np.ndarray  # per-layer, used when the kernel is disabled
    gamma_logits: np.ndarray  # per-layer


@dataclass
class DiffusionTrace:
    """Residual history of the unrolled recurrence against its fixed point."""

    residual_norms: np.ndarray
    fixed_point: np.ndarray
    rate_estimate: float


@dataclass
class LipschitzReport:
    beta: float
    lam_max: float
    bound: float
    max_ratio: float
    trials: int


def _any_node(*xs) -> bool:
    return any(isinstance(x, ad.Node) for x in xs)


def _check_square_pair(a, s):
    av = ad.value(a)
    sv = ad.value(s)
    if av.ndim != 2 or sv.ndim != 2 or av.shape[0] != av.shape[1] or sv.shape != av.shape:
        raise ShapeMismatch(f"expected matching square matrices, got {av.shape} and {sv.shape}")


def diffuse_attention(a0, s_norm, beta, steps: int):
    """Run `steps` applications of A^(t+1) = (1-beta) A^(0) + beta Sn A^(t).

    The original attention is mixed back in at every step, which makes
    A^(t) = (1-beta) sum_{k<t} (beta Sn)^k A^(0) + (beta Sn)^t A^(0); the
    iteration contracts to (1-beta)(I - beta Sn)^{-1} A^(0) at geometric
    rate beta * lambda_max(Sn). The raw linear process is returned; callers
    renormalize rows before using the result as attention weights.
    """
    _check_square_pair(a0, s_norm)
    if _any_node(a0, s_norm, beta):
        a0 = ad.as_node(a0)
        s = ad.as_node(s_norm)
        b = beta if isinstance(beta, ad.Node) else ad.constant(float(beta))
        restart = ad.mul(ad.sub(1.0, b), a0)
        a = a0
        for _ in range(steps):
            a = ad.add(restart, ad.mul(b, ad.matmul(s, a)))
        return a
    a0 = np.asarray(a0, dtype=np.float64)
    s = np.asarray(s_norm, dtype=np.float64)
    beta = float(beta)
    restart = (1.0 - beta) * a0
    a = a0
    for _ in range(steps):
        a = restart + beta * (s @ a)
    return a


def attention_fixed_point(a0: np.ndarray, s_norm: np.ndarray, beta: float) -> np.ndarray:
    """Direct solve for the diffusion fixed point (1-beta)(I - beta Sn)^{-1} A0."""
    _check_square_pair(a0, s_norm)
    a0 = np.asarray(a0, dtype=np.float64)
    s_norm = np.asarray(s_norm, dtype=np.float64)
    n = a0.shape[0]
    return (1.0 - beta) * numerics.solve_linear(np.eye(n) - beta * s_norm, a0)


def convergence_profile(
    a0: np.ndarray, s_norm: np.ndarray, beta: float, steps: int
) -> DiffusionTrace:
    """Track ||A^(t) - A*||_F over the unrolled recurrence.

    `rate_estimate` is the geometric-mean residual ratio over t >= 2,
    restricted to steps still above the floating-point noise floor.
    Raises DegenerateResidual when A0 already sits at the fixed point.
    """
    star = attention_fixed_point(a0, s_norm, beta)
    a0 = np.asarray(a0, dtype=np.float64)
    s = np.asarray(s_norm, dtype=np.float64)
    restart = (1.0 - beta) * a0
    a = a0
    residuals = [numerics.frobenius(a - star)]
    if residuals[0] < 1e-14:
        raise DegenerateResidual("initial matrix already at the fixed point")
    for _ in range(steps):
        a = restart + beta * (s @ a)
        residuals.append(numerics.frobenius(a - star))
    residuals = np.array(residuals)

    floor = max(1e-13, 1e-13 * residuals[0])
    ratios = [
        residuals[t + 1] / residuals[t]
        for t in range(2, steps)
        if residuals[t + 1] > floor
    ]
    rate = float(np.exp(np.mean(np.log(ratios)))) if ratios else 0.0
    return DiffusionTrace(residuals, star, rate)


def diffusion_rate(layer_index: int, n_layers: int, attn_entropy, kernel, cfg: DiffusionConfig):
    """Per-layer diffusion rate beta_l in (0, 1).

    With the kernel enabled, beta_l = sigmoid(w . [l/n_layers, entropy] + b);
    otherwise the layer's free logit is squashed. `attn_entropy` is the mean
    attention row entropy normalized by ln L, and may be an autodiff Node.
    """
    if cfg.force_beta is not None:
        return float(cfg.force_beta)
    if not cfg.kernel_enabled:
        logits = kernel.beta_logits
        if isinstance(logits, ad.Node):
            return ad.sigmoid(ad.rows(logits, np.array([layer_index - 1])))
        return float(numerics.sigmoid(logits[layer_index - 1]))
    depth = layer_index / n_layers
    w, b = kernel.w_beta, kernel.b_beta
    if _any_node(w, b, attn_entropy):
        w = ad.as_node(w)
        feats = ad.stack_scalars([ad.constant(depth), attn_entropy])
        return ad.sigmoid(ad.add(ad.matmul(w, feats), b))
    z = w[0] * depth + w[1] * float(attn_entropy) + float(b)
    return float(numerics.sigmoid(z))


def _threshold_mask(mean_map: np.ndarray, tau: float, self_loops: bool) -> tuple[np.ndarray, np.ndarray]:
    """Strictly-greater-than-tau survivor mask plus self-loop injection diagonal."""
    keep = mean_map > tau
    off_diag = keep & ~np.eye(mean_map.shape[0], dtype=bool)
    if not off_diag.any() and not self_loops:
        raise AllBelowThreshold(f"every off-diagonal attention entry <= tau={tau}")
    return keep, off_diag


def attention_pseudo_graph(a_heads, tau: float, self_loops: bool = True):
    """Head-averaged, symmetrized, thresholded, degree-normalized attention graph.

    The head mean is symmetrized as (G + G^T)/2, entries strictly greater
    than `tau` survive (the <= boundary case is zeroed), and the result is
    D^{-1/2} G D^{-1/2} normalized. Rows left with zero degree get a unit
    self-loop when `self_loops` is set, otherwise the all-below-threshold
    case raises.
    """
    heads = list(a_heads)
    if not heads:
        raise ValueError("need at least one attention head")
    if _any_node(*heads):
        nodes = [ad.as_node(h) for h in heads]
        acc = nodes[0]
        for h in nodes[1:]:
            acc = ad.add(acc, h)
        mean_map = ad.mul(acc, 1.0 / len(nodes))
        sym = ad.mul(ad.add(mean_map, ad.transpose(mean_map)), 0.5)
        keep, _ = _threshold_mask(sym.value, tau, self_loops)
        g = ad.mul(sym, ad.constant(keep.astype(np.float64)))
        return _sym_normalize_nodes(g, self_loops)
    mean_map = np.mean(heads, axis=0)
    sym = 0.5 * (mean_map + mean_map.T)
    keep, _ = _threshold_mask(sym, tau, self_loops)
    g = np.where(keep, sym, 0.0)
    deg = g.sum(axis=1)
    if (deg <= 0).any():
        g = g.copy()
        idx = np.flatnonzero(deg <= 0)
        g[idx, idx] = 1.0
    return numerics.sym_normalize(g)


def _sym_normalize_nodes(g: ad.Node, self_loops: bool) -> ad.Node:
    deg = ad.sum_(g, axis=1).value
    zero = deg <= 0
    if zero.any():
        if not self_loops:
            raise AllBelowThreshold("thresholded attention graph has zero-degree rows")
        inject = np.zeros_like(g.value)
        idx = np.flatnonzero(zero)
        inject[idx, idx] = 1.0
        g = ad.add(g, ad.constant(inject))
    dinv = ad.div(1.0, ad.sqrt(ad.sum_(g, axis=1, keepdims=True)))
    return ad.mul(ad.mul(g, dinv), ad.transpose(dinv))


def diffuse_graph(s_norm, g_attn_norm, gamma, steps: int):
    """Run `steps` applications of S^(t+1) = (1-gamma) S^(0) + gamma Gn S^(t),
    starting from and restarting at the original normalized affinity."""
    _check_square_pair(s_norm, g_attn_norm)
    if _any_node(s_norm, g_attn_norm, gamma):
        s0 = ad.as_node(s_norm)
        g = ad.as_node(g_attn_norm)
        gm = gamma if isinstance(gamma, ad.Node) else ad.constant(float(gamma))
        restart = ad.mul(ad.sub(1.0, gm), s0)
        s = s0
        for _ in range(steps):
            s = ad.add(restart, ad.mul(gm, ad.matmul(g, s)))
        return s
    s0 = np.asarray(s_norm, dtype=np.float64)
    g = np.asarray(g_attn_norm, dtype=np.float64)
    gamma = float(gamma)
    restart = (1.0 - gamma) * s0
    s = s0
    for _ in range(steps):
        s = restart + gamma * (g @ s)
    return s


def diffused_neighborhoods(s_diff, eps_nbr: float, k_max: int) -> list[np.ndarray]:
    """Per-row neighbor sets: indices j != i with S_diff[i, j] > eps_nbr,
    truncated to the k_max largest values (ties broken by lower index),
    returned sorted ascending."""
    s = ad.value(s_diff)
    L = s.shape[0]
    out = []
    for i in range(L):
        row = s[i].copy()
        row[i] = -np.inf
        cand = np.flatnonzero(row > eps_nbr)
        if cand.size > k_max:
            order = np.argsort(-row[cand], kind="stable")
            cand = cand[order[:k_max]]
        out.append(np.sort(cand).astype(np.intp))
    return out


def renormalize_rows(a):
    """Divide each row by its sum; Node-aware."""
    if isinstance(a, ad.Node):
        return ad.div(a, ad.sum_(a, axis=1, keepdims=True))
    return numerics.row_normalize(a)


def lipschitz_check(
    s_norm: np.ndarray, beta: float, trials: int = 100, seed: int = 0
) -> LipschitzReport:
    """Empirically test the fixed-point map's Lipschitz bound.

    For random row-stochastic pairs (A, A'), verifies
    ||FP(A) - FP(A')||_F <= (1-beta)/(1-beta*lam_max) * ||A - A'||_F + 1e-9.
    Raises BoundViolated on the first offending pair.
    """
    s_norm = np.asarray(s_norm, dtype=np.float64)
    n = s_norm.shape[0]
    lam, _ = numerics.spectral_radius(s_norm, iters=5000, tol=1e-13, seed=seed)
    if beta * lam >= 1.0:
        raise InvalidConfig(f"beta * lambda_max = {beta * lam:.4f} >= 1")
    bound = (1.0 - beta) / (1.0 - beta * lam)
    rng = np.random.default_rng(seed)
    max_ratio = 0.0
    for t in range(trials):
        a = numerics.softmax_rows(rng.standard_normal((n, n)))
        b = numerics.softmax_rows(rng.standard_normal((n, n)))
        num = numerics.frobenius(
            attention_fixed_point(a, s_norm, beta) - attention_fixed_point(b, s_norm, beta)
        )
        den = numerics.frobenius(a - b)
        if den == 0.0:
            continue
        ratio = num / den
        max_ratio = max(max_ratio, ratio)
        if num > bound * den + 1e-9:
            raise BoundViolated(
                f"trial {t}: ratio {ratio:.12f} exceeds bound {bound:.12f}"
            )
    return LipschitzReport(beta, lam, bound, max_ratio, trials)
