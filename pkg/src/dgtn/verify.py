"""Executable checks for the diffusion theory: fixed point, geometric rate,
Lipschitz stability, and whole-model gradient integrity.

Each suite returns `CheckResult` rows that the CLI prints as
``CHECK<TAB>name<TAB>pass|fail<TAB>observed<TAB>bound`` (``SKIP`` rows for
guarded degenerate cases). The random instances are:

* fixed point / Lipschitz: connected weighted contact-style graphs, unit
  self-loops, symmetric degree normalization (spectral radius exactly 1).
* rate: the same graphs scaled by eta in [0.6, 0.95]; scaling moves the top
  eigenvalue away from 1 so the initial error keeps a component along the
  dominant eigenspace and the asymptotic slope log(beta * lambda_max) is
  observable. At radius exactly 1 that component cancels identically and
  the recurrence contracts at the second eigenvalue instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import numerics
from .diffusion import (
    DegenerateResidual,
    attention_fixed_point,
    convergence_profile,
    diffuse_attention,
    lipschitz_check,
)
from .errors import BoundViolated
from .protein_io import AMINO_ACIDS, Structure, MutationRecord

__all__ = [
    "CheckResult",
    "random_affinity_graph",
    "suite_fixed_point",
    "suite_rate",
    "suite_lipschitz",
    "suite_gradcheck",
    "run_all",
    "desk_gradcheck_setup",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float
    bound: float
    skipped: bool = False
    detail: str = ""

    def line(self) -> str:
        if self.skipped:
            return f"SKIP\t{self.name}\t{self.detail}"
        status = "pass" if self.passed else "fail"
        return f"CHECK\t{self.name}\t{status}\t{self.observed:.6g}\t{self.bound:.6g}"


def random_affinity_graph(n: int, rng: np.random.Generator, density: float = 0.6) -> np.ndarray:
    """Connected random weighted graph with unit self-loops, symmetrically
    normalized; its spectral radius is exactly 1."""
    for _ in range(100):
        mask = rng.random((n, n)) < density
        w = rng.uniform(0.3, 1.0, (n, n))
        s = np.triu(mask * w, k=1)
        s = s + s.T
        np.fill_diagonal(s, 1.0)
        # connectivity via BFS on the off-diagonal support
        seen = {0}
        frontier = [0]
        adj = s > 0
        np.fill_diagonal(adj, False)
        while frontier:
            nxt = []
            for i in frontier:
                for j in np.flatnonzero(adj[i]):
                    if j not in seen:
                        seen.add(int(j))
                        nxt.append(int(j))
            frontier = nxt
        if len(seen) == n:
            return numerics.sym_normalize(s)
    raise RuntimeError("could not draw a connected graph")


def _random_stochastic(n: int, rng: np.random.Generator) -> np.ndarray:
    return numerics.softmax_rows(rng.standard_normal((n, n)))


def suite_fixed_point(trials: int = 50, seed: int = 0, steps: int = 60) -> list[CheckResult]:
    """Unrolled diffusion vs the direct solve: terminal residual below 1e-8
    and the per-step geometric envelope ||A0 - A*|| (beta lam)^t (1 + 1e-9)."""
    rng = np.random.default_rng(seed)
    sizes = (4, 8, 16)
    betas = (0.2, 0.5, 0.8)
    worst_final = 0.0
    worst_ratio = 0.0
    used = 0
    for t in range(trials):
        n = sizes[t % 3]
        beta = betas[(t // 3) % 3]
        s_norm = random_affinity_graph(n, rng)
        lam, _ = numerics.spectral_radius(s_norm, iters=5000, tol=1e-13, seed=seed + t)
        if beta * lam > 0.9:
            continue
        used += 1
        a0 = _random_stochastic(n, rng)
        trace = convergence_profile(a0, s_norm, beta, steps)
        base = trace.residual_norms[0]
        for step in range(1, steps + 1):
            envelope = base * (beta * lam) ** step * (1.0 + 1e-9)
            # the exact-arithmetic envelope is only observable above roundoff
            if envelope >= 1e-13:
                worst_ratio = max(worst_ratio, trace.residual_norms[step] / envelope)
        worst_final = max(worst_final, trace.residual_norms[steps])
    return [
        CheckResult("fixed_point_terminal", worst_final < 1e-8, worst_final, 1e-8,
                    detail=f"{used} instances"),
        CheckResult("fixed_point_envelope", worst_ratio <= 1.0, worst_ratio, 1.0),
    ]


def suite_rate(trials: int = 50, seed: int = 0) -> list[CheckResult]:
    """Fitted log-residual slope vs log(beta * lambda_max) within 5 percent
    on at least 90 percent of the scaled connected-graph instances
    (45 of the default 50)."""
    rng = np.random.default_rng(seed)
    sizes = (4, 8, 16)
    betas = (0.2, 0.5, 0.8)
    passes = 0
    usable = 0
    worst = 0.0
    for t in range(trials):
        n = sizes[t % 3]
        beta = betas[(t // 3) % 3]
        eta = rng.uniform(0.6, 0.95)
        s_norm = eta * random_affinity_graph(n, rng)
        lam, _ = numerics.spectral_radius(s_norm, iters=5000, tol=1e-13, seed=seed + t)
        a0 = _random_stochastic(n, rng)
        rate_target = np.log(beta * lam)
        # steps chosen so the last residual stays well above float noise
        base = numerics.frobenius(a0 - attention_fixed_point(a0, s_norm, beta))
        steps = int(np.clip(np.log(1e-11 / base) / rate_target, 12, 400))
        try:
            trace = convergence_profile(a0, s_norm, beta, steps)
        except DegenerateResidual:
            continue
        usable += 1
        res = trace.residual_norms
        ts = np.arange(3, len(res))
        keep = res[ts] > 1e-13
        slope = np.polyfit(ts[keep], np.log(res[ts][keep]), 1)[0]
        err = abs(slope - rate_target) / abs(rate_target)
        worst = max(worst, err)
        if err <= 0.05:
            passes += 1
    need = int(np.ceil(0.9 * trials))
    return [
        CheckResult("rate_slope", passes >= need, float(passes), float(need),
                    detail=f"worst rel dev {worst:.3g} over {usable} usable"),
    ]


def suite_lipschitz(seed: int = 0, pairs_per_beta: int = 50) -> list[CheckResult]:
    """Fixed-point map contraction factor against (1-beta)/(1-beta*lam)."""
    rng = np.random.default_rng(seed)
    out = []
    for beta in (0.3, 0.5):
        s_norm = random_affinity_graph(8, rng)
        try:
            rep = lipschitz_check(s_norm, beta, trials=pairs_per_beta, seed=seed + int(beta * 10))
            out.append(
                CheckResult(
                    f"lipschitz_beta_{beta}", rep.max_ratio <= rep.bound + 1e-9,
                    rep.max_ratio, rep.bound + 1e-9,
                )
            )
        except BoundViolated as e:
            out.append(CheckResult(f"lipschitz_beta_{beta}", False, np.nan, np.nan, detail=str(e)))
    return out


def desk_gradcheck_setup(seed: int = 0, length: int = 6):
    """Small deterministic instance for whole-model gradient checks."""
    rng = np.random.default_rng(seed)
    coords = np.zeros((length, 3))
    for i in range(1, length):
        step = rng.standard_normal(3)
        coords[i] = coords[i - 1] + 3.8 * step / np.linalg.norm(step)
    seq = "".join(AMINO_ACIDS[i] for i in rng.integers(0, 20, size=length))
    structure = Structure(seq, coords)
    sid = "gradcheck"
    records = []
    for k in range(2):
        pos = int(rng.integers(1, length + 1))
        wt = seq[pos - 1]
        mut = [a for a in AMINO_ACIDS if a != wt][int(rng.integers(0, 19))]
        records.append(MutationRecord(sid, pos, wt, mut, float(rng.normal(0.0, 2.0))))
    cfg = M.ModelConfig(
        d=8, heads=2, d_ffn=32, d_a=4, d_p=4, d_e=6, rbf_k=4, angle_k=3,
        dropout=0.0, seed=seed,
        diffusion=M.DiffusionConfig(steps=3),
    )
    return {sid: structure}, records, cfg


def suite_gradcheck(seed: int = 0, eps: float = 1e-4) -> list[CheckResult]:
    """Analytic gradients vs central finite differences over every parameter.

    The per-group relative error is the l2 distance between the group's
    analytic and finite-difference gradient vectors over the larger of their
    norms (floored at 1e-8); each group must come in below 1e-5.
    """
    structures, records, cfg = desk_gradcheck_setup(seed)
    params = M.init_params(cfg)
    names = sorted(params.tensors)
    targets = np.array([r.ddg for r in records])

    def objective(tensors: dict[str, np.ndarray]) -> float:
        preds = M.predict_batch(records, structures, M.ModelParams(tensors), cfg)
        return float(np.mean((preds - targets) ** 2))

    _, grads = M.gradients(records, structures, params, cfg)
    results = []
    for name in names:
        base = params.tensors[name]
        fd = np.zeros_like(base)
        flat = base.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = objective(params.tensors)
            flat[i] = orig - eps
            lo = objective(params.tensors)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * eps)
        num = float(np.linalg.norm(grads[name] - fd))
        den = max(float(np.linalg.norm(grads[name])), float(np.linalg.norm(fd)), 1e-8)
        rel = num / den
        results.append(CheckResult(f"grad:{name}", rel < 1e-5, rel, 1e-5))
    return results


def run_all(trials: int = 50, seed: int = 0, include_gradcheck: bool = True) -> list[CheckResult]:
    results = []
    results += suite_fixed_point(trials=trials, seed=seed)
    results += suite_rate(trials=trials, seed=seed)
    results += suite_lipschitz(seed=seed)
    if include_gradcheck:
        results += suite_gradcheck(seed=seed)
    return results
