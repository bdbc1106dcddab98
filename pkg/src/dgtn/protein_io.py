"""Structure/mutation file parsing, contact graphs, feature tensors, synthesis.

File formats (UTF-8, LF line endings, tab-separated):

* Structure (.dgs): header ``#dgs v1``, then one residue per line,
  ``index<TAB>aa<TAB>x<TAB>y<TAB>z[<TAB>ss<TAB>sasa<TAB>bfactor]``.
* Dataset (.dgm): header ``#dgm v1``, lines
  ``structure_id<TAB>position<TAB>wt<TAB>mut<TAB>ddg?`` (ddg may be empty).

Positions in files and `MutationRecord` are 1-based; all in-memory arrays
(graphs, feature matrices) are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import numerics
from .errors import (
    ClashResampleExceeded,
    DegenerateEdge,
    InvalidConfig,
    MissingParam,
    NonContiguousIndex,
    ParseError,
    UnknownResidue,
    WtMismatch,
)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
AA_INDEX = {a: i for i, a in enumerate(AMINO_ACIDS)}

# Kyte-Doolittle hydropathy scale
HYDROPATHY = {
    "A": 1.8, "R": -4.5, "N": -3.5, "D": -3.5, "C": 2.5,
    "Q": -3.5, "E": -3.5, "G": -0.4, "H": -3.2, "I": 4.5,
    "L": 3.8, "K": -3.9, "M": 1.9, "F": 2.8, "P": -1.6,
    "S": -0.8, "T": -0.7, "W": -0.9, "Y": -1.3, "V": 4.2,
}

BOND_LENGTH = 3.8  # consecutive-residue spacing, Angstrom
CLASH_RADIUS = 3.0


@dataclass
class Structure:
    """Ordered residues: sequence letters, one 3D coordinate each, optional extras.

    `extras` holds per-residue (ss_class, sasa, bfactor) columns when the source
    file carried them, else None (feature builders substitute zeros).
    """

    seq: str
    coords: np.ndarray
    extras: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if len(self.seq) < 2:
            raise ValueError("structure needs at least 2 residues")
        if self.coords.shape != (len(self.seq), 3):
            raise ValueError(f"coords shape {self.coords.shape} != ({len(self.seq)}, 3)")
        if not np.isfinite(self.coords).all():
            raise ValueError("coordinates must be finite")
        for a in self.seq:
            if a not in AA_INDEX:
                raise UnknownResidue(f"unknown amino acid letter {a!r}")
        if self.extras is not None:
            self.extras = np.asarray(self.extras, dtype=np.float64)
            if self.extras.shape != (len(self.seq), 3):
                raise ValueError("extras must be L x 3 (ss, sasa, bfactor)")

    @property
    def L(self) -> int:
        return len(self.seq)

    def extras_or_zeros(self) -> np.ndarray:
        return self.extras if self.extras is not None else np.zeros((self.L, 3))


@dataclass
class StructureGraph:
    """Contact graph with distance, affinity and normalized affinity matrices.

    Node indices are 0-based; `edges` holds unordered pairs (i, j) with i < j.
    """

    L: int
    edges: set[tuple[int, int]]
    dist: np.ndarray
    S: np.ndarray
    S_norm: np.ndarray
    neighbors: list[np.ndarray] = field(repr=False)


@dataclass
class MutationRecord:
    """Single-point mutation: 1-based position, wild-type/mutant letters, optional target."""

    structure_id: str
    position: int
    wt: str
    mut: str
    ddg: float | None = None

    def __post_init__(self):
        if self.position < 1:
            raise ValueError("position is 1-based and must be >= 1")
        if self.wt not in AA_INDEX:
            raise UnknownResidue(f"unknown wild-type letter {self.wt!r}")
        if self.mut not in AA_INDEX:
            raise UnknownResidue(f"unknown mutant letter {self.mut!r}")
        if self.wt == self.mut:
            raise ValueError("wild-type and mutant letters must differ")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a coupled synthetic dataset (random-walk chains + formula targets)."""

    seed: int = 0
    n_samples: int = 64
    l_range: tuple[int, int] = (12, 24)
    coupling_weight: float = 1.0
    noise_sd: float = 0.0
    muts_per_structure: int = 16

    def __post_init__(self):
        lo, hi = self.l_range
        if not (8 <= lo <= hi <= 128):
            raise InvalidConfig("l_range must lie within [8, 128]")
        if self.coupling_weight < 0 or self.noise_sd < 0:
            raise InvalidConfig("coupling_weight and noise_sd must be nonnegative")
        if self.n_samples < 1 or self.muts_per_structure < 1:
            raise InvalidConfig("n_samples and muts_per_structure must be positive")


# ---------------------------------------------------------------------------
# structure files


def parse_structure(text: str) -> Structure:
    """Parse the .dgs structure format; validates all invariants."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "#dgs v1":
        raise ParseError(1, "missing '#dgs v1' header")
    rows = []
    n_fields = None
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) not in (5, 8):
            raise ParseError(lineno, f"expected 5 or 8 tab-separated fields, got {len(fields)}")
        if n_fields is None:
            n_fields = len(fields)
        elif len(fields) != n_fields:
            raise ParseError(lineno, "inconsistent column count")
        try:
            idx = int(fields[0])
        except ValueError:
            raise ParseError(lineno, f"bad index {fields[0]!r}") from None
        aa = fields[1]
        if aa not in AA_INDEX:
            raise UnknownResidue(f"line {lineno}: unknown amino acid letter {aa!r}")
        try:
            xyz = [float(fields[k]) for k in (2, 3, 4)]
        except ValueError:
            raise ParseError(lineno, "bad coordinate") from None
        extra = None
        if n_fields == 8:
            try:
                extra = [float(fields[k]) for k in (5, 6, 7)]
            except ValueError:
                raise ParseError(lineno, "bad extra column") from None
            if extra[0] not in (0.0, 1.0, 2.0):
                raise ParseError(lineno, "ss class must be 0, 1 or 2")
            if extra[1] < 0:
                raise ParseError(lineno, "sasa must be nonnegative")
        rows.append((idx, aa, xyz, extra, lineno))

    if len(rows) < 2:
        raise ParseError(len(lines), "structure needs at least 2 residues")
    for want, (idx, _, _, _, lineno) in enumerate(rows, start=1):
        if idx != want:
            raise NonContiguousIndex(f"line {lineno}: index {idx}, expected {want}")

    seq = "".join(r[1] for r in rows)
    coords = np.array([r[2] for r in rows])
    extras = np.array([r[3] for r in rows]) if n_fields == 8 else None
    return Structure(seq, coords, extras)


def serialize_structure(s: Structure) -> str:
    """Inverse of parse_structure; floats use shortest round-trip decimals."""
    out = ["#dgs v1"]
    for i in range(s.L):
        cols = [str(i + 1), s.seq[i]] + [repr(float(v)) for v in s.coords[i]]
        if s.extras is not None:
            cols += [repr(float(v)) for v in s.extras[i]]
        out.append("\t".join(cols))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# mutation datasets


def load_mutation_dataset(
    text: str, structures: Mapping[str, Structure] | None = None
) -> list[MutationRecord]:
    """Parse the .dgm format; validates wild-type letters against structures when given."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "#dgm v1":
        raise ParseError(1, "missing '#dgm v1' header")
    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) not in (4, 5):
            raise ParseError(lineno, f"expected 4 or 5 tab-separated fields, got {len(fields)}")
        sid = fields[0]
        try:
            pos = int(fields[1])
        except ValueError:
            raise ParseError(lineno, f"bad position {fields[1]!r}") from None
        ddg: float | None = None
        if len(fields) == 5 and fields[4] != "":
            try:
                ddg = float(fields[4])
            except ValueError:
                raise ParseError(lineno, f"bad ddg {fields[4]!r}") from None
        try:
            rec = MutationRecord(sid, pos, fields[2], fields[3], ddg)
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
        if structures is not None:
            if sid not in structures:
                raise ParseError(lineno, f"unknown structure id {sid!r}")
            st = structures[sid]
            if not 1 <= pos <= st.L:
                raise ParseError(lineno, f"position {pos} outside 1..{st.L}")
            if st.seq[pos - 1] != rec.wt:
                raise WtMismatch(pos, st.seq[pos - 1], rec.wt)
        records.append(rec)
    return records


def serialize_mutation_dataset(records: list[MutationRecord]) -> str:
    out = ["#dgm v1"]
    for r in records:
        ddg = "" if r.ddg is None else repr(float(r.ddg))
        out.append(f"{r.structure_id}\t{r.position}\t{r.wt}\t{r.mut}\t{ddg}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# contact graph


def build_contact_graph(
    s: Structure, r_c: float = 10.0, sigma: float = 5.0, self_loops: bool = True
) -> StructureGraph:
    """Residue contact graph with Gaussian affinities exp(-d^2/sigma^2).

    Edges connect residues closer than `r_c`; affinity diagonal gets unit
    self-loops (before normalization) unless `self_loops` is disabled.
    """
    if r_c <= 0 or sigma <= 0:
        raise ValueError("r_c and sigma must be positive")
    diff = s.coords[:, None, :] - s.coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    mask = (dist < r_c) & ~np.eye(s.L, dtype=bool)
    S = np.where(mask, np.exp(-(dist * dist) / (sigma * sigma)), 0.0)
    if self_loops:
        np.fill_diagonal(S, 1.0)
    S_norm = numerics.sym_normalize(S)
    edges = {(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(mask)))}
    neighbors = [np.flatnonzero(mask[i]).astype(np.intp) for i in range(s.L)]
    return StructureGraph(s.L, edges, dist, S, S_norm, neighbors)


# ---------------------------------------------------------------------------
# feature tensors
#
# The public functions below return plain float64 arrays; the internal
# `*_nodes` variants run the same arithmetic through `dgtn.autodiff` so the
# model can differentiate through the feature parameters.


def _get(params, name: str):
    try:
        return params[name]
    except KeyError:
        raise MissingParam(name) from None


def node_features_nodes(s: Structure, params) -> ad.Node:
    """Per-residue features: [aa embedding; coord MLP; extra scalars]."""
    aa_idx = np.array([AA_INDEX[a] for a in s.seq], dtype=np.intp)
    emb = ad.rows(_get(params, "embed.aa_gnn"), aa_idx)
    h = ad.gelu(ad.add(ad.matmul(ad.constant(s.coords), _get(params, "node.coord_w1")),
                       _get(params, "node.coord_b1")))
    pos = ad.add(ad.matmul(h, _get(params, "node.coord_w2")), _get(params, "node.coord_b2"))
    return ad.concat([emb, pos, ad.constant(s.extras_or_zeros())], axis=1)


def node_features(s: Structure, params) -> np.ndarray:
    return node_features_nodes(s, params).value


def pair_geometry_block(
    s: Structure,
    src: np.ndarray,
    dst: np.ndarray,
    rbf_centers: np.ndarray,
    gamma: float,
    angle_centers: np.ndarray,
    angle_gamma: float,
) -> np.ndarray:
    """Raw pre-MLP edge inputs for arbitrary residue pairs (constants).

    Per pair (i, j): [RBF(d_ij); unit vector (r_j - r_i)/d_ij; RBF(theta)],
    where theta is the backbone bond angle at j for sequence-adjacent pairs
    (zero block otherwise or when the third residue falls off the chain).
    """
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    delta = s.coords[dst] - s.coords[src]
    d = np.linalg.norm(delta, axis=1)
    if (d < 1e-9).any():
        k = int(np.argmax(d < 1e-9))
        raise DegenerateEdge(f"residues {src[k]} and {dst[k]} coincide")
    v = delta / d[:, None]
    rbf_d = numerics.rbf_expand(d, rbf_centers, gamma)

    angle_block = np.zeros((len(src), len(angle_centers)))
    adj = np.abs(src - dst) == 1
    if adj.any():
        third = dst[adj] + (dst[adj] - src[adj])
        ok = (third >= 0) & (third < s.L)
        rows = np.flatnonzero(adj)[ok]
        if rows.size:
            i, j, k = src[rows], dst[rows], third[ok]
            u1 = s.coords[i] - s.coords[j]
            u2 = s.coords[k] - s.coords[j]
            u1 /= np.linalg.norm(u1, axis=1, keepdims=True)
            n2 = np.linalg.norm(u2, axis=1, keepdims=True)
            n2[n2 < 1e-12] = 1.0
            u2 /= n2
            theta = np.arccos(np.clip((u1 * u2).sum(axis=1), -1.0, 1.0))
            angle_block[rows] = numerics.rbf_expand(theta, angle_centers, angle_gamma)
    return np.concatenate([rbf_d, v, angle_block], axis=1)


def edge_mlp_nodes(raw_block: np.ndarray, params) -> ad.Node:
    h = ad.gelu(ad.add(ad.matmul(ad.constant(raw_block), _get(params, "edge.w1")),
                       _get(params, "edge.b1")))
    return ad.add(ad.matmul(h, _get(params, "edge.w2")), _get(params, "edge.b2"))


def edge_features(
    g: StructureGraph,
    s: Structure,
    rbf_centers: np.ndarray,
    gamma: float,
    params,
    angle_centers: np.ndarray | None = None,
    angle_gamma: float = 1.0,
) -> dict[tuple[int, int], np.ndarray]:
    """Edge feature vectors for every directed contact edge."""
    if not g.edges:
        raise ValueError("graph has no edges")
    if angle_centers is None:
        angle_centers = np.linspace(0.0, math.pi, len(np.atleast_1d(rbf_centers)))
    pairs = sorted(g.edges)
    src = np.array([p[0] for p in pairs] + [p[1] for p in pairs], dtype=np.intp)
    dst = np.array([p[1] for p in pairs] + [p[0] for p in pairs], dtype=np.intp)
    raw = pair_geometry_block(s, src, dst, np.atleast_1d(rbf_centers), gamma,
                              angle_centers, angle_gamma)
    feats = edge_mlp_nodes(raw, params).value
    return {(int(i), int(j)): feats[k] for k, (i, j) in enumerate(zip(src, dst))}


# ---------------------------------------------------------------------------
# synthesis


def _random_chain(L: int, rng: np.random.Generator) -> np.ndarray:
    coords = np.zeros((L, 3))
    for i in range(1, L):
        for _attempt in range(1000):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            cand = coords[i - 1] + BOND_LENGTH * direction
            if i < 2 or np.min(np.linalg.norm(coords[: i - 1] - cand, axis=1)) >= CLASH_RADIUS:
                coords[i] = cand
                break
        else:
            raise ClashResampleExceeded(f"could not place residue {i + 1} after 1000 retries")
    return coords


def synthetic_target(
    structure: Structure,
    graph: StructureGraph,
    position: int,
    wt: str,
    mut: str,
    coupling_weight: float,
) -> float:
    """Noise-free ground-truth ddG for a synthetic record.

    Additive sequence term (hydropathy shift) + structure term (centered
    contact count) + coupling term (hydropathy shift scaled by burial).
    """
    cc = np.array([len(n) for n in graph.neighbors], dtype=np.float64)
    g = HYDROPATHY[mut] - HYDROPATHY[wt]
    h = 0.3 * (cc[position - 1] - cc.mean())
    burial = cc[position - 1] / cc.max()
    return float(g + h + coupling_weight * g * burial)


def synthesize_dataset(
    spec: SyntheticSpec,
) -> tuple[dict[str, Structure], list[MutationRecord]]:
    """Random-walk chains plus mutation records with formula-defined targets.

    Deterministic in `spec.seed`: the same spec reproduces bit-identical
    structures and records.
    """
    rng = np.random.default_rng(spec.seed)
    n_structures = math.ceil(spec.n_samples / spec.muts_per_structure)
    lo, hi = spec.l_range

    structures: dict[str, Structure] = {}
    graphs: dict[str, StructureGraph] = {}
    for k in range(n_structures):
        L = int(rng.integers(lo, hi + 1))
        seq = "".join(AMINO_ACIDS[i] for i in rng.integers(0, 20, size=L))
        sid = f"synth_{k:03d}"
        structures[sid] = Structure(seq, _random_chain(L, rng))
        graphs[sid] = build_contact_graph(structures[sid])

    records: list[MutationRecord] = []
    ids = sorted(structures)
    for k in range(spec.n_samples):
        sid = ids[k // spec.muts_per_structure]
        st = structures[sid]
        pos = int(rng.integers(1, st.L + 1))
        wt = st.seq[pos - 1]
        others = [a for a in AMINO_ACIDS if a != wt]
        mut = others[int(rng.integers(0, 19))]
        ddg = synthetic_target(st, graphs[sid], pos, wt, mut, spec.coupling_weight)
        if spec.noise_sd > 0:
            ddg += float(rng.normal(0.0, spec.noise_sd))
        records.append(MutationRecord(sid, pos, wt, mut, ddg))
    return structures, records
