"""Initial feature construction: atom embeddings, RBF expansions, projections.

Also hosts the static per-molecule tensor bundle (graph indices, RBF
expansions, canonical pair arrays) that the model evaluates on, plus the
disjoint-union merge used for mini-batching. Bundles depend only on
geometry, so they are built once per molecule and reused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .molgraph import AtomBondGraph, BondAngleGraph, Molecule, build_atom_bond_graph, build_bond_angle_graph

__all__ = [
    "RbfSpec",
    "rbf_expand",
    "EmbeddingTable",
    "UnknownSpeciesError",
    "embed_atoms",
    "LinearMap",
    "FeatureState",
    "init_features",
    "MoleculeBundle",
    "bundle_molecule",
    "merge_bundles",
    "QM9_SPECIES",
]

QM9_SPECIES = (1, 6, 7, 8, 9)


@dataclass(frozen=True)
class RbfSpec:
    """Gaussian basis on [lo, hi]: phi_k(v) = exp(-gamma (v - c_k)^2)."""

    n_basis: int
    lo: float
    hi: float
    gamma: float | None = None  # None: 1 / spacing^2

    def __post_init__(self):
        if self.n_basis < 2:
            raise ValueError("n_basis must be >= 2")
        if not self.hi > self.lo:
            raise ValueError("hi must exceed lo")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def centers(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_basis)

    def width(self) -> float:
        if self.gamma is not None:
            return self.gamma
        spacing = (self.hi - self.lo) / (self.n_basis - 1)
        return 1.0 / (spacing * spacing)


def rbf_expand(v, spec: RbfSpec) -> np.ndarray:
    """Expand scalar(s) into Gaussian basis responses.

    Accepts a scalar (returns [n_basis]) or a 1-D array (returns
    [m, n_basis]). Values outside [lo, hi] decay smoothly, no clamping.
    """
    v = np.asarray(v, dtype=np.float64)
    c = spec.centers()
    g = spec.width()
    if v.ndim == 0:
        return np.exp(-g * (v - c) ** 2)
    if v.ndim == 1:
        return np.exp(-g * (v[:, None] - c[None, :]) ** 2)
    raise ValueError(f"rbf_expand expects scalar or 1-D input, got shape {v.shape}")


class UnknownSpeciesError(KeyError):
    """An atomic number has no entry in the embedding table."""

    def __init__(self, z: int):
        self.atomic_number = z
        super().__init__(f"no embedding for atomic number {z}")


class EmbeddingTable:
    """Learnable per-species atom embedding."""

    def __init__(self, species=QM9_SPECIES, dim: int = 64, seed: int = 0, values=None):
        self.species = tuple(int(z) for z in species)
        self.dim = int(dim)
        self.row_of = {z: i for i, z in enumerate(self.species)}
        if values is None:
            rng = np.random.default_rng(seed)
            values = rng.standard_normal((len(self.species), self.dim)) / np.sqrt(self.dim)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self.species), self.dim):
            raise ValueError(f"embedding values shape {values.shape} != {(len(self.species), self.dim)}")
        self.weights = ad.Parameter("embed.weights", values)

    def rows_for(self, atomic_numbers) -> np.ndarray:
        rows = np.empty(len(atomic_numbers), dtype=np.int64)
        for i, z in enumerate(atomic_numbers):
            z = int(z)
            if z not in self.row_of:
                raise UnknownSpeciesError(z)
            rows[i] = self.row_of[z]
        return rows

    @classmethod
    def from_json(cls, path) -> "EmbeddingTable":
        """Load a fixed species -> vector map (e.g. CGCNN-style encodings)."""
        with open(path) as fh:
            raw = json.load(fh)
        species = sorted(int(k) for k in raw)
        mat = np.array([raw[str(z)] for z in species], dtype=np.float64)
        return cls(species=species, dim=mat.shape[1], values=mat)


def embed_atoms(mol_or_z, table: EmbeddingTable, tape: ad.Tape) -> ad.Tensor:
    """Row i of the result is the table entry for atom i's species."""
    z = mol_or_z.atomic_numbers if isinstance(mol_or_z, Molecule) else mol_or_z
    rows = table.rows_for(z)
    return ad.gather_rows(tape.leaf(table.weights), rows)


class LinearMap:
    """Affine map x -> x W + b with learnable W [d_in, d_out] and b [d_out]."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = ad.Parameter(f"{name}.W", rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
        self.bias = ad.Parameter(f"{name}.b", np.zeros(d_out))

    def apply(self, tape: ad.Tape, x: ad.Tensor) -> ad.Tensor:
        return ad.add_bias(ad.matmul(x, tape.leaf(self.weight)), tape.leaf(self.bias))

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class FeatureState:
    """Atom (x), bond (y), and angle (z) feature blocks at one layer."""

    x: ad.Tensor
    y: ad.Tensor
    z: ad.Tensor


@dataclass
class MoleculeBundle:
    """Geometry-derived arrays for one molecule or a disjoint union of molecules.

    Pair arrays cover each bonded unordered pair once, in canonical
    direction src < dst, sorted ascending, so readout order is fixed.
    """

    n_mols: int
    n_atoms: int
    atomic_numbers: np.ndarray
    atom_mol: np.ndarray  # molecule id per atom
    rel_pos: np.ndarray  # positions relative to their molecule's centroid
    # directed cutoff graph
    src: np.ndarray
    dst: np.ndarray
    rvec: np.ndarray
    rbf_dist: np.ndarray
    # line graph
    n_bonds: int
    lsrc: np.ndarray
    ldst: np.ndarray
    rbf_cos: np.ndarray
    # canonical unordered pairs
    pair_src: np.ndarray
    pair_dst: np.ndarray
    pair_rvec: np.ndarray
    pair_rbf_dist: np.ndarray
    pair_mol: np.ndarray
    labels: np.ndarray  # dipole label per molecule, nan when absent


def bundle_molecule(
    mol: Molecule,
    cutoff: float,
    dist_spec: RbfSpec,
    angle_spec: RbfSpec,
    graph: AtomBondGraph | None = None,
    line_graph: BondAngleGraph | None = None,
) -> MoleculeBundle:
    """Precompute every geometry-only array the model needs for one molecule."""
    g = graph if graph is not None else build_atom_bond_graph(mol, cutoff)
    lg = line_graph if line_graph is not None else build_bond_angle_graph(g)
    canon = g.src < g.dst
    label = np.nan if mol.dipole_label is None else float(mol.dipole_label)
    return MoleculeBundle(
        n_mols=1,
        n_atoms=mol.n_atoms,
        atomic_numbers=mol.atomic_numbers.copy(),
        atom_mol=np.zeros(mol.n_atoms, dtype=np.int64),
        rel_pos=mol.positions - mol.centroid()[None, :],
        src=g.src,
        dst=g.dst,
        rvec=g.rvec,
        rbf_dist=rbf_expand(g.dist, dist_spec),
        n_bonds=g.n_edges,
        lsrc=lg.lsrc,
        ldst=lg.ldst,
        rbf_cos=rbf_expand(lg.cos_angle, angle_spec),
        pair_src=g.src[canon],
        pair_dst=g.dst[canon],
        pair_rvec=g.rvec[canon],
        pair_rbf_dist=rbf_expand(g.dist[canon], dist_spec),
        pair_mol=np.zeros(int(canon.sum()), dtype=np.int64),
        labels=np.array([label]),
    )


def merge_bundles(bundles: list[MoleculeBundle]) -> MoleculeBundle:
    """Disjoint union: indices are offset so no edge ever spans molecules."""
    if len(bundles) == 1:
        return bundles[0]
    atom_off = 0
    bond_off = 0
    mol_off = 0
    parts = {k: [] for k in (
        "atomic_numbers", "atom_mol", "rel_pos", "src", "dst", "rvec", "rbf_dist",
        "lsrc", "ldst", "rbf_cos", "pair_src", "pair_dst", "pair_rvec",
        "pair_rbf_dist", "pair_mol", "labels",
    )}
    for b in bundles:
        parts["atomic_numbers"].append(b.atomic_numbers)
        parts["atom_mol"].append(b.atom_mol + mol_off)
        parts["rel_pos"].append(b.rel_pos)
        parts["src"].append(b.src + atom_off)
        parts["dst"].append(b.dst + atom_off)
        parts["rvec"].append(b.rvec)
        parts["rbf_dist"].append(b.rbf_dist)
        parts["lsrc"].append(b.lsrc + bond_off)
        parts["ldst"].append(b.ldst + bond_off)
        parts["rbf_cos"].append(b.rbf_cos)
        parts["pair_src"].append(b.pair_src + atom_off)
        parts["pair_dst"].append(b.pair_dst + atom_off)
        parts["pair_rvec"].append(b.pair_rvec)
        parts["pair_rbf_dist"].append(b.pair_rbf_dist)
        parts["pair_mol"].append(b.pair_mol + mol_off)
        parts["labels"].append(b.labels)
        atom_off += b.n_atoms
        bond_off += b.n_bonds
        mol_off += b.n_mols
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return MoleculeBundle(
        n_mols=mol_off,
        n_atoms=atom_off,
        n_bonds=bond_off,
        **cat,
    )


def init_features(
    tape: ad.Tape,
    bundle: MoleculeBundle,
    table: EmbeddingTable,
    proj_x: LinearMap,
    proj_y: LinearMap,
    proj_z: LinearMap,
) -> FeatureState:
    """Initial (x, y, z) blocks, all projected to the shared hidden width.

    Bond features start from the distance RBF, so both directions of a
    bond begin identical; angle features start from the cosine RBF.
    """
    x = proj_x.apply(tape, embed_atoms(bundle.atomic_numbers, table, tape))
    y = proj_y.apply(tape, tape.constant(bundle.rbf_dist))
    z = proj_z.apply(tape, tape.constant(bundle.rbf_cos))
    return FeatureState(x=x, y=y, z=z)
