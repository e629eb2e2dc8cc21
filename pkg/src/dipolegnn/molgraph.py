"""Molecular data model, cutoff graphs, bond-angle line graphs, and geometry tools.

Graphs are directed: every unordered pair within the cutoff contributes
both (i, j) and (j, i). The bond-angle graph is the line graph of the
directed cutoff graph: its nodes are directed bonds and its edges connect
bond (k->j) to bond (j->i) for ordered triplets with k != i, carrying the
cosine of the angle at the shared atom j.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Molecule",
    "AtomBondGraph",
    "BondAngleGraph",
    "RigidTransform",
    "DegenerateGraphError",
    "build_atom_bond_graph",
    "build_bond_angle_graph",
    "apply_transform",
    "random_rotation",
    "generate_acene",
    "random_molecule",
    "CC_BOND",
    "CH_BOND",
]

CC_BOND = 1.40
CH_BOND = 1.09

_ORTHO_TOL = 1e-12


class DegenerateGraphError(ValueError):
    """Molecule too small or cutoff too tight to produce any edge."""


@dataclass
class Molecule:
    """Atomic numbers plus 3D positions in Angstrom, with an optional dipole label in Debye."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    dipole_label: float | None = None
    id: str | None = None

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = self.atomic_numbers.shape[0]
        if self.positions.shape != (n, 3):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match {n} atomic numbers"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if n >= 2:
            d = _pairwise_distances(self.positions)
            np.fill_diagonal(d, np.inf)
            dmin = float(d.min())
            if dmin <= 1e-6:
                raise ValueError(f"coincident atoms: min pairwise distance {dmin:.3e} A")

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])

    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)


def _pairwise_distances(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass
class AtomBondGraph:
    """Directed cutoff graph: edge e goes src[e] -> dst[e] with rvec = p[dst] - p[src]."""

    n_atoms: int
    src: np.ndarray
    dst: np.ndarray
    rvec: np.ndarray
    dist: np.ndarray
    cutoff: float

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])


@dataclass
class BondAngleGraph:
    """Line graph of an AtomBondGraph.

    Nodes are the parent's directed edges. Line edge a connects parent
    edge lsrc[a] = (k->j) to parent edge ldst[a] = (j->i), k != i, and
    carries cos of the angle between the two bonds seen from atom j.
    """

    n_nodes: int
    lsrc: np.ndarray
    ldst: np.ndarray
    cos_angle: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.lsrc.shape[0])


def build_atom_bond_graph(mol: Molecule, cutoff: float = 5.0) -> AtomBondGraph:
    """Connect every ordered atom pair with distance strictly below the cutoff."""
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    if mol.n_atoms < 2:
        raise DegenerateGraphError(f"molecule {mol.id or ''} has {mol.n_atoms} atom(s)")
    d = _pairwise_distances(mol.positions)
    mask = d < cutoff
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    if src.size == 0:
        raise DegenerateGraphError(
            f"molecule {mol.id or ''}: no atom pair within cutoff {cutoff} A"
        )
    rvec = mol.positions[dst] - mol.positions[src]
    dist = np.sqrt(np.sum(rvec * rvec, axis=1))
    return AtomBondGraph(mol.n_atoms, src.astype(np.int64), dst.astype(np.int64), rvec, dist, cutoff)


def build_bond_angle_graph(g: AtomBondGraph) -> BondAngleGraph:
    """Line graph with one edge per ordered bonded triplet k->j->i, k != i."""
    by_dst = [np.flatnonzero(g.dst == j) for j in range(g.n_atoms)]
    lsrc_parts = []
    ldst_parts = []
    for w in range(g.n_edges):
        cands = by_dst[g.src[w]]  # parent edges (k -> j) arriving at shared atom j = src[w]
        keep = cands[g.src[cands] != g.dst[w]]
        if keep.size:
            lsrc_parts.append(keep)
            ldst_parts.append(np.full(keep.size, w, dtype=np.int64))
    if lsrc_parts:
        lsrc = np.concatenate(lsrc_parts)
        ldst = np.concatenate(ldst_parts)
        # bonds seen from j: r_jk = -rvec[lsrc], r_ji = rvec[ldst]
        num = -np.sum(g.rvec[lsrc] * g.rvec[ldst], axis=1)
        cos = np.clip(num / (g.dist[lsrc] * g.dist[ldst]), -1.0, 1.0)
    else:
        lsrc = np.zeros(0, dtype=np.int64)
        ldst = np.zeros(0, dtype=np.int64)
        cos = np.zeros(0, dtype=np.float64)
    return BondAngleGraph(g.n_edges, lsrc, ldst, cos)


@dataclass
class RigidTransform:
    """Proper rotation + translation, with an optional atom relabeling."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    permutation: np.ndarray | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthogonal within 1e-12")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-12")
        if self.permutation is not None:
            self.permutation = np.asarray(self.permutation, dtype=np.int64)
            if np.any(np.sort(self.permutation) != np.arange(self.permutation.size)):
                raise ValueError("permutation is not a bijection")


def apply_transform(mol: Molecule, t: RigidTransform) -> Molecule:
    """Positions map to R p + translation; atom k of the result is input atom permutation[k]."""
    z = mol.atomic_numbers
    pos = mol.positions
    if t.permutation is not None:
        if t.permutation.size != mol.n_atoms:
            raise ValueError(
                f"permutation length {t.permutation.size} does not match {mol.n_atoms} atoms"
            )
        z = z[t.permutation]
        pos = pos[t.permutation]
    new_pos = pos @ t.rotation.T + t.translation
    return Molecule(z.copy(), new_pos, dipole_label=mol.dipole_label, id=mol.id)


def random_rotation(seed: int) -> RigidTransform:
    """Haar-uniform proper rotation, deterministic per seed."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return RigidTransform(rotation=q)


def generate_acene(n_rings: int) -> Molecule:
    """Idealized planar chain of fused hexagons (benzene, naphthalene, ...).

    C-C 1.40 A, C-H 1.09 A, hydrogens on the exterior angle bisector of
    each peripheral carbon. Formula C(4n+2)H(2n+4); the geometry is
    centrosymmetric about its centroid, so the true dipole moment is zero.
    """
    if n_rings < 1:
        raise ValueError(f"n_rings must be >= 1, got {n_rings}")
    n = n_rings
    a = CC_BOND
    s = np.sqrt(3.0) * a
    carbons = []
    hydrogens = []
    # centered on the origin so inverted partners are exact float negations
    # vertical rung pairs at the ring boundaries
    for j in range(n + 1):
        x = (j - n / 2.0) * s
        for sy in (1.0, -1.0):
            carbons.append((x, sy * a / 2.0, 0.0))
    # apex atoms above and below each ring center
    for k in range(n):
        x = (k - (n - 1) / 2.0) * s
        for sy in (1.0, -1.0):
            carbons.append((x, sy * a, 0.0))
            hydrogens.append((x, sy * (a + CH_BOND), 0.0))
    # end-rung hydrogens point outward along the exterior bisector
    for j, sx in ((0, -1.0), (n, 1.0)):
        x = (j - n / 2.0) * s
        for sy in (1.0, -1.0):
            hx = x + CH_BOND * sx * np.sqrt(3.0) / 2.0
            hy = sy * (a / 2.0) + CH_BOND * sy * 0.5
            hydrogens.append((hx, hy, 0.0))
    pos = np.array(carbons + hydrogens, dtype=np.float64)
    z = np.array([6] * len(carbons) + [1] * len(hydrogens), dtype=np.int64)
    return Molecule(z, pos, dipole_label=0.0, id=f"acene_{n_rings}")


_DEFAULT_SPECIES = (1, 6, 7, 8, 9)
_DEFAULT_WEIGHTS = (0.35, 0.35, 0.12, 0.12, 0.06)


def random_molecule(
    seed: int,
    n_atoms: int | None = None,
    min_atoms: int = 5,
    max_atoms: int = 14,
    species: tuple[int, ...] = _DEFAULT_SPECIES,
    weights: tuple[float, ...] = _DEFAULT_WEIGHTS,
) -> Molecule:
    """Random tree-grown blob with bond-length spacing; geometry only, no label.

    Atoms attach to a random earlier atom at 1.0 to 1.6 A, rejecting
    placements closer than 0.87 A to any existing atom. The result is
    connected at any cutoff >= 1.6 A.
    """
    rng = np.random.default_rng(seed)
    n = int(n_atoms) if n_atoms is not None else int(rng.integers(min_atoms, max_atoms + 1))
    if n < 2:
        raise ValueError("random_molecule needs at least 2 atoms")
    p = np.array(weights, dtype=np.float64)
    z = rng.choice(np.array(species, dtype=np.int64), size=n, p=p / p.sum())
    z[0] = 6  # seed atom is carbon so single-species edge cases stay rare
    pos = np.zeros((n, 3), dtype=np.float64)
    for k in range(1, n):
        for _ in range(500):
            parent = int(rng.integers(0, k))
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            bond = rng.uniform(1.0, 1.6)
            cand = pos[parent] + bond * direction
            gaps = np.linalg.norm(pos[:k] - cand[None, :], axis=1)
            if gaps.min() >= 0.87:
                pos[k] = cand
                break
        else:
            raise RuntimeError("could not place atom without collision")
    return Molecule(z, pos, id=f"rand_{seed}")
