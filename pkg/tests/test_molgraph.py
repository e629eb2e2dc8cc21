import numpy as np
import pytest

from dipolegnn.molgraph import (
    DegenerateGraphError,
    Molecule,
    RigidTransform,
    apply_transform,
    build_atom_bond_graph,
    build_bond_angle_graph,
    generate_acene,
    random_molecule,
    random_rotation,
)


def edge_set(g):
    return set(zip(g.src.tolist(), g.dst.tolist()))


class TestMolecule:
    def test_coincident_atoms_rejected(self):
        with pytest.raises(ValueError, match="coincident"):
            Molecule(np.array([1, 1]), np.zeros((2, 3)))

    def test_nonfinite_positions_rejected(self):
        pos = np.array([[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]])
        with pytest.raises(ValueError, match="finite"):
            Molecule(np.array([1, 1]), pos)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Molecule(np.array([1, 1, 1]), np.zeros((2, 3)))


class TestAtomBondGraph:
    def test_h2(self, h2):
        g = build_atom_bond_graph(h2, cutoff=5.0)
        assert g.n_edges == 2
        assert np.allclose(g.dist, [0.74, 0.74])
        assert edge_set(g) == {(0, 1), (1, 0)}

    def test_water_six_edges_law_of_cosines(self, water):
        g = build_atom_bond_graph(water, cutoff=5.0)
        assert g.n_edges == 6
        # independent oracle: d(H,H)^2 = 2 r^2 (1 - cos theta)
        r, theta = 0.9572, np.deg2rad(104.52)
        d_hh = np.sqrt(2 * r * r * (1 - np.cos(theta)))
        idx = np.flatnonzero((g.src == 1) & (g.dst == 2))[0]
        assert g.dist[idx] == pytest.approx(d_hh, abs=1e-12)
        assert d_hh == pytest.approx(1.5139, abs=1e-4)

    def test_benzene_24_edges_at_cutoff_2(self):
        g = build_atom_bond_graph(generate_acene(1), cutoff=2.0)
        assert g.n_edges == 24
        deg = np.bincount(g.src, minlength=12)
        assert sorted(deg) == [1] * 6 + [3] * 6

    def test_antisymmetric_displacements_bit_exact(self):
        mol = random_molecule(17)
        g = build_atom_bond_graph(mol, cutoff=5.0)
        rv = {(int(s), int(d)): v for s, d, v in zip(g.src, g.dst, g.rvec)}
        for (i, j), v in rv.items():
            assert np.array_equal(rv[(j, i)], -v)

    def test_distance_consistent_with_rvec(self):
        g = build_atom_bond_graph(random_molecule(23), cutoff=5.0)
        assert np.allclose(g.dist, np.linalg.norm(g.rvec, axis=1), atol=1e-12)

    def test_strict_cutoff_boundary(self):
        mol = Molecule(np.array([1, 1]), np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        with pytest.raises(DegenerateGraphError):
            build_atom_bond_graph(mol, cutoff=2.0)
        assert build_atom_bond_graph(mol, cutoff=2.0000001).n_edges == 2

    def test_single_atom_rejected(self):
        with pytest.raises(DegenerateGraphError):
            build_atom_bond_graph(Molecule(np.array([6]), np.zeros((1, 3))), 5.0)

    def test_graph_invariant_under_rigid_motion(self):
        mol = random_molecule(41)
        g0 = build_atom_bond_graph(mol, cutoff=3.0)
        t = random_rotation(5)
        t = RigidTransform(rotation=t.rotation, translation=np.array([3.0, -1.0, 7.0]))
        g1 = build_atom_bond_graph(apply_transform(mol, t), cutoff=3.0)
        assert edge_set(g0) == edge_set(g1)
        assert np.allclose(g0.dist, g1.dist, atol=1e-10)


class TestBondAngleGraph:
    def test_h2_no_line_edges(self, h2):
        lg = build_bond_angle_graph(build_atom_bond_graph(h2, 5.0))
        assert lg.n_edges == 0

    def test_water_line_edges_and_angle(self, water):
        g = build_atom_bond_graph(water, 5.0)
        lg = build_bond_angle_graph(g)
        assert lg.n_edges == 6  # every atom has degree 2: sum 2*1 over 3 atoms
        cos_hoh = np.cos(np.deg2rad(104.52))
        # line edges whose shared atom is the oxygen (atom 0)
        shared = g.dst[lg.lsrc]
        at_o = lg.cos_angle[shared == 0]
        assert at_o.size == 2
        assert np.allclose(at_o, cos_hoh, atol=1e-12)
        assert cos_hoh == pytest.approx(-0.2507, abs=1e-4)

    def test_collinear_triple(self):
        mol = Molecule(np.array([6, 6, 6]),
                       np.array([[0.0, 0, 0], [1.4, 0, 0], [2.8, 0, 0]]))
        g = build_atom_bond_graph(mol, 1.5)
        lg = build_bond_angle_graph(g)
        assert lg.n_edges == 2
        assert np.allclose(lg.cos_angle, -1.0, atol=1e-15)

    def test_count_formula_vs_brute_force(self):
        """Line-edge count equals both the degree formula and triplet enumeration."""
        for seed in range(5):
            mol = random_molecule(seed, min_atoms=5, max_atoms=9)
            g = build_atom_bond_graph(mol, 2.2)
            lg = build_bond_angle_graph(g)
            edges = edge_set(g)
            brute = sum(
                1
                for (k, j) in edges
                for (j2, i) in edges
                if j2 == j and k != i
            )
            deg = np.bincount(g.src, minlength=mol.n_atoms)
            assert lg.n_edges == brute == int(np.sum(deg * (deg - 1)))

    def test_cosines_in_range(self):
        g = build_atom_bond_graph(random_molecule(77), 5.0)
        lg = build_bond_angle_graph(g)
        assert np.all(lg.cos_angle >= -1.0) and np.all(lg.cos_angle <= 1.0)


class TestRigidTransform:
    def test_identity_bit_exact(self):
        mol = random_molecule(3)
        out = apply_transform(mol, RigidTransform())
        assert np.array_equal(out.positions, mol.positions)
        assert np.array_equal(out.atomic_numbers, mol.atomic_numbers)

    def test_translation_preserves_distances(self):
        mol = random_molecule(4)
        out = apply_transform(mol, RigidTransform(translation=np.array([10.0, -5.0, 2.0])))
        d0 = np.linalg.norm(mol.positions[:, None] - mol.positions[None, :], axis=-1)
        d1 = np.linalg.norm(out.positions[:, None] - out.positions[None, :], axis=-1)
        assert np.allclose(d0, d1, atol=1e-12)

    def test_rotation_pi_about_z(self):
        rot = np.array([[-1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]])
        mol = Molecule(np.array([1, 1]), np.array([[1.0, 0, 0], [0, 0, 1.0]]))
        out = apply_transform(mol, RigidTransform(rotation=rot))
        assert np.allclose(out.positions[0], [-1.0, 0, 0], atol=1e-15)

    def test_non_orthogonal_rejected(self):
        with pytest.raises(ValueError, match="orthogonal"):
            RigidTransform(rotation=np.eye(3) * 1.5)

    def test_reflection_rejected(self):
        refl = np.diag([-1.0, 1.0, 1.0])
        with pytest.raises(ValueError, match="determinant"):
            RigidTransform(rotation=refl)

    def test_permutation_relabels(self):
        mol = Molecule(np.array([8, 1, 1]), np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]]))
        out = apply_transform(mol, RigidTransform(permutation=np.array([2, 0, 1])))
        assert out.atomic_numbers.tolist() == [1, 8, 1]
        assert np.array_equal(out.positions[1], mol.positions[0])

    def test_bad_permutation_rejected(self):
        with pytest.raises(ValueError, match="bijection"):
            RigidTransform(permutation=np.array([0, 0, 1]))


class TestRandomRotation:
    def test_deterministic_per_seed(self):
        assert np.array_equal(random_rotation(9).rotation, random_rotation(9).rotation)

    def test_orthonormal_and_proper(self):
        for seed in range(20):
            r = random_rotation(seed).rotation
            assert np.max(np.abs(r.T @ r - np.eye(3))) <= 1e-12
            assert abs(np.linalg.det(r) - 1.0) <= 1e-12


class TestAcenes:
    def test_benzene_formula(self):
        mol = generate_acene(1)
        assert mol.n_atoms == 12
        assert np.sum(mol.atomic_numbers == 6) == 6
        assert np.sum(mol.atomic_numbers == 1) == 6

    def test_naphthalene_and_anthracene(self):
        assert generate_acene(2).n_atoms == 18  # C10H8
        assert generate_acene(3).n_atoms == 24

    def test_formula_series(self):
        for n in range(1, 7):
            mol = generate_acene(n)
            assert np.sum(mol.atomic_numbers == 6) == 4 * n + 2
            assert np.sum(mol.atomic_numbers == 1) == 2 * n + 4

    def test_bond_lengths(self):
        g = build_atom_bond_graph(generate_acene(2), cutoff=1.6)
        z = generate_acene(2).atomic_numbers
        for s, d, dist in zip(g.src, g.dst, g.dist):
            if z[s] == 6 and z[d] == 6:
                assert dist == pytest.approx(1.40, abs=1e-9)
            else:
                assert dist == pytest.approx(1.09, abs=1e-9)

    def test_centroid_inversion_symmetry(self):
        """Nearest-atom matching after inversion through the centroid."""
        for n in range(1, 7):
            mol = generate_acene(n)
            c = mol.centroid()
            inverted = 2 * c - mol.positions
            for i in range(mol.n_atoms):
                gaps = np.linalg.norm(mol.positions - inverted[i], axis=1)
                j = int(np.argmin(gaps))
                assert gaps[j] <= 1e-9
                assert mol.atomic_numbers[j] == mol.atomic_numbers[i]

    def test_invalid_ring_count(self):
        with pytest.raises(ValueError):
            generate_acene(0)


class TestRandomMolecule:
    def test_deterministic(self):
        a, b = random_molecule(5), random_molecule(5)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.atomic_numbers, b.atomic_numbers)

    def test_minimum_separation(self):
        for seed in range(10):
            mol = random_molecule(seed)
            d = np.linalg.norm(mol.positions[:, None] - mol.positions[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            assert d.min() >= 0.87

    def test_connected_at_growth_cutoff(self):
        for seed in range(10):
            mol = random_molecule(seed)
            g = build_atom_bond_graph(mol, cutoff=1.6000001)
            # BFS reachability oracle
            adj = {i: [] for i in range(mol.n_atoms)}
            for s, d in zip(g.src, g.dst):
                adj[int(s)].append(int(d))
            seen, frontier = {0}, [0]
            while frontier:
                nxt = [j for i in frontier for j in adj[i] if j not in seen]
                seen.update(nxt)
                frontier = nxt
            assert len(seen) == mol.n_atoms
