"""QM9 extended-XYZ parsing, dataset splits, prediction/metrics output.

The QM9 distribution's XYZ variant: line 1 holds the atom count, line 2
holds "gdb <id>" plus 15 whitespace-separated scalars (rotational
constants A, B, C, then the dipole norm in Debye, then 11 more), then one
line per atom (symbol, x, y, z in Angstrom, Mulliken charge), then
frequency/SMILES/InChI lines that are ignored. Some raw files carry a
Mathematica-style '*^' exponent marker that is normalized before parsing.

Also provides a QM9-format synthetic corpus writer. Labels are the norm
of a sum of bond dipoles driven by electronegativity differences, so they
depend on species and geometry and are rotation/translation invariant.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .molgraph import Molecule, random_molecule

__all__ = [
    "XyzParseError",
    "parse_qm9_xyz",
    "parse_qm9_record",
    "parse_plain_xyz",
    "parse_any_xyz",
    "format_plain_xyz",
    "SplitSpec",
    "DatasetSplit",
    "load_dataset",
    "write_predictions",
    "write_metrics",
    "config_hash",
    "synthetic_dipole_vector",
    "format_xyz_record",
    "write_sample_corpus",
    "ELEMENT_NUMBERS",
    "DEFAULT_MU_INDEX",
]

log = logging.getLogger(__name__)

ELEMENT_NUMBERS = {
    "H": 1, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
    "Si": 14, "P": 15, "S": 16, "Cl": 17,
}
_SYMBOL_OF = {z: s for s, z in ELEMENT_NUMBERS.items()}

DEFAULT_MU_INDEX = 4  # dipole norm is the 4th scalar after the "gdb <id>" tag


class XyzParseError(ValueError):
    """Malformed XYZ record; message names the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _parse_float(token: str, line_no: int) -> float:
    # raw QM9 files occasionally use Mathematica's '*^' exponent marker
    try:
        return float(token.replace("*^", "e"))
    except ValueError:
        raise XyzParseError(f"cannot parse number {token!r}", line_no) from None


def parse_qm9_record(text: str) -> tuple[Molecule, np.ndarray]:
    """Parse one record; returns the molecule plus the full scalar property row."""
    lines = text.splitlines()
    if not lines:
        raise XyzParseError("empty record", 1)
    try:
        n_atoms = int(lines[0].strip())
    except ValueError:
        raise XyzParseError(f"bad atom count {lines[0]!r}", 1) from None
    if len(lines) < n_atoms + 2:
        raise XyzParseError(f"expected {n_atoms} atom lines, file has {len(lines) - 2}", len(lines))

    tokens = lines[1].split()
    if len(tokens) < 2 or any(c.isdigit() for c in tokens[0]):
        raise XyzParseError(f"expected 'gdb <id>' tag, got {lines[1][:40]!r}", 2)
    rec_id = f"{tokens[0]}_{tokens[1]}"
    props = np.array([_parse_float(t, 2) for t in tokens[2:]], dtype=np.float64)
    if props.size < DEFAULT_MU_INDEX:
        raise XyzParseError(f"property row has only {props.size} scalars", 2)

    z = np.empty(n_atoms, dtype=np.int64)
    pos = np.empty((n_atoms, 3), dtype=np.float64)
    for i in range(n_atoms):
        line_no = i + 3
        fields = lines[i + 2].split()
        if len(fields) not in (4, 5):
            raise XyzParseError(f"atom line has {len(fields)} fields, expected 4 or 5", line_no)
        sym = fields[0]
        if sym not in ELEMENT_NUMBERS:
            raise XyzParseError(f"unknown element symbol {sym!r}", line_no)
        z[i] = ELEMENT_NUMBERS[sym]
        pos[i] = [_parse_float(f, line_no) for f in fields[1:4]]

    try:
        mol = Molecule(z, pos, id=rec_id)
    except ValueError as exc:
        raise XyzParseError(str(exc)) from exc
    return mol, props


def parse_qm9_xyz(text: str, mu_index: int = DEFAULT_MU_INDEX) -> Molecule:
    """Parse one record, attaching the mu_index-th scalar (1-indexed) as the dipole label."""
    mol, props = parse_qm9_record(text)
    if not 1 <= mu_index <= props.size:
        raise XyzParseError(f"mu_index {mu_index} outside 1..{props.size}")
    mol.dipole_label = float(props[mu_index - 1])
    return mol


def parse_plain_xyz(text: str) -> Molecule:
    """Parse a bare XYZ file: count line, comment line, then symbol x y z rows."""
    lines = text.splitlines()
    if len(lines) < 2:
        raise XyzParseError("file too short for XYZ", len(lines))
    try:
        n_atoms = int(lines[0].strip())
    except ValueError:
        raise XyzParseError(f"bad atom count {lines[0]!r}", 1) from None
    if len(lines) < n_atoms + 2:
        raise XyzParseError(f"expected {n_atoms} atom lines", len(lines))
    z = np.empty(n_atoms, dtype=np.int64)
    pos = np.empty((n_atoms, 3), dtype=np.float64)
    for i in range(n_atoms):
        fields = lines[i + 2].split()
        if len(fields) < 4:
            raise XyzParseError("atom line needs symbol and 3 coordinates", i + 3)
        if fields[0] not in ELEMENT_NUMBERS:
            raise XyzParseError(f"unknown element symbol {fields[0]!r}", i + 3)
        z[i] = ELEMENT_NUMBERS[fields[0]]
        pos[i] = [_parse_float(f, i + 3) for f in fields[1:4]]
    return Molecule(z, pos)


def parse_any_xyz(text: str, mu_index: int = DEFAULT_MU_INDEX) -> Molecule:
    """Accept either a QM9 record or a bare XYZ geometry."""
    try:
        return parse_qm9_xyz(text, mu_index=mu_index)
    except XyzParseError:
        return parse_plain_xyz(text)


def format_plain_xyz(mol: Molecule, comment: str = "") -> str:
    lines = [str(mol.n_atoms), comment]
    for i in range(mol.n_atoms):
        sym = _SYMBOL_OF[int(mol.atomic_numbers[i])]
        x, y, z = mol.positions[i]
        lines.append(f"{sym} {x:.10f} {y:.10f} {z:.10f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SplitSpec:
    """Either absolute counts (train, val, test) or fractions that sum to <= 1."""

    counts: tuple[int, int, int] | None = None
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass
class DatasetSplit:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    manifest: dict = field(default_factory=dict)


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle of range(n) cut into train/val/test blocks."""
    if spec.counts is not None:
        a, b, c = (int(x) for x in spec.counts)
        if a + b + c > n:
            raise ValueError(f"split counts {spec.counts} exceed {n} available molecules")
    else:
        f1, f2, f3 = spec.fractions
        if min(f1, f2, f3) < 0 or f1 + f2 + f3 > 1.0 + 1e-12:
            raise ValueError(f"bad split fractions {spec.fractions}")
        a = int(f1 * n)
        b = int(f2 * n)
        c = min(n - a - b, int(np.ceil(f3 * n)))
    perm = np.random.default_rng(spec.seed).permutation(n)
    return perm[:a], perm[a : a + b], perm[a + b : a + b + c]


def _manifest_checksum(entries: list[tuple[str, int]]) -> str:
    h = hashlib.sha256()
    for name, size in entries:
        h.update(f"{name}:{size}\n".encode())
    return h.hexdigest()


def load_dataset(
    data_dir,
    split: SplitSpec = SplitSpec(),
    mu_index: int = DEFAULT_MU_INDEX,
    exclude_path=None,
    limit: int | None = None,
) -> tuple[list[Molecule], DatasetSplit]:
    """Parse every .xyz file under data_dir (lexicographic order) and split.

    Records on the exclusion list (one gdb id or file stem per line) are
    dropped; files that fail to parse are skipped with a logged reason and
    recorded in the manifest.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory {data_dir} does not exist")
    files = sorted(data_dir.glob("*.xyz"))
    if limit is not None:
        files = files[:limit]
    if not files:
        raise FileNotFoundError(f"no .xyz files under {data_dir}")

    excluded = set()
    if exclude_path is not None:
        with open(exclude_path) as fh:
            excluded = {line.strip() for line in fh if line.strip()}

    molecules: list[Molecule] = []
    entries: list[tuple[str, int]] = []
    skipped: list[str] = []
    for path in files:
        try:
            text = path.read_text()
            mol = parse_qm9_xyz(text, mu_index=mu_index)
        except (OSError, XyzParseError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(f"{path.name}: {exc}")
            continue
        gdb_number = mol.id.split("_")[-1] if mol.id else ""
        if path.stem in excluded or gdb_number in excluded:
            continue
        molecules.append(mol)
        entries.append((path.name, len(text)))

    tr, va, te = split_indices(len(molecules), split)
    manifest = {
        "files": [name for name, _ in entries],
        "checksum": _manifest_checksum(entries),
        "skipped": skipped,
    }
    return molecules, DatasetSplit(tr, va, te, seed=split.seed, manifest=manifest)


# ---------------------------------------------------------------------------
# result files

def write_predictions(path, ids, labels, preds, seed: int | None = None) -> None:
    """CSV of per-molecule predictions; floats keep full round-trip precision."""
    preds = np.asarray(preds, dtype=np.float64).reshape(len(ids), 3)
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["id", "label_debye", "pred_x", "pred_y", "pred_z", "pred_norm"])
        for i, mol_id in enumerate(ids):
            norm = float(np.linalg.norm(preds[i]))
            w.writerow([mol_id, repr(float(labels[i])), *(repr(float(v)) for v in preds[i]), repr(norm)])


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg_dict: dict) -> str:
    """Stable short hash of a configuration mapping."""
    blob = json.dumps(cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# synthetic QM9-format corpus

ELECTRONEGATIVITY = {1: 2.20, 6: 2.55, 7: 3.04, 8: 3.44, 9: 3.98}

_BOND_RANGE = 1.9  # A; pairs closer than this carry a bond dipole
_BOND_SCALE = 0.4
_COORD_GAIN = 0.12


def _bond_terms(mol: Molecule):
    """Bonded pairs (i < j), their displacement, and the bond-dipole coefficient.

    The coefficient is antisymmetric in the electronegativity difference,
    shrinks with bond length, and is modulated by the pair's coordination
    environment, so it is determined by the local graph neighborhood.
    """
    chi = np.array([ELECTRONEGATIVITY[int(z)] for z in mol.atomic_numbers])
    diff = mol.positions[None, :, :] - mol.positions[:, None, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(d, np.inf)
    bonded = d < _BOND_RANGE
    coord = bonded.sum(axis=1).astype(np.float64)
    i, j = np.nonzero(np.triu(bonded))
    p = (
        _BOND_SCALE
        * (chi[j] - chi[i])
        * (_BOND_RANGE - d[i, j])
        * (1.0 + _COORD_GAIN * (coord[i] + coord[j] - 4.0))
    )
    return i, j, diff[i, j], p


def synthetic_charges(mol: Molecule) -> np.ndarray:
    """Point charges equivalent to the bond dipoles; they sum to zero."""
    i, j, rvec, p = _bond_terms(mol)
    q = np.zeros(mol.n_atoms)
    np.add.at(q, i, -p)
    np.add.at(q, j, p)
    return q


def synthetic_dipole_vector(mol: Molecule) -> np.ndarray:
    """Sum of bond dipoles p_ij * (r_j - r_i) (translation invariant)."""
    _, _, rvec, p = _bond_terms(mol)
    return p @ rvec if p.size else np.zeros(3)


def format_xyz_record(mol: Molecule, gdb_id: int, star_caret: bool = False) -> str:
    """Render a molecule as one QM9-format record with a synthetic label.

    With star_caret the dipole field uses the raw distribution's '*^'
    exponent notation to exercise parser normalization.
    """
    q = synthetic_charges(mol)
    mu = float(np.linalg.norm(synthetic_dipole_vector(mol)))
    if star_caret:
        mu_text = f"{mu:.6e}".replace("e", "*^")
    else:
        mu_text = f"{mu:.6f}"
    # filler properties in dataset order: A B C mu alpha homo lumo gap r2 zpve U0 U H G Cv
    filler = [
        f"{1.0 + 0.001 * gdb_id:.5f}", "1.00000", "1.00000", mu_text,
        "13.21", "-0.38", "0.11", "0.49", "35.36", "0.04",
        "-40.47", "-40.47", "-40.47", "-40.49", "6.46",
    ]
    lines = [str(mol.n_atoms), "gdb " + str(gdb_id) + "\t" + "\t".join(filler)]
    for i in range(mol.n_atoms):
        sym = _SYMBOL_OF[int(mol.atomic_numbers[i])]
        x, y, z = mol.positions[i]
        lines.append(f"{sym}\t{x: .10f}\t{y: .10f}\t{z: .10f}\t{q[i]: .6f}")
    lines.append("100.0\t200.0\t300.0")
    lines.append("C\tC")
    lines.append("InChI=1S/synthetic\tInChI=1S/synthetic")
    return "\n".join(lines) + "\n"


def write_sample_corpus(
    out_dir,
    n_molecules: int,
    seed: int = 0,
    star_caret_fraction: float = 0.05,
    min_atoms: int = 5,
    max_atoms: int = 12,
) -> list[Path]:
    """Write a QM9-format corpus of random labeled molecules; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_molecules):
        mol = random_molecule(int(rng.integers(2**31)), min_atoms=min_atoms, max_atoms=max_atoms)
        star = rng.uniform() < star_caret_fraction
        path = out_dir / f"synth_{i + 1:06d}.xyz"
        path.write_text(format_xyz_record(mol, gdb_id=i + 1, star_caret=star))
        paths.append(path)
    return paths
