import numpy as np
import pytest

from dipolegnn.molgraph import Molecule

QM9_SAMPLE_DIR = __file__.rsplit("/", 1)[0] + "/data/qm9_sample"


@pytest.fixture
def water():
    """O at the origin, O-H 0.9572 A, H-O-H 104.52 degrees, in the xy plane."""
    r = 0.9572
    theta = np.deg2rad(104.52)
    pos = np.array([
        [0.0, 0.0, 0.0],
        [r, 0.0, 0.0],
        [r * np.cos(theta), r * np.sin(theta), 0.0],
    ])
    return Molecule(np.array([8, 1, 1]), pos, dipole_label=1.8545, id="water")


@pytest.fixture
def h2():
    pos = np.array([[0.0, 0.0, 0.0], [0.74, 0.0, 0.0]])
    return Molecule(np.array([1, 1]), pos, dipole_label=0.0, id="h2")


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """20 small labeled molecules in QM9 format."""
    from dipolegnn.dataio import write_sample_corpus

    d = tmp_path_factory.mktemp("tiny_corpus")
    write_sample_corpus(d, 20, seed=123, min_atoms=4, max_atoms=8)
    return d
