import os

# File logging off before any module reads the settings
os.environ["DCSMC_LOG_DIR"] = ""
os.environ.setdefault("DCSMC_LOG_LEVEL", "WARNING")

import pytest

from services.hierarchical_model import HierarchicalBinomial, HierTreeNode
from services.ising_model import IsingLattice
from services.particles import SeedPath


@pytest.fixture
def rng():
    return SeedPath(20240611)


@pytest.fixture
def ising_2x2():
    return IsingLattice(2, 0.4407)


@pytest.fixture
def ising_4x4():
    return IsingLattice(4, 0.4407)


@pytest.fixture
def two_leaf_hier():
    root = HierTreeNode("root", [
        HierTreeNode("a", successes=12, trials=30),
        HierTreeNode("b", successes=20, trials=25),
    ])
    return HierarchicalBinomial(root)
