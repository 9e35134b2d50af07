import numpy as np
import pytest

from defectfit.lattice import BravaisSpec, DefectSet, SupercellSpec, build_lattice
from defectfit.potential import EamToyPotential, calibrate_r0


@pytest.fixture(scope="session")
def eam():
    return EamToyPotential()


@pytest.fixture(scope="session")
def r0(eam):
    return calibrate_r0(eam)


@pytest.fixture(scope="session")
def bravais(eam, r0):
    return BravaisSpec.triangular(r0)


@pytest.fixture(scope="session")
def hom4(bravais):
    return build_lattice(bravais, SupercellSpec(4))


@pytest.fixture(scope="session")
def vac5(bravais):
    return build_lattice(bravais, SupercellSpec(5),
                         DefectSet.vacancies(bravais, [(0, 0)]))


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])
