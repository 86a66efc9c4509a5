import numpy as np
import pytest

from meshcomplete.mesh import cylinder, icosphere
from meshcomplete.partiality import ShapeFamilyConfig, generate_family
from meshcomplete.vae import MeshVAE


@pytest.fixture(scope="session")
def small_family():
    """Coarse family: 8 x 6 cylinder, fast enough for unit tests."""
    cfg = ShapeFamilyConfig(n_around=8, n_along=6, n_samples=24, seed=3)
    return generate_family(cfg)


@pytest.fixture(scope="session")
def small_model(small_family):
    """Briefly trained model on the coarse family."""
    model = MeshVAE.from_preset("desk", latent_dim=4, n_iter=150, batch_size=2, random_state=0)
    return model.fit(small_family.train)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere():
    return icosphere(1)


@pytest.fixture(scope="session")
def tube():
    return cylinder(8, 6)


@pytest.fixture(scope="session")
def desk_family():
    """Bending-cylinder family used by the desk-scale experiments."""
    return generate_family(ShapeFamilyConfig(n_samples=120, seed=0))


@pytest.fixture(scope="session")
def desk_model(desk_family):
    """Desk-preset model trained on the family (a few minutes of CPU)."""
    return MeshVAE.from_preset("desk", random_state=0).fit(desk_family.train)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
