import importlib.resources

import pytest

from hiermpc import dynamics as dyn
from hiermpc import terminal as term


@pytest.fixture(scope="session")
def default_ingredients():
    """Shipped terminal design, fingerprint-checked against the default model."""
    params = dyn.ModelParams()
    Z = dyn.build_constraints()
    path = importlib.resources.files("hiermpc").joinpath("data/default_ingredients.txt")
    return term.load_ingredients(str(path), params, Z)
