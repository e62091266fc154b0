import pytest

from edgerca import synth
from edgerca.synth import FailureSpec, ScenarioSpec


@pytest.fixture(scope="session")
def cpu_bundle():
    return synth.generate_bundle(ScenarioSpec(failure=FailureSpec("application", "cpu"), seed=5))


@pytest.fixture(scope="session")
def clean_bundle():
    return synth.generate_bundle(ScenarioSpec(seed=7))
