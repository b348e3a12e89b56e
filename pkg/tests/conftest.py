import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY = dict(encoder_channels=(4, 4, 6, 6), latent_dim=8, decoder_width=8, decoder_blocks=2,
            patch_channels=(2, 3))


@pytest.fixture
def tiny():
    """Small presets that keep forward passes in the millisecond range."""
    from ossnet.model import OssNetConfig

    def make(name="C", **overrides):
        return OssNetConfig.preset(name, **{**TINY, **overrides})

    return make


@pytest.fixture
def phantom16():
    from ossnet.volume import PhantomConfig, generate_phantom

    return generate_phantom(PhantomConfig(resolution=16, blob_radius_range=(2.0, 5.0), seed=3))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
