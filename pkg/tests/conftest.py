import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cmlab.data import BenchmarkSpec, build_benchmark
from cmlab.model import ModelConfig, build_model

settings.register_profile("cmlab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cmlab")


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=20, n_tags=5, n_classes=3, n_layers=1, d_model=8, n_heads=2, d_ffn=12,
                       max_seq_len=10, b_dim=3)


@pytest.fixture
def small_model(small_cfg):
    return build_model(small_cfg, seed=0)


@pytest.fixture
def token_batch():
    rng = np.random.default_rng(7)
    tokens = rng.integers(2, 20, size=(3, 6))
    tokens[1, 4:] = 0
    return tokens


@pytest.fixture(scope="session")
def tiny_bench():
    return build_benchmark(BenchmarkSpec(base_resource=80, dev_size=20, test_size=30))


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_bench):
    return ModelConfig(vocab_size=tiny_bench.vocab_size, n_tags=tiny_bench.n_tags, n_classes=4,
                       n_layers=1, d_model=16, n_heads=2, d_ffn=24, b_dim=4)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
