import numpy as np
import pytest

from bottlenecked.backbone import BackboneConfig, BackboneParams
from bottlenecked.data import SynthTaskSpec, generate_synthetic
from bottlenecked.numerics import precision
from bottlenecked.processor import ProcessorConfig, ProcessorParams


def toy_backbone(seed=0, n_layers=2, n_heads=2, d_model=16, vocab_size=30, dtype=np.float32):
    cfg = BackboneConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=2 * d_model,
                         vocab_size=vocab_size)
    with precision(dtype):
        return BackboneParams.init(cfg, np.random.default_rng(seed))


def toy_processor(backbone, seed=0, zero_out=True, d_p=8, k=4, dtype=np.float32):
    with precision(dtype):
        return ProcessorParams.init(ProcessorConfig(d_p=d_p, d_ff=2 * d_p, n_heads=2, k=k),
                                    backbone.config, np.random.default_rng(seed), zero_out=zero_out)


@pytest.fixture
def small_task():
    return SynthTaskSpec(modulus=5, chain_length=2, distractors=2, seed=3)


@pytest.fixture
def traces(small_task):
    return generate_synthetic(small_task, 8, "train")


def sharpen(params, factor=40.0):
    """Scale query/key projections so attention is far from uniform."""
    for name, t in params.tensors.items():
        if name.endswith((".wq", ".wk")):
            t.data *= factor
    return params


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for name in sorted(RESULTS, key=lambda n: int(n[1:])):
            terminalreporter.write_line(RESULTS[name])
