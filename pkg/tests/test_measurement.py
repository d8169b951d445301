import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ambientcyclegan.clb import ClbParams, rasterize, sample_clb
from ambientcyclegan.errors import ParameterDomainError
from ambientcyclegan.measurement import MeasurementConfig, MeasurementImage, MeasurementOperator, apply_measurement


def test_default_noise_std_is_004():
    cfg = MeasurementConfig()
    assert cfg.noise_std == 0.04 and cfg.noise_mean == 0.0
    assert cfg.system_operator == "identity" and cfg.seed_policy == "fresh_per_call"


@pytest.mark.parametrize(
    "kw", [{"noise_std": -0.1}, {"noise_std": float("nan")}, {"noise_model": "poisson"}, {"system_operator": "blur"},
           {"seed_policy": "sometimes"}, {"noise_mean": float("inf")}]
)
def test_config_validation(kw):
    with pytest.raises(ParameterDomainError):
        MeasurementConfig(**kw)


def test_config_roundtrip():
    cfg = MeasurementConfig(noise_std=0.1, seed_policy="fixed")
    assert MeasurementConfig.from_dict(cfg.to_dict()) == cfg


def test_noiseless_identity_pixel_exact():
    obj = rasterize(sample_clb(ClbParams.preset("opex").scaled_to((32, 32)), 0))
    out = apply_measurement(obj, MeasurementConfig.noiseless(), seed=3)
    assert isinstance(out, MeasurementImage) and out.domain_tag == "Y" and out.provenance == "simulated"
    assert np.array_equal(out.pixels, obj.pixels)
    assert out.pixels is not obj.pixels


def test_noise_moments_over_1e6_pixels():
    img = np.zeros((1000, 1000), dtype=np.float64)
    out = apply_measurement(img, MeasurementConfig(), seed=12345).pixels
    d = out - img
    assert abs(d.std() - 0.04) <= 1e-4
    assert abs(d.mean()) <= 1.2e-4


def test_noise_is_seeded():
    img = np.zeros((8, 8), np.float32)
    a = apply_measurement(img, MeasurementConfig(), 1).pixels
    b = apply_measurement(img, MeasurementConfig(), 1).pixels
    c = apply_measurement(img, MeasurementConfig(), 2).pixels
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.dtype == np.float32


def test_non_finite_input_rejected():
    with pytest.raises(ParameterDomainError):
        apply_measurement(np.array([[np.nan]]), MeasurementConfig(), 0)
    with pytest.raises(ParameterDomainError):
        MeasurementImage(np.array([[np.inf]]))


def test_torch_operator_fixed_policy_deterministic():
    op = MeasurementOperator(MeasurementConfig(seed_policy="fixed"), seed=5)
    x = torch.zeros(2, 1, 8, 8)
    assert torch.equal(op(x), op(x))


def test_torch_operator_fresh_policy_advances():
    op = MeasurementOperator(MeasurementConfig(), seed=5)
    x = torch.zeros(2, 1, 8, 8)
    assert not torch.equal(op(x), op(x))
    # same seed reproduces the same sequence
    op2 = MeasurementOperator(MeasurementConfig(), seed=5)
    op3 = MeasurementOperator(MeasurementConfig(), seed=5)
    assert torch.equal(op2(x), op3(x)) and torch.equal(op2(x), op3(x))


def test_torch_operator_zero_std_is_bitwise_copy():
    op = MeasurementOperator(MeasurementConfig(noise_std=0.0))
    x = torch.randn(3, 1, 8, 8)
    assert torch.equal(op(x), x)
    assert torch.equal(MeasurementOperator(MeasurementConfig.noiseless())(x), x)


def test_torch_noise_moments():
    op = MeasurementOperator(MeasurementConfig(), seed=0)
    d = op(torch.zeros(1, 1, 1000, 1000, dtype=torch.float64))
    assert abs(d.std().item() - 0.04) <= 1e-4
    assert abs(d.mean().item()) <= 1.2e-4


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_gradient_passthrough_identity(seed):
    # fixed noise: finite-difference JVP of H equals the direction itself
    op = MeasurementOperator(MeasurementConfig(seed_policy="fixed"), seed=seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 1, 6, 6, generator=g, dtype=torch.float64)
    v = torch.randn(1, 1, 6, 6, generator=g, dtype=torch.float64)
    eps = 1e-6
    jvp = (op(x + eps * v) - op(x - eps * v)) / (2 * eps)
    assert torch.linalg.vector_norm(jvp - v) / torch.linalg.vector_norm(v) < 1e-6
    # autograd agrees exactly
    x.requires_grad_(True)
    (op(x) * v).sum().backward()
    assert torch.equal(x.grad, v)
