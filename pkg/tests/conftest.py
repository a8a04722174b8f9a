import numpy as np
import pytest

from xinr.model import ArchConfig, DomainSpec, ExplorableModel


def tiny_arch(**kw) -> ArchConfig:
    base = dict(spatial_grid_res=6, plane_res=9, line_res=5, spatial_dim_C=5,
                param_dim_Cp=3, decoder_hidden=12, decoder_layers=2, n_params_m=2)
    base.update(kw)
    return ArchConfig(**base).validate()


def tiny_domain(m: int = 2) -> DomainSpec:
    return DomainSpec(spatial_bounds=[(0.0, 1.0), (0.0, 2.0), (-1.0, 1.0)],
                      param_bounds=[(-1.0, 1.0), (0.5, 2.0)][:m],
                      v_min=0.0, v_max=1.0,
                      param_names=["shift", "amp"][:m])


@pytest.fixture
def tiny_model() -> ExplorableModel:
    return ExplorableModel.initialize(tiny_arch(), tiny_domain(), seed=11)


@pytest.fixture
def tiny_model_active() -> ExplorableModel:
    """Same architecture with biased hidden layers: pre-activations off zero."""
    m = ExplorableModel.initialize(tiny_arch(), tiny_domain(), seed=11)
    for b in m.decoder.biases[:-1]:
        b += 0.6
    return m


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def smooth_model(seed: int = 0, **arch_kw) -> ExplorableModel:
    """Hand-built model with smooth O(1) features and a gentle landscape.

    Feature tables are sinusoids of the vertex coordinates, so propagation
    and search behave like they do on a trained model without the cost of
    training one.
    """
    base = dict(spatial_grid_res=9, plane_res=13, line_res=6,
                spatial_dim_C=6, param_dim_Cp=4, decoder_hidden=16,
                decoder_layers=2)
    base.update(arch_kw)
    arch = tiny_arch(**base)
    dom = tiny_domain(m=arch.n_params_m)
    m = ExplorableModel.initialize(arch, dom, seed=seed)
    r = arch.spatial_grid_res
    t = np.linspace(-1, 1, r)
    gx, gy, gz = np.meshgrid(t, t, t, indexing="ij")
    for c in range(arch.spatial_dim_C):
        m.features.grid3d[..., c] = (0.5 + 0.4 * np.sin(
            np.pi * (gx + 0.3 * c)) * np.cos(np.pi * (gy - 0.2 * c)) +
            0.2 * np.sin(np.pi * gz * (1 + 0.1 * c))).astype(np.float32)
    tp = np.linspace(-1, 1, arch.plane_res)
    pu, pv = np.meshgrid(tp, tp, indexing="ij")
    for name in m.features.planes:
        for c in range(arch.spatial_dim_C):
            m.features.planes[name][..., c] = (
                1.0 + 0.15 * np.sin(np.pi * (pu + 0.1 * c)) *
                np.cos(np.pi * pv)).astype(np.float32)
    tl = np.linspace(-1, 1, arch.line_res)
    for i, line in enumerate(m.features.lines):
        for c in range(arch.param_dim_Cp):
            line[:, c] = (0.6 + 0.3 * np.sin(
                0.8 * np.pi * tl * (1 + 0.2 * c) + i)).astype(np.float32)
    rng_ = np.random.default_rng(seed + 1)
    for i, w in enumerate(m.decoder.weights):
        w[:] = (0.25 * rng_.standard_normal(w.shape)).astype(np.float32)
    for b in m.decoder.biases[:-1]:
        b += 0.3
    return m
