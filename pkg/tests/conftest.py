import numpy as np
import pytest

from weeklymort.estimation import fit_model
from weeklymort.likelihood import ModelData, ParamSet, PenaltyConfig, build_laplacian
from weeklymort.synthetic import SynthConfig, generate


def small_instance(seed=0, X=3, T=4, R=2, Q1=3, Q2=2, scale=0.05):
    """Random parameters and NB data on a tiny grid with dense random designs."""
    rng = np.random.default_rng(seed)
    W = 52
    th = ParamSet.initial(X, T, R, Q1, Q2, W)
    th.alpha[:] = rng.uniform(-6, -4, (X, R))
    th.beta[1:] = rng.uniform(0.5, 1.5, X - 1)
    th.kappa[1:] = rng.normal(0, 0.1, (T - 1, R))
    th.gamma[1:] = rng.uniform(0.5, 1.5, X - 1)
    th.lam[1:] = rng.normal(0, 0.1, (W - 1, R))
    th.delta[1:] = rng.uniform(0.5, 1.5, X - 1)
    th.eta1[:] = rng.normal(0, scale, (R, Q1))
    th.epsilon[1:] = rng.uniform(0.5, 1.5, X - 1)
    th.eta2[:] = rng.normal(0, scale, (R, Q2))
    th.phi_x[1:] = rng.normal(0, 0.2, X - 1)
    th.phi_x[0] = -th.phi_x[1:].sum()
    th.phi_r[:] = np.log(50.0) + rng.normal(0, 0.2, R)
    Z1 = rng.normal(0, 1, (R, T * W, Q1))
    Z2 = np.abs(rng.normal(0, 1, (R, T * W, Q2)))
    E = rng.uniform(2e4, 5e4, (X, T, W, R))
    md = ModelData(np.zeros((X, T, W, R)), E, Z1, Z2)
    from weeklymort.likelihood import log_mu
    mean = E * np.exp(log_mu(th, md))
    phi = th.dispersion[:, None, None, :]
    d = rng.negative_binomial(phi, phi / (phi + mean)).astype(float)
    return th, ModelData(d, E, Z1, Z2)


def path_laplacian(R):
    A = np.zeros((R, R))
    for i in range(R - 1):
        A[i, i + 1] = A[i + 1, i] = 1
    return build_laplacian(A)


@pytest.fixture(scope="session")
def synth_default():
    return generate(SynthConfig(), seed=0)


@pytest.fixture(scope="session")
def fitted_default(synth_default):
    sd = synth_default
    pen = PenaltyConfig(0.0, 0.0, build_laplacian(sd.graph))
    fit = fit_model(sd.model_data, pen, meta={"design": sd.design.to_dict()})
    return sd, fit


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
