"""Shared fixtures: the desk-scale model family."""

from __future__ import annotations

import functools

import pytest

from saddlecenter.birkhoff_nf import ModelConfig, scaled_model_for_epsilon, three_parameter_model
from saddlecenter.dynamics import SaddleSystem

DESK_MODEL = {
    "c3": 0.5,
    "omega0": 1.0,
    "c10": 1.0,
    "c20": 1.0,
    "k0": 1,
    "extra_coefficients": [
        {"exponents": [1, 2, 0, 0], "coefficient": 0.3, "lambda_power": 0},
        {"exponents": [0, 0, 2, 1], "coefficient": 0.2, "lambda_power": 0},
        {"exponents": [0, 4, 0, 0], "coefficient": 0.1, "lambda_power": 0},
    ],
}
DESK_EPS = 0.35
DESK_DELTA = 0.05


def desk_config() -> ModelConfig:
    return ModelConfig.from_dict(DESK_MODEL)


@functools.lru_cache(maxsize=None)
def _scaled(eps: float):
    return scaled_model_for_epsilon(desk_config(), eps)


@functools.lru_cache(maxsize=None)
def desk_system(mu: float = 0.0, eps: float = DESK_EPS, nu_hat: float | None = None) -> SaddleSystem:
    """Desk system at ``(eps, nu_hat, mu)``; ``nu_hat`` defaults to ``eps^2``."""
    cfg = desk_config()
    model = three_parameter_model(_scaled(eps), eps**2 if nu_hat is None else nu_hat, mu, cfg.N0)
    return SaddleSystem.build(model, DESK_DELTA)


@pytest.fixture(scope="session")
def desk():
    return desk_system()


@pytest.fixture(scope="session")
def desk_factory():
    return desk_system


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
