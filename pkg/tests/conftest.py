import numpy as np
import pytest

from fphjb.model import BoxSet, ControlBounds, ControlProblem


def ou_problem(kappa=0.75, theta=0.5, sigma=0.2, horizon=(0.0, 4.0)):
    """Uncontrolled 1-D Ornstein-Uhlenbeck process as a control problem."""
    return ControlProblem(
        dim=1,
        drift=lambda s, y, u: kappa * (theta - y),
        diffusion=lambda s, y: np.full((y.shape[0], 1, 1), sigma),
        running_cost=lambda s, y, u: np.zeros(y.shape[0]),
        terminal_cost=lambda y: np.zeros(y.shape[0]),
        bounds=ControlBounds(),
        constraint=BoxSet.unbounded(1),
        horizon=horizon,
    )


@pytest.fixture
def ou():
    return ou_problem()
