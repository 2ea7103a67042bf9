"""Human + interface plant models.

The controlled system is a cascade of a second-order neuromuscular
actuator (unit DC gain, two equal time constants) driving arm-mouse
mechanics modelled as a double integrator.  State ordering of the
combined fourth-order model is [position, velocity, nms1, nms2] so that
pointer position is state 1.

A mismatch gain p scales the signal the actuator delivers to the
mechanics: the controller is always designed against the nominal model
(p = 1) while simulations run against the true model, reproducing
under/overshoot when p != 1.
"""

from dataclasses import dataclass, field

import numpy as np

from .ctrlmath import StateSpaceModel, discretize

__all__ = ["PlantSpec", "Plant", "build_nms", "build_mechanics", "build_plant"]

MISMATCH_BOUNDS = (0.1, 2.0)


@dataclass(frozen=True)
class PlantSpec:
    """Plant configuration. Noise sigmas are standard deviations, default off."""

    nms_time_constant: float = 0.05
    mismatch_p: float = 1.0
    sigma_u: float = 0.0
    sigma_y: float = 0.0

    def __post_init__(self):
        if self.nms_time_constant <= 0:
            raise ValueError("nms_time_constant must be positive")
        lo, hi = MISMATCH_BOUNDS
        if not lo <= self.mismatch_p <= hi:
            raise ValueError(f"mismatch_p must lie in [{lo}, {hi}]")
        if self.sigma_u < 0 or self.sigma_y < 0:
            raise ValueError("noise sigmas must be non-negative")

    @property
    def mismatch_gain(self):
        """Reported mismatch A_p = 1 - p."""
        return 1.0 - self.mismatch_p


def build_nms(tc):
    """Second-order actuator 1/(tc*s + 1)^2 in state-space form, DC gain 1."""
    if tc <= 0:
        raise ValueError("time constant must be positive")
    a = 1.0 / tc
    A = np.array([[-a, a], [0.0, -a]])
    B = np.array([[0.0], [a]])
    C = np.array([[1.0, 0.0]])
    return StateSpaceModel(A=A, B=B, C=C)


def build_mechanics(gain=1.0):
    """Double-integrator arm-mouse mechanics; `gain` scales the force input."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [float(gain)]])
    C = np.array([[1.0, 0.0]])
    return StateSpaceModel(A=A, B=B, C=C)


def _cascade(nms, mechanics):
    from .ctrlmath import series_connect

    return series_connect(nms, mechanics)


@dataclass
class Plant:
    """Design/true model pair plus mutable simulation state."""

    spec: PlantSpec
    design_model: StateSpaceModel
    true_model: StateSpaceModel
    state: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if self.design_model.A.shape != self.true_model.A.shape:
            raise ValueError("design and true models must share dimensions")
        self.state = np.asarray(self.state, dtype=float).copy()
        self._zoh_cache = {}

    @property
    def n(self):
        return self.design_model.n

    def reset(self, position=0.0, velocity=0.0):
        self.state = np.zeros(self.n)
        self.state[0] = position
        self.state[1] = velocity
        return self.state

    def _zoh(self, dt):
        pair = self._zoh_cache.get(dt)
        if pair is None:
            pair = discretize(self.true_model, dt)
            self._zoh_cache[dt] = pair
        return pair

    def step(self, u, dt, noise_draws=None):
        """Advance the true model one ZOH step; returns (measured y, state).

        noise_draws, when given, is a pair (motor, sensor) of standard
        normal draws scaled by the spec sigmas.
        """
        if not np.isfinite(u):
            raise ValueError("control input must be finite")
        if dt <= 0:
            raise ValueError("dt must be positive")
        nu, ny = 0.0, 0.0
        if noise_draws is not None:
            nu = self.spec.sigma_u * noise_draws[0]
            ny = self.spec.sigma_y * noise_draws[1]
        Ad, Bd = self._zoh(dt)
        self.state = Ad @ self.state + Bd[:, 0] * (float(u) + nu)
        y = self.state[0] + ny
        return y, self.state


def build_plant(spec: PlantSpec) -> Plant:
    """Construct the fourth-order pointing plant from its spec.

    The true model applies the mismatch p between the actuator output and
    the mechanics force input; the design model always uses p = 1.
    """
    nms = build_nms(spec.nms_time_constant)
    design = _cascade(nms, build_mechanics(1.0))
    true = _cascade(nms, build_mechanics(spec.mismatch_p))
    return Plant(spec=spec, design_model=design, true_model=true)


def plant_step(plant: Plant, u, dt, noise_draws=None):
    """Functional alias for Plant.step."""
    return plant.step(u, dt, noise_draws=noise_draws)
