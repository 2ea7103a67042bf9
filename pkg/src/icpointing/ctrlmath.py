"""Dense small-matrix tools for controller design.

Continuous-time LTI models, matrix exponentials, continuous algebraic
Riccati solutions, LQR / observer gains, series composition, steady-state
solves and zero-order-hold discretization.  Everything here is a pure
function of small (n <= 8) dense matrices; scipy.linalg does the heavy
lifting.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "DesignError",
    "StateSpaceModel",
    "LqrDesign",
    "expm",
    "solve_care",
    "lqr_gain",
    "observer_gain",
    "series_connect",
    "steady_state",
    "discretize",
]


class DesignError(RuntimeError):
    """Raised when a controller/observer design problem has no valid solution."""


def _as_matrix(M, name="matrix"):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class StateSpaceModel:
    """Continuous-time LTI system dx/dt = A x + B u, y = C x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, expected {A.shape[0]}")
        if C.shape[1] != A.shape[0]:
            raise ValueError(f"C has {C.shape[1]} columns, expected {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.B.shape[1]

    @property
    def n_outputs(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class LqrDesign:
    """Riccati solution P and the state-feedback gain K = R^-1 B' P."""

    P: np.ndarray
    K: np.ndarray


def expm(A, t=1.0):
    """Matrix exponential e^(A t)."""
    A = _as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"expm needs a square matrix, got {A.shape}")
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    return scipy.linalg.expm(A * float(t))


def controllability_matrix(A, B):
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def _check_symmetric(M, name, tol=1e-9):
    if not np.allclose(M, M.T, atol=tol * max(1.0, np.linalg.norm(M))):
        raise ValueError(f"{name} must be symmetric")


def care_residual(A, B, Q, R, P):
    """Norm of A'P + PA - P B R^-1 B' P + Q."""
    G = B @ np.linalg.solve(R, B.T)
    return np.linalg.norm(A.T @ P + P @ A - P @ G @ P + Q)


def solve_care(A, B, Q, R):
    """Stabilizing solution of the continuous algebraic Riccati equation.

    Requires (A, B) controllable, Q symmetric PSD and R symmetric PD.
    Returns the symmetric PSD matrix P with all eigenvalues of
    A - B R^-1 B' P in the open left half plane.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    Q = _as_matrix(Q, "Q")
    R = _as_matrix(R, "R")
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    _check_symmetric(Q, "Q")
    _check_symmetric(R, "R")
    if np.any(np.linalg.eigvalsh(Q) < -1e-10 * max(1.0, np.linalg.norm(Q))):
        raise ValueError("Q must be positive semi-definite")
    if np.any(np.linalg.eigvalsh(R) <= 0):
        raise ValueError("R must be positive definite")
    rank = np.linalg.matrix_rank(controllability_matrix(A, B))
    if rank < n:
        raise DesignError(
            f"(A, B) is not controllable (controllability rank {rank} < {n})"
        )
    try:
        P = scipy.linalg.solve_continuous_are(A, B, Q, R)
    except Exception as exc:  # scipy raises LinAlgError / ValueError
        raise DesignError(f"Riccati solve failed: {exc}") from exc
    P = 0.5 * (P + P.T)
    res = care_residual(A, B, Q, R, P)
    if res > 1e-8 * max(1.0, np.linalg.norm(Q)):
        raise DesignError(f"Riccati residual {res:.3e} too large")
    K = np.linalg.solve(R, B.T @ P)
    closed_eigs = np.linalg.eigvals(A - B @ K)
    if np.max(closed_eigs.real) >= 0:
        raise DesignError("Riccati solution is not stabilizing")
    return P


def lqr_gain(sys: StateSpaceModel, Qc, Rc) -> LqrDesign:
    """LQR state feedback for u = -K x minimizing int(x'Qc x + u'Rc u)."""
    Qc = _as_matrix(Qc, "Qc")
    Rc = _as_matrix(Rc, "Rc")
    P = solve_care(sys.A, sys.B, Qc, Rc)
    K = np.linalg.solve(Rc, sys.B.T @ P)
    return LqrDesign(P=P, K=K)


def observer_gain(sys: StateSpaceModel, C_hat, Qo_scalar, Ro=None):
    """Observer gain L via LQR on the dual system (A', C_hat').

    The state weight is Qo_scalar * I_n; the measurement weight defaults
    to the identity.  A - L C_hat is Hurwitz for any valid design.
    """
    C_hat = _as_matrix(C_hat, "C_hat")
    if C_hat.shape[1] != sys.n:
        raise ValueError(f"C_hat has {C_hat.shape[1]} columns, expected {sys.n}")
    if Qo_scalar <= 0:
        raise ValueError("Qo must be positive")
    if Ro is None:
        Ro = np.eye(C_hat.shape[0])
    dual = StateSpaceModel(A=sys.A.T, B=C_hat.T, C=np.eye(sys.n))
    try:
        design = lqr_gain(dual, float(Qo_scalar) * np.eye(sys.n), Ro)
    except DesignError as exc:
        raise DesignError(f"(A, C_hat) is not observable: {exc}") from exc
    return design.K.T


def series_connect(first: StateSpaceModel, second: StateSpaceModel) -> StateSpaceModel:
    """Cascade two systems: the output of `first` drives `second`.

    The combined state vector is ordered [second.states, first.states], so
    for an actuator feeding plant mechanics the plant output stays state 1.
    """
    if first.n_outputs != second.n_inputs:
        raise ValueError(
            f"cannot cascade: first has {first.n_outputs} outputs, "
            f"second expects {second.n_inputs} inputs"
        )
    n2, n1 = second.n, first.n
    A = np.block([
        [second.A, second.B @ first.C],
        [np.zeros((n1, n2)), first.A],
    ])
    B = np.vstack([np.zeros((n2, first.n_inputs)), first.B])
    C = np.hstack([second.C, np.zeros((second.n_outputs, n1))])
    return StateSpaceModel(A=A, B=B, C=C)


def steady_state(sys: StateSpaceModel):
    """Solve for (x_ss, u_ss) with A x_ss + B u_ss = 0 and C x_ss = 1.

    Returned for unit reference; scale by the target value to get the
    steady state for an arbitrary setpoint.
    """
    n, nu, ny = sys.n, sys.n_inputs, sys.n_outputs
    M = np.block([
        [sys.A, sys.B],
        [sys.C, np.zeros((ny, nu))],
    ])
    rhs = np.concatenate([np.zeros(n), np.ones(ny)])
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise DesignError(
            "steady-state block matrix is singular (transmission zero at s=0)"
        ) from exc
    x_ss = sol[:n]
    u_ss = sol[n:]
    return x_ss, u_ss


def discretize(sys: StateSpaceModel, dt):
    """Exact zero-order-hold discretization (Ad, Bd) at step dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n, nu = sys.n, sys.n_inputs
    M = np.zeros((n + nu, n + nu))
    M[:n, :n] = sys.A
    M[:n, n:] = sys.B
    E = scipy.linalg.expm(M * float(dt))
    return E[:n, :n], E[:n, n:]
