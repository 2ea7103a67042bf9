"""Event-driven intermittent controller.

Design produces LQR state feedback, a dual-LQR observer, a system-matched
hold (A_h = A_c), delay-compensating predictor partitions and the
quadratic event trigger.  At runtime the loop stays open: the hold state
x_h generates the control signal autonomously, and only when the
position error between hold and observer exceeds the threshold q (and
the refractory interval dol_min has elapsed) is the hold reset from a
delay-compensated prediction of the sampled estimate.

Between samples the plant, observer and hold form one linear system;
`LoopTransition` advances all of them jointly with a single exact
zero-order-hold transition so that the matched-model case is reproduced
to machine precision.  The standalone step operations (observer_step,
hold_step, ...) expose the same blocks for direct use.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .ctrlmath import StateSpaceModel, expm, lqr_gain, observer_gain, steady_state
from .plant import Plant

__all__ = [
    "IcParams",
    "IcController",
    "IcRuntime",
    "TABLE1_INITIAL",
    "TABLE1_BOUNDS",
    "REDUCED_FIXED",
    "design_controller",
    "observer_step",
    "form_xw",
    "hold_step",
    "predict",
    "trigger_check",
    "reset_hold",
    "control_output",
    "ic_step",
    "min_open_loop_steps",
    "LoopTransition",
]


@dataclass(frozen=True)
class IcParams:
    """Identifiable controller parameters plus fixed constants.

    qc_diag and qo weight the LQR and observer designs, q is the position
    trigger threshold (metres), dol_min the minimum open-loop interval
    (seconds) and p the mismatch gain applied by the true plant.  The
    loop delay t_d, control weight rc, sampling delay ds and the cost
    weights cp/cv stay fixed during identification.
    """

    qc_diag: tuple = (1.0, 1.0, 1.0, 1.0)
    qo: float = 10.0
    q: float = 0.03
    dol_min: float = 0.05
    p: float = 0.9
    t_d: float = 0.01
    rc: float = 1.0
    ds: float = 0.0
    cp: float = 0.5
    cv: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "qc_diag", tuple(float(v) for v in self.qc_diag))
        if len(self.qc_diag) != 4:
            raise ValueError("qc_diag must have 4 entries")
        if any(v < 0 for v in self.qc_diag):
            raise ValueError("qc_diag entries must be non-negative")
        if self.qo <= 0:
            raise ValueError("qo must be positive")
        if self.q <= 0:
            raise ValueError("q must be positive")
        if self.dol_min < 0:
            raise ValueError("dol_min must be non-negative")
        if self.p <= 0:
            raise ValueError("p must be positive")
        if self.t_d < 0 or self.ds < 0:
            raise ValueError("delays must be non-negative")

    @property
    def mismatch_gain(self):
        return 1.0 - self.p

    def replace(self, **kw):
        from dataclasses import replace as _replace

        return _replace(self, **kw)


TABLE1_INITIAL = IcParams()

# (lower, upper) optimisation bounds per identifiable parameter.
TABLE1_BOUNDS = {
    "qo": (1e-5, 1e5),
    "qc": (1e-5, 1e5),
    "q": (0.001, 1.0),
    "dol_min": (0.03, 1.0),
    "p": (0.1, 2.0),
}

# Values held fixed by the reduced (4-parameter) identification.
REDUCED_FIXED = {"qo": 10.0, "qc3": 1.0, "qc4": 1.0, "dol_min": 0.3}


def min_open_loop_steps(dol_min, dt):
    """Smallest step count n with n*dt strictly greater than dol_min."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return int(math.floor(dol_min / dt + 1e-9)) + 1


@dataclass
class IcController:
    """Designed controller artefacts (immutable in use, cached per dt)."""

    params: IcParams
    design_model: StateSpaceModel
    K: np.ndarray          # state feedback gain, shape (4,)
    L: np.ndarray          # observer gain, shape (n_obs,)
    A_c: np.ndarray        # closed-loop/hold matrix, 4x4
    E_pp: np.ndarray       # predictor partition on the sampled estimate
    E_ph: np.ndarray       # predictor partition on the hold state
    x_ss: np.ndarray
    u_ss: float
    r: float
    Qt: np.ndarray
    K_h: np.ndarray
    obs_A: np.ndarray      # observer model matrix (augmented when DO on)
    obs_B: np.ndarray
    obs_C: np.ndarray      # measurement row used by the observer
    disturbance_observer: bool = False
    _dt_ops: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.design_model.n

    @property
    def n_obs(self):
        return self.obs_A.shape[0]

    def discrete_ops(self, dt):
        """Per-dt discrete operators for the standalone step functions."""
        ops = self._dt_ops.get(dt)
        if ops is None:
            no = self.n_obs
            # Observer prediction form: x^+ = Ad x + Bd u + M (y - C x).
            # Exact whenever the estimate matches the true ZOH-driven state.
            M_aug = np.zeros((no + 1 + 1, no + 1 + 1))
            M_aug[:no, :no] = self.obs_A
            M_aug[:no, no:no + 1] = self.obs_B
            Ahat = self.obs_A - np.outer(self.L, self.obs_C[0])
            M_inj = np.zeros((no + 1, no + 1))
            M_inj[:no, :no] = Ahat
            M_inj[:no, no] = self.L
            E_inj = scipy.linalg.expm(M_inj * dt)
            E_zoh = scipy.linalg.expm(M_aug * dt)
            ops = {
                "obs_Ad": E_zoh[:no, :no],
                "obs_Bd": E_zoh[:no, no],
                "obs_M": E_inj[:no, no],
                "hold_T": expm(self.A_c, dt),
                "min_steps": min_open_loop_steps(self.params.dol_min, dt),
            }
            self._dt_ops[dt] = ops
        return ops


@dataclass
class IcRuntime:
    """Mutable per-simulation state of one intermittent controller."""

    x_hat: np.ndarray
    x_w: np.ndarray
    x_h: np.ndarray
    tau: float = math.inf
    tau_steps: int = 10 ** 9
    events: list = field(default_factory=list)
    last_sample_time: float = None
    pending_reset: tuple = None   # (steps_remaining,) when ds > 0
    time: float = 0.0

    @classmethod
    def at_rest(cls, ctl: IcController, position, w):
        """Runtime with plant, observer and hold consistent at `position`."""
        x_hat = np.zeros(ctl.n_obs)
        x_hat[0] = position
        x_w = x_hat[:4] - ctl.x_ss * w
        return cls(x_hat=x_hat, x_w=x_w.copy(), x_h=x_w.copy())


def design_controller(params: IcParams, plant: Plant,
                      disturbance_observer=False) -> IcController:
    """Design the full intermittent controller for the plant's nominal model."""
    sys = plant.design_model
    n = sys.n
    Qc = np.diag(params.qc_diag)
    Rc = np.array([[params.rc]])
    K = lqr_gain(sys, Qc, Rc).K[0]
    A_c = sys.A - np.outer(sys.B[:, 0], K)

    C_hat = np.zeros((1, n))
    C_hat[0, 0] = 1.0
    if disturbance_observer:
        # One constant-input-disturbance state appended to the model copy.
        A_aug = np.zeros((n + 1, n + 1))
        A_aug[:n, :n] = sys.A
        A_aug[:n, n] = sys.B[:, 0]
        B_aug = np.vstack([sys.B, np.zeros((1, 1))])
        C_aug = np.hstack([C_hat, np.zeros((1, 1))])
        obs_sys = StateSpaceModel(A=A_aug, B=B_aug, C=C_aug)
        L = observer_gain(obs_sys, C_aug, params.qo)[:, 0]
        obs_A, obs_B, obs_C = A_aug, B_aug, C_aug
    else:
        L = observer_gain(sys, C_hat, params.qo)[:, 0]
        obs_A, obs_B, obs_C = sys.A, sys.B, C_hat

    A_ph = np.zeros((2 * n, 2 * n))
    A_ph[:n, :n] = sys.A
    A_ph[:n, n:] = -np.outer(sys.B[:, 0], K)
    A_ph[n:, n:] = A_c
    E = expm(A_ph, params.t_d)

    x_ss, u_ss = steady_state(sys)
    u_ss = float(u_ss[0])
    r = u_ss + float(K @ x_ss)

    Qt = np.zeros((n, n))
    Qt[0, 0] = 1.0 / params.q ** 2

    return IcController(
        params=params,
        design_model=sys,
        K=K,
        L=L,
        A_c=A_c,
        E_pp=E[:n, :n],
        E_ph=E[:n, n:],
        x_ss=x_ss,
        u_ss=u_ss,
        r=r,
        Qt=Qt,
        K_h=np.eye(n),
        obs_A=obs_A,
        obs_B=obs_B,
        obs_C=obs_C,
        disturbance_observer=disturbance_observer,
    )


def observer_step(ctl: IcController, rt: IcRuntime, u, y, dt):
    """Advance the state estimate one step from input u and measurement y."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not (np.isfinite(u) and np.isfinite(y)):
        raise ValueError("observer inputs must be finite")
    ops = ctl.discrete_ops(dt)
    innov = y - float(ctl.obs_C[0] @ rt.x_hat)
    rt.x_hat = ops["obs_Ad"] @ rt.x_hat + ops["obs_Bd"] * float(u) + ops["obs_M"] * innov
    return rt.x_hat


def form_xw(x_hat, w, x_ss):
    """Fold the target into the estimate: x_w = x_hat - x_ss * w."""
    return np.asarray(x_hat, dtype=float)[: len(x_ss)] - np.asarray(x_ss) * float(w)


def hold_step(rt: IcRuntime, ctl: IcController, dt):
    """Advance the hold state one exact open-loop step; tau grows by dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    ops = ctl.discrete_ops(dt)
    rt.x_h = ops["hold_T"] @ rt.x_h
    if rt.tau_steps < 10 ** 9:
        rt.tau_steps += 1
        rt.tau = rt.tau_steps * dt
    return rt.x_h, rt.tau


def predict(ctl: IcController, x_w_at_sample, x_h_at_sample):
    """Delay-compensated prediction x_p = E_pp x_w + E_ph x_h."""
    return ctl.E_pp @ np.asarray(x_w_at_sample) + ctl.E_ph @ np.asarray(x_h_at_sample)


def trigger_check(ctl: IcController, rt: IcRuntime):
    """True when the hold error exceeds the threshold ellipse and the
    minimum open-loop interval has elapsed."""
    if rt.tau <= ctl.params.dol_min:
        return False
    e = rt.x_h - rt.x_w
    return float(e @ ctl.Qt @ e) > 1.0


def reset_hold(ctl: IcController, rt: IcRuntime, t):
    """Close the loop for one instant: reset the hold from the prediction."""
    x_p = predict(ctl, rt.x_w, rt.x_h)
    rt.x_h = ctl.K_h @ x_p
    rt.tau = 0.0
    rt.tau_steps = 0
    rt.events.append(float(t))
    rt.last_sample_time = float(t)
    return rt.x_h


def control_output(ctl: IcController, rt: IcRuntime, w):
    """Open-loop control u = -K x_h + u_ss w (disturbance estimate
    subtracted when the disturbance observer is enabled)."""
    u = -float(ctl.K @ rt.x_h) + ctl.u_ss * float(w)
    if ctl.disturbance_observer:
        u -= float(rt.x_hat[-1])
    return u


class LoopTransition:
    """Exact joint one-step transition of plant + observer + hold.

    The closed loop between samples is a single LTI system in the stacked
    state z = [x_true, x_hat, x_h]; its zero-order-hold transition (with
    the target level and noise draws as held inputs) advances all blocks
    simultaneously and keeps the matched-model case exact to machine
    precision.  Chunk operators propagate many steps per matrix product
    for fast simulation.
    """

    def __init__(self, ctl: IcController, plant: Plant, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.ctl = ctl
        self.plant = plant
        self.dt = dt
        n = 4
        no = ctl.n_obs
        dim = n + no + n
        self.n, self.no, self.dim = n, no, dim
        self.sl_x = slice(0, n)
        self.sl_hat = slice(n, n + no)
        self.sl_h = slice(n + no, dim)

        At = plant.true_model.A
        Bt = plant.true_model.B[:, 0]
        A = ctl.design_model.A
        B = ctl.design_model.B[:, 0]
        K, L = ctl.K, ctl.L
        Ct_row = np.zeros(n)
        Ct_row[0] = 1.0

        # u = -K x_h + u_ss w (- d_hat with the disturbance observer)
        Ru = np.zeros(dim)
        Ru[self.sl_h] = -K
        if ctl.disturbance_observer:
            Ru[n + no - 1] -= 1.0

        M = np.zeros((dim, dim))
        M[self.sl_x, self.sl_x] = At
        M[self.sl_x, :] += np.outer(Bt, Ru)
        M[self.sl_hat, self.sl_x] = np.outer(L, Ct_row)
        M[self.sl_hat, self.sl_hat] = ctl.obs_A - np.outer(L, ctl.obs_C[0])
        M[self.sl_hat, :] += np.outer(ctl.obs_B[:, 0], Ru)
        M[self.sl_h, self.sl_h] = ctl.A_c

        G = np.zeros((dim, 3))
        G[self.sl_x, 0] = Bt * ctl.u_ss          # target level w
        G[self.sl_hat, 0] = ctl.obs_B[:, 0] * ctl.u_ss
        G[self.sl_x, 1] = Bt                     # motor noise (sigma applied later)
        G[self.sl_hat, 2] = L                    # sensor noise

        aug = np.zeros((dim + 3, dim + 3))
        aug[:dim, :dim] = M
        aug[:dim, dim:] = G
        E = scipy.linalg.expm(aug * float(dt))
        self.Phi = E[:dim, :dim]
        self.Gw = E[:dim, dim]
        self.Gu = E[:dim, dim + 1]
        self.Gy = E[:dim, dim + 2]

        # Trigger error rows: e_x = T z + x_ss * w
        T = np.zeros((n, dim))
        T[:, self.sl_h] = np.eye(n)
        T[:, self.sl_hat][:, :n] = -np.eye(n)
        self.T_err = T
        self.qt_diag = np.diag(ctl.Qt).copy()
        self.Ru = Ru
        self.min_steps = min_open_loop_steps(ctl.params.dol_min, dt)
        self.ds_steps = int(round(ctl.params.ds / dt)) if ctl.params.ds else 0
        # Acceleration readout: second row of the true dynamics.
        self.Ra = np.zeros(dim)
        self.Ra[self.sl_x] = At[1]
        self.Ra += Bt[1] * Ru
        self.Ra_w = Bt[1] * ctl.u_ss
        self._chunks = {}

    def pack(self, x, x_hat, x_h):
        return np.concatenate([x, x_hat, x_h])

    def initial_state(self, position, w, velocity=0.0):
        x = np.zeros(self.n)
        x[0], x[1] = position, velocity
        x_hat = np.zeros(self.no)
        x_hat[0], x_hat[1] = position, velocity
        x_h = x_hat[: self.n] - self.ctl.x_ss * w
        return self.pack(x, x_hat, x_h)

    def x_w(self, z, w):
        return z[self.sl_hat][: self.n] - self.ctl.x_ss * w

    def error(self, z, w):
        return self.T_err @ z + self.ctl.x_ss * w

    def trigger_value(self, z, w):
        e = self.error(z, w)
        return float(e @ (self.qt_diag * e))

    def control(self, z, w):
        return float(self.Ru @ z) + self.ctl.u_ss * w

    def apply_reset(self, z, w):
        x_p = predict(self.ctl, self.x_w(z, w), z[self.sl_h])
        z = z.copy()
        z[self.sl_h] = self.ctl.K_h @ x_p
        return z

    def advance(self, z, w, noise=(0.0, 0.0)):
        out = self.Phi @ z + self.Gw * w
        if noise[0]:
            out += self.Gu * noise[0]
        if noise[1]:
            out += self.Gy * noise[1]
        return out

    def chunk_operators(self, length):
        """Stacked powers for propagating `length` steps in one product.

        Returns (P, S) with states[m] = P[m] @ z + S[m] * w for
        m = 1..length steps ahead of z.
        """
        ops = self._chunks.get(length)
        if ops is None:
            dim = self.dim
            P = np.empty((length, dim, dim))
            S = np.empty((length, dim))
            P[0] = self.Phi
            S[0] = self.Gw
            for m in range(1, length):
                P[m] = self.Phi @ P[m - 1]
                S[m] = self.Phi @ S[m - 1] + self.Gw
            ops = (P.reshape(length * dim, dim), S)
            self._chunks[length] = ops
        return ops


def ic_step(ctl: IcController, rt: IcRuntime, plant: Plant, w, dt):
    """One full intermittent-control sample on the dt grid.

    Per step: read the measurement, fold the target into the estimate,
    check the trigger, on an event predict at the sample time (honoring
    the sampling delay ds) and reset the hold, then advance plant,
    observer and hold jointly by one exact step and emit the control
    applied over the interval.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    joint = rt.__dict__.get("_joint")
    if joint is None or joint.dt != dt or joint.ctl is not ctl or joint.plant is not plant:
        joint = LoopTransition(ctl, plant, dt)
        rt.__dict__["_joint"] = joint

    z = joint.pack(plant.state, rt.x_hat, rt.x_h)
    y = float(plant.state[0])
    w = float(w)
    rt.x_w = joint.x_w(z, w)

    fired = False
    if rt.pending_reset is not None:
        remaining = rt.pending_reset[0] - 1
        if remaining <= 0:
            z = joint.apply_reset(z, w)
            rt.pending_reset = None
            rt.last_sample_time = rt.time
        else:
            rt.pending_reset = (remaining,)
    elif trigger_check(ctl, rt):
        fired = True
        rt.events.append(rt.time)
        rt.tau = 0.0
        rt.tau_steps = 0
        if joint.ds_steps > 0:
            rt.pending_reset = (joint.ds_steps,)
        else:
            z = joint.apply_reset(z, w)
            rt.last_sample_time = rt.time

    u = joint.control(z, w)
    z = joint.advance(z, w)

    plant.state = z[joint.sl_x].copy()
    rt.x_hat = z[joint.sl_hat].copy()
    rt.x_h = z[joint.sl_h].copy()
    if rt.tau_steps < 10 ** 9:
        rt.tau_steps += 1
        rt.tau = rt.tau_steps * dt
    rt.time += dt

    diag = {"event": fired, "e_x": rt.x_h - joint.x_w(z, w), "tau": rt.tau}
    return u, y, diag
