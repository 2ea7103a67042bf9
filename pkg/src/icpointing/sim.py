"""Closed-loop simulation harness.

Target signals from experimental task conditions, single-controller
intermittent-control runs, the multiple-model (bank) switching simulation
that reproduces human movement variability, repeated-run ensembles and
the continuous second-order-lag baseline.

The engine propagates the joint plant/observer/hold state with exact
precomputed transitions (see icore.LoopTransition) and scans for trigger
crossings in vectorized chunks, so a multi-second run costs a handful of
small matrix products per open-loop interval.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .icore import IcController, IcParams, LoopTransition, design_controller
from .plant import Plant, PlantSpec, build_plant

__all__ = [
    "TaskCondition",
    "CONDITIONS",
    "TargetSignal",
    "Trajectory",
    "BankEntry",
    "ModelBank",
    "make_target",
    "simulate_ic",
    "simulate_bank",
    "simulate_2ol",
    "run_ensemble",
    "trajectory_to_csv",
    "trajectory_from_csv",
    "write_ensemble",
]

_CHUNK = 64


@dataclass(frozen=True)
class TaskCondition:
    """One reciprocal-pointing block: target distance/width in millimetres."""

    distance_mm: float
    width_mm: float
    id_nominal: int
    trial_count: int = 80

    def __post_init__(self):
        if self.distance_mm <= 0 or self.width_mm <= 0:
            raise ValueError("distance and width must be positive")
        if self.id_nominal not in (2, 4, 6, 8):
            raise ValueError("id_nominal must be one of 2, 4, 6, 8")
        actual = math.log2(self.distance_mm / self.width_mm + 1.0)
        # The experiment's integer-pixel widths put the hardest nominal IDs
        # up to ~0.02 bits off; reject only clearly inconsistent pairs.
        if abs(actual - self.id_nominal) > 0.05:
            raise ValueError(
                f"(D={self.distance_mm}, W={self.width_mm}) gives ID "
                f"{actual:.3f}, not {self.id_nominal}"
            )

    @property
    def index_of_difficulty(self):
        return math.log2(self.distance_mm / self.width_mm + 1.0)


CONDITIONS = tuple(
    TaskCondition(distance_mm=d, width_mm=w, id_nominal=i)
    for d, widths in ((212.0, (70.6, 14.1, 3.32, 0.83)), (353.0, (118.0, 23.5, 5.54, 1.38)))
    for w, i in zip(widths, (2, 4, 6, 8))
)


@dataclass(frozen=True)
class TargetSignal:
    """Piecewise-constant target w(t): levels[i] holds until change_times[i]."""

    change_times: tuple
    levels: tuple

    def __post_init__(self):
        ct = tuple(float(t) for t in self.change_times)
        lv = tuple(float(x) for x in self.levels)
        if len(lv) != len(ct) + 1:
            raise ValueError("need len(levels) == len(change_times) + 1")
        if any(t2 <= t1 for t1, t2 in zip(ct, ct[1:])):
            raise ValueError("change times must be strictly increasing")
        if any(t <= 0 for t in ct):
            raise ValueError("change times must be positive")
        if any(a == b for a, b in zip(lv, lv[1:])):
            raise ValueError("consecutive levels must differ")
        object.__setattr__(self, "change_times", ct)
        object.__setattr__(self, "levels", lv)

    def value(self, t):
        idx = np.searchsorted(self.change_times, t, side="right")
        return self.levels[idx]

    def grid(self, dt, duration):
        """Sampled w series and the change step indices on a dt grid."""
        if dt <= 0 or duration <= 0:
            raise ValueError("dt and duration must be positive")
        n = int(round(duration / dt)) + 1
        steps = [int(round(t / dt)) for t in self.change_times]
        if any(s2 <= s1 for s1, s2 in zip(steps, steps[1:])) or (steps and steps[0] < 1):
            raise ValueError("change times collapse on this grid; reduce dt")
        if steps and steps[-1] > n - 1:
            raise ValueError("duration does not cover the target schedule")
        w = np.empty(n)
        prev = 0
        for lv, s in zip(self.levels, steps + [n]):
            w[prev:s] = lv
            prev = s
        w[prev:] = self.levels[-1]
        return w, steps


def make_target(cond: TaskCondition, change_times=None, *, period=None,
                n_changes=None) -> TargetSignal:
    """Target schedule for a condition, levels alternating at +-D/2 metres.

    Pass explicit change times (e.g. replayed from a recording) or a fixed
    period plus a change count for synthetic schedules.
    """
    if change_times is None:
        if period is None or n_changes is None:
            raise ValueError("give change_times, or period and n_changes")
        change_times = [period * (i + 1) for i in range(int(n_changes))]
    change_times = [float(t) for t in change_times]
    if not change_times:
        raise ValueError("target schedule needs at least one change")
    half = cond.distance_mm / 1000.0 / 2.0
    levels = [(-half if i % 2 == 0 else half) for i in range(len(change_times) + 1)]
    return TargetSignal(change_times=tuple(change_times), levels=tuple(levels))


@dataclass
class Trajectory:
    """Uniformly sampled simulation (or recording) time series."""

    dt: float
    t: np.ndarray
    w: np.ndarray
    y: np.ndarray
    v: np.ndarray
    a: np.ndarray
    u: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in ("w", "y", "v", "a", "u"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"series {name} has wrong length")

    @property
    def n_samples(self):
        return len(self.t)

    def phase_samples(self):
        """(n, 2) position/velocity samples for density analysis."""
        return np.column_stack([self.y, self.v])

    def change_steps(self):
        return np.nonzero(np.diff(self.w))[0] + 1


@dataclass(frozen=True)
class BankEntry:
    params: IcParams
    controller: IcController
    cost: float
    slice_id: int = -1


@dataclass
class ModelBank:
    """Ranked fitted controllers for one condition (best first)."""

    entries: list
    plant_spec: PlantSpec = field(default_factory=PlantSpec)
    condition: TaskCondition = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("model bank must not be empty")
        self.entries = sorted(self.entries, key=lambda e: (e.cost, e.slice_id))

    def __len__(self):
        return len(self.entries)

    @property
    def best(self):
        return self.entries[0]

    def to_json(self, path=None):
        doc = {
            "schema": "icpointing.bank.v1",
            "nms_time_constant": self.plant_spec.nms_time_constant,
            "sigma_u": self.plant_spec.sigma_u,
            "sigma_y": self.plant_spec.sigma_y,
            "condition": None if self.condition is None else {
                "distance_mm": self.condition.distance_mm,
                "width_mm": self.condition.width_mm,
                "id_nominal": self.condition.id_nominal,
                "trial_count": self.condition.trial_count,
            },
            "entries": [
                {
                    "rank": i + 1,
                    "slice_id": e.slice_id,
                    "cost": e.cost,
                    "params": _params_to_dict(e.params),
                }
                for i, e in enumerate(self.entries)
            ],
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, source):
        if isinstance(source, str) and source.lstrip().startswith("{"):
            doc = json.loads(source)
        else:
            with open(source) as fh:
                doc = json.load(fh)
        if doc.get("schema") != "icpointing.bank.v1":
            raise ValueError("not a model bank file")
        cond = doc.get("condition")
        condition = None
        if cond is not None:
            condition = TaskCondition(
                distance_mm=cond["distance_mm"],
                width_mm=cond["width_mm"],
                id_nominal=cond["id_nominal"],
                trial_count=cond.get("trial_count", 80),
            )
        entries = []
        base = PlantSpec(
            nms_time_constant=doc.get("nms_time_constant", 0.05),
            sigma_u=doc.get("sigma_u", 0.0),
            sigma_y=doc.get("sigma_y", 0.0),
        )
        design_plant = build_plant(base)
        for item in doc["entries"]:
            params = _params_from_dict(item["params"])
            ctl = design_controller(params, design_plant)
            entries.append(BankEntry(
                params=params, controller=ctl,
                cost=float(item["cost"]), slice_id=int(item["slice_id"]),
            ))
        return cls(entries=entries, plant_spec=base, condition=condition)


def _params_to_dict(p: IcParams):
    return {
        "qc_diag": list(p.qc_diag), "qo": p.qo, "q": p.q, "dol_min": p.dol_min,
        "p": p.p, "t_d": p.t_d, "rc": p.rc, "ds": p.ds, "cp": p.cp, "cv": p.cv,
    }


def _params_from_dict(d):
    return IcParams(
        qc_diag=tuple(d["qc_diag"]), qo=d["qo"], q=d["q"], dol_min=d["dol_min"],
        p=d["p"], t_d=d.get("t_d", 0.01), rc=d.get("rc", 1.0),
        ds=d.get("ds", 0.0), cp=d.get("cp", 0.5), cv=d.get("cv", 0.5),
    )


def _run_switching(kernels, pick_member, w_series, change_steps, dt, z0,
                   noise_rng=None):
    """Core switching engine on a prepared target grid.

    `kernels` are LoopTransitions sharing state dimensions; `pick_member`
    maps a trial index to the kernel active until the next target change.
    Returns (Z, event_steps, member_trace).
    """
    n_steps = len(w_series)
    dim = kernels[0].dim
    Z = np.empty((n_steps, dim))
    Z[0] = z0
    events = []
    members = []

    ki = pick_member(0)
    kern = kernels[ki]
    members.append(ki)
    tau_steps = kern.min_steps
    pending = 0
    k = 0
    ci = 0

    noisy = noise_rng is not None and (
        kern.plant.spec.sigma_u > 0 or kern.plant.spec.sigma_y > 0
    )

    def maybe_fire():
        nonlocal tau_steps, pending
        w = w_series[k]
        if pending == 0 and tau_steps >= kern.min_steps \
                and kern.trigger_value(Z[k], w) > 1.0:
            events.append(k)
            tau_steps = 0
            if kern.ds_steps > 0:
                pending = kern.ds_steps
            else:
                Z[k] = kern.apply_reset(Z[k], w)

    def propagate(m, scan, scan_limit):
        """Advance m steps; optionally scan for a trigger crossing.

        scan_limit is the largest absolute index whose state may fire
        (indices beyond it belong to the next target segment).  Returns
        True when an event was detected at the new current index.
        """
        nonlocal k, tau_steps
        w = w_series[k]
        if noisy:
            sig_u = kern.plant.spec.sigma_u
            sig_y = kern.plant.spec.sigma_y
            for _ in range(m):
                draw = noise_rng.standard_normal(2)
                Z[k + 1] = kern.advance(Z[k], w, (sig_u * draw[0], sig_y * draw[1]))
                k += 1
                tau_steps += 1
                if scan and k <= scan_limit and tau_steps >= kern.min_steps \
                        and kern.trigger_value(Z[k], w) > 1.0:
                    return True
            return False
        left = m
        while left > 0:
            c = min(_CHUNK, left)
            P, S = kern.chunk_operators(_CHUNK)
            states = (P[: c * dim] @ Z[k]).reshape(c, dim) + w * S[:c]
            Z[k + 1:k + 1 + c] = states
            if scan:
                n_scan = min(c, scan_limit - k)
                if n_scan > 0:
                    err = states[:n_scan] @ kern.T_err.T + kern.ctl.x_ss * w
                    quad = (err * err * kern.qt_diag).sum(axis=1)
                    hits = np.nonzero(quad > 1.0)[0]
                    if hits.size:
                        i = int(hits[0])
                        k += i + 1
                        tau_steps += i + 1
                        return True
            k += c
            tau_steps += c
            left -= c
        return False

    maybe_fire()
    while k < n_steps - 1:
        boundary = change_steps[ci] if ci < len(change_steps) else n_steps - 1
        while k < boundary:
            if pending > 0:
                m = min(pending, boundary - k)
                propagate(m, scan=False, scan_limit=-1)
                pending -= m
                if pending == 0:
                    Z[k] = kern.apply_reset(Z[k], w_series[k])
                continue
            free = kern.min_steps - 1 - tau_steps
            if free > 0:
                propagate(min(free, boundary - k), scan=False, scan_limit=-1)
                continue
            m = min(_CHUNK, boundary - k)
            if propagate(m, scan=True, scan_limit=boundary - 1):
                events.append(k)
                tau_steps = 0
                if kern.ds_steps > 0:
                    pending = kern.ds_steps
                else:
                    Z[k] = kern.apply_reset(Z[k], w_series[k])
        if boundary == n_steps - 1:
            break
        ci += 1
        trial = ci
        ki = pick_member(trial)
        kern = kernels[ki]
        members.append(ki)
        maybe_fire()
    return Z, np.asarray(events, dtype=int), members


def _assemble(kernels, members, change_steps, Z, w_series, event_steps, dt):
    n = len(w_series)
    t = np.arange(n) * dt
    # Control and acceleration readouts can differ per active member.
    u = np.empty(n)
    a = np.empty(n)
    bounds = [0] + [s for s in change_steps] + [n]
    for trial, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        kern = kernels[members[trial]] if trial < len(members) else kernels[members[-1]]
        seg = slice(lo, hi)
        u[seg] = Z[seg] @ kern.Ru + kern.ctl.u_ss * w_series[seg]
        a[seg] = Z[seg] @ kern.Ra + kern.Ra_w * w_series[seg]
    return Trajectory(
        dt=dt,
        t=t,
        w=w_series.copy(),
        y=Z[:, 0].copy(),
        v=Z[:, 1].copy(),
        a=a,
        u=u,
        events=event_steps * dt,
    )


def _default_duration(target):
    return target.change_times[-1] + 2.0 if target.change_times else 2.0


def simulate_ic(ctl: IcController, plant: Plant, target: TargetSignal, dt,
                duration=None, seed=None, initial_position=None,
                initial_velocity=0.0) -> Trajectory:
    """Simulate one intermittent controller against the plant.

    Deterministic given the seed (the seed only matters when the plant
    spec carries non-zero noise).  The run starts at rest at the first
    target level unless an explicit initial position is given.
    """
    if dt > ctl.params.dol_min and ctl.params.dol_min > 0:
        raise ValueError("dt must not exceed the minimum open-loop interval")
    duration = _default_duration(target) if duration is None else duration
    w_series, change_steps = target.grid(dt, duration)
    kern = LoopTransition(ctl, plant, dt)
    pos0 = w_series[0] if initial_position is None else float(initial_position)
    z0 = kern.initial_state(pos0, w_series[0], velocity=initial_velocity)
    rng = np.random.default_rng(seed)
    Z, ev, members = _run_switching([kern], lambda trial: 0, w_series,
                                    change_steps, dt, z0, noise_rng=rng)
    return _assemble([kern], members, change_steps, Z, w_series, ev, dt)


def _bank_kernels(bank: ModelBank, dt):
    kernels = []
    for entry in bank.entries:
        spec = PlantSpec(
            nms_time_constant=bank.plant_spec.nms_time_constant,
            mismatch_p=entry.params.p,
            sigma_u=bank.plant_spec.sigma_u,
            sigma_y=bank.plant_spec.sigma_y,
        )
        kernels.append(LoopTransition(entry.controller, build_plant(spec), dt))
    return kernels


def simulate_bank(bank: ModelBank, target: TargetSignal, dt, seed=None,
                  duration=None, initial_position=None, _kernels=None) -> Trajectory:
    """Multiple-model switching simulation.

    The first trial runs the best-ranked controller; at every target
    change a uniformly random bank member (with its own mismatch gain)
    takes over, while the pointer, observer and hold states carry across
    the switch.
    """
    duration = _default_duration(target) if duration is None else duration
    w_series, change_steps = target.grid(dt, duration)
    kernels = _bank_kernels(bank, dt) if _kernels is None else _kernels
    ss = np.random.SeedSequence(seed)
    ss_members, ss_noise = ss.spawn(2)
    rng_members = np.random.default_rng(ss_members)
    rng_noise = np.random.default_rng(ss_noise)

    def pick(trial):
        if trial == 0:
            return 0
        return int(rng_members.integers(0, len(kernels)))

    pos0 = w_series[0] if initial_position is None else float(initial_position)
    z0 = kernels[0].initial_state(pos0, w_series[0])
    Z, ev, members = _run_switching(kernels, pick, w_series, change_steps, dt,
                                    z0, noise_rng=rng_noise)
    return _assemble(kernels, members, change_steps, Z, w_series, ev, dt)


def simulate_2ol(omega, zeta, target: TargetSignal, dt, duration=None) -> Trajectory:
    """Continuous second-order-lag baseline: y'' = w^2 (w - y) - 2 z w y'.

    Unit DC gain, feedback applied at every instant, no events and no
    run-to-run variability.
    """
    if omega <= 0 or zeta <= 0:
        raise ValueError("omega and zeta must be positive")
    duration = _default_duration(target) if duration is None else duration
    w_series, _ = target.grid(dt, duration)
    A = np.array([[0.0, 1.0], [-omega ** 2, -2.0 * zeta * omega]])
    B = np.array([[0.0], [omega ** 2]])
    aug = np.zeros((3, 3))
    aug[:2, :2] = A
    aug[:2, 2:] = B
    E = scipy.linalg.expm(aug * dt)
    Ad, Bd = E[:2, :2], E[:2, 2]
    n = len(w_series)
    Z = np.empty((n, 2))
    Z[0] = (w_series[0], 0.0)
    for k in range(n - 1):
        Z[k + 1] = Ad @ Z[k] + Bd * w_series[k]
    a = omega ** 2 * (w_series - Z[:, 0]) - 2.0 * zeta * omega * Z[:, 1]
    return Trajectory(
        dt=dt,
        t=np.arange(n) * dt,
        w=w_series.copy(),
        y=Z[:, 0].copy(),
        v=Z[:, 1].copy(),
        a=a,
        u=np.zeros(n),
        events=np.empty(0),
    )


def run_ensemble(bank: ModelBank, target: TargetSignal, dt, n_runs=200,
                 seed=None, duration=None) -> list:
    """n_runs independent switching simulations with derived per-run seeds."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    duration = _default_duration(target) if duration is None else duration
    kernels = _bank_kernels(bank, dt)
    child_seeds = np.random.SeedSequence(seed).spawn(n_runs)
    return [
        simulate_bank(bank, target, dt, seed=child, duration=duration,
                      _kernels=kernels)
        for child in child_seeds
    ]


def trajectory_to_csv(traj: Trajectory, path):
    """Write a trajectory as CSV with header t,w,y,v,a,u,event."""
    event_steps = set(np.rint(traj.events / traj.dt).astype(int))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "w", "y", "v", "a", "u", "event"])
        for k in range(traj.n_samples):
            writer.writerow([
                f"{traj.t[k]:.17g}", f"{traj.w[k]:.17g}", f"{traj.y[k]:.17g}",
                f"{traj.v[k]:.17g}", f"{traj.a[k]:.17g}", f"{traj.u[k]:.17g}",
                1 if k in event_steps else 0,
            ])


def trajectory_from_csv(path) -> Trajectory:
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = np.atleast_1d(data["t"])
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    event_mask = np.atleast_1d(data["event"]).astype(bool)
    return Trajectory(
        dt=dt,
        t=t,
        w=np.atleast_1d(data["w"]),
        y=np.atleast_1d(data["y"]),
        v=np.atleast_1d(data["v"]),
        a=np.atleast_1d(data["a"]),
        u=np.atleast_1d(data["u"]),
        events=t[event_mask],
    )


def write_ensemble(out_dir, trajectories, manifest):
    """One CSV per run plus a manifest.json describing the ensemble."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, traj in enumerate(trajectories):
        path = os.path.join(out_dir, f"run_{i:03d}.csv")
        trajectory_to_csv(traj, path)
        paths.append(os.path.basename(path))
    doc = dict(manifest)
    doc["runs"] = paths
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return paths
