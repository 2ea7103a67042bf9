"""Dataset ingestion, slicing, cost evaluation and parameter identification.

Recordings are sliced into two-trial segments (10-sample margins around
the target changes); each slice gets its own controller fitted by a
bounded generalized pattern search on the position+velocity RMSE cost.
The ranked fits per condition form the model bank used by the switching
simulator.

LQR/observer weights are searched in log10 space (their bounds span ten
decades); threshold, refractory interval and mismatch gain in linear
space.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from .icore import (
    REDUCED_FIXED,
    TABLE1_BOUNDS,
    IcParams,
    LoopTransition,
    design_controller,
)
from .plant import PlantSpec, build_plant
from .sim import (
    BankEntry,
    ModelBank,
    TargetSignal,
    TaskCondition,
    Trajectory,
    simulate_ic,
    simulate_2ol,
)

__all__ = [
    "IngestionError",
    "Recording",
    "Slice",
    "FitResult",
    "PatternSearchResult",
    "load_recording",
    "derive_kinematics",
    "slice_recording",
    "train_eval_split",
    "cost_j",
    "pattern_search",
    "fit_slice",
    "fit_2ol",
    "build_bank",
]

SLICE_MARGIN = 10


class IngestionError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass
class Recording:
    """Uniformly sampled pointing recording in metres/seconds."""

    dt: float
    t: np.ndarray
    target: np.ndarray
    y: np.ndarray
    v: np.ndarray = None
    a: np.ndarray = None
    participant: str = ""
    condition: TaskCondition = None

    def __post_init__(self):
        n = len(self.t)
        if len(self.target) != n or len(self.y) != n:
            raise IngestionError("series lengths disagree")
        steps = np.diff(self.t)
        if n > 1:
            if np.any(steps <= 0):
                row = int(np.nonzero(steps <= 0)[0][0]) + 1
                raise IngestionError(f"time is not strictly increasing at row {row}")
            jitter = np.max(np.abs(steps - self.dt))
            if jitter > 0.01 * self.dt:
                raise IngestionError(
                    f"sampling jitter {jitter:.3g}s exceeds 1% of dt={self.dt:.3g}s"
                )

    @property
    def n_samples(self):
        return len(self.t)

    def change_indices(self):
        return np.nonzero(np.diff(self.target))[0] + 1


@dataclass(frozen=True)
class Slice:
    """Two consecutive trials with 10-sample margins."""

    slice_id: int
    start: int
    end: int
    change_indices: tuple
    complete: bool = True


@dataclass
class FitResult:
    params: IcParams
    cost: float
    slice_id: int
    n_evals: int = 0
    final_mesh: float = 0.0
    param_set: str = "full"
    trace: list = field(default_factory=list)

    def to_dict(self):
        from .sim import _params_to_dict

        return {
            "slice_id": self.slice_id,
            "cost": self.cost,
            "n_evals": self.n_evals,
            "final_mesh": self.final_mesh,
            "param_set": self.param_set,
            "params": _params_to_dict(self.params),
        }


def load_recording(path, column_map=None, units="m", participant="",
                   condition=None) -> Recording:
    """Load a pointing block from CSV.

    column_map maps the roles time/target/pos (and optionally vel/acc) to
    the file's column names; units selects metres or millimetres for the
    position-like columns.
    """
    column_map = dict(column_map or {})
    column_map.setdefault("time", "t")
    column_map.setdefault("target", "w")
    column_map.setdefault("pos", "y")
    if units not in ("m", "mm"):
        raise IngestionError(f"unknown units {units!r} (use 'm' or 'mm')")
    scale = 1.0 if units == "m" else 1e-3

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"{path}: empty file")
        for role in ("time", "target", "pos"):
            if column_map[role] not in reader.fieldnames:
                raise IngestionError(
                    f"{path}: missing column {column_map[role]!r} for {role}"
                )
        rows = list(reader)
    if len(rows) < 3:
        raise IngestionError(f"{path}: too few samples ({len(rows)})")

    def col(role, required=True):
        name = column_map.get(role)
        if name is None or name not in rows[0]:
            if required:
                raise IngestionError(f"{path}: missing column for {role}")
            return None
        try:
            return np.array([float(r[name]) for r in rows])
        except (TypeError, ValueError):
            bad = next(i for i, r in enumerate(rows)
                       if not _is_float(r.get(name)))
            raise IngestionError(
                f"{path}: non-numeric value in column {name!r} at row {bad + 2}"
            ) from None

    t = col("time")
    target = col("target") * scale
    y = col("pos") * scale
    v = col("vel", required=False)
    a = col("acc", required=False)
    if v is not None:
        v = v * scale
    if a is not None:
        a = a * scale

    steps = np.diff(t)
    if np.any(steps <= 0):
        row = int(np.nonzero(steps <= 0)[0][0]) + 2
        raise IngestionError(f"{path}: duplicated or reversed timestamp at row {row}")
    dt = float(np.median(steps))
    return Recording(dt=dt, t=t, target=target, y=y, v=v, a=a,
                     participant=participant, condition=condition)


def _is_float(x):
    try:
        float(x)
        return True
    except (TypeError, ValueError):
        return False


def derive_kinematics(rec: Recording, smooth=True, window=21, order=3) -> Recording:
    """Fill missing velocity/acceleration by central differences.

    An optional Savitzky-Golay pass (default window 21 samples, order 3)
    smooths the differentiated series, approximating the filtered
    kinematics that high-rate pointing datasets usually ship.
    """
    if rec.n_samples < 3:
        raise IngestionError("need at least 3 samples to differentiate")
    if smooth and rec.n_samples < window:
        raise IngestionError(
            f"series of {rec.n_samples} samples is shorter than the "
            f"smoothing window ({window})"
        )
    v = rec.v
    if v is None:
        v = np.gradient(rec.y, rec.dt)
        if smooth:
            v = savgol_filter(v, window, order)
    a = rec.a
    if a is None:
        a = np.gradient(v, rec.dt)
        if smooth:
            a = savgol_filter(a, window, order)
    return Recording(dt=rec.dt, t=rec.t, target=rec.target, y=rec.y, v=v, a=a,
                     participant=rec.participant, condition=rec.condition)


def slice_recording(rec: Recording) -> list:
    """Partition a block into two-trial slices.

    A slice starts 10 samples before a target change and ends 10 samples
    after the second-next change; the final slice of a block extends to
    the end of the recording when that change does not exist.
    """
    changes = rec.change_indices()
    if len(changes) < 2:
        raise IngestionError(
            f"need at least 2 target changes to slice, found {len(changes)}"
        )
    slices = []
    n = rec.n_samples
    for sid, j in enumerate(range(0, len(changes) - 1, 2)):
        start = int(changes[j]) - SLICE_MARGIN
        if start < 0:
            start = 0
        if j + 2 < len(changes):
            end = int(changes[j + 2]) + SLICE_MARGIN
            complete = end < n
            end = min(end, n - 1)
        else:
            end = n - 1
            complete = False
        slices.append(Slice(
            slice_id=sid,
            start=start,
            end=end,
            change_indices=tuple(int(c) for c in changes[j:j + 3] if c <= end),
            complete=complete,
        ))
    return slices


def train_eval_split(slices):
    """Optimisation set = last half (20 of 40), evaluation set = first half."""
    half = len(slices) // 2
    return slices[half:], slices[:half]


def cost_j(sim: Trajectory, data: Trajectory, cp=0.5, cv=0.5):
    """J = cp * RMSE(position) + cv * RMSE(velocity)."""
    if sim.n_samples != data.n_samples:
        raise ValueError(
            f"trajectories not aligned: {sim.n_samples} vs {data.n_samples} samples"
        )
    dy = sim.y - data.y
    dv = sim.v - data.v
    return cp * float(np.sqrt(np.mean(dy * dy))) + cv * float(np.sqrt(np.mean(dv * dv)))


@dataclass
class PatternSearchResult:
    x: np.ndarray
    fun: float
    n_evals: int
    mesh: float
    trace: list


def pattern_search(objective, x0, lower, upper, max_evals=2000,
                   initial_mesh=0.25, mesh_tol=1e-6, callback=None):
    """Bounded generalized pattern search over the 2d coordinate directions.

    Coordinates are scaled to the unit box.  Polling is opportunistic with
    the last successful direction tried first; the mesh doubles after a
    successful poll and halves after a full unsuccessful one.  Stops when
    the mesh drops below mesh_tol (relative to the box) or the evaluation
    budget is spent.  The returned best value never exceeds f(x0).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if np.any(upper <= lower):
        raise ValueError("upper bounds must exceed lower bounds")
    if np.any(x0 < lower) or np.any(x0 > upper):
        raise ValueError("x0 must lie within the bounds")
    span = upper - lower
    d = len(x0)

    def unscale(s):
        return lower + s * span

    evals = 0

    def f(s):
        nonlocal evals
        evals += 1
        return float(objective(unscale(s)))

    s_best = (x0 - lower) / span
    f_best = f(s_best)
    if not np.isfinite(f_best):
        raise ValueError("objective is not finite at x0")
    trace = [(evals, f_best)]
    mesh = float(initial_mesh)

    directions = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        directions.append(e.copy())
        directions.append(-e)

    order = list(range(2 * d))
    while mesh >= mesh_tol and evals < max_evals:
        success = False
        for pos, di in enumerate(order):
            if evals >= max_evals:
                break
            cand = np.clip(s_best + mesh * directions[di], 0.0, 1.0)
            if np.allclose(cand, s_best):
                continue
            fc = f(cand)
            if np.isfinite(fc) and fc < f_best:
                s_best, f_best = cand, fc
                trace.append((evals, f_best))
                if callback is not None:
                    callback(unscale(s_best), f_best, evals)
                order.insert(0, order.pop(pos))
                success = True
                break
        if success:
            mesh = min(mesh * 2.0, 1.0)
        else:
            mesh *= 0.5
    return PatternSearchResult(x=unscale(s_best), fun=f_best, n_evals=evals,
                               mesh=mesh, trace=trace)


def _slice_target(rec: Recording, sl: Slice) -> TargetSignal:
    seg_w = rec.target[sl.start:sl.end + 1]
    change_offsets = np.nonzero(np.diff(seg_w))[0] + 1
    times = tuple(float(o) * rec.dt for o in change_offsets)
    levels = [float(seg_w[0])]
    for o in change_offsets:
        levels.append(float(seg_w[o]))
    return TargetSignal(change_times=times, levels=tuple(levels))


def _slice_data(rec: Recording, sl: Slice) -> Trajectory:
    if rec.v is None:
        raise IngestionError("recording lacks velocity; run derive_kinematics first")
    seg = slice(sl.start, sl.end + 1)
    n = sl.end - sl.start + 1
    a = rec.a[seg] if rec.a is not None else np.zeros(n)
    return Trajectory(
        dt=rec.dt,
        t=np.arange(n) * rec.dt,
        w=rec.target[seg].copy(),
        y=rec.y[seg].copy(),
        v=rec.v[seg].copy(),
        a=a.copy(),
        u=np.zeros(n),
        events=np.empty(0),
    )


def _vector_to_params(x, param_set, template: IcParams) -> IcParams:
    if param_set == "full":
        qc = tuple(10.0 ** x[0:4])
        return template.replace(qc_diag=qc, qo=10.0 ** x[4], q=x[5],
                                dol_min=x[6], p=x[7])
    qc = (10.0 ** x[0], 10.0 ** x[1], REDUCED_FIXED["qc3"], REDUCED_FIXED["qc4"])
    return template.replace(qc_diag=qc, qo=REDUCED_FIXED["qo"], q=x[2],
                            dol_min=REDUCED_FIXED["dol_min"], p=x[3])


def _params_to_vector(params: IcParams, param_set):
    if param_set == "full":
        return np.array([
            *(math.log10(v) for v in params.qc_diag),
            math.log10(params.qo), params.q, params.dol_min, params.p,
        ])
    return np.array([
        math.log10(params.qc_diag[0]), math.log10(params.qc_diag[1]),
        params.q, params.p,
    ])


def _search_bounds(param_set):
    lqc = tuple(math.log10(b) for b in TABLE1_BOUNDS["qc"])
    lqo = tuple(math.log10(b) for b in TABLE1_BOUNDS["qo"])
    if param_set == "full":
        lower = [lqc[0]] * 4 + [lqo[0], TABLE1_BOUNDS["q"][0],
                                TABLE1_BOUNDS["dol_min"][0], TABLE1_BOUNDS["p"][0]]
        upper = [lqc[1]] * 4 + [lqo[1], TABLE1_BOUNDS["q"][1],
                                TABLE1_BOUNDS["dol_min"][1], TABLE1_BOUNDS["p"][1]]
    else:
        lower = [lqc[0], lqc[0], TABLE1_BOUNDS["q"][0], TABLE1_BOUNDS["p"][0]]
        upper = [lqc[1], lqc[1], TABLE1_BOUNDS["q"][1], TABLE1_BOUNDS["p"][1]]
    return np.array(lower), np.array(upper)


def slice_objective(sl: Slice, rec: Recording, plant_spec: PlantSpec,
                    param_set="full", template: IcParams = None):
    """Objective mapping a search vector to the replay cost of a slice.

    Simulation divergence or a failed design scores +inf rather than
    raising, so the pattern search can poll freely.
    """
    template = IcParams() if template is None else template
    target = _slice_target(rec, sl)
    data = _slice_data(rec, sl)
    duration = (data.n_samples - 1) * rec.dt
    y0 = float(rec.y[sl.start])
    design_plant = build_plant(PlantSpec(
        nms_time_constant=plant_spec.nms_time_constant, mismatch_p=1.0,
        sigma_u=plant_spec.sigma_u, sigma_y=plant_spec.sigma_y,
    ))

    def objective(x):
        params = _vector_to_params(x, param_set, template)
        try:
            ctl = design_controller(params, design_plant)
            true_plant = build_plant(PlantSpec(
                nms_time_constant=plant_spec.nms_time_constant,
                mismatch_p=params.p,
                sigma_u=plant_spec.sigma_u, sigma_y=plant_spec.sigma_y,
            ))
            traj = simulate_ic(ctl, true_plant, target, rec.dt,
                               duration=duration, initial_position=y0)
        except Exception:
            return math.inf
        j = cost_j(traj, data, cp=template.cp, cv=template.cv)
        return j if np.isfinite(j) else math.inf

    return objective, data, target


def fit_slice(sl: Slice, rec: Recording, plant_spec: PlantSpec = None,
              init: IcParams = None, param_set="full", max_evals=2000,
              mesh_tol=1e-6, initial_mesh=0.25) -> FitResult:
    """Fit one controller to one slice by bounded pattern search."""
    if param_set not in ("full", "reduced"):
        raise ValueError("param_set must be 'full' or 'reduced'")
    plant_spec = PlantSpec() if plant_spec is None else plant_spec
    init = IcParams() if init is None else init
    objective, _, _ = slice_objective(sl, rec, plant_spec, param_set, init)
    lower, upper = _search_bounds(param_set)
    x0 = np.clip(_params_to_vector(init, param_set), lower, upper)
    res = pattern_search(objective, x0, lower, upper, max_evals=max_evals,
                         mesh_tol=mesh_tol, initial_mesh=initial_mesh)
    params = _vector_to_params(res.x, param_set, init)
    return FitResult(params=params, cost=res.fun, slice_id=sl.slice_id,
                     n_evals=res.n_evals, final_mesh=res.mesh,
                     param_set=param_set, trace=res.trace)


def fit_2ol(rec: Recording, sl: Slice = None, max_evals=800,
            bounds=((1.0, 60.0), (0.05, 4.0))):
    """Fit the second-order-lag baseline (omega, zeta) with the same
    pattern search and cost as the intermittent controller."""
    if rec.v is None:
        rec = derive_kinematics(rec)
    if sl is None:
        sl = Slice(slice_id=-1, start=0, end=rec.n_samples - 1,
                   change_indices=tuple(int(c) for c in rec.change_indices()))
    target = _slice_target(rec, sl)
    data = _slice_data(rec, sl)
    duration = (data.n_samples - 1) * rec.dt

    def objective(x):
        omega, zeta = x
        try:
            traj = simulate_2ol(omega, zeta, target, rec.dt, duration=duration)
        except Exception:
            return math.inf
        j = cost_j(traj, data)
        return j if np.isfinite(j) else math.inf

    lower = np.array([bounds[0][0], bounds[1][0]])
    upper = np.array([bounds[0][1], bounds[1][1]])
    x0 = np.array([10.0, 1.0])
    res = pattern_search(objective, x0, lower, upper, max_evals=max_evals)
    return (float(res.x[0]), float(res.x[1])), res.fun


def build_bank(fits, plant_spec: PlantSpec = None, condition=None,
               size=20) -> ModelBank:
    """Rank fits by cost (ties broken by earlier slice) and keep the best
    `size`; fewer fits simply yield a smaller bank."""
    if not fits:
        raise ValueError("need at least one fit")
    plant_spec = PlantSpec() if plant_spec is None else plant_spec
    ranked = sorted(fits, key=lambda f: (f.cost, f.slice_id))[:size]
    design_plant = build_plant(PlantSpec(
        nms_time_constant=plant_spec.nms_time_constant, mismatch_p=1.0,
        sigma_u=plant_spec.sigma_u, sigma_y=plant_spec.sigma_y,
    ))
    entries = [
        BankEntry(
            params=f.params,
            controller=design_controller(f.params, design_plant),
            cost=f.cost,
            slice_id=f.slice_id,
        )
        for f in ranked
    ]
    return ModelBank(entries=entries, plant_spec=plant_spec, condition=condition)


def write_fit_trace(fit: FitResult, path):
    """Optimizer trace as CSV (evaluation count, best cost so far)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param_set", fit.param_set, "slice_id", fit.slice_id])
        writer.writerow(["eval", "best_cost"])
        for n, c in fit.trace:
            writer.writerow([n, f"{c:.17g}"])


def write_fits_json(fits, path):
    with open(path, "w") as fh:
        json.dump([f.to_dict() for f in fits], fh, indent=2)
        fh.write("\n")
