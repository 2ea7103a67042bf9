"""Evaluation metrics and exports.

RMSE summaries, Fitts index of difficulty, open-loop-interval statistics,
phase-plane histograms and kernel density estimates, the k-nearest-
neighbour Kullback-Leibler divergence estimator and report generation.
"""

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .sim import Trajectory, trajectory_to_csv

__all__ = [
    "DensityGrid",
    "OlIntervalStats",
    "KlReport",
    "fitts_id",
    "rmse_summary",
    "ol_interval_stats",
    "histogram2d",
    "kde2d",
    "kl_divergence",
    "kl_pipeline",
    "export_report",
]


def fitts_id(D, W):
    """Shannon index of difficulty log2(D/W + 1); D and W in millimetres."""
    if D <= 0 or W <= 0:
        raise ValueError("D and W must be positive")
    return math.log2(D / W + 1.0)


def rmse_summary(sim: Trajectory, data: Trajectory):
    """Position and velocity RMSE between aligned trajectories."""
    if sim.n_samples != data.n_samples:
        raise ValueError("trajectories are not aligned")
    dy = sim.y - data.y
    dv = sim.v - data.v
    return float(np.sqrt(np.mean(dy * dy))), float(np.sqrt(np.mean(dv * dv)))


@dataclass
class OlIntervalStats:
    intervals: np.ndarray
    bin_width: float
    counts: np.ndarray
    edges: np.ndarray

    @property
    def n(self):
        return len(self.intervals)

    @property
    def minimum(self):
        return float(np.min(self.intervals)) if self.n else math.nan

    @property
    def median(self):
        return float(np.median(self.intervals)) if self.n else math.nan

    def tail_mass(self, threshold=0.25):
        """Fraction of open-loop intervals longer than `threshold` seconds."""
        if not self.n:
            return math.nan
        return float(np.mean(self.intervals > threshold))


def ol_interval_stats(source, bin_width=0.01):
    """Histogram of open-loop intervals from one or many trajectories.

    Fewer than two events in total gives an empty histogram, not an error.
    """
    if isinstance(source, Trajectory):
        source = [source]
    intervals = []
    for traj in source:
        if len(traj.events) >= 2:
            intervals.append(np.diff(traj.events))
    intervals = np.concatenate(intervals) if intervals else np.empty(0)
    if intervals.size:
        top = math.ceil(float(np.max(intervals)) / bin_width) * bin_width
        edges = np.arange(0.0, top + bin_width, bin_width)
        counts, edges = np.histogram(intervals, bins=edges)
    else:
        counts, edges = np.zeros(0, dtype=int), np.zeros(1)
    return OlIntervalStats(intervals=intervals, bin_width=bin_width,
                           counts=counts, edges=edges)


@dataclass
class DensityGrid:
    """Phase-plane grid of histogram counts or density values.

    For kind='counts' the axes hold bin edges (len+1); for kind='density'
    they hold the node coordinates the density was evaluated at.
    """

    pos_axis: np.ndarray
    vel_axis: np.ndarray
    values: np.ndarray
    kind: str = "counts"

    def integral(self):
        if self.kind == "counts":
            return float(self.values.sum())
        return float(np.trapz(np.trapz(self.values, self.vel_axis, axis=1),
                              self.pos_axis))


def _phase_cloud(source):
    if isinstance(source, Trajectory):
        return source.phase_samples()
    if isinstance(source, np.ndarray) and source.ndim == 2:
        return source
    return np.vstack([_phase_cloud(item) for item in source])


def _padded_range(x, pad=0.05):
    lo, hi = float(np.min(x)), float(np.max(x))
    span = hi - lo
    if span == 0:
        span = max(abs(hi), 1.0)
    return lo - pad * span, hi + pad * span


def histogram2d(source, bins=30):
    """2D histogram over the (position, velocity) plane.

    Axis ranges run from the data extrema padded by 5%; total count equals
    the sample count.
    """
    cloud = _phase_cloud(source)
    if cloud.size == 0:
        raise ValueError("no samples to histogram")
    pr = _padded_range(cloud[:, 0])
    vr = _padded_range(cloud[:, 1])
    counts, pe, ve = np.histogram2d(cloud[:, 0], cloud[:, 1], bins=bins,
                                    range=[pr, vr])
    return DensityGrid(pos_axis=pe, vel_axis=ve, values=counts, kind="counts")


def kde2d(source, bins=30, bandwidth=None, pos_axis=None, vel_axis=None):
    """Gaussian product-kernel density estimate on a phase-plane grid.

    Default bandwidth per axis is Scott's rule n**(-1/6) * sigma_axis.
    Pass explicit axes to evaluate on a custom grid.
    """
    cloud = _phase_cloud(source)
    n = len(cloud)
    if n < 2:
        raise ValueError("need at least 2 samples for a density estimate")
    sig = cloud.std(axis=0, ddof=1)
    if bandwidth is None:
        if np.any(sig == 0):
            raise ValueError(
                "an axis has zero variance; pass an explicit bandwidth"
            )
        factor = n ** (-1.0 / 6.0)
        bandwidth = (factor * sig[0], factor * sig[1])
    hx, hy = float(bandwidth[0]), float(bandwidth[1])
    if hx <= 0 or hy <= 0:
        raise ValueError("bandwidths must be positive")
    if pos_axis is None:
        lo, hi = _padded_range(cloud[:, 0])
        pos_axis = np.linspace(lo, hi, bins)
    if vel_axis is None:
        lo, hi = _padded_range(cloud[:, 1])
        vel_axis = np.linspace(lo, hi, bins)
    dx = (pos_axis[:, None] - cloud[None, :, 0]) / hx
    dy = (vel_axis[:, None] - cloud[None, :, 1]) / hy
    gx = np.exp(-0.5 * dx * dx) / (hx * math.sqrt(2 * math.pi))
    gy = np.exp(-0.5 * dy * dy) / (hy * math.sqrt(2 * math.pi))
    values = gx @ gy.T / n
    return DensityGrid(pos_axis=np.asarray(pos_axis),
                       vel_axis=np.asarray(vel_axis),
                       values=values, kind="density")


def kl_divergence(samples_p, samples_q, k=1):
    """k-NN estimate of D(P || Q) in nats from two sample sets.

    Estimator: (d/n) * sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1)),
    with rho the k-th neighbour distance within the P sample and nu the
    k-th neighbour distance into the Q sample.  Coincident points are
    jittered by 1e-12 (with a warning) to avoid zero distances.
    """
    P = np.atleast_2d(np.asarray(samples_p, dtype=float))
    Q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    if P.shape[0] == 1 and P.shape[1] > 2:
        P = P.T
    if Q.shape[0] == 1 and Q.shape[1] > 2:
        Q = Q.T
    if P.shape[1] != Q.shape[1]:
        raise ValueError("sample sets must share dimension")
    n, m, d = len(P), len(Q), P.shape[1]
    if n < k + 1 or m < k:
        raise ValueError(f"need more than k={k} points in each set")
    tree_p = cKDTree(P)
    tree_q = cKDTree(Q)
    # Self-match excluded by asking for k+1 neighbours within P.
    rho = tree_p.query(P, k=k + 1)[0][:, k]
    nu = tree_q.query(P, k=k)[0]
    if k > 1:
        nu = nu[:, k - 1]
    nu = np.atleast_1d(nu).reshape(n)
    bad = (rho == 0) | (nu == 0)
    if np.any(bad):
        warnings.warn(
            f"{int(bad.sum())} duplicate points jittered for the k-NN "
            "divergence estimate", RuntimeWarning, stacklevel=2)
        rho = np.where(rho == 0, 1e-12, rho)
        nu = np.where(nu == 0, 1e-12, nu)
    return float((d / n) * np.sum(np.log(nu / rho)) + math.log(m / (n - 1)))


@dataclass
class KlReport:
    """Per-condition KL comparison of the IC ensemble and the 2ol baseline."""

    participant: str
    condition: dict
    ic_kl_mean: float
    ic_kl_per_run: list
    baseline_kl: float
    clamped_runs: int = 0

    def to_dict(self):
        return {
            "participant": self.participant,
            "condition": self.condition,
            "ic_kl_mean": self.ic_kl_mean,
            "ic_kl_per_run": list(self.ic_kl_per_run),
            "2ol_kl": self.baseline_kl,
            "clamped_runs": self.clamped_runs,
        }


def kl_pipeline(ensemble, data_traj: Trajectory, baseline_traj: Trajectory = None,
                k=1, participant="", condition=None) -> KlReport:
    """KL divergence of each simulated phase plane from the experimental one.

    Position/velocity samples are z-scored with the experimental cloud's
    statistics before the k-NN estimate; small negative estimates are
    clamped to zero in the headline numbers and counted.
    """
    if isinstance(ensemble, Trajectory):
        ensemble = [ensemble]
    if not ensemble:
        raise ValueError("ensemble must contain at least one run")
    data_cloud = _phase_cloud(data_traj)
    mu = data_cloud.mean(axis=0)
    sig = data_cloud.std(axis=0, ddof=1)
    if np.any(sig == 0):
        raise ValueError("experimental cloud has a zero-variance axis")

    def z(cloud):
        return (cloud - mu) / sig

    data_z = z(data_cloud)
    raw = [kl_divergence(data_z, z(_phase_cloud(traj)), k=k) for traj in ensemble]
    clamped = [max(0.0, v) for v in raw]
    n_clamped = sum(1 for v in raw if v < 0)
    baseline = math.nan
    if baseline_traj is not None:
        b = kl_divergence(data_z, z(_phase_cloud(baseline_traj)), k=k)
        if b < 0:
            n_clamped += 1
        baseline = max(0.0, b)
    cond_dict = condition if isinstance(condition, dict) else (
        None if condition is None else {
            "distance_mm": condition.distance_mm,
            "width_mm": condition.width_mm,
            "id_nominal": condition.id_nominal,
        })
    return KlReport(
        participant=participant,
        condition=cond_dict,
        ic_kl_mean=float(np.mean(clamped)),
        ic_kl_per_run=raw,
        baseline_kl=baseline,
        clamped_runs=n_clamped,
    )


def export_report(fits=None, trajectories=None, reports=None, out_dir=".",
                  manifest_extra=None):
    """Write per-condition summaries, trajectory CSVs, the UMAP-ready
    parameter matrix and a manifest; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if trajectories:
        for name, traj in trajectories.items():
            path = os.path.join(out_dir, f"{name}.csv")
            trajectory_to_csv(traj, path)
            written.append(path)

    if reports:
        path = os.path.join(out_dir, "kl_report.json")
        with open(path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
            fh.write("\n")
        written.append(path)

    if fits:
        path = os.path.join(out_dir, "parameter_matrix.csv")
        with open(path, "w") as fh:
            fh.write("k1,k2,k3,k4,q,A_p,participant,ID,D\n")
            for row in fits:
                fh.write(
                    ",".join(f"{v:.17g}" for v in row["k"]) + ","
                    f"{row['q']:.17g},{row['A_p']:.17g},"
                    f"{row.get('participant', '')},"
                    f"{row.get('ID', '')},{row.get('D', '')}\n"
                )
        written.append(path)

    from . import __version__

    manifest = {"version": __version__, "outputs": [os.path.basename(p) for p in written]}
    manifest.update(manifest_extra or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    written.append(path)
    return written


def parameter_matrix_rows(fit_results, controllers, participant="", condition=None):
    """Rows for the parameter-matrix export from fits and their designs."""
    rows = []
    for fit, ctl in zip(fit_results, controllers):
        rows.append({
            "k": [float(v) for v in ctl.K],
            "q": fit.params.q,
            "A_p": fit.params.mismatch_gain,
            "participant": participant,
            "ID": "" if condition is None else condition.id_nominal,
            "D": "" if condition is None else condition.distance_mm,
        })
    return rows
