"""Value-matching diagnostics and disturbance-recovery metrics."""

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .exceptions import NumericalError, WindowOutOfRange
from .learner import AnchorBatch, Context, batch_values
from .plant import DisturbanceProfile
from .valuation import Dataset, ParamVector, Trajectory

PRE_WINDOW = 2.0
SETTLE_SIGMAS = 2.0
TRIAL_METRICS = ("rms_error", "peak_error", "post_push_rms", "post_push_peak", "iae",
                 "settling_time", "effort_p99", "jitter_p99", "h_lin_rms", "h_ang_rms")


@dataclass
class MatchDiagnostics:
    q_mpc: np.ndarray
    q_meas: np.ndarray
    mse: float
    rmse: float
    quantiles: Dict[str, float]

    def records(self):
        return [{"q_mpc": float(a), "q_meas": float(b)} for a, b in zip(self.q_mpc, self.q_meas)]


def value_matching_eval(theta: ParamVector, dataset: Dataset, anchors=None,
                        ctx: Context = None) -> MatchDiagnostics:
    anchors = dataset.anchors if anchors is None else np.asarray(anchors, dtype=np.int64)
    values, targets, _ = batch_values(theta, AnchorBatch(dataset, anchors), ctx)
    return match_from_pairs(values, targets)


def match_from_pairs(values, targets) -> MatchDiagnostics:
    values = np.asarray(values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    r = values - targets
    mse = float(np.mean(r * r))
    qs = {f"q{int(p * 100):02d}": float(np.quantile(r, p)) for p in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return MatchDiagnostics(values, targets, mse, math.sqrt(mse), qs)


def nearest_rank(values, pct):
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, int(math.ceil(pct / 100.0 * v.size - 1e-12)))
    return float(v[rank - 1])


@dataclass
class PushWindow:
    t_start: float
    t_end: float
    rms: float
    peak: float
    iae: float
    settling_time: float
    settled: bool


@dataclass
class RecoveryMetrics:
    rms_error: float
    peak_error: float
    post_push_rms: List[float]
    post_push_peak: List[float]
    iae: List[float]
    settling_time: List[float]
    settled: List[bool]
    effort_p99: float
    jitter_p99: float
    h_lin_rms: float
    h_ang_rms: float
    threshold: float
    pre_mean: float

    def summary(self):
        """Trial-level scalars: per-push quantities are averaged over the pushes."""
        out = {"rms_error": self.rms_error, "peak_error": self.peak_error,
               "effort_p99": self.effort_p99, "jitter_p99": self.jitter_p99,
               "h_lin_rms": self.h_lin_rms, "h_ang_rms": self.h_ang_rms}
        for name in ("post_push_rms", "post_push_peak", "iae", "settling_time"):
            out[name] = float(np.mean(getattr(self, name)))
        return out


def _settling(e, k0, threshold, hold_steps, k_window_end):
    """First k in [k0, k_window_end] from which e stays <= threshold for hold_steps steps."""
    ok = e <= threshold
    run = 0
    # scan backwards so run[k] = length of the all-ok stretch starting at k
    runs = np.zeros(e.shape[0] + 1, dtype=np.int64)
    for k in range(e.shape[0] - 1, -1, -1):
        run = run + 1 if ok[k] else 0
        runs[k] = run
    for k in range(k0, min(k_window_end, e.shape[0] - 1) + 1):
        if runs[k] >= hold_steps + 1:
            return k
    return None


def recovery_from_signal(e, u_norm, jitter, profile: DisturbanceProfile, dt, post_window=1.5,
                         hold=0.5, pre_window=PRE_WINDOW, h_lin_err=None, h_ang_err=None):
    """Metrics from a sampled error signal ``e[k]`` at ``t = k dt``."""
    e = np.asarray(e, dtype=np.float64)
    pulses = profile.pulses
    if not pulses:
        raise WindowOutOfRange("profile has no pulses")
    k_first = int(round(pulses[0].t_start / dt))
    k_pre = k_first - int(round(pre_window / dt))
    if k_pre < 0:
        raise WindowOutOfRange("pre-push window starts before the trajectory")
    pre = e[k_pre:k_first]
    pre_mean = float(np.mean(pre))
    threshold = pre_mean + SETTLE_SIGMAS * float(np.std(pre))
    hold_steps = int(round(hold / dt))
    windows = []
    for j, p in enumerate(pulses):
        k0 = int(round(p.t_end / dt))
        t_stop = p.t_end + post_window
        if j + 1 < len(pulses):
            t_stop = min(t_stop, pulses[j + 1].t_start)
        k1 = int(round(t_stop / dt))
        if k1 >= e.shape[0]:
            raise WindowOutOfRange(f"post-push window of pulse {j} runs past the trajectory end")
        seg = e[k0:k1 + 1]
        excess = np.maximum(seg - pre_mean, 0.0)
        iae = float(np.sum(0.5 * (excess[1:] + excess[:-1])) * dt)
        ks = _settling(e, k0, threshold, hold_steps, k1)
        settled = ks is not None
        ts = (ks - k0) * dt if settled else (k1 - k0) * dt
        windows.append(PushWindow(k0 * dt, k1 * dt, float(np.sqrt(np.mean(seg * seg))),
                                  float(seg.max()), iae, ts, settled))
    return RecoveryMetrics(
        rms_error=float(np.sqrt(np.mean(e * e))),
        peak_error=float(e.max()),
        post_push_rms=[w.rms for w in windows],
        post_push_peak=[w.peak for w in windows],
        iae=[w.iae for w in windows],
        settling_time=[w.settling_time for w in windows],
        settled=[w.settled for w in windows],
        effort_p99=nearest_rank(u_norm, 99),
        jitter_p99=nearest_rank(jitter, 99) if len(jitter) else 0.0,
        h_lin_rms=float(np.sqrt(np.mean(h_lin_err ** 2))) if h_lin_err is not None else 0.0,
        h_ang_rms=float(np.sqrt(np.mean(h_ang_err ** 2))) if h_ang_err is not None else 0.0,
        threshold=threshold, pre_mean=pre_mean)


def recovery_metrics(traj: Trajectory, profile: DisturbanceProfile, post_window=1.5,
                     hold=0.5, pre_window=PRE_WINDOW) -> RecoveryMetrics:
    """Tracking-error recovery around each pulse of ``profile``.

    ``e_k = ||x_k - x_ref_k||`` over every recorded state (including the final one).
    """
    err = traj.states - traj.x_refs
    e = np.linalg.norm(err, axis=1)
    u = traj.actions
    jitter = np.linalg.norm(np.diff(u, axis=0), axis=1) / traj.dt
    return recovery_from_signal(e, np.linalg.norm(u, axis=1), jitter, profile, traj.dt,
                                post_window, hold, pre_window,
                                np.linalg.norm(err[:, 0:3], axis=1), np.linalg.norm(err[:, 3:6], axis=1))


@dataclass
class ComparisonReport:
    seeds: List[int]
    baseline: List[dict]
    learned: List[dict]
    rows: Dict[str, dict] = field(default_factory=dict)

    def table(self):
        lines = [f"{'metric':<16}{'baseline':>24}{'learned':>24}{'improv %':>11}"]
        for name, row in self.rows.items():
            b = f"{row['baseline_mean']:.4g} +- {row['baseline_std']:.2g}"
            l = f"{row['learned_mean']:.4g} +- {row['learned_std']:.2g}"
            lines.append(f"{name:<16}{b:>24}{l:>24}{row['improvement_pct']:>11.2f}")
        fb = sum(t["fell"] for t in self.baseline)
        fl = sum(t["fell"] for t in self.learned)
        lines.append(f"falls: baseline {fb}/{len(self.baseline)}, learned {fl}/{len(self.learned)}")
        return "\n".join(lines)

    def to_dict(self):
        return {"seeds": self.seeds, "baseline": self.baseline, "learned": self.learned,
                "rows": self.rows}


def improvement(baseline, learned):
    if baseline == learned:
        return 0.0
    if baseline == 0:
        return float("-inf") if learned > baseline else float("inf")
    return (baseline - learned) / baseline * 100.0


def summarize(baseline: List[dict], learned: List[dict]):
    rows = {}
    for name in TRIAL_METRICS:
        b = np.array([t[name] for t in baseline], dtype=np.float64)
        l = np.array([t[name] for t in learned], dtype=np.float64)
        bm, lm = float(np.mean(b)), float(np.mean(l))
        rows[name] = {"baseline_mean": bm, "baseline_std": float(np.std(b)),
                      "learned_mean": lm, "learned_std": float(np.std(l)),
                      "improvement_pct": 0.0 if np.array_equal(b, l, equal_nan=True)
                      else improvement(bm, lm), "samples": int(b.size)}
    return rows


def run_trial(run_episode: Callable, theta: ParamVector, seed, profile: DisturbanceProfile,
              post_window=1.5, hold=0.5):
    """Roll one seeded episode and reduce it to trial metrics (NaN where a fall cut it short)."""
    traj = run_episode(theta, seed, profile)
    rec = {"seed": int(seed), "fell": bool(traj.fell), "steps": len(traj)}
    try:
        m = recovery_metrics(traj, profile, post_window, hold)
        rec.update(m.summary())
        rec["settled"] = [bool(s) for s in m.settled]
    except WindowOutOfRange:
        rec.update({name: float("nan") for name in TRIAL_METRICS})
        rec["settled"] = []
    return rec, traj


def compare_controllers(theta0: ParamVector, theta_star: ParamVector, seeds, profile,
                        run_episode: Callable, post_window=1.5, hold=0.5,
                        on_trial: Optional[Callable] = None) -> ComparisonReport:
    """Run both parameter sets on identical seeded episodes and tabulate the metrics.

    ``run_episode(theta, seed, profile)`` must return a Trajectory; it owns the
    controller, plant and command so both arms see the same scenario.
    """
    base, learned = [], []
    for seed in seeds:
        for label, theta, sink in (("baseline", theta0, base), ("learned", theta_star, learned)):
            rec, traj = run_trial(run_episode, theta, seed, profile, post_window, hold)
            sink.append(rec)
            if on_trial is not None:
                on_trial(label, seed, rec, traj)
    return ComparisonReport([int(s) for s in seeds], base, learned, summarize(base, learned))
