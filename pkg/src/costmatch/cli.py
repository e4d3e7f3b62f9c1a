"""Command-line entry point: ``costmatch {train,bench,diagnose,check-gradients}``.

Run directory layout::

    <run_dir>/config.yaml, config.sha256, theta0.json, train_curve.csv
    <run_dir>/rounds/<j>/{theta.json, diagnostics.json, trajectories/*.jsonl}
    <run_dir>/bench/{report.json, report.txt, trials.json, curves/*.csv}
    <run_dir>/diagnose/{match.json, density.csv, gradient_audit.json}

Every artifact directory also carries the resolved config and its hash.
Exit codes: 0 ok, 1 usage/config error, 2 numerical failure, 3 health gate.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck
from .bench import value_matching_eval
from .config import RunConfig, _plain
from .exceptions import ConfigError, CostMatchError, InsufficientData, NumericalError, SolveFailed
from .experiment import Experiment, derive_seed
from .plant import save_trajectory
from .valuation import Dataset, ParamVector

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_GATE = 0, 1, 2, 3
THETA_FORMAT = "costmatch-theta"


class HealthGateFailed(CostMatchError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- file helpers

def _write(path: Path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, obj):
    _write(path, json.dumps(_plain(obj), indent=1, sort_keys=True) + "\n")


def _stamp(directory: Path, cfg: RunConfig):
    _write(directory / "config.yaml", cfg.to_yaml())
    _write(directory / "config.sha256", cfg.hash + "\n")


def save_theta(path, theta: ParamVector, cfg_hash=None):
    _write_json(Path(path), {"format": THETA_FORMAT, "version": 1, "config_hash": cfg_hash,
                             "theta": theta.to_dict()})


def load_theta(path) -> ParamVector:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"theta snapshot {str(path)!r} does not exist")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not (isinstance(d, dict) and d.get("format") == THETA_FORMAT and isinstance(d.get("theta"), dict)):
        raise ConfigError(f"{path} is not a theta snapshot (missing {THETA_FORMAT!r} header)")
    try:
        return ParamVector.from_dict(d["theta"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path} is not a theta snapshot: {exc}") from None


def _run_dir(cfg: RunConfig, override):
    return Path(override) if override else Path(cfg.raw["output_dir"]) / str(cfg.raw["run_id"])


def _claim_run_dir(run_dir: Path, cfg: RunConfig):
    """Create or reopen a run directory; refuse one produced by a different config."""
    stored = run_dir / "config.sha256"
    if stored.exists():
        old = stored.read_text().strip()
        if old != cfg.hash:
            raise ConfigError(f"{run_dir} holds a run with a different config (hash {old[:12]}); "
                              "use a new run_id or --run-dir")
    _stamp(run_dir, cfg)


def verify_stamp(directory) -> bool:
    """Reload a stored config and check that it reproduces the stored hash."""
    directory = Path(directory)
    cfg = RunConfig.from_sources(directory / "config.yaml")
    return cfg.hash == (directory / "config.sha256").read_text().strip()


# ---------------------------------------------------------------- train

def _completed_rounds(run_dir: Path):
    j = 0
    while (run_dir / "rounds" / str(j) / "theta.json").exists():
        j += 1
    return j


def _diag_record(diag, theta: ParamVector, cfg_hash):
    return {"config_hash": cfg_hash, "updates": diag.records(),
            "val_mse_before": diag.val_mse_before, "val_mse_after": diag.val_mse_after,
            "smoothness": diag.smoothness, "alpha": diag.alphas, "solve_calls": diag.solve_calls,
            "theta": theta.to_array().tolist()}


def _write_curve(run_dir: Path, rounds):
    lines = ["round,val_mse_before,val_mse_after,loss_first,loss_last"]
    for j in range(rounds):
        d = json.loads((run_dir / "rounds" / str(j) / "diagnostics.json").read_text())
        before = d["val_mse_before"][0] if d["val_mse_before"] else float("nan")
        after = d["val_mse_after"][0] if d["val_mse_after"] else float("nan")
        ups = d["updates"]
        first = ups[0]["loss"] if ups else float("nan")
        last = ups[-1]["loss"] if ups else float("nan")
        lines.append(f"{j},{before!r},{after!r},{first!r},{last!r}")
    _write(run_dir / "train_curve.csv", "\n".join(lines) + "\n")


def cmd_train(cfg: RunConfig, run_dir: Path, log=print):
    _claim_run_dir(run_dir, cfg)
    theta0 = cfg.theta0
    save_theta(run_dir / "theta0.json", theta0, cfg.hash)
    rounds = cfg.learn.rounds
    start = min(_completed_rounds(run_dir), rounds)
    theta = theta0 if start == 0 else load_theta(run_dir / "rounds" / str(start - 1) / "theta.json")
    if start:
        log(f"resuming after round {start - 1}")
    ex = Experiment(cfg)
    for j in range(start, rounds):
        t0 = time.perf_counter()
        rdir = run_dir / "rounds" / str(j)
        trajs = ex.collect_round(theta, j)
        for e, tr in enumerate(trajs):
            save_trajectory(tr, rdir / "trajectories" / f"episode_{e:03d}.jsonl", cfg.hash)
        theta, diag = ex.train_round(theta, trajs, j)
        _stamp(rdir, cfg)
        _write_json(rdir / "diagnostics.json", _diag_record(diag, theta, cfg.hash))
        # theta.json is written last: its presence marks the round complete
        save_theta(rdir / "theta.json", theta, cfg.hash)
        falls = sum(tr.fell for tr in trajs)
        val = diag.val_mse_after[0] if diag.val_mse_after else float("nan")
        log(f"round {j}: val_mse {val:.6g}, falls {falls}/{len(trajs)}, "
            f"{time.perf_counter() - t0:.1f}s")
    _write_curve(run_dir, rounds)
    final = run_dir / "rounds" / str(rounds - 1) / "theta.json" if rounds else run_dir / "theta0.json"
    log(f"final theta: {final}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def theta_digest(theta: ParamVector) -> str:
    """Content hash of a snapshot; outputs record this rather than the path,
    so identical runs in different directories write identical files."""
    return hashlib.sha256(np.ascontiguousarray(theta.to_array(), dtype="<f8").tobytes()).hexdigest()


def cmd_bench(cfg: RunConfig, run_dir: Path, baseline_path, learned_path, log=print):
    theta0 = load_theta(baseline_path)
    theta_star = load_theta(learned_path)
    ex = Experiment(cfg)
    out = run_dir / "bench"
    curves = {}

    def on_trial(label, seed, rec, traj):
        e = np.linalg.norm(traj.states - traj.x_refs, axis=1)
        t = np.arange(e.shape[0]) * traj.dt
        curves[f"{label}_seed{seed}"] = "t,e\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(t, e))
        log(f"{label} seed {seed}: settling {rec['settling_time']:.3f}s, iae {rec['iae']:.4g}"
            + (" (fell)" if rec["fell"] else ""))

    report = ex.benchmark(theta0, theta_star, on_trial)
    _stamp(out, cfg)
    _write_json(out / "report.json", dict(report.to_dict(), config_hash=cfg.hash,
                                          baseline_sha256=theta_digest(theta0),
                                          learned_sha256=theta_digest(theta_star)))
    _write_json(out / "trials.json", {"baseline": report.baseline, "learned": report.learned})
    _write(out / "report.txt", report.table() + "\n")
    for name, text in curves.items():
        _write(out / "curves" / f"{name}.csv", text)
    log(report.table())
    return EXIT_OK


# ---------------------------------------------------------------- diagnose

def evaluation_set(ex: Experiment, theta: ParamVector):
    """Fixed, seeded closed-loop episodes rolled with ``theta`` (no pushes)."""
    cfg = ex.cfg
    d = cfg.raw["diagnose"]
    std = float(cfg.raw["collect"]["init_momentum_std"])
    trajs = []
    for e in range(int(d["trajectories"])):
        rng = np.random.default_rng(derive_seed(cfg.seed, 6, e))
        spec = ex._episode(rng, cfg.command, std, None, derive_seed(cfg.seed, 7, e))
        trajs.append(ex.rollout(theta, spec, int(d["steps"]), {"eval_episode": e}))
    return trajs


def audit_on_dataset(theta, dataset: Dataset, ctx, count, seed):
    """FD audit on up to ``count`` kink-free anchors of ``dataset``; random instances fill the gap."""
    rng = np.random.default_rng(seed)
    results = []
    for a in rng.permutation(dataset.anchors):
        if len(results) >= count:
            break
        ti, k = dataset.locate(a)
        tr = dataset.trajectories[ti]
        s, seg = tr.states[k], tr.segment(k, dataset.horizon)
        if gradcheck.pre_residual_margin(theta, s, seg, ctx.dyn, ctx.constraints) <= gradcheck.KINK_MARGIN:
            continue
        err, _, _ = gradcheck.audit(theta, s, seg, ctx.dyn, ctx.constraints)
        results.append({"source": "dataset", "anchor": int(a), "max_rel_error": err})
    while len(results) < count:
        th, s, seg = gradcheck.random_instance(rng, dataset.horizon, ctx.dyn, ctx.constraints)
        err, _, _ = gradcheck.audit(th, s, seg, ctx.dyn, ctx.constraints)
        results.append({"source": "random", "max_rel_error": err})
    return results


def cmd_diagnose(cfg: RunConfig, run_dir: Path, theta_path, log=print):
    theta = load_theta(theta_path)
    ex = Experiment(cfg)
    d = cfg.raw["diagnose"]
    trajs = evaluation_set(ex, theta)
    dataset = Dataset(trajs, cfg.learn.horizon, cfg.learn.gamma)
    if len(dataset) == 0:
        raise InsufficientData("evaluation episodes are shorter than the horizon")
    match = value_matching_eval(theta, dataset, ctx=ex.ctx)
    audits = audit_on_dataset(theta, dataset, ex.ctx, int(d["fd_instances"]),
                              derive_seed(cfg.seed, 8))
    worst = max(a["max_rel_error"] for a in audits)
    gate = float(d["gate"])
    out = run_dir / "diagnose"
    _stamp(out, cfg)
    _write_json(out / "match.json", {"config_hash": cfg.hash, "theta_sha256": theta_digest(theta),
                                     "anchors": len(dataset), "mse": match.mse, "rmse": match.rmse,
                                     "quantiles": match.quantiles,
                                     "falls": sum(t.fell for t in trajs)})
    _write(out / "density.csv", "q_mpc,q_meas\n" + "".join(
        f"{float(a)!r},{float(b)!r}\n" for a, b in zip(match.q_mpc, match.q_meas)))
    _write_json(out / "gradient_audit.json", {"config_hash": cfg.hash, "gate": gate,
                                              "max_rel_error": worst, "instances": audits})
    log(f"value matching: mse {match.mse:.6g} over {len(dataset)} anchors")
    log(f"gradient audit: max relative error {worst:.3g} (gate {gate:g})")
    if not worst < gate:
        raise HealthGateFailed(f"gradient audit error {worst:.3g} exceeds {gate:g}")
    return EXIT_OK


def cmd_check_gradients(cfg: RunConfig, run_dir: Path, instances=None, log=print):
    ex = Experiment(cfg)
    n = int(cfg.raw["diagnose"]["fd_instances"] if instances is None else instances)
    rng = np.random.default_rng(derive_seed(cfg.seed, 9))
    errs = []
    for _ in range(n):
        th, s, seg = gradcheck.random_instance(rng, cfg.learn.horizon, ex.ctx.dyn, ex.ctx.constraints)
        errs.append(gradcheck.audit(th, s, seg, ex.ctx.dyn, ex.ctx.constraints)[0])
    gate = float(cfg.raw["diagnose"]["gate"])
    out = run_dir / "check-gradients"
    _stamp(out, cfg)
    _write_json(out / "report.json", {"config_hash": cfg.hash, "gate": gate,
                                      "max_rel_error": max(errs), "errors": errs})
    log(f"{n} instances: max relative error {max(errs):.3g} (gate {gate:g})")
    if not max(errs) < gate:
        raise HealthGateFailed(f"gradient check error {max(errs):.3g} exceeds {gate:g}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = _Parser(prog="costmatch", description="Cost-matching MPC parameter learning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path override, e.g. learn.rounds=3")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--run-dir", help="output directory (default <output_dir>/<run_id>)")

    common(sub.add_parser("train", help="on-policy collection and cost-matching updates"))
    b = sub.add_parser("bench", help="push-recovery benchmark of two theta snapshots")
    common(b)
    b.add_argument("--baseline", required=True, help="baseline theta snapshot (json)")
    b.add_argument("--learned", required=True, help="learned theta snapshot (json)")
    d = sub.add_parser("diagnose", help="value matching and gradient audit for a snapshot")
    common(d)
    d.add_argument("--theta", required=True, help="theta snapshot (json)")
    g = sub.add_parser("check-gradients", help="finite-difference audit on random instances")
    common(g)
    g.add_argument("--instances", type=int, help="number of random instances")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_sources(args.config, args.overrides, args.seed)
        run_dir = _run_dir(cfg, args.run_dir)
        if args.command == "train":
            return cmd_train(cfg, run_dir)
        if args.command == "bench":
            return cmd_bench(cfg, run_dir, args.baseline, args.learned)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, run_dir, args.theta)
        return cmd_check_gradients(cfg, run_dir, args.instances)
    except HealthGateFailed as exc:
        print(f"health gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (NumericalError, SolveFailed, InsufficientData) as exc:
        stage = getattr(exc, "stage", None)
        where = f" (stage {stage})" if stage is not None else ""
        print(f"numerical failure: {type(exc).__name__}: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
