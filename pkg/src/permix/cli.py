"""Command-line front-end: each subcommand writes CSV/JSON into a fresh run directory with a manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import click
import numpy as np

from permix.core import (BudgetError, ValidationError, dumps_environment, loads_environment, loads_spec,
                         sample_environment, validate_hypotheses)

SCHEMA_VERSION = 1
EXIT_VALIDATION = 2
EXIT_BUDGET = 3
EXIT_USAGE = 64
OUT_ENV = "PERMIX_OUT"


@dataclass
class ExperimentConfig:
    command: str
    spec: str | None = None
    seed: int = 0
    workers: int = 1
    params: dict = field(default_factory=dict)

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:10]


class RunDir:
    """Append-only output directory of one invocation."""

    def __init__(self, root: Path, config: ExperimentConfig):
        root.mkdir(parents=True, exist_ok=True)
        base = f"{config.command}-{config.digest()}"
        k = 0
        while (root / f"{base}-{k}").exists():
            k += 1
        self.path = root / f"{base}-{k}"
        self.path.mkdir()
        self.config = config
        self.files: list[str] = []

    def _claim(self, name: str) -> Path:
        target = self.path / name
        if target.exists():
            raise FileExistsError(f"{target} already written")
        self.files.append(name)
        return target

    def csv(self, name: str, rows) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        self._claim(name).write_text(buf.getvalue())

    def json(self, name: str, payload: dict) -> None:
        body = {"schema_version": SCHEMA_VERSION, "config": asdict(self.config), **payload}
        self._claim(name).write_text(json.dumps(_plain(body), indent=2, sort_keys=True) + "\n")

    def text(self, name: str, body: str) -> None:
        self._claim(name).write_text(body)

    def close(self, summary: str) -> None:
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "config": asdict(self.config),
            "files": self.files,
            "summary": summary,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        (self.path / "manifest.json").write_text(json.dumps(_plain(manifest), indent=2, sort_keys=True) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _plain(obj):
    """JSON-safe copy: numpy scalars and arrays, fractions, tuples keys, infinities."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, Fraction):
        return str(obj)
    return obj


# ---------------------------------------------------------------- spec resolution


def resolve_spec(name: str):
    """A spec file path, or one of ``tiny6``, ``demo-<n>``, ``counterexample-<n>-<delta>``."""
    from permix.specs import named_spec

    path = Path(name)
    if path.is_file():
        return loads_spec(path.read_text())
    try:
        return named_spec(name)
    except ValueError as exc:
        raise ValidationError(f"no spec file or known spec named {name!r}") from exc


def family_spec(family: str, n: int):
    """Member of size n of ``demo`` or ``counterexample-<delta>`` (n counts segment triples), or a fixed spec."""
    from permix.counterexample import build_counterexample
    from permix.specs import demo_spec

    if family == "demo":
        return demo_spec(n)
    if family.startswith("counterexample-"):
        return build_counterexample(n, Fraction(family.split("-", 1)[1]))
    spec = resolve_spec(family)
    if spec.n != n:
        raise ValidationError(f"spec {family} has n={spec.n}, not {n}")
    return spec


def load_environment(spec, env_file: str | None, env_seed: int):
    if env_file:
        env = loads_environment(Path(env_file).read_text())
        if env.n != spec.n:
            raise ValidationError("environment size differs from the number of states per side")
        return env
    return sample_environment(spec.n, env_seed)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from exc


# ---------------------------------------------------------------- command plumbing


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help=f"Output root (default ${OUT_ENV} or ./permix-runs).")
@click.option("--seed", type=int, default=0, show_default=True, help="Master seed.")
@click.option("--workers", type=int, default=1, show_default=True, help="Worker processes.")
@click.option("--quiet", is_flag=True, help="Suppress the summary line.")
@click.pass_context
def cli(ctx, out, seed, workers, quiet):
    """Experiments on mixtures of two randomly permuted Markov chains."""
    if workers < 1:
        raise click.BadParameter("workers must be at least 1", param_hint="--workers")
    root = Path(out or os.environ.get(OUT_ENV, "permix-runs"))
    ctx.obj = {"root": root, "seed": seed, "workers": workers, "quiet": quiet}


def _start(ctx, command: str, spec: str | None, **params) -> RunDir:
    obj = ctx.obj
    config = ExperimentConfig(command, spec, obj["seed"], obj["workers"], params)
    return RunDir(obj["root"], config)


def _finish(ctx, run: RunDir, summary: str) -> None:
    run.close(summary)
    if not ctx.obj["quiet"]:
        click.echo(f"{summary} [{run.path}]")


def _pmap(fn, tasks, workers: int) -> list:
    """Map in a process pool; results come back in task order, so output does not depend on ``workers``."""
    if workers == 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------- subcommands


@cli.command()
@click.option("--spec", "spec_name", required=True, help="Spec file or name.")
@click.option("--l-max", type=int, default=3, show_default=True)
@click.pass_context
def validate(ctx, spec_name, l_max):
    """Check the standing hypotheses of a spec."""
    spec = resolve_spec(spec_name)
    report = validate_hypotheses(spec, l_max)
    run = _start(ctx, "validate", spec_name, l_max=l_max)
    data = report.as_dict()
    run.json("report.json", {"report": data, "smallest_full_l": report.smallest_full_l()})
    ok = report.bounded_entries and report.reach_ok and not report.messages
    _finish(ctx, run, f"validate {spec.name or spec_name}: n={spec.n} delta={report.delta:.4g} "
                      f"Delta={report.Delta} reach_ok={report.reach_ok} full_l={report.smallest_full_l()} "
                      f"{'ok' if ok else 'issues: ' + '; '.join(report.messages)}")


@cli.command("gen-env")
@click.option("--spec", "spec_name", required=True)
@click.option("--env-seed", type=int, default=None, help="Defaults to the master seed.")
@click.pass_context
def gen_env(ctx, spec_name, env_seed):
    """Sample a uniform matching and store it."""
    spec = resolve_spec(spec_name)
    env_seed = ctx.obj["seed"] if env_seed is None else env_seed
    env = sample_environment(spec.n, env_seed)
    run = _start(ctx, "gen-env", spec_name, env_seed=env_seed)
    run.text("environment.txt", dumps_environment(env))
    _finish(ctx, run, f"gen-env: n={spec.n} seed={env_seed}")


@cli.command("mix-profile")
@click.option("--spec", "spec_name", required=True)
@click.option("--env-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--env-seed", type=int, default=0, show_default=True)
@click.option("--starts", default="0", show_default=True, help="Comma-separated start states.")
@click.option("--eps", default="0.25,0.75", show_default=True)
@click.option("--t-max", type=int, default=1000, show_default=True)
@click.option("--chain", type=click.Choice(["lifted", "projected"]), default="lifted", show_default=True)
@click.pass_context
def mix_profile(ctx, spec_name, env_file, env_seed, starts, eps, t_max, chain):
    """TV distance to stationarity along time from given starts."""
    from permix.mixing import chain_kernel, stationary_distribution, tv_curves

    spec = resolve_spec(spec_name)
    env = load_environment(spec, env_file, env_seed)
    K = chain_kernel(spec, env, chain)
    pi = stationary_distribution(K)
    xs = _int_list(starts)
    eps_list = _float_list(eps)
    curves = tv_curves(K, xs, pi, t_max)
    run = _start(ctx, "mix-profile", spec_name, env_seed=env_seed, env_file=env_file, starts=xs, eps=eps_list,
                 t_max=t_max, chain=chain)
    run.csv("tv_curves.csv", [("start", "t", "tv")] +
            [(x, t, v) for x, c in zip(xs, curves) for t, v in enumerate(c)])
    tmix = {}
    for x, c in zip(xs, curves):
        tmix[x] = {e: (int(np.flatnonzero(c < e)[0]) if np.any(c < e) else None) for e in eps_list}
    run.json("tmix.json", {"tmix": tmix})
    _finish(ctx, run, f"mix-profile: {len(xs)} starts, t_mix={tmix}")


def _cutoff_task(task):
    from permix.mixing import cutoff_scan

    family, n, eps, seeds, starts, t_max, chain, seed = task
    return cutoff_scan(lambda m: family_spec(family, m), [n], eps, seeds, starts, t_max, chain, seed)


@cli.command("cutoff-scan")
@click.option("--spec", "family", required=True, help="demo, counterexample-<delta>, or a fixed spec.")
@click.option("--n", "n_grid", required=True, help="Comma-separated sizes.")
@click.option("--eps", type=float, default=0.25, show_default=True)
@click.option("--seeds", type=int, default=10, show_default=True, help="Environments per size.")
@click.option("--starts", type=int, default=10, show_default=True, help="Starts per environment.")
@click.option("--t-max", type=int, default=5000, show_default=True)
@click.option("--chain", type=click.Choice(["lifted", "projected"]), default="lifted", show_default=True)
@click.pass_context
def cutoff_scan_cmd(ctx, family, n_grid, eps, seeds, starts, t_max, chain):
    """Cutoff window versus n over sampled environments, with the fitted entropy rate."""
    ns = _int_list(n_grid)
    seed = ctx.obj["seed"]
    tasks = [(family, n, eps, seeds, starts, t_max, chain, seed) for n in ns]
    parts = _pmap(_cutoff_task, tasks, ctx.obj["workers"])
    records = [r for p in parts for r in p.records]
    logs = np.log([r.n for r in records])
    ts = np.array([r.t_eps for r in records], dtype=float)
    if len(set(ns)) > 1:
        slope, intercept = np.polyfit(logs, ts, 1)
        h_hat = 1.0 / slope
    else:
        h_hat, intercept = float(logs[0] / ts.mean()), 0.0
    run = _start(ctx, "cutoff-scan", family, n=ns, eps=eps, seeds=seeds, starts=starts, t_max=t_max, chain=chain)
    run.csv("records.csv", [("n", "env_seed", "start", "t_eps", "t_complement")] +
            [(r.n, r.seed, r.start, r.t_eps, r.t_comp) for r in records])
    windows = {}
    for p in parts:
        windows.update(p.relative_window())
    run.json("summary.json", {"h_hat": float(h_hat), "intercept": float(intercept), "relative_window": windows,
                              "skipped": {str(n): p.skipped.get(n, 0) for n, p in zip(ns, parts)}})
    _finish(ctx, run, f"cutoff-scan: {len(records)} records, h_hat={h_hat:.4f}")


@cli.command("quasitree-stats")
@click.option("--spec", "spec_name", required=True)
@click.option("--runs", type=int, default=100, show_default=True)
@click.option("--t-max", type=float, default=1000.0, show_default=True)
@click.option("--escape-trees", type=int, default=0, show_default=True, help="Also sample escape probabilities.")
@click.option("--horizon", type=int, default=1000, show_default=True)
@click.option("--trials", type=int, default=1000, show_default=True)
@click.pass_context
def quasitree_stats(ctx, spec_name, runs, t_max, escape_trees, horizon, trials):
    """Regeneration records and renewal statistics of the quasi-tree walker."""
    from permix.quasitree import escape_structure, random_tree, records_table, renewal_statistics, run_regenerations

    spec = resolve_spec(spec_name)
    seed = ctx.obj["seed"]
    results = [run_regenerations(random_tree(spec, seed, r), t_max, None, seed, r) for r in range(runs)]
    report = renewal_statistics(results, spec.n)
    run = _start(ctx, "quasitree-stats", spec_name, runs=runs, t_max=t_max, escape_trees=escape_trees,
                 horizon=horizon, trials=trials)
    run.text("regenerations.csv", records_table(results))
    payload = {"renewal": {k: v for k, v in asdict(report).items() if k != "nu_hat"}}
    if escape_trees:
        es = escape_structure(spec, escape_trees, horizon, trials, seed)
        run.csv("escape.csv", [("tree", "q_hat")] + list(enumerate(es.q_hats)))
        payload["escape"] = {"q0": es.q0, "low_fraction": es.low_fraction, "bound": es.bound, "sigma": es.sigma,
                             "holds": es.holds}
    run.json("summary.json", payload)
    _finish(ctx, run, f"quasitree-stats: {report.records} regenerations, mean increment {report.mean_increment:.4f}")


@cli.command("estimate-h")
@click.option("--spec", "spec_name", required=True)
@click.option("--runs", type=int, default=200, show_default=True)
@click.option("--t-max", type=float, default=400.0, show_default=True)
@click.option("--n-inner", type=int, default=1000, show_default=True)
@click.option("--finite/--no-finite", default=False, help="Also run the finite-chain entropy audit.")
@click.option("--env-seed", type=int, default=0, show_default=True)
@click.option("--t-grid", default="10,20,30,40,50", show_default=True)
@click.option("--R", "R", type=int, default=4, show_default=True)
@click.option("--L", "L", type=int, default=4, show_default=True)
@click.option("--audit-runs", type=int, default=1000, show_default=True)
@click.option("--trials", type=int, default=4000, show_default=True)
@click.pass_context
def estimate_h(ctx, spec_name, runs, t_max, n_inner, finite, env_seed, t_grid, R, L, audit_runs, trials):
    """Drift and entropy from the quasi-tree, optionally against the finite-chain audit."""
    from permix.entropic import entropy_drift_audit
    from permix.quasitree import estimate_drift_entropy

    spec = resolve_spec(spec_name)
    seed = ctx.obj["seed"]
    est = estimate_drift_entropy(spec, runs, t_max, seed, n_inner)
    run = _start(ctx, "estimate-h", spec_name, runs=runs, t_max=t_max, n_inner=n_inner, finite=finite,
                 env_seed=env_seed, t_grid=t_grid, R=R, L=L, audit_runs=audit_runs, trials=trials)
    payload = {"quasitree": asdict(est)}
    summary = f"estimate-h: d_hat={est.d_hat:.4f} h_hat={est.h_hat:.4f}"
    if finite:
        env = sample_environment(spec.n, env_seed)
        audit = entropy_drift_audit(spec, env, _float_list(t_grid), R, L, audit_runs, trials, seed)
        run.csv("audit.csv", [("run", "start", "t", "trace_length", "neg_log_weight", "nice", "reason")] +
                [(i, a.start, a.t, a.trace_length, a.neg_log_weight, int(a.nice), a.reason)
                 for i, a in enumerate(audit.runs)])
        payload["finite"] = {"d_hat": audit.d_hat, "h_hat": audit.h_hat, "params": audit.params,
                             "relative_gap_h": abs(audit.h_hat - est.h_hat) / est.h_hat,
                             "relative_gap_d": abs(audit.d_hat - est.d_hat) / est.d_hat}
        summary += f" finite d_hat={audit.d_hat:.4f} h_hat={audit.h_hat:.4f}"
    run.json("summary.json", payload)
    _finish(ctx, run, summary)


@cli.command("invariant-check")
@click.option("--spec", "spec_name", required=True)
@click.option("--trees", type=int, default=50, show_default=True)
@click.option("--depth", type=int, default=4, show_default=True)
@click.pass_context
def invariant_check(ctx, spec_name, trees, depth):
    """Balance residual of the invariant field on truncated quasi-trees."""
    from permix.invariant import build_truncation, invariant_weights, stationarity_residual, z_alternative_gap
    from permix.quasitree import random_tree

    spec = resolve_spec(spec_name)
    seed = ctx.obj["seed"]
    pi_P = invariant_weights(spec)
    rows = [("tree", "max_residual", "max_relative", "interior", "excluded", "z_gap")]
    worst = worst_rel = 0.0
    for k in range(trees):
        trunc = build_truncation(random_tree(spec, seed, k), depth, pi_P)
        res = stationarity_residual(trunc)
        worst = max(worst, res.max_residual)
        worst_rel = max(worst_rel, res.max_relative)
        rows.append((k, res.max_residual, res.max_relative, res.interior_vertices, res.excluded_vertices,
                     z_alternative_gap(trunc, pi_P)))
    run = _start(ctx, "invariant-check", spec_name, trees=trees, depth=depth)
    run.csv("residuals.csv", rows)
    run.json("summary.json", {"max_residual": worst, "max_relative": worst_rel, "pi_normalization": "per class"})
    _finish(ctx, run, f"invariant-check: {trees} trees, max residual {worst:.3e}, max relative {worst_rel:.3e}")


@cli.command("forward-explore")
@click.option("--spec", "spec_name", required=True)
@click.option("--env-seed", type=int, default=0, show_default=True)
@click.option("--x", "x", type=int, required=True)
@click.option("--l", "l", type=int, required=True)
@click.option("--w-min", type=float, required=True)
@click.option("--R", "R", type=int, default=3, show_default=True)
@click.option("--L", "L", type=int, default=3, show_default=True)
@click.option("--trials", type=int, default=2000, show_default=True)
@click.pass_context
def forward_explore(ctx, spec_name, env_seed, x, l, w_min, R, L, trials):
    """Explore the forward neighbourhood of a state by cumulative weight."""
    from permix.entropic import explore_forward

    spec = resolve_spec(spec_name)
    env = sample_environment(spec.n, env_seed)
    fn = explore_forward(spec, env, x, l, w_min, R, L, trials=trials, seed=ctx.obj["seed"])
    run = _start(ctx, "forward-explore", spec_name, env_seed=env_seed, x=x, l=l, w_min=w_min, R=R, L=L,
                 trials=trials)
    run.csv("pieces.csv", [("piece", "center", "parent", "entry", "depth", "states")] +
            [(k, p.center, p.parent, p.entry, p.depth, " ".join(map(str, p.states)))
             for k, p in enumerate(fn.pieces)])
    run.csv("order.csv", [("step", "piece", "tail", "weight", "kappa", "W")] +
            [(i, key[0], key[1], w, kp, W) for i, ((key, w), kp, W)
             in enumerate(zip(fn.order, fn.kappa_trace, fn.W_trace))])
    run.csv("queue.csv", [("piece", "tail", "weight")] + [(k, s, w) for (k, s), w in sorted(fn.queue.items())])
    run.json("summary.json", {"kappa": fn.kappa, "cycles": fn.cycles, "stopped": fn.stopped,
                              "W": fn.W_trace[-1] if fn.W_trace else 0.0,
                              "step_bound_violations": fn.step_bound_violations})
    _finish(ctx, run, f"forward-explore: {len(fn.pieces)} pieces, kappa={fn.kappa}, cycles={fn.cycles}")


@cli.command("nice-audit")
@click.option("--spec", "spec_name", required=True)
@click.option("--env-seed", type=int, default=0, show_default=True)
@click.option("--h", "h", type=float, required=True, help="Entropy rate.")
@click.option("--d", "d", type=float, required=True, help="Drift.")
@click.option("--starts", type=int, default=10, show_default=True)
@click.option("--runs", type=int, default=20, show_default=True, help="Trajectories per start.")
@click.option("--knob", multiple=True, help="Override a default knob, e.g. --knob C2=4.")
@click.pass_context
def nice_audit_cmd(ctx, spec_name, env_seed, h, d, starts, runs, knob):
    """Fraction of nice trajectories from uniform starts."""
    from permix.entropic import NicePathConfig, nice_audit, nice_defaults

    knobs = nice_defaults()
    for item in knob:
        key, _, value = item.partition("=")
        if key not in knobs:
            raise click.BadParameter(f"unknown knob {key!r}", param_hint="--knob")
        knobs[key] = type(knobs[key])(float(value)) if isinstance(knobs[key], int) else float(value)
    spec = resolve_spec(spec_name)
    env = sample_environment(spec.n, env_seed)
    constants = {k: knobs[k] for k in ("C0", "C1", "C2", "C3", "C4", "C5", "Ch")}
    config = NicePathConfig.from_constants(spec.n, h, d, spec.Delta, knobs["R"], knobs["L"], knobs["M"], **constants)
    rng = np.random.default_rng(np.random.SeedSequence(ctx.obj["seed"], spawn_key=(60,)))
    xs = rng.integers(0, 2 * spec.n, starts).tolist()
    audit = nice_audit(spec, env, config, xs, runs, seed=ctx.obj["seed"], eps=knobs["eps"])
    run = _start(ctx, "nice-audit", spec_name, env_seed=env_seed, h=h, d=d, starts=starts, runs=runs, knobs=knobs)
    run.csv("verdicts.csv", [("run", "start", "nice", "reasons", "r", "l")] +
            [(i, xs[i // runs], int(v.nice), " ".join(v.reasons), v.r, v.l) for i, v in enumerate(audit.verdicts)])
    run.json("summary.json", {"fraction": audit.fraction, "reasons": dict(audit.reason_counts()),
                              "config": asdict(config)})
    _finish(ctx, run, f"nice-audit: nice fraction {audit.fraction:.3f} over {len(audit.verdicts)} runs")


@cli.command()
@click.option("--spec", "spec_name", required=True)
@click.option("--env-seed", type=int, default=0, show_default=True)
@click.option("--samples", type=int, default=100_000, show_default=True)
@click.option("--L", "L", type=int, default=4, show_default=True)
@click.option("--M", "M", type=float, default=40.0, show_default=True)
@click.option("--s0", type=int, default=None, help="Offset; defaults to log n / h.")
@click.option("--h", "h", type=float, default=None, help="Entropy rate used for the default offset.")
@click.option("--plain", is_flag=True, help="Sampled positions instead of exact pushing forward.")
@click.pass_context
def pihat(ctx, spec_name, env_seed, samples, L, M, s0, h, plain):
    """Regeneration-based approximation of the stationary law."""
    from permix.entropic import estimate_pihat

    spec = resolve_spec(spec_name)
    env = sample_environment(spec.n, env_seed)
    if s0 is None:
        if h is None:
            raise click.UsageError("give --s0 or --h")
        s0 = math.ceil(math.log(spec.n) / h)
    est = estimate_pihat(spec, env, samples, L, M, s0, seed=ctx.obj["seed"], rao_blackwell=not plain)
    run = _start(ctx, "pihat", spec_name, env_seed=env_seed, samples=samples, L=L, M=M, s0=s0, plain=plain)
    run.csv("pihat.csv", [("state", "pihat")] + list(enumerate(est.pihat)))
    run.json("summary.json", {"tv": est.tv, "mass": est.mass, "acceptance": est.acceptance,
                              "mean_T1_capped": est.mean_T1_capped, "params": est.params})
    _finish(ctx, run, f"pihat: TV={est.tv:.4f} mass={est.mass:.4f} acceptance={est.acceptance:.3f}")


@cli.command()
@click.option("--n", "n", type=int, default=4096, show_default=True, help="Copies parameter; 6n states per side.")
@click.option("--delta", type=str, default="0.05", show_default=True)
@click.option("--l", "l", type=int, default=5, show_default=True, help="Trap depth.")
@click.option("--plant/--search", default=True, help="Plant the trap, or search a sampled environment first.")
@click.option("--budget", type=int, default=1000, show_default=True, help="Centers tried when searching.")
@click.option("--env-seed", type=int, default=0, show_default=True)
@click.option("--typical", type=int, default=2, show_default=True, help="Typical starts for t_mix.")
@click.option("--t-grid", default="10,100,1000,10000,100000,1000000,10000000,100000000", show_default=True)
@click.option("--t-max", type=int, default=1_000_000, show_default=True, help="Cap on the typical-start evolution.")
@click.pass_context
def counterexample(ctx, n, delta, l, plant, budget, env_seed, typical, t_grid, t_max):
    """Trap in the biased-segment mixture and its slowdown against typical mixing."""
    from permix.counterexample import build_counterexample, find_or_plant_trap, slowdown_audit

    spec = build_counterexample(n, Fraction(delta))
    env = None if plant else sample_environment(spec.n, env_seed)
    env, trap = find_or_plant_trap(spec, env, l, budget, ctx.obj["seed"])
    report = slowdown_audit(spec, env, trap, _int_list(t_grid), typical, ctx.obj["seed"], t_max)
    run = _start(ctx, "counterexample", spec.name, n=n, delta=delta, l=l, plant=plant, budget=budget,
                 env_seed=env_seed, typical=typical, t_grid=t_grid, t_max=t_max)
    run.csv("escape_curve.csv", list(report.curve_rows()))
    run.json("trap_report.json", {"trap": trap.as_dict(), "escape_rate": report.escape_rate, "r": report.r,
                                  "rate_over_r": report.rate_over_r, "median_escape": report.median_escape,
                                  "t_mix_typical": report.t_mix_typical, "ratio": report.ratio,
                                  "dominated": report.dominated, "t_mix_censored": report.censored})
    _finish(ctx, run, f"counterexample: {trap.mode} depth {l} at {trap.center}, median escape "
                      f"{report.median_escape:.3g}, typical t_mix {report.t_mix_typical:.3g}, ratio {report.ratio:.3g}")


# ---------------------------------------------------------------- entry point


def run(argv=None) -> int:
    """Run the command line and return its exit code."""
    try:
        cli.main(args=argv, prog_name="permix", standalone_mode=False)
    except click.exceptions.NoArgsIsHelpError as exc:
        click.echo(exc.ctx.get_help() if exc.ctx else str(exc), err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        ctx = exc.ctx
        if ctx is not None:
            click.echo(ctx.get_usage(), err=True)
        click.echo(f"Error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.Abort:
        return 1
    except (ValidationError, ValueError) as exc:
        # bad parameters surface as ValueError from the library
        click.echo(f"validation error: {exc}", err=True)
        return EXIT_VALIDATION
    except BudgetError as exc:
        click.echo(f"budget exceeded: {exc}", err=True)
        return EXIT_BUDGET
    return 0


def main() -> None:
    sys.exit(run())
