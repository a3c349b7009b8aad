"""Seeded runs, run records, the demo-mismatch suite and curve aggregation.

Output layout under an output directory::

    <out>/<label>/seed<N>/metrics.csv      one row per iteration
    <out>/<label>/seed<N>/run.json         RunRecord
    <out>/<label>/seed<N>/checkpoints/     policy (and inverse model) snapshots

``label`` is the algorithm name for ``train`` and ``<variant>/<algo>`` for
the mismatch suite.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

import soil
from soil import algos, approx, demos as demos_mod, envs, inverse
from soil.algos import CURVE_COLUMNS, AlgoConfig
from soil.bench.config import ConfigError, ExperimentConfig
from soil.demos import DemoSet
from soil.envs import EnvSpec

FINAL_WINDOW = 10
PLOT_METRICS = ("env_return_mean", "success_rate", "shaped_return_mean", "inv_loss")
TABLE_COLUMNS = ("variant", "algo", "seed", "final_return", "success")

# name -> (env kind, changes applied to the unmodified env of that kind)
MISMATCH_PRESETS = {
    "mass1": ("point_relocate", {"mass_multiplier": 1.0}),
    "mass16": ("point_relocate", {"mass_multiplier": 16.0}),
    "mass32": ("point_relocate", {"mass_multiplier": 32.0}),
    "links2": ("arm_relocate", {"n_links": 2}),
    "box": ("point_relocate", {"object_kind": "box"}),
    "slippery": ("point_relocate", {"object_kind": "slippery"}),
}
DEFAULT_MISMATCH = ("mass16", "mass32", "links2", "slippery")


def code_fingerprint() -> str:
    """Package version plus a hash of the package sources."""
    root = Path(soil.__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return f"{soil.__version__}+{h.hexdigest()[:12]}"


def worker_count() -> int:
    raw = os.environ.get("SOIL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SOIL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SOIL_THREADS must be a positive integer, got {raw!r}")
    return n


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# Demos


def prepare_demos(algo: str, env: EnvSpec, demos: DemoSet | None, source: str = "demo set") -> DemoSet | None:
    """Check a demo set against an algorithm and env; strip actions for state-only methods."""
    if algo == "npg":
        return None
    if demos is None:
        raise ConfigError(f"algorithm {algo!r} needs demonstrations: pass --demos PATH "
                          "(create one with `soil gen-demos`)")
    if demos.obs_dim != env.obs_dim:
        raise ConfigError(f"{source}: observations have length {demos.obs_dim}, "
                          f"env {env.kind} produces {env.obs_dim}")
    if algo == "dapg":
        if demos.state_only:
            raise ConfigError(f"dapg needs demonstration actions but {source} has state_only=true; "
                              "use a file written by `soil gen-demos` (not stripped)")
        if demos.act_dim < env.act_dim:
            raise ConfigError(f"{source}: {demos.act_dim}-dim actions cannot drive a {env.act_dim}-dim env")
        return demos
    if not demos.state_only:
        warn(f"{algo} uses state-only demonstrations; ignoring the actions in {source}")
        return demos_mod.strip_actions(demos)
    return demos


def load_demos(path) -> DemoSet:
    try:
        return demos_mod.load(path)
    except FileNotFoundError:
        raise ConfigError(f"demo file not found: {path}") from None
    except demos_mod.DemoFormatError as e:
        raise ConfigError(str(e)) from None


# --------------------------------------------------------------------------
# Single runs


@dataclass
class RunRecord:
    config: dict
    seed: int
    label: str
    metrics: list[dict] = field(default_factory=list)
    final_return: float = float("nan")
    final_success: float = float("nan")
    eval: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    code: str = ""

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in rows:
        w.writerow([_cell(row[c]) for c in CURVE_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        out.append({k: (int(v) if k == "iter" else (float(v) if v != "" else None)) for k, v in row.items()})
    return out


def final_metrics(curve: list[dict], window: int = FINAL_WINDOW) -> tuple[float, float]:
    """Mean env return and success rate over the last ``window`` iterations."""
    tail = curve[-window:]
    if not tail:
        return float("nan"), float("nan")
    return (float(np.mean([r["env_return_mean"] for r in tail])),
            float(np.mean([r["success_rate"] for r in tail])))


def run_seed(exp: ExperimentConfig, seed: int, demos: DemoSet | None, label: str | None = None,
             out: str | None = None) -> RunRecord:
    """Train one seed, evaluate it and write metrics, checkpoints and the run record."""
    config = AlgoConfig.from_dict({**exp.algo.to_dict(), "seed": seed})
    label = label or config.algorithm
    run_dir = Path(out if out is not None else exp.out) / label / f"seed{seed}"
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    env_header = {"env": exp.env.to_dict(), "algorithm": config.algorithm, "seed": seed}

    def on_iter(it, info):
        if exp.checkpoint_every and (it + 1) % exp.checkpoint_every == 0:
            approx.save_policy(ckpt_dir / f"policy_iter{it + 1:06d}.ckpt", info["policy"],
                               iteration=it + 1, **env_header)

    t0 = time.perf_counter()
    result = algos.train(config, exp.env, demos, callback=on_iter)
    wall = time.perf_counter() - t0
    approx.save_policy(ckpt_dir / "policy_final.ckpt", result.policy, iteration=config.n_iter, **env_header)
    model = result.inverse_model
    if isinstance(model, inverse.InverseModel):
        approx.save_params(ckpt_dir / "inverse_final.ckpt", model.params, {**model.header(), **env_header})

    final_return, final_success = final_metrics(result.curve)
    evaluation = algos.evaluate(exp.env, result.policy, exp.eval_episodes, exp.eval_seed)
    snapshot = replace(exp, algo=config, seeds=(seed,)).to_dict()
    record = RunRecord(snapshot, seed, label, result.curve, final_return, final_success, evaluation,
                       wall, code_fingerprint())
    (run_dir / "metrics.csv").write_text(metrics_csv(result.curve))
    (run_dir / "run.json").write_text(record.to_json())
    return record


def _run_seed_job(args):
    exp, seed, demos, label, out = args
    return run_seed(exp, seed, demos, label, out)


def run_seeds(exp: ExperimentConfig, demos: DemoSet | None, label: str | None = None,
              out: str | None = None) -> list[RunRecord]:
    """Run every seed of ``exp``; up to SOIL_THREADS seeds run as parallel processes."""
    jobs = [(exp, s, demos, label, out) for s in exp.seeds]
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [_run_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_seed_job, jobs))


def rerun(record: RunRecord, demos: DemoSet | None) -> tuple[float, float]:
    """Re-train from a record's config snapshot; returns (final_return, final_success)."""
    exp = ExperimentConfig.from_dict(record.config)
    config = AlgoConfig.from_dict({**exp.algo.to_dict(), "seed": record.seed})
    return final_metrics(algos.train(config, exp.env, demos).curve)


# --------------------------------------------------------------------------
# Mismatch suite


def preset_envs(name: str, base: EnvSpec) -> tuple[EnvSpec, EnvSpec]:
    """(unmodified env the demos come from, learner env) for a named preset."""
    if name not in MISMATCH_PRESETS:
        raise ConfigError(f"unknown mismatch variant {name!r}; expected one of {sorted(MISMATCH_PRESETS)}")
    kind, changes = MISMATCH_PRESETS[name]
    source = base if base.kind == kind else EnvSpec(kind=kind, horizon=base.horizon, dt=base.dt)
    return source, envs.variant(source, **changes)


def mismatch_suite(base: ExperimentConfig, variants, algorithms=("soil", "dapg"), out: str | None = None,
                   demos: DemoSet | None = None) -> list[dict]:
    """Train each algorithm on each variant from demos of the unmodified env.

    ``demos`` (with actions) is used for variants whose unmodified env has the
    same observation length (with a warning if its fingerprint differs); other demo sets are generated with ``base.n_demos`` and
    ``base.demo_seed``.  Returns table rows (variant, algo, seed, final_return, success).
    """
    out_dir = Path(out if out is not None else base.out)
    cache: dict[str, DemoSet] = {}
    rows = []
    for name in variants:
        source, learner = preset_envs(name, base.env)
        fp = source.fingerprint()
        if fp not in cache:
            if demos is not None and demos.obs_dim == source.obs_dim:
                if demos.env_fingerprint and demos.env_fingerprint != fp:
                    warn(f"supplied demos were recorded on a different env than the {name} source env")
                cache[fp] = demos
            else:
                cache[fp] = demos_mod.generate_demos(source, base.n_demos, base.demo_seed)
        full = cache[fp]
        for algo in algorithms:
            exp = base.with_overrides(**{"algo.algorithm": algo})
            exp = replace(exp, env=learner)
            d = prepare_demos(algo, learner, full if algo == "dapg" else demos_mod.strip_actions(full),
                              f"demos for {name}")
            for rec in run_seeds(exp, d, f"{name}/{algo}", str(out_dir)):
                rows.append({"variant": name, "algo": algo, "seed": rec.seed,
                             "final_return": rec.final_return, "success": rec.final_success})
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        w.writerow([_cell(row[c]) for c in TABLE_COLUMNS])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Plot data


def find_runs(run_dir) -> dict[str, list[Path]]:
    """Map label -> seed directories under ``run_dir``.

    Raises FileNotFoundError listing seed directories without a metrics.csv.
    """
    root = Path(run_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"run directory not found: {root}")
    groups: dict[str, list[Path]] = {}
    missing = []
    for seed_dir in sorted(p for p in root.rglob("seed*") if p.is_dir()):
        if not (seed_dir / "metrics.csv").is_file():
            missing.append(str(seed_dir))
            continue
        groups.setdefault(seed_dir.parent.relative_to(root).as_posix(), []).append(seed_dir)
    if missing:
        raise FileNotFoundError("runs without metrics.csv: " + ", ".join(missing))
    if not groups:
        raise FileNotFoundError(f"no runs (<label>/seed<N>/metrics.csv) under {root}")
    return groups


def aggregate_curves(groups: dict[str, list[Path]], metric: str) -> str:
    """CSV with columns iter, <label>_mean, <label>_std (population std over seeds)."""
    series = {}
    for label, dirs in sorted(groups.items()):
        curves = [read_metrics_csv(d / "metrics.csv") for d in dirs]
        n = min(len(c) for c in curves)
        vals = np.array([[np.nan if c[i][metric] is None else c[i][metric] for i in range(n)] for c in curves])
        series[label] = (vals.mean(axis=0), vals.std(axis=0))
    n_rows = max((len(m) for m, _ in series.values()), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["iter"]
    for label in series:
        header += [f"{label}_mean", f"{label}_std"]
    w.writerow(header)
    for i in range(n_rows):
        row = [str(i)]
        for mean, std in series.values():
            row += [_cell(float(mean[i])), _cell(float(std[i]))] if i < len(mean) else ["", ""]
        w.writerow(row)
    return buf.getvalue()


def summary_csv(groups: dict[str, list[Path]]) -> str:
    """Per label: seed count and mean/std of final return and success."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "n_seeds", "final_return_mean", "final_return_std", "success_mean", "success_std"])
    for label, dirs in sorted(groups.items()):
        finals = np.array([final_metrics(read_metrics_csv(d / "metrics.csv")) for d in dirs])
        w.writerow([label, len(dirs), _cell(float(finals[:, 0].mean())), _cell(float(finals[:, 0].std())),
                    _cell(float(finals[:, 1].mean())), _cell(float(finals[:, 1].std()))])
    return buf.getvalue()


def export_plots(run_dir, dest=None) -> list[Path]:
    groups = find_runs(run_dir)
    dest = Path(dest) if dest is not None else Path(run_dir) / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in PLOT_METRICS:
        path = dest / f"{metric}.csv"
        path.write_text(aggregate_curves(groups, metric))
        written.append(path)
    path = dest / "summary.csv"
    path.write_text(summary_csv(groups))
    written.append(path)
    return written
