"""Experiment orchestration: data generation, multi-seed runs, CSV traces, comparison.

An experiment is described by one JSON file::

    {
      "problem": "tmm",
      "problem_params": {"n": 20000, "d": 5, "K": 10, "eps": 0.001},
      "data": "generate",
      "data_seed": 0,
      "algorithms": [{"algorithm": "PALM"}, {"algorithm": "iSPALM", "batch_size": 2000}],
      "seeds": [0, 1, 2],
      "epochs": 50,
      "output_dir": "out"
    }

Output layout under ``output_dir``: ``config.json`` (every default filled
in), ``data/`` (dataset, ground truth, shared initialization), ``raw/`` (one
trace per algorithm and seed), ``aggregate/`` (one per algorithm) and
``summary.json``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import pnn as pnn_mod
from . import studentt
from .errors import ConfigError, FormatError, NumericalError, UsageError
from .gradcheck import ScaledGradient, check_gradients
from .linalg import BlockVec
from .optim import SolverConfig, Trace, TraceRow, ZeroProx, run
from .quadratic import QuadraticProblem, random_quadratic
from .rng import Rng

RAW_HEADER = ("epoch", "objective", "grad_sq_norm", "wall_seconds", "seed", "status")
AGG_HEADER = ("epoch", "mean_obj", "std_obj", "mean_grad_sq", "mean_wall")
GRAD_CHECK_TOL = 1e-4

PROBLEM_DEFAULTS = {
    "tmm": {"n": 2000, "d": 3, "K": 5, "eps": 1e-3},
    "quadratic": {"n": 50, "block_sizes": [3, 2], "rows": 1},
    "pnn": {"source": "auto", "mnist_dir": None, "n_train": 6000, "n_test": 1000, "widths": None},
}


# -- configuration -------------------------------------------------------------


@dataclass
class AlgorithmSpec:
    label: str
    solver: SolverConfig


@dataclass
class ExperimentConfig:
    problem: str = "tmm"
    problem_params: dict = field(default_factory=dict)
    data: str = "generate"
    data_seed: int = 0
    algorithms: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    epochs: Optional[int] = None
    output_dir: str = "out"
    share_deterministic: bool = True

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.resolve()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            obj = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    def resolve(self):
        if self.problem not in PROBLEM_DEFAULTS:
            raise ConfigError(f"unknown problem {self.problem!r}; expected one of {sorted(PROBLEM_DEFAULTS)}")
        params = dict(PROBLEM_DEFAULTS[self.problem])
        unknown = set(self.problem_params) - set(params)
        if unknown:
            raise ConfigError(f"unknown {self.problem} parameters: {sorted(unknown)}")
        params.update(self.problem_params)
        self.problem_params = params
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        if self.epochs is not None:
            self.epochs = int(self.epochs)
        resolved = []
        for entry in self.algorithms:
            entry = dict(entry)
            entry.pop("label", None)
            entry.pop("seed", None)
            allowed = {f.name for f in fields(SolverConfig)}
            bad = set(entry) - allowed
            if bad:
                raise ConfigError(f"unknown solver keys: {sorted(bad)}")
            if self.epochs is not None:
                entry["epochs"] = self.epochs
            solver = SolverConfig(**entry)
            resolved.append(asdict(solver))
        labels = [e.get("label") or SolverConfig(**r).algorithm for e, r in zip(self.algorithms, resolved)]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"algorithm labels must be unique, got {labels}; set 'label' explicitly")
        self.algorithms = [dict(r, label=lab) for r, lab in zip(resolved, labels)]
        return self

    def algorithm_specs(self, n=None):
        specs = []
        for entry in self.algorithms:
            entry = dict(entry)
            label = entry.pop("label")
            entry.pop("seed", None)
            solver = SolverConfig(**entry).validate(n)
            specs.append(AlgorithmSpec(label, solver))
        return specs

    def to_dict(self):
        return asdict(self)


# -- file helpers -----------------------------------------------------------------


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file in the same directory and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return repr(float(x))


def raw_csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_HEADER)
    for r in rows:
        w.writerow([r["epoch"], _fmt(r["objective"]), _fmt(r["grad_sq_norm"]),
                    f"{r['wall_seconds']:.6f}", r["seed"], r["status"]])
    return buf.getvalue()


def aggregate_csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_HEADER)
    for r in rows:
        w.writerow([r["epoch"], _fmt(r["mean_obj"]), _fmt(r["std_obj"]), _fmt(r["mean_grad_sq"]),
                    f"{r['mean_wall']:.6f}"])
    return buf.getvalue()


def _read_csv(path, header, converters):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    lines = text.splitlines()
    if not lines or tuple(lines[0].split(",")) != header:
        raise FormatError(f"{path}: line 1: expected header {','.join(header)}", offset=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise FormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(parts)}",
                              offset=lineno)
        try:
            rows.append({h: conv(p) for h, conv, p in zip(header, converters, parts)})
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}", offset=lineno) from None
    return rows


def read_raw_csv(path):
    return _read_csv(path, RAW_HEADER, (int, float, float, float, int, str))


def read_aggregate_csv(path):
    return _read_csv(path, AGG_HEADER, (int, float, float, float, float))


def aggregate(traces, epochs):
    """Per-epoch mean and population std over the seeds that reached that epoch."""
    rows = []
    for e in range(epochs + 1):
        pts = [r for t in traces for r in t if r["epoch"] == e and r["status"] == "ok"]
        if pts:
            obj = np.array([r["objective"] for r in pts])
            rows.append({
                "epoch": e,
                "mean_obj": float(np.mean(obj)),
                "std_obj": float(np.std(obj)),
                "mean_grad_sq": float(np.mean([r["grad_sq_norm"] for r in pts])),
                "mean_wall": float(np.mean([r["wall_seconds"] for r in pts])),
            })
        else:
            rows.append({"epoch": e, "mean_obj": math.nan, "std_obj": math.nan,
                         "mean_grad_sq": math.nan, "mean_wall": math.nan})
    return rows


# -- problem setup -----------------------------------------------------------------


def _data_dir(config, out):
    return Path(out if out is not None else config.output_dir) / "data"


def _pnn_data(params):
    mnist_dir = params.get("mnist_dir") or os.environ.get("ISPALM_MNIST_DIR")
    source = params["source"]
    if source == "mnist" or (source == "auto" and pnn_mod.find_mnist(mnist_dir) is not None):
        if pnn_mod.find_mnist(mnist_dir) is None:
            raise ConfigError(f"MNIST files not found in {mnist_dir!r}")
        Xtr, ytr, Xte, yte = pnn_mod.load_mnist(mnist_dir, params["n_train"], params["n_test"])
        return "mnist", Xtr, ytr, Xte, yte
    if source not in ("auto", "digits"):
        raise ConfigError(f"unknown pnn data source {source!r}")
    Xtr, ytr, Xte, yte = pnn_mod.load_digits_8x8()
    return "digits", Xtr, ytr, Xte, yte


def _pnn_widths(params, d):
    if params.get("widths"):
        return [int(w) for w in params["widths"]]
    return [d, max(1, d // 2), max(1, d // 4)] if d < 784 else [784, 100, 50]


def cmd_gen_data(config, out=None):
    """Write the dataset, ground truth (when synthetic) and shared initialization.

    Returns a dict of the written paths.
    """
    ddir = _data_dir(config, out)
    ddir.mkdir(parents=True, exist_ok=True)
    rng = Rng(config.data_seed)
    p = config.problem_params
    written = {}
    if config.problem == "tmm":
        if config.data == "generate":
            truth = studentt.generate_ground_truth(rng, int(p["K"]), int(p["d"]))
            data = studentt.sample_mm(rng, truth, int(p["n"]))
            _atomic_bytes(ddir / "dataset.tmmd", studentt.tmmd_bytes(data))
            atomic_write_text(ddir / "truth.json", json.dumps(truth.to_json_dict(), indent=1) + "\n")
            written["truth"] = ddir / "truth.json"
        else:
            data = studentt.load_dataset(config.data)
            _atomic_bytes(ddir / "dataset.tmmd", studentt.tmmd_bytes(data))
        init = studentt.init_params(data, int(p["K"]), rng, eps=float(p["eps"]))
        written["dataset"] = ddir / "dataset.tmmd"
    elif config.problem == "quadratic":
        if config.data == "generate":
            prob = random_quadratic(rng, int(p["n"]), p["block_sizes"], int(p["rows"]))
        else:
            prob = _load_quadratic(config.data)
        buf = io.BytesIO()
        np.savez(buf, M=prob.M, c=prob.c, block_sizes=np.array(prob.block_sizes))
        _atomic_bytes(ddir / "quadratic.npz", buf.getvalue())
        init = BlockVec.zeros(prob.block_specs)
        written["dataset"] = ddir / "quadratic.npz"
    else:
        source, Xtr, ytr, Xte, yte = _pnn_data(p)
        widths = _pnn_widths(p, Xtr.shape[1])
        init = pnn_mod.init_weights(rng, Xtr.shape[1], widths)
        atomic_write_text(ddir / "source.json", json.dumps({"source": source, "widths": widths}) + "\n")
        written["source"] = ddir / "source.json"
    atomic_write_text(ddir / "init.json", json.dumps(_init_to_json(config, init), indent=1) + "\n")
    written["init"] = ddir / "init.json"
    return written


def _atomic_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _init_to_json(config, init):
    if config.problem == "tmm":
        return init.to_json_dict()
    return pnn_mod.weights_to_json_dict(init)


def _load_quadratic(path):
    try:
        with np.load(path) as z:
            return QuadraticProblem(z["M"], z["c"], [int(s) for s in z["block_sizes"]])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read quadratic instance {path}: {exc}") from None


def _ensure_data(config, out):
    ddir = _data_dir(config, out)
    if not (ddir / "init.json").exists():
        cmd_gen_data(config, out)
    return ddir


@dataclass
class Setup:
    problem: object
    init: BlockVec
    prox: object
    extras: dict


def load_setup(config, out=None):
    """Problem, shared initialization and prox operators for ``config``."""
    ddir = _ensure_data(config, out)
    init_obj = json.loads((ddir / "init.json").read_text())
    p = config.problem_params
    if config.problem == "tmm":
        data = studentt.read_tmmd(ddir / "dataset.tmmd")
        params = studentt.TmmParams.from_json_dict(init_obj)
        problem = studentt.TmmProblem(data, params.K, params.eps)
        return Setup(problem, params.to_blockvec(), None, {})
    if config.problem == "quadratic":
        problem = _load_quadratic(ddir / "quadratic.npz")
        init = pnn_mod.weights_from_json_dict(init_obj)
        return Setup(problem, init, None, {})
    source, Xtr, ytr, Xte, yte = _pnn_data(p)
    init = pnn_mod.weights_from_json_dict(init_obj)
    widths = [init[i].shape[1] for i in range(3)]
    problem = pnn_mod.PnnProblem(Xtr, pnn_mod.one_hot(ytr), widths)
    return Setup(problem, init, problem.prox_ops(), {"test": (Xte, yte), "source": source})


# -- running -----------------------------------------------------------------------


def _trace_rows(trace, seed):
    rows = [{"epoch": r.epoch, "objective": r.objective, "grad_sq_norm": r.grad_sq_norm,
             "wall_seconds": r.wall_seconds, "seed": seed, "status": "ok"} for r in trace]
    if trace.status != "ok":
        epoch = rows[-1]["epoch"] + 1 if rows else 0
        rows.append({"epoch": epoch, "objective": math.nan, "grad_sq_norm": math.nan,
                     "wall_seconds": rows[-1]["wall_seconds"] if rows else 0.0, "seed": seed,
                     "status": "numerical_error"})
    return rows


def run_single(setup, solver, seed, config_problem=None):
    """Run one (algorithm, seed) pair; returns ``(rows, info)``."""
    solver = SolverConfig(**dict(asdict(solver), seed=seed))
    info = {}
    callback = None
    if isinstance(setup.problem, pnn_mod.PnnProblem):
        worst = [0.0]

        def callback(epoch, x):
            worst[0] = max(worst[0], pnn_mod.orthogonality_error(x))

        info["orthogonality"] = worst
    try:
        trace = run(setup.problem, setup.init, setup.prox, solver, callback)
    except NumericalError as exc:
        trace = getattr(exc, "trace", None) or Trace()
        trace.status = f"numerical_error: {exc}"
    if "orthogonality" in info:
        info["orthogonality"] = info["orthogonality"][0]
    if "test" in setup.extras and trace.x is not None:
        Xte, yte = setup.extras["test"]
        info["test_accuracy"] = pnn_mod.accuracy(trace.x, Xte, yte)
        info["final_train_loss"] = trace[-1].objective if len(trace) else math.nan
    info["status"] = trace.status
    return _trace_rows(trace, seed), info, trace


def cmd_run(config, out=None, keep_traces=False):
    """Run every algorithm over every seed and write raw and aggregate CSVs.

    Deterministic algorithms (PALM, iPALM) do not consume randomness, so with
    ``share_deterministic`` they are run once and the trace is reused for
    every seed.  Returns a summary dict.
    """
    out = Path(out if out is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = load_setup(config, out)
    specs = config.algorithm_specs(setup.problem.n)
    atomic_write_text(out / "config.json", json.dumps(dict(config.to_dict(), output_dir=str(out)), indent=1) + "\n")
    summary = {"problem": config.problem, "algorithms": {}}
    if "source" in setup.extras:
        summary["data_source"] = setup.extras["source"]
    traces = {}
    for spec in specs:
        per_seed = []
        infos = {}
        shared = None
        for seed in config.seeds:
            if config.share_deterministic and not spec.solver.stochastic and shared is not None:
                rows = [dict(r, seed=seed) for r in shared[0]]
                info, tr = shared[1], shared[2]
            else:
                rows, info, tr = run_single(setup, spec.solver, seed)
                if not spec.solver.stochastic:
                    shared = (rows, info, tr)
            atomic_write_text(out / "raw" / f"{spec.label}_seed{seed}.csv", raw_csv_text(rows))
            per_seed.append(rows)
            infos[str(seed)] = info
            if keep_traces:
                traces[(spec.label, seed)] = tr
        agg = aggregate(per_seed, spec.solver.epochs)
        atomic_write_text(out / "aggregate" / f"{spec.label}.csv", aggregate_csv_text(agg))
        summary["algorithms"][spec.label] = {"solver": asdict(spec.solver), "runs": infos}
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=1, default=float) + "\n")
    if keep_traces:
        summary["traces"] = traces
    return summary


# -- gradient checks ------------------------------------------------------------------


def random_tmm_instance(seed, n=10, d=3, K=2, eps=1e-3):
    gen = np.random.Generator(np.random.Philox(seed))
    X = 2.0 * gen.standard_normal((n, d))
    S = gen.standard_normal((K, d, d))
    params = studentt.TmmParams(
        alpha_raw=gen.standard_normal(K),
        nu_raw=1.0 + gen.random(K) * 2.0,
        mu=gen.standard_normal((d, K)),
        sigma_raw=0.5 * (S + np.transpose(S, (0, 2, 1))) + 2.0 * np.eye(d),
        eps=eps,
    )
    return studentt.TmmProblem(X, K, eps), params.to_blockvec()


def random_pnn_instance(seed, d=6, widths=(5, 4, 3), m=8):
    gen = np.random.Generator(np.random.Philox(seed))
    u = pnn_mod.init_weights(gen, d, widths)
    u = BlockVec(u.names, [b + 0.1 * gen.standard_normal(b.shape) for b in u])
    X = gen.random((m, d))
    Y = pnn_mod.one_hot(gen.integers(0, 10, size=m))
    return pnn_mod.PnnProblem(X, Y, widths), u


def cmd_grad_check(problems=("tmm", "pnn"), instances=None, corrupt=None, stream=None):
    """Finite-difference check of every block; returns ``(ok, report)``.

    ``corrupt=(block, factor)`` scales one analytic block gradient, a negative
    control that must make the check fail.
    """
    report = {}
    for name in problems:
        count = (instances or {}).get(name, {"tmm": 10, "pnn": 3, "quadratic": 3}[name])
        worst = {}
        for seed in range(count):
            if name == "tmm":
                prob, x = random_tmm_instance(seed, n=10 + seed % 11, d=1 + seed % 3, K=1 + (seed // 3) % 3)
            elif name == "pnn":
                prob, x = random_pnn_instance(seed)
            else:
                prob = random_quadratic(np.random.Generator(np.random.Philox(seed)), 10, [3, 2])
                x = BlockVec([n for n, _ in prob.block_specs],
                             [np.random.Generator(np.random.Philox(seed + 99)).standard_normal(s)
                              for _, s in prob.block_specs])
            if corrupt is not None and corrupt[0] in prob.block_names:
                prob = ScaledGradient(prob, corrupt[0], corrupt[1])
            for block, err in check_gradients(prob, x).items():
                worst[block] = max(worst.get(block, 0.0), err)
        report[name] = worst
    ok = all(err <= GRAD_CHECK_TOL for worst in report.values() for err in worst.values())
    if stream is not None:
        for name, worst in report.items():
            for block, err in worst.items():
                flag = "ok" if err <= GRAD_CHECK_TOL else "FAIL"
                print(f"{name:9s} {block:6s} max_rel_err={err:.3e} {flag}", file=stream)
    return ok, report


# -- comparison ------------------------------------------------------------------------


def cmd_compare(paths, stream=None):
    """Rank aggregate traces by final mean objective.

    Ties share a rank.  ``reach_epoch`` is the first epoch whose mean
    objective lies within 1% of the best final value.
    """
    paths = [Path(p) for p in paths]
    if len(paths) < 2:
        raise UsageError("compare needs at least two aggregate CSV files")
    finals = {}
    tables = {}
    for p in paths:
        rows = read_aggregate_csv(p)
        if not rows:
            raise FormatError(f"{p}: no data rows", offset=2)
        label = p.stem
        if label in tables:
            label = str(p)
        tables[label] = rows
        finals[label] = rows[-1]["mean_obj"]
    best = min(finals.values())
    thresh = best + 0.01 * abs(best)
    result = []
    for label, final in finals.items():
        rank = 1 + sum(1 for v in finals.values() if v < final)
        reach = next((r["epoch"] for r in tables[label] if r["mean_obj"] <= thresh), None)
        result.append({"label": label, "final_mean_obj": final, "rank": rank, "reach_epoch": reach})
    result.sort(key=lambda r: (r["rank"], r["label"]))
    if stream is not None:
        print(f"{'rank':>4}  {'algorithm':20s} {'final_mean_obj':>22}  reach_1pct_epoch", file=stream)
        for r in result:
            reach = "-" if r["reach_epoch"] is None else str(r["reach_epoch"])
            print(f"{r['rank']:>4}  {r['label']:20s} {r['final_mean_obj']:>22.12g}  {reach}", file=stream)
    return result
