"""Config-driven experiment runner and its file formats.

An experiment is a YAML config naming a model, a data source, a set of
samplers, sweep grids over series length T (and the reparametrization
coefficient a for the conjugate model), and replicate counts.  The runner
expands the grid into cells, derives one random stream per (cell,
replicate) as a pure function of the master seed and the cell coordinates,
runs the chains (in-process or across a worker pool), and writes one result
row per (cell, replicate) to a headered CSV.  Reruns with the same config
and master seed reproduce every column except wall_seconds byte for byte.

Proposal streams are derived from (T, a, replicate) only, never from the
sampler kind or kernel size, so matched cells of different samplers see
identical proposal increments and identical starting points.

File formats:
- datasets: versioned JSON, floats in shortest round-trip form;
- traces: NumPy .npz with a format version, the per-iteration arrays, and
  a JSON metadata blob;
- results and report aggregates: RFC 4180 CSV, floats at 17 significant
  digits, wall_seconds last.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .diagnostics import diagnostics_report
from .models import (Dataset, ModelSpec, iid_gaussian_model,
                     nonlinear_benchmark_model, simulate)
from .rng import derive_rng, stream_fingerprint
from .samplers import (CHAIN_KINDS, BridgeConfig, ChainTrace, CsmcConfig,
                       RwProposal, SmcConfig, init_chain_state, run_chain)
from .smc import ProposalSpec

DATASET_FORMAT = "smcbridge-dataset"
TRACE_FORMAT = "smcbridge-trace"
FORMAT_VERSION = 1
THREADS_ENV = "SMCBRIDGE_THREADS"

_MODEL_BUILDERS = {
    "iid_gaussian": iid_gaussian_model,
    "nonlinear_benchmark": nonlinear_benchmark_model,
}
_INIT_BOXES = {"nonlinear_benchmark": (1e-3, 1e3)}


class ConfigError(ValueError):
    """Invalid experiment configuration or input file."""


def build_model(kind: str, params: dict) -> ModelSpec:
    if kind not in _MODEL_BUILDERS:
        raise ConfigError(f"unknown model kind {kind!r}; "
                          f"choose from {sorted(_MODEL_BUILDERS)}")
    try:
        return _MODEL_BUILDERS[kind](**params)
    except TypeError as err:
        raise ConfigError(f"bad parameters for model {kind!r}: {err}") from err
    except ValueError as err:
        raise ConfigError(f"bad parameters for model {kind!r}: {err}") from err


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _int_list(value, name: str, minimum: int = 1) -> tuple:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        value = [value]
    _require(isinstance(value, (list, tuple)) and len(value) > 0,
             f"{name} must be a nonempty list of integers")
    out = []
    for v in value:
        _require(isinstance(v, (int, np.integer)) and not isinstance(v, bool)
                 and v >= minimum, f"{name} entries must be integers >= {minimum}")
        out.append(int(v))
    return tuple(out)


def _float_list(value, name: str) -> tuple:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    _require(isinstance(value, (list, tuple)) and len(value) > 0,
             f"{name} must be a nonempty list of numbers")
    out = []
    for v in value:
        _require(isinstance(v, (int, float)) and not isinstance(v, bool)
                 and math.isfinite(float(v)), f"{name} entries must be finite numbers")
        out.append(float(v))
    return tuple(out)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    _require(not unknown, f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class SamplerSetting:
    """One sampler entry of the config, grids included."""

    kind: str
    n_particles: tuple = (0,)
    n_stages: tuple = (0,)
    backward_sampling: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; all defaults resolved."""

    name: str
    model_kind: str
    model_params: dict
    data_source: str
    data_seed: int
    theta_true: Optional[tuple]
    data_path: Optional[str]
    sweep_T: tuple
    sweep_a: Optional[tuple]
    samplers: tuple
    iterations: int
    burn_in: int
    replicates: int
    proposal_mode: str
    proposal_sds: Optional[tuple]
    proposal_scale: str
    proposal_t_scaling: bool
    master_seed: int
    threads: int
    out_dir: str
    trace_mode: str
    init_box: Optional[tuple]

    @property
    def param_dim(self) -> int:
        return build_model(self.model_kind, self.model_params).param_dim

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None
                  ) -> "ExperimentConfig":
        """Validate a parsed config mapping and resolve every default."""
        _require(isinstance(raw, dict), "config root must be a mapping")
        _check_keys(raw, {"name", "model", "data", "sweep", "samplers", "run",
                          "proposal", "seed", "threads", "output"}, "config root")
        base_dir = Path(base_dir) if base_dir is not None else Path(".")

        model_sec = raw.get("model")
        _require(isinstance(model_sec, dict), "config needs a 'model' mapping")
        _check_keys(model_sec, {"kind", "params"}, "model")
        model_kind = model_sec.get("kind")
        model_params = dict(model_sec.get("params") or {})
        model = build_model(model_kind, model_params)

        data_sec = raw.get("data")
        _require(isinstance(data_sec, dict), "config needs a 'data' mapping")
        _check_keys(data_sec, {"source", "theta_true", "seed", "path"}, "data")
        source = data_sec.get("source", "simulate")
        _require(source in ("simulate", "file"),
                 "data.source must be 'simulate' or 'file'")
        data_seed = data_sec.get("seed", 0)
        _require(isinstance(data_seed, int) and not isinstance(data_seed, bool),
                 "data.seed must be an integer")
        theta_true = None
        data_path = None
        if source == "simulate":
            _require("theta_true" in data_sec,
                     "data.source 'simulate' needs data.theta_true")
            theta_true = _float_list(data_sec["theta_true"], "data.theta_true")
            _require(len(theta_true) == model.param_dim,
                     f"data.theta_true needs {model.param_dim} components")
        else:
            _require("path" in data_sec, "data.source 'file' needs data.path")
            data_path = str((base_dir / str(data_sec["path"])).resolve())
            _require(os.path.exists(data_path),
                     f"dataset file not found: {data_path}")

        sweep_sec = raw.get("sweep") or {}
        _require(isinstance(sweep_sec, dict), "'sweep' must be a mapping")
        _check_keys(sweep_sec, {"T", "a"}, "sweep")
        if source == "file":
            loaded, _ = load_dataset_json(data_path)
            file_T = loaded.T
            sweep_T = _int_list(sweep_sec.get("T", [file_T]), "sweep.T")
            _require(sweep_T == (file_T,),
                     "sweep.T must match the dataset file length")
        else:
            _require("T" in sweep_sec, "sweep.T is required when simulating")
            sweep_T = _int_list(sweep_sec["T"], "sweep.T")
        sweep_a = None
        if "a" in sweep_sec and sweep_sec["a"] is not None:
            _require(model_kind == "iid_gaussian",
                     "sweep.a applies to the iid_gaussian model only")
            sweep_a = _float_list(sweep_sec["a"], "sweep.a")

        samplers_sec = raw.get("samplers")
        _require(isinstance(samplers_sec, list) and len(samplers_sec) > 0,
                 "config needs a nonempty 'samplers' list")
        samplers = []
        for i, entry in enumerate(samplers_sec):
            _require(isinstance(entry, dict), f"samplers[{i}] must be a mapping")
            _check_keys(entry, {"kind", "n_particles", "n_stages",
                                "backward_sampling"}, f"samplers[{i}]")
            kind = entry.get("kind")
            _require(kind in CHAIN_KINDS,
                     f"samplers[{i}].kind must be one of {list(CHAIN_KINDS)}")
            if kind == "marginal_mh":
                _require(model.exact_loglik is not None,
                         "marginal_mh needs a model with an exact likelihood")
                _require("n_particles" not in entry and "n_stages" not in entry,
                         "marginal_mh takes no particle settings")
                samplers.append(SamplerSetting(kind=kind))
                continue
            n_particles = _int_list(entry.get("n_particles", 100),
                                    f"samplers[{i}].n_particles", minimum=1)
            bs = entry.get("backward_sampling", True)
            _require(isinstance(bs, bool),
                     f"samplers[{i}].backward_sampling must be a boolean")
            if kind == "mcmc_ais":
                n_stages = _int_list(entry.get("n_stages", 1),
                                     f"samplers[{i}].n_stages", minimum=1)
            else:
                _require("n_stages" not in entry,
                         f"samplers[{i}].n_stages applies to mcmc_ais only")
                n_stages = (0,)
            samplers.append(SamplerSetting(kind=kind, n_particles=n_particles,
                                           n_stages=n_stages,
                                           backward_sampling=bs))
        kinds_seen = [s.kind for s in samplers]
        _require(len(set(kinds_seen)) == len(kinds_seen),
                 "each sampler kind may appear once")

        run_sec = raw.get("run")
        _require(isinstance(run_sec, dict), "config needs a 'run' mapping")
        _check_keys(run_sec, {"iterations", "burn_in", "replicates",
                              "init_box"}, "run")
        iterations = run_sec.get("iterations")
        _require(isinstance(iterations, int) and not isinstance(iterations, bool)
                 and iterations >= 1, "run.iterations must be an integer >= 1")
        burn_in = run_sec.get("burn_in", iterations // 10)
        _require(isinstance(burn_in, int) and not isinstance(burn_in, bool)
                 and 0 <= burn_in < iterations,
                 "run.burn_in must be an integer in [0, iterations)")
        replicates = run_sec.get("replicates", 1)
        _require(isinstance(replicates, int) and not isinstance(replicates, bool)
                 and replicates >= 1, "run.replicates must be an integer >= 1")
        init_box = run_sec.get("init_box", _INIT_BOXES.get(model_kind))
        if init_box is not None:
            box = _float_list(init_box, "run.init_box")
            _require(len(box) == 2 and box[0] < box[1],
                     "run.init_box must be [low, high] with low < high")
            init_box = box

        prop_sec = raw.get("proposal") or {}
        _require(isinstance(prop_sec, dict), "'proposal' must be a mapping")
        _check_keys(prop_sec, {"mode", "sds", "scale", "t_scaling"}, "proposal")
        default_mode = ("posterior_sd" if model_kind == "iid_gaussian"
                        else "fixed")
        mode = prop_sec.get("mode", default_mode)
        _require(mode in ("posterior_sd", "fixed"),
                 "proposal.mode must be 'posterior_sd' or 'fixed'")
        sds = None
        scale = prop_sec.get("scale",
                             "sqrt" if model_kind == "nonlinear_benchmark"
                             else "linear")
        _require(scale in ("linear", "sqrt"),
                 "proposal.scale must be 'linear' or 'sqrt'")
        t_scaling = prop_sec.get("t_scaling", False)
        _require(isinstance(t_scaling, bool),
                 "proposal.t_scaling must be a boolean")
        if mode == "posterior_sd":
            _require(model.oracles is not None,
                     "proposal.mode 'posterior_sd' needs the iid_gaussian model")
            _require("sds" not in prop_sec and not t_scaling,
                     "posterior_sd mode takes no sds or t_scaling")
        else:
            default_sds = ([0.15, 0.08]
                           if model_kind == "nonlinear_benchmark" else None)
            _require("sds" in prop_sec or default_sds is not None,
                     "proposal.mode 'fixed' needs proposal.sds")
            sds = _float_list(prop_sec.get("sds", default_sds), "proposal.sds")
            _require(len(sds) == model.param_dim,
                     f"proposal.sds needs {model.param_dim} components")
            _require(all(s > 0 for s in sds), "proposal.sds must be positive")

        master_seed = raw.get("seed", 0)
        _require(isinstance(master_seed, int) and not isinstance(master_seed, bool)
                 and master_seed >= 0, "seed must be a nonnegative integer")
        threads = raw.get("threads", os.cpu_count() or 1)
        _require(isinstance(threads, int) and not isinstance(threads, bool)
                 and threads >= 1, "threads must be an integer >= 1")

        out_sec = raw.get("output") or {}
        _require(isinstance(out_sec, dict), "'output' must be a mapping")
        _check_keys(out_sec, {"dir", "trace"}, "output")
        out_dir = str(out_sec.get("dir", "out"))
        trace_mode = str(out_sec.get("trace", "none"))
        parse_trace_mode(trace_mode)

        name = raw.get("name", "experiment")
        _require(isinstance(name, str) and name, "name must be a nonempty string")

        return cls(name=name, model_kind=model_kind, model_params=model_params,
                   data_source=source, data_seed=data_seed,
                   theta_true=theta_true, data_path=data_path,
                   sweep_T=sweep_T, sweep_a=sweep_a, samplers=tuple(samplers),
                   iterations=iterations, burn_in=burn_in,
                   replicates=replicates, proposal_mode=mode,
                   proposal_sds=sds, proposal_scale=scale,
                   proposal_t_scaling=t_scaling, master_seed=master_seed,
                   threads=threads, out_dir=out_dir, trace_mode=trace_mode,
                   init_box=init_box)


def parse_trace_mode(mode: str) -> int:
    """Thinning factor for a trace mode: 0 none, 1 full, K for 'thin:K'."""
    if mode == "none":
        return 0
    if mode == "full":
        return 1
    if mode.startswith("thin:"):
        tail = mode[5:]
        if tail.isdigit() and int(tail) >= 1:
            return int(tail)
    raise ConfigError("output.trace must be 'none', 'full', or 'thin:K'")


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse a YAML config file, applying CLI overrides before validation."""
    import yaml
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from err
    _require(isinstance(raw, dict), "config root must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            raw["seed"] = value
        elif key == "data_seed":
            if isinstance(raw.get("data"), dict):
                raw["data"]["seed"] = value
        elif key == "threads":
            raw["threads"] = value
        elif key == "out":
            raw.setdefault("output", {})
            raw["output"]["dir"] = value
        elif key == "trace":
            raw.setdefault("output", {})
            raw["output"]["trace"] = value
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads is not None:
        _require(env_threads.isdigit() and int(env_threads) >= 1,
                 f"{THREADS_ENV} must be a positive integer")
        raw["threads"] = int(env_threads)
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(config: ExperimentConfig, T: int) -> Dataset:
    """The dataset of one sweep column, derived purely from the data seed.

    Simulated data depend on (data seed, T) only, never on the sweep's a
    grid: for the conjugate model the observation law is identical across
    a, so all reparametrized cells share one series.
    """
    if config.data_source == "file":
        dataset, _ = load_dataset_json(config.data_path)
        return dataset
    model = build_model(config.model_kind, config.model_params)
    rng = derive_rng(config.data_seed, "data", T)
    return simulate(model, np.asarray(config.theta_true), T, rng)


def save_dataset_json(path, dataset: Dataset, model_kind: str,
                      model_params: dict, seed: int) -> None:
    payload = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "model": model_kind,
        "params": model_params,
        "seed": seed,
        "T": dataset.T,
        "theta_true": (None if dataset.theta_true is None
                       else dataset.theta_true.tolist()),
        "y": dataset.y.tolist(),
        "x_true": (None if dataset.x_true is None
                   else dataset.x_true.tolist()),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_dataset_json(path):
    """Read a dataset file; returns (Dataset, metadata dict)."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read dataset {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != DATASET_FORMAT:
        raise ConfigError(f"{path} is not a dataset file")
    if payload.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset version in {path}")
    y = np.asarray(payload["y"], dtype=float)
    x_true = payload.get("x_true")
    theta_true = payload.get("theta_true")
    dataset = Dataset(
        y=y,
        x_true=None if x_true is None else np.asarray(x_true, dtype=float),
        theta_true=(None if theta_true is None
                    else np.asarray(theta_true, dtype=float)))
    meta = {k: payload.get(k) for k in ("model", "params", "seed", "T")}
    return dataset, meta


# ---------------------------------------------------------------------------
# traces


def save_trace_npz(path, trace: ChainTrace) -> None:
    arrays = {
        "format": np.array(TRACE_FORMAT),
        "version": np.array(FORMAT_VERSION),
        "kind": np.array(trace.kind),
        "thetas": trace.thetas,
        "proposed": trace.proposed,
        "accepts": trace.accepts,
        "log_ratios": trace.log_ratios,
        "burn_in": np.array(trace.burn_in),
        "init_theta": trace.init_theta,
        "meta": np.array(json.dumps(trace.meta, sort_keys=True)),
    }
    for i, snap in trace.latent_snapshots.items():
        arrays[f"snap_{i}"] = snap
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_trace_npz(path) -> ChainTrace:
    try:
        with np.load(path, allow_pickle=False) as npz:
            if str(npz["format"]) != TRACE_FORMAT:
                raise ConfigError(f"{path} is not a trace file")
            if int(npz["version"]) != FORMAT_VERSION:
                raise ConfigError(f"unsupported trace version in {path}")
            snapshots = {int(k[5:]): npz[k] for k in npz.files
                         if k.startswith("snap_")}
            return ChainTrace(kind=str(npz["kind"]),
                              thetas=npz["thetas"],
                              proposed=npz["proposed"],
                              accepts=npz["accepts"],
                              log_ratios=npz["log_ratios"],
                              burn_in=int(npz["burn_in"]),
                              init_theta=npz["init_theta"],
                              latent_snapshots=snapshots,
                              meta=json.loads(str(npz["meta"])))
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot read trace {path}: {err}") from err


# ---------------------------------------------------------------------------
# cells and execution


def proposal_sds_for(config: ExperimentConfig, T: int) -> tuple:
    """Random-walk step sizes for a sweep column of length T."""
    if config.proposal_mode == "posterior_sd":
        model = build_model(config.model_kind, config.model_params)
        _, var = model.oracles.posterior_params(np.zeros((T, 1)))
        return (math.sqrt(var),)
    sds = config.proposal_sds
    if config.proposal_t_scaling:
        sds = tuple(s / math.sqrt(T) for s in sds)
    return sds


def build_work_items(config: ExperimentConfig) -> list:
    """Expand the sweep into per-(cell, replicate) work dicts.

    Every work item is self-contained and built from primitives plus the
    dataset array, so items can cross process boundaries.
    """
    items = []
    a_grid = config.sweep_a if config.sweep_a is not None else (None,)
    for T in config.sweep_T:
        data = generate_dataset(config, T)
        sds = proposal_sds_for(config, T)
        for a in a_grid:
            params = dict(config.model_params)
            if a is not None:
                params["a"] = a
            for setting in config.samplers:
                for N in setting.n_particles:
                    for K in setting.n_stages:
                        for rep in range(config.replicates):
                            items.append({
                                "model_kind": config.model_kind,
                                "model_params": params,
                                "y": data.y,
                                "kind": setting.kind,
                                "n_particles": N,
                                "n_stages": K,
                                "backward_sampling": setting.backward_sampling,
                                "T": T,
                                "a": a,
                                "replicate": rep,
                                "iterations": config.iterations,
                                "burn_in": config.burn_in,
                                "master_seed": config.master_seed,
                                "proposal_sds": sds,
                                "proposal_scale": config.proposal_scale,
                                "trace_thin": parse_trace_mode(config.trace_mode),
                                "init_box": config.init_box,
                            })
    return items


def cell_label(item: dict) -> str:
    """Filesystem-safe cell name used for trace files."""
    parts = [item["kind"]]
    if item["kind"] != "marginal_mh":
        parts.append(f"N{item['n_particles']}")
    if item["kind"] == "mcmc_ais":
        parts.append(f"K{item['n_stages']}")
    parts.append(f"T{item['T']}")
    if item["a"] is not None:
        parts.append(f"a{item['a']:g}")
    parts.append(f"r{item['replicate']}")
    return "_".join(parts)


def run_cell(item: dict) -> dict:
    """Run one (cell, replicate) chain and compute its result row.

    Any exception is captured into a failed row so a sweep survives
    individual cell failures.
    """
    start = time.perf_counter()
    coords = (item["kind"], item["n_particles"], item["n_stages"],
              item["T"], item["a"], item["replicate"])
    seed_tag = stream_fingerprint(item["master_seed"], *coords)
    out = {"item": item, "seed": seed_tag, "trace": None}
    try:
        model = build_model(item["model_kind"], item["model_params"])
        data = Dataset(y=item["y"])
        rw = RwProposal(np.asarray(item["proposal_sds"]),
                        scale=item["proposal_scale"])
        kernel_proposal = ProposalSpec.from_model_prior(model)
        kind, N, K = item["kind"], item["n_particles"], item["n_stages"]
        T, a, rep = item["T"], item["a"], item["replicate"]
        master = item["master_seed"]
        init_rng = derive_rng(master, "init", T, a, rep)
        prop_rng = derive_rng(master, "prop", T, a, rep)
        kernel_rng = derive_rng(master, "kernel", kind, N, K, T, a, rep)
        if kind == "marginal_mh":
            kernel = None
        elif kind == "pmmh":
            kernel = SmcConfig(n_particles=N, proposal=kernel_proposal)
        elif kind == "mcmc_ais":
            kernel = BridgeConfig(n_stages=K, n_particles=N,
                                  proposal=kernel_proposal,
                                  backward_sampling=item["backward_sampling"])
        else:
            kernel = CsmcConfig(n_particles=N, proposal=kernel_proposal,
                                backward_sampling=item["backward_sampling"])
        init = init_chain_state(kind, model, data, kernel_proposal,
                                max(N, 1), init_rng, init_box=item["init_box"])
        trace = run_chain(kind, item["iterations"], item["burn_in"], init,
                          model, data, rw, kernel=kernel,
                          prop_rng=prop_rng, kernel_rng=kernel_rng,
                          meta={"seed": seed_tag, "cell": cell_label(item),
                                "master_seed": master})
        report = diagnostics_report(trace)
        out["status"] = "ok"
        out["error"] = ""
        out["iac"] = [float(v) for v in report.iac]
        out["msjd"] = [float(v) for v in report.msjd]
        out["accept_rate"] = report.accept_rate
        thin = item["trace_thin"]
        if thin:
            out["trace"] = ChainTrace(
                kind=trace.kind, thetas=trace.thetas[::thin],
                proposed=trace.proposed[::thin], accepts=trace.accepts[::thin],
                log_ratios=trace.log_ratios[::thin],
                burn_in=trace.burn_in // thin, init_theta=trace.init_theta,
                meta={**trace.meta, "thin": thin})
    except Exception as err:  # noqa: BLE001 - failed cells become rows
        d = build_model(item["model_kind"], item["model_params"]).param_dim
        out["status"] = "failed"
        out["error"] = f"{type(err).__name__}: {err}"
        out["iac"] = [math.nan] * d
        out["msjd"] = [math.nan] * d
        out["accept_rate"] = math.nan
        out["trace"] = None
    out["wall_seconds"] = time.perf_counter() - start
    return out


def _sort_key(result: dict):
    item = result["item"]
    return (item["kind"], item["n_particles"], item["n_stages"], item["T"],
            -math.inf if item["a"] is None else item["a"], item["replicate"])


@dataclass
class ExperimentResult:
    rows: list
    results_path: Optional[str] = None
    trace_paths: list = field(default_factory=list)


def run_experiment(config: ExperimentConfig,
                   write_files: bool = True) -> ExperimentResult:
    """Execute the full sweep x replicate grid.

    Cells run inline when threads == 1 and across a process pool otherwise;
    either way the parent process is the only writer, and rows come out in
    a deterministic order independent of scheduling.
    """
    items = build_work_items(config)
    if config.threads == 1:
        results = [run_cell(item) for item in items]
    else:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run_cell, items, chunksize=1))
    results.sort(key=_sort_key)

    out = ExperimentResult(rows=results)
    if write_files:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_dir = out_dir / "traces"
        for result in results:
            if result["trace"] is not None:
                trace_dir.mkdir(parents=True, exist_ok=True)
                path = trace_dir / (cell_label(result["item"]) + ".npz")
                save_trace_npz(path, result["trace"])
                out.trace_paths.append(str(path))
        results_path = out_dir / "results.csv"
        with open(results_path, "w", newline="") as fh:
            write_result_rows(fh, results, config.param_dim)
        out.results_path = str(results_path)
    return out


# ---------------------------------------------------------------------------
# result CSV


def _fmt(x) -> str:
    if isinstance(x, float):
        return "%.17g" % x
    return str(x)


def result_header(param_dim: int) -> list:
    cols = ["sampler", "n_particles", "n_stages", "T", "a", "replicate"]
    cols += [f"iac_p{i}" for i in range(param_dim)]
    cols += [f"msjd_p{i}" for i in range(param_dim)]
    cols += ["accept_rate", "seed", "status", "error", "wall_seconds"]
    return cols


def write_result_rows(fh, results: list, param_dim: int) -> None:
    writer = csv.writer(fh)
    writer.writerow(result_header(param_dim))
    for result in results:
        item = result["item"]
        row = [item["kind"], item["n_particles"], item["n_stages"], item["T"],
               "" if item["a"] is None else _fmt(float(item["a"])),
               item["replicate"]]
        row += [_fmt(v) for v in result["iac"]]
        row += [_fmt(v) for v in result["msjd"]]
        row += [_fmt(result["accept_rate"]), result["seed"], result["status"],
                result["error"], _fmt(result["wall_seconds"])]
        writer.writerow(row)


def read_result_rows(path) -> list:
    """Parse a results CSV back into row dicts (floats where sensible)."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read results {path}: {err}") from err
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "sampler" not in reader.fieldnames:
        raise ConfigError(f"{path} is not a results file")
    rows = []
    for rec in reader:
        row = dict(rec)
        for key in ("n_particles", "n_stages", "T", "replicate"):
            row[key] = int(row[key])
        row["a"] = float(row["a"]) if row["a"] else None
        for key, value in list(row.items()):
            if key.startswith(("iac_p", "msjd_p")) or key in (
                    "accept_rate", "wall_seconds"):
                row[key] = float(value)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# report aggregation


def _cell_key(row: dict):
    return (row["sampler"], row["n_particles"], row["n_stages"], row["T"],
            row["a"])


def aggregate_report(rows: list, baseline: Optional[str] = None):
    """Summarize result rows per cell and take IAC ratios across samplers.

    Returns (cell summaries, ratio rows, notes).  Ratios divide each cell's
    median IAC by the baseline sampler's median IAC on the same (T, a)
    column; cells without a baseline counterpart are flagged in notes, as
    are failed rows (excluded from aggregation).
    """
    ok = [r for r in rows if r["status"] == "ok"]
    notes = []
    n_failed = len(rows) - len(ok)
    if n_failed:
        notes.append(f"{n_failed} failed row(s) excluded")
    if not ok:
        raise ConfigError("no successful rows to aggregate")
    param_cols = sorted({k for k in ok[0] if k.startswith("iac_p")})
    dims = [c[5:] for c in param_cols]

    cells = {}
    for row in ok:
        cells.setdefault(_cell_key(row), []).append(row)

    summaries = []
    for key in sorted(cells, key=lambda k: (k[0], k[1], k[2], k[3],
                                            -math.inf if k[4] is None else k[4])):
        group = cells[key]
        summary = {"sampler": key[0], "n_particles": key[1],
                   "n_stages": key[2], "T": key[3], "a": key[4],
                   "replicates": len(group)}
        for d in dims:
            iacs = np.array([r[f"iac_p{d}"] for r in group])
            msjds = np.array([r[f"msjd_p{d}"] for r in group])
            summary[f"iac_mean_p{d}"] = float(np.mean(iacs))
            summary[f"iac_median_p{d}"] = float(np.median(iacs))
            summary[f"msjd_mean_p{d}"] = float(np.mean(msjds))
        summary["accept_rate_mean"] = float(
            np.mean([r["accept_rate"] for r in group]))
        summaries.append(summary)

    kinds = sorted({s["sampler"] for s in summaries})
    if baseline is None:
        baseline = "mcmc_ais" if "mcmc_ais" in kinds else kinds[0]
    elif baseline not in kinds:
        raise ConfigError(f"baseline sampler {baseline!r} has no rows")

    base_medians = {}
    for s in summaries:
        if s["sampler"] == baseline:
            col = (s["T"], s["a"])
            base_medians.setdefault(col, []).append(
                [s[f"iac_median_p{d}"] for d in dims])
    ratio_rows = []
    for s in summaries:
        if s["sampler"] == baseline:
            continue
        col = (s["T"], s["a"])
        if col not in base_medians:
            notes.append(f"no {baseline} cell at T={col[0]}, a={col[1]}; "
                         "ratio skipped")
            continue
        base = np.median(np.array(base_medians[col]), axis=0)
        ratio = {"sampler": s["sampler"], "n_particles": s["n_particles"],
                 "n_stages": s["n_stages"], "T": s["T"], "a": s["a"],
                 "baseline": baseline}
        for j, d in enumerate(dims):
            ratio[f"iac_ratio_p{d}"] = s[f"iac_median_p{d}"] / base[j]
        ratio_rows.append(ratio)
    return summaries, ratio_rows, notes


def write_dict_rows_csv(fh, rows: list) -> None:
    if not rows:
        return
    writer = csv.writer(fh)
    header = list(rows[0].keys())
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if row[k] is None else _fmt(row[k])
                         for k in header])


def render_table(rows: list, columns: Optional[list] = None) -> str:
    """Fixed-width text rendering of dict rows for terminal output."""
    if not rows:
        return "(no rows)\n"
    columns = columns or list(rows[0].keys())
    cells = [[("" if row.get(c) is None else
               (f"{row[c]:.4g}" if isinstance(row[c], float) else str(row[c])))
              for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[j]) for r in cells))
              for j, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"
