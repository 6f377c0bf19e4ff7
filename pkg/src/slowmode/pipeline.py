"""End-to-end experiments: msm -> spectrum -> trajectory -> features -> train -> analyze.

An experiment is described by an INI file (``key = value`` sections, see
:data:`PRESETS`).  Every stage writes its artifacts under
``<out_dir>/artifacts`` with a file name carrying the SHA-256 of the stage
inputs, so a rerun with an unchanged configuration reuses every stage.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .features import (FeatureTrajectory, RingFeatureSpec, apply_whitening, featurize_polar, fit_whitening,
                       load_features, ring_features_for_states, save_features)
from .lattice_msm import (PolarGrid, PotentialSpec, StateTrajectory, beltway_grid, build_transition_model,
                          load_trajectory, sample_trajectory, save_trajectory, torus_grid)
from .models import (LinearTaeProblem, TrainingConfig, TrainingRun, autocorrelation, encode,
                     evaluate_objective, linear_tae_closed_form, train, two_component_chain)
from .neural import model_from_dict, model_to_dict
from .spectral import SpectralModes, leading_modes, mode_overlap
from .theory import (encode_by_theta_bin, encode_by_r_bin, encode_labels, evaluate_encoding,
                     latent_variance_fraction, optimal_encoding_loss, parse_encoding)

__all__ = [
    "PRESETS",
    "ExperimentConfig",
    "ExperimentError",
    "Report",
    "load_config",
    "preset",
    "run_experiment",
    "compare_modes",
    "mode_axes",
    "report_schema",
    "validate_report",
]

SCHEMA_VERSION = 1


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


PRESETS = {
    "beltway-paper": """
[experiment]
name = beltway-paper
schema_version = 1

[potential]
kind = beltway
n_r = 20
n_theta = 200
convention = 4

[trajectory]
n_steps = 5000000
seed = 42

[features]
kind = polar
whiten = true

[training]
objectives = tae, srv, mtae, vde
lag = 3000
stride = 10
batch_size = 1024
max_epochs = 200
patience = 20
learning_rate = 0.001
seed = 7
lam = 0.5

[analysis]
spectrum_k = 6
encodings = by-r-bin, by-theta-bin
lag = 3000

[expectations]
analysis.by-r-bin.bound = in [1.99, 2.01]
analysis.by-theta-bin.bound = in [1.41, 1.47]
analysis.by-theta-bin.generalized_autocorrelation = in [0.515, 0.555]
optimal_loss = in [1.39, 1.45]
runs.tae.final_loss = in [1.42, 1.55]
runs.tae.group = == theta
runs.tae.axis1_fraction = > 0.8
runs.tae.axis0_fraction = < 0.2
runs.srv.found_mode = == 1
runs.srv.overlap.1 = > 0.9
runs.srv.axis0_fraction = > 0.9
runs.mtae.overlap.1 = > 0.9
runs.mtae.axis0_fraction = > 0.9
""",
    "torus-eq17": """
[experiment]
name = torus-eq17
schema_version = 1

[potential]
kind = torus-surrogate
n = 50
convention = 4
barrier_phi = 5.0
barrier_psi = 2.5

[trajectory]
n_steps = 5000000
seed = 42

[features]
kind = ring
ring_mode = slow-on-radius
r0 = 1.0
dr = 0.02
whiten = true

[training]
objectives = tae, srv
lag = 5000
stride = 10
batch_size = 1024
max_epochs = 200
patience = 20
learning_rate = 0.001
seed = 7

[analysis]
spectrum_k = 6
encodings = by-r-bin, by-theta-bin
lag = 5000

[expectations]
runs.tae.group = == psi
runs.srv.group = == phi
""",
    "torus-eq18": """
[experiment]
name = torus-eq18
schema_version = 1

[potential]
kind = torus-surrogate
n = 50
convention = 4
barrier_phi = 5.0
barrier_psi = 2.5

[trajectory]
n_steps = 5000000
seed = 42

[features]
kind = ring
ring_mode = fast-on-radius
r0 = 1.0
dr = 0.02
whiten = true

[training]
objectives = tae, srv
lag = 5000
stride = 10
batch_size = 1024
max_epochs = 200
patience = 20
learning_rate = 0.001
seed = 7

[analysis]
spectrum_k = 6
encodings = by-r-bin, by-theta-bin
lag = 5000

[expectations]
runs.tae.group = == phi
runs.srv.group = == phi
""",
    "linear-synthetic": """
[experiment]
name = linear-synthetic
schema_version = 1

[potential]
kind = linear-synthetic
sigma1 = 1.0
sigma2 = 3.0
A1 = 0.9
A2 = 0.5

[trajectory]
n_steps = 2000000
seed = 42

[features]
kind = synthetic
whiten = false

[training]
objectives = linear-tae@raw, linear-tae@white
lag = 10
stride = 1
batch_size = 4096
max_epochs = 300
patience = 30
learning_rate = 0.01
seed = 7

[analysis]
lag = 10

[expectations]
runs.linear-tae@raw.group = == x2
runs.linear-tae@white.group = == x1
runs.linear-tae@raw.closed_form_gap = < 0.001
runs.linear-tae@white.closed_form_gap = < 0.001
runs.linear-tae@raw.cosine.x2 = > 0.999
runs.linear-tae@white.cosine.x1 = > 0.999
""",
}


def preset(name: str) -> "ExperimentConfig":
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig.from_text(PRESETS[name])


def _split_list(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    """Parsed experiment file.  Sections map to pipeline stages."""

    sections: dict
    expectations: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        sections = {s: dict(parser.items(s)) for s in parser.sections() if s != "expectations"}
        expect = dict(parser.items("expectations")) if parser.has_section("expectations") else {}
        cfg = cls(sections, expect)
        cfg.validate()
        return cfg

    def get(self, section: str, key: str, default=None, cast=str):
        value = self.sections.get(section, {}).get(key)
        return default if value is None else cast(value)

    def validate(self) -> None:
        if "experiment" not in self.sections or "schema_version" not in self.sections["experiment"]:
            raise ValueError("config needs [experiment] with schema_version")
        if int(self.sections["experiment"]["schema_version"]) != SCHEMA_VERSION:
            raise ValueError("unsupported config schema_version")
        n_steps = self.get("trajectory", "n_steps", 0, int)
        lag = self.get("training", "lag", 0, int)
        if n_steps and lag >= n_steps:
            raise ValueError("lag must be shorter than the trajectory")
        for key in ("features_file", "trajectory_file"):
            path = self.get("trajectory", key)
            if path is not None and not Path(path).exists():
                raise ValueError(f"referenced file {path} does not exist")

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name, items in self.sections.items():
            parser[name] = items
        if self.expectations:
            parser["expectations"] = self.expectations
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# caching helpers


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via(path: Path, writer) -> None:
    """Let ``writer(tmp_path)`` produce a file, then rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


# ---------------------------------------------------------------------------
# mode bookkeeping


def mode_axes(modes: SpectralModes, grid: PolarGrid, names=("r", "theta")) -> list:
    """Label each eigenfunction by the lattice axis that carries it.

    A mode is assigned to an axis when more than half of its pi-weighted
    variance is explained by its conditional mean along that axis, and
    ``"mixed"`` otherwise.  Mode 0 is ``"stationary"``.
    """
    pi = modes.stationary
    i_r, i_t = grid.split_index(np.arange(grid.n_states))
    labels = []
    for k in range(modes.k):
        v = modes.eigenfunctions[:, k]
        mean = np.sum(pi * v)
        var = np.sum(pi * (v - mean) ** 2)
        if var < 1e-12:
            labels.append("stationary")
            continue
        fracs = []
        for idx, n in ((i_r, grid.n_r), (i_t, grid.n_theta)):
            w = np.bincount(idx, weights=pi, minlength=n)
            cm = np.bincount(idx, weights=pi * v, minlength=n) / w
            fracs.append(np.sum(w * (cm - mean) ** 2) / var)
        if fracs[0] > 0.5:
            labels.append(names[0])
        elif fracs[1] > 0.5:
            labels.append(names[1])
        else:
            labels.append("mixed")
    return labels


def compare_modes(latents: dict, modes: SpectralModes, trajectory, labels=None) -> dict:
    """Overlap of each run's latent with every non-stationary oracle mode and
    with every other run.

    ``latents`` maps run names to latent series aligned with ``trajectory``.
    Each row flags ``found_mode`` (index of the largest oracle overlap) and,
    when ``labels`` are given, that mode's axis label as ``group``.
    """
    states = trajectory.states if isinstance(trajectory, StateTrajectory) else np.asarray(trajectory)
    table = {}
    for name, z in latents.items():
        z = np.asarray(z).ravel()
        if z.size != states.size:
            raise ValueError(f"run {name!r} was not evaluated on this trajectory")
        over = {str(k): mode_overlap(z, modes.eigenfunctions[:, k], states) for k in range(1, modes.k)}
        found = max(over, key=lambda k: over[k])
        row = {"overlap": over, "found_mode": int(found),
               "runs": {other: float(abs(np.corrcoef(z, np.asarray(zo).ravel())[0, 1]))
                        for other, zo in latents.items()}}
        if labels is not None:
            row["group"] = labels[int(found)]
        table[name] = row
    return table


# ---------------------------------------------------------------------------
# report


@dataclass
class Report:
    doc: dict

    @property
    def passed(self) -> bool:
        return all(e["passed"] for e in self.doc["expectations"])

    def to_bytes(self) -> bytes:
        return _dump(self.doc)


def report_schema() -> dict:
    path = Path(__file__).with_name("report.schema.json")
    return json.loads(path.read_text())


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())


def _lookup(doc: dict, path: str):
    """Resolve ``runs.<objective>.<key>...`` and ``a.b.c`` paths; run names
    and encodings may contain dots, so keys are matched greedily."""
    node = doc
    rest = path
    if rest.startswith("runs."):
        rest = rest[len("runs."):]
        names = sorted((r["name"] for r in doc["runs"]), key=len, reverse=True)
        for name in names:
            if rest == name or rest.startswith(name + "."):
                node = next(r for r in doc["runs"] if r["name"] == name)
                rest = rest[len(name) + 1:]
                break
        else:
            raise KeyError(path)
    while rest:
        for key in sorted(node, key=len, reverse=True):
            if rest == key or rest.startswith(key + "."):
                node = node[key]
                rest = rest[len(key) + 1:]
                break
        else:
            raise KeyError(path)
    return node


_EXPR = re.compile(r"^\s*(in|==|>=|<=|>|<)\s*(.+?)\s*$")


def _check(value, expr: str) -> bool:
    m = _EXPR.match(expr)
    if not m:
        raise ValueError(f"cannot parse expectation {expr!r}")
    op, arg = m.groups()
    if op == "in":
        lo, hi = (float(v) for v in arg.strip("[] ").split(","))
        return lo <= float(value) <= hi
    if op == "==":
        try:
            return float(value) == float(arg)
        except (TypeError, ValueError):
            return str(value) == arg
    value, arg = float(value), float(arg)
    return {">": value > arg, "<": value < arg, ">=": value >= arg, "<=": value <= arg}[op]


def _expectations(doc: dict, expectations: dict) -> list:
    out = []
    for name, expr in expectations.items():
        try:
            value = _lookup(doc, name)
            ok = bool(_check(value, expr))
        except KeyError:
            value, ok = None, False
        out.append({"name": name, "expect": expr, "value": value, "passed": ok})
    return out


def _r(x, nd=12):
    """Round floats for the report so byte-identity does not hinge on the
    last ulp of platform math."""
    if isinstance(x, float):
        return float(f"{x:.{nd}g}")
    if isinstance(x, dict):
        return {k: _r(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_r(v, nd) for v in x]
    return x


# ---------------------------------------------------------------------------
# stages


class _Stages:
    def __init__(self, config: ExperimentConfig, out_dir: Path, log=None):
        self.cfg = config
        self.out = Path(out_dir)
        self.art = self.out / "artifacts"
        self.log = log or (lambda msg: None)
        self.hits = {}

    def _cached(self, stage: str, key: str, suffix: str, build, load, save):
        path = self.art / f"{stage}-{key}{suffix}"
        if path.exists():
            self.hits[stage] = True
            self.log(f"[{stage}] cache hit {path.name}")
            return load(path), path
        self.hits[stage] = False
        self.log(f"[{stage}] computing")
        try:
            obj = build()
        except ExperimentError:
            raise
        except Exception as err:  # any stage failure is reported with its stage name
            raise ExperimentError(stage, f"{type(err).__name__}: {err}") from err
        _atomic_via(path, lambda tmp: save(obj, tmp))
        return obj, path


def _potential_and_grid(cfg: ExperimentConfig):
    kind = cfg.get("potential", "kind", "beltway")
    if kind == "beltway":
        grid = beltway_grid(cfg.get("potential", "n_r", 20, int), cfg.get("potential", "n_theta", 200, int),
                            cfg.get("potential", "placement", "nodes"))
        return PotentialSpec(kind="beltway"), grid, ("r", "theta")
    if kind == "torus-surrogate":
        spec = PotentialSpec(kind="torus-surrogate",
                             barrier_phi=cfg.get("potential", "barrier_phi", 5.0, float),
                             barrier_psi=cfg.get("potential", "barrier_psi", 2.5, float))
        return spec, torus_grid(cfg.get("potential", "n", 50, int)), ("phi", "psi")
    raise ValueError(f"unknown potential kind {kind!r}")


def run_experiment(config: ExperimentConfig, out_dir, log=None) -> Report:
    """Run (or resume from cache) every stage and write ``report.json``.

    Also writes ``latent_by_state.csv`` (mean latent value per lattice state
    and run, for contour plots) next to the report.

    Raises
    ------
    ExperimentError
        Naming the stage that failed; artifacts of completed stages remain.
    """
    out_dir = Path(out_dir)
    st = _Stages(config, out_dir, log)
    if config.get("potential", "kind") == "linear-synthetic":
        doc = _run_linear(config, st)
    else:
        doc = _run_lattice(config, st)
    doc["expectations"] = _expectations(doc, config.expectations)
    doc["passed"] = all(e["passed"] for e in doc["expectations"])
    doc = _r(doc)
    validate_report(doc)
    report = Report(doc)
    _atomic_write(out_dir / "report.json", report.to_bytes())
    return report


def _run_lattice(cfg: ExperimentConfig, st: _Stages) -> dict:
    from .lattice_msm import load_transition_model, save_transition_model

    spec, grid, axis_names = _potential_and_grid(cfg)
    convention = cfg.get("potential", "convention", 4, int)
    msm_key = _key("msm", __version__, spec.__dict__, grid.__dict__, convention)
    model, _ = st._cached("msm", msm_key, ".bin", lambda: build_transition_model(spec, grid, convention),
                          load_transition_model, save_transition_model)

    k = cfg.get("analysis", "spectrum_k", 6, int)
    spec_key = _key("spectrum", msm_key, k)

    def save_modes(m: SpectralModes, path):
        with open(path, "wb") as fh:
            np.savez(fh, eigenvalues=m.eigenvalues, eigenfunctions=m.eigenfunctions, stationary=m.stationary)

    def load_modes(path):
        with np.load(path) as z:
            return SpectralModes(z["eigenvalues"].copy(), z["eigenfunctions"].copy(), z["stationary"].copy())

    modes, _ = st._cached("spectrum", spec_key, ".npz", lambda: leading_modes(model, k), load_modes, save_modes)
    labels = mode_axes(modes, grid, axis_names)

    n_steps = cfg.get("trajectory", "n_steps", 5_000_000, int)
    seed = cfg.get("trajectory", "seed", 42, int)
    start = cfg.get("trajectory", "start", 0, int)
    traj_key = _key("trajectory", msm_key, n_steps, seed, start)
    traj, _ = st._cached("trajectory", traj_key, ".bin",
                         lambda: sample_trajectory(model, n_steps, seed=seed, start=start),
                         load_trajectory, save_trajectory)

    fkind = cfg.get("features", "kind", "polar")
    whiten_on = cfg.get("features", "whiten", "true").lower() == "true"
    ring = None
    if fkind == "ring":
        ring = RingFeatureSpec(r0=cfg.get("features", "r0", 1.0, float), dr=cfg.get("features", "dr", 0.02, float),
                               offset=cfg.get("features", "offset", 2.0, float),
                               mode=cfg.get("features", "ring_mode", "slow-on-radius"))
    feat_key = _key("features", traj_key, fkind, whiten_on, ring.__dict__ if ring else None)

    def build_features():
        raw = ring_features_for_states(traj.states, grid, ring) if ring else featurize_polar(traj, grid)
        if whiten_on:
            return apply_whitening(raw, fit_whitening(raw))
        return FeatureTrajectory(raw.frames - raw.frames.mean(axis=0), provenance=raw.provenance,
                                 mean=raw.frames.mean(axis=0))

    feats, _ = st._cached("features", feat_key, ".bin", build_features, load_features, save_features)

    lag = cfg.get("analysis", "lag", cfg.get("training", "lag", 3000, int), int)
    analysis = {}
    an_key = _key("analysis", feat_key, lag, cfg.get("analysis", "encodings", ""))

    def build_analysis():
        result = {}
        for text in _split_list(cfg.get("analysis", "encodings", "")):
            result[text] = evaluate_encoding(feats, parse_encoding(text, traj, grid), lag).to_dict()
        result["_optimal_loss"] = optimal_encoding_loss(feats, traj, lag)
        return result

    def save_json(obj, path):
        Path(path).write_bytes(_dump(obj))

    def load_json(path):
        return json.loads(Path(path).read_text())

    analysis, _ = st._cached("analyze", an_key, ".json", build_analysis, load_json, save_json)
    analysis = dict(analysis)
    optimal = analysis.pop("_optimal_loss")

    runs, latents = [], {}
    for name in _split_list(cfg.get("training", "objectives", "")):
        row, z = _train_stage(cfg, st, name, feats, feat_key, grid, traj)
        runs.append(row)
        latents[name] = z
    table = compare_modes(latents, modes, traj, labels) if latents else {}
    theta_enc = encode_by_theta_bin(traj, grid)
    r_enc = encode_by_r_bin(traj, grid)
    for row in runs:
        row.update(table[row["name"]])
        z = latents[row["name"]]
        row["axis0_fraction"] = latent_variance_fraction(z, r_enc)
        row["axis1_fraction"] = latent_variance_fraction(z, theta_enc)

    if latents:
        _write_latent_csv(st.out / "latent_by_state.csv", grid, traj, latents)

    return {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.get("experiment", "name", "experiment"),
        "config_hash": _key(cfg.to_text()),
        "spectrum": {"eigenvalues": modes.eigenvalues.tolist(), "timescales": modes.timescales.tolist(),
                     "labels": labels},
        "analysis": analysis,
        "optimal_loss": optimal,
        "runs": runs,
    }


def _write_latent_csv(path: Path, grid: PolarGrid, traj, latents: dict) -> None:
    states = traj.states
    counts = np.bincount(states, minlength=grid.n_states)
    r, theta = grid.coordinates()
    cols = [np.arange(grid.n_states), r, theta, counts]
    names = ["state", "axis0", "axis1", "count"]
    for name, z in latents.items():
        sums = np.bincount(states, weights=z, minlength=grid.n_states)
        with np.errstate(invalid="ignore", divide="ignore"):
            cols.append(np.where(counts > 0, sums / np.maximum(counts, 1), np.nan))
        names.append(name)
    buf = io.StringIO()
    np.savetxt(buf, np.column_stack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.10g")
    _atomic_write(path, buf.getvalue().encode())


def _training_config(cfg: ExperimentConfig) -> TrainingConfig:
    return TrainingConfig(
        lag=cfg.get("training", "lag", 3000, int),
        batch_size=cfg.get("training", "batch_size", 1024, int),
        max_epochs=cfg.get("training", "max_epochs", 200, int),
        learning_rate=cfg.get("training", "learning_rate", 1e-3, float),
        seed=cfg.get("training", "seed", 0, int),
        validation_fraction=cfg.get("training", "validation_fraction", 0.1, float),
        patience=cfg.get("training", "patience", 20, int),
        stride=cfg.get("training", "stride", 10, int),
        lam=cfg.get("training", "lam", 0.5, float),
        hidden=cfg.get("training", "hidden", 50, int),
    )


def _run_to_doc(run: TrainingRun) -> dict:
    doc = run.summary()
    doc["model"] = model_to_dict(run.spec, run.params)
    return doc


def _train_stage(cfg, st: _Stages, name: str, feats, feat_key: str, grid, traj):
    objective = name.split("@")[0]
    tcfg = _training_config(cfg)
    key = _key("train", feat_key, name, tcfg.__dict__)

    def save(run_doc, path):
        Path(path).write_bytes(_dump(run_doc))

    def load(path):
        return json.loads(Path(path).read_text())

    doc, _ = st._cached(f"train-{name}", key, ".json",
                        lambda: _run_to_doc(train(objective, feats, tcfg, log=st.log)), load, save)
    spec, params = model_from_dict(doc["model"])
    kind = "tae" if objective == "linear-tae" else objective
    final = evaluate_objective(kind, spec, params, feats, tcfg.lag, lam=tcfg.lam)
    z = encode(spec, params, feats)
    row = {"name": name, "objective": objective, "final_loss": final,
           "best_validation": doc["validation_history"][doc["best_epoch"]],
           "epochs": len(doc["validation_history"]),
           "latent_autocorrelation": autocorrelation(z[:-tcfg.lag], z[tcfg.lag:])}
    return row, z


def _run_linear(cfg: ExperimentConfig, st: _Stages) -> dict:
    sig = (cfg.get("potential", "sigma1", 1.0, float), cfg.get("potential", "sigma2", 3.0, float))
    auto = (cfg.get("potential", "A1", 0.9, float), cfg.get("potential", "A2", 0.5, float))
    lag = cfg.get("training", "lag", 10, int)
    n_steps = cfg.get("trajectory", "n_steps", 400_000, int)
    seed = cfg.get("trajectory", "seed", 42, int)
    key = _key("synthetic", sig, auto, lag, n_steps, seed)
    raw, _ = st._cached("features", key, ".bin",
                        lambda: FeatureTrajectory(two_component_chain(sig, auto, lag, n_steps, seed)),
                        load_features, save_features)
    centered = FeatureTrajectory(raw.frames - raw.frames.mean(axis=0), mean=raw.frames.mean(axis=0))
    white = apply_whitening(raw, fit_whitening(raw))
    tcfg = _training_config(cfg)
    runs = []
    for name in _split_list(cfg.get("training", "objectives", "linear-tae@raw")):
        variant = name.split("@")[1] if "@" in name else ("white" if cfg.get("features", "whiten", "false") == "true" else "raw")
        feats = white if variant == "white" else centered
        x = feats.frames
        var = x.var(axis=0)
        A = [autocorrelation(x[:-lag, i], x[lag:, i]) for i in range(2)]
        cf = linear_tae_closed_form(LinearTaeProblem(var[0], var[1], A[0], A[1]))
        tkey = _key("train", key, name, tcfg.__dict__)

        def save(run_doc, path):
            Path(path).write_bytes(_dump(run_doc))

        doc, _ = st._cached(f"train-{name}", tkey, ".json",
                            lambda: _run_to_doc(train("linear-tae", feats, tcfg, log=st.log)),
                            lambda p: json.loads(Path(p).read_text()), save)
        spec, params = model_from_dict(doc["model"])
        final = evaluate_objective("tae", spec, params, feats, lag)
        w = params.weights[0][:, 0]
        cos = np.abs(w) / np.linalg.norm(w)
        runs.append({"name": name, "objective": "linear-tae", "final_loss": final,
                     "best_validation": doc["validation_history"][doc["best_epoch"]],
                     "epochs": len(doc["validation_history"]),
                     "closed_form_loss": cf.min_loss, "closed_form_gap": abs(final - cf.min_loss),
                     "loss_slow": cf.loss_slow, "loss_fast": cf.loss_fast,
                     "cosine": {"x1": float(cos[0]), "x2": float(cos[1])},
                     "group": "x1" if cos[0] > cos[1] else "x2"})
    return {"schema_version": SCHEMA_VERSION, "name": cfg.get("experiment", "name", "experiment"),
            "config_hash": _key(cfg.to_text()), "spectrum": None, "analysis": {},
            "optimal_loss": None, "runs": runs}
