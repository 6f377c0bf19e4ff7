"""Command line interface: ``slowmode <command> ...``.

Exit status is 0 on success, 2 when an experiment ran but missed one of its
declared expectations, and 1 on any error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("slowmode")


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _out(args, name) -> Path:
    path = Path(name)
    if not path.is_absolute() and args.out_dir is not None:
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _grid_from(args):
    from .lattice_msm import beltway_grid, load_transition_model, torus_grid

    if getattr(args, "model", None):
        grid = load_transition_model(args.model).grid
        if grid is None:
            raise ValueError("transition model carries no grid")
        return grid
    kind, _, dims = (args.grid or "beltway").partition(":")
    if kind == "beltway":
        n_r, n_t = (int(v) for v in dims.split("x")) if dims else (20, 200)
        return beltway_grid(n_r, n_t)
    if kind == "torus":
        return torus_grid(int(dims) if dims else 50)
    raise ValueError(f"unknown grid {args.grid!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_msm_build(args):
    from .lattice_msm import PotentialSpec, build_transition_model, save_transition_model

    if args.potential == "beltway":
        spec = PotentialSpec(kind="beltway")
        grid = _grid_from(argparse.Namespace(grid=f"beltway:{args.nr}x{args.ntheta}"))
    else:
        spec = PotentialSpec(kind="torus-surrogate", barrier_phi=args.barrier_phi, barrier_psi=args.barrier_psi)
        grid = _grid_from(argparse.Namespace(grid=f"torus:{args.n}"))
    model = build_transition_model(spec, grid, args.convention)
    model.check_reversible()
    path = _out(args, args.out)
    save_transition_model(model, path)
    print(f"{path}: {model.n_states} states, {model.matrix.nnz} transitions")


def cmd_msm_sample(args):
    from .lattice_msm import load_transition_model, sample_trajectory, save_trajectory, trajectory_to_csv

    model = load_transition_model(args.model)
    traj = sample_trajectory(model, args.steps, seed=args.seed, start=args.start)
    path = _out(args, args.out)
    save_trajectory(traj, path)
    if args.csv:
        trajectory_to_csv(traj, _out(args, args.csv))
    print(f"{path}: {traj.n_steps} steps, seed {args.seed}")


def cmd_spectrum(args):
    from .lattice_msm import load_transition_model
    from .spectral import leading_modes

    model = load_transition_model(args.model)
    modes = leading_modes(model, args.k, method=args.method, seed=args.seed)
    out = _out(args, args.out)
    csv = out.with_suffix(".csv")
    cols = np.column_stack([np.arange(model.n_states), modes.stationary, modes.eigenfunctions])
    header = ",".join(["state", "pi"] + [f"psi{i}" for i in range(modes.k)])
    np.savetxt(csv, cols, delimiter=",", header=header, comments="", fmt="%.17g")
    _write_json(out, {"eigenvalues": modes.eigenvalues.tolist(), "timescales": modes.timescales.tolist(),
                      "eigenfunctions": csv.name})
    for i, (lam, t) in enumerate(zip(modes.eigenvalues[1:], modes.timescales), start=1):
        print(f"mode {i}: eigenvalue {lam:.12f}  timescale {t:.6g}")


def _load_modes(path):
    from .spectral import SpectralModes

    path = Path(path)
    doc = json.loads(path.read_text())
    table = np.loadtxt(path.parent / doc["eigenfunctions"], delimiter=",", skiprows=1, ndmin=2)
    return SpectralModes(np.asarray(doc["eigenvalues"]), table[:, 2:], table[:, 1])


def cmd_featurize(args):
    from .features import (RingFeatureSpec, features_to_csv, featurize_polar, ring_features_for_states,
                           save_features, whiten)
    from .lattice_msm import load_trajectory

    traj = load_trajectory(args.traj)
    grid = _grid_from(args)
    if args.ring:
        feats = ring_features_for_states(traj.states, grid, RingFeatureSpec(r0=args.r0, dr=args.dr, mode=args.ring))
    else:
        feats = featurize_polar(traj, grid)
    if args.whiten:
        feats = whiten(feats)
    else:
        feats = type(feats)(feats.frames - feats.frames.mean(axis=0), provenance=feats.provenance,
                            mean=feats.frames.mean(axis=0))
    path = _out(args, args.out)
    save_features(feats, path)
    if args.csv:
        features_to_csv(feats, _out(args, args.csv))
    print(f"{path}: {feats.n_frames} frames, total variance {feats.total_variance():.6f}")


def cmd_train(args):
    from .features import load_features
    from .models import TrainingConfig, evaluate_objective, train
    from .neural import model_to_dict

    feats = load_features(args.features)
    cfg = TrainingConfig(lag=args.lag, batch_size=args.batch_size, max_epochs=args.epochs,
                         learning_rate=args.lr, seed=args.seed, patience=args.patience, stride=args.stride,
                         deterministic=args.deterministic, lam=args.lam, hidden=args.hidden)
    run = train(args.objective, feats, cfg, log=log.info)
    doc = run.summary()
    doc["final_loss"] = evaluate_objective(args.objective, run.spec, run.params, feats, args.lag, lam=args.lam)
    doc["features"] = {"path": str(Path(args.features).resolve()), "sha256": _file_digest(args.features)}
    doc["model"] = model_to_dict(run.spec, run.params)
    path = _out(args, args.out)
    _write_json(path, doc)
    print(f"{path}: {args.objective} loss {doc['final_loss']:.6f} after {len(run.validation_history)} epochs")


def _run_latent(run_doc, feats):
    from .models import encode
    from .neural import model_from_dict

    spec, params = model_from_dict(run_doc["model"])
    return encode(spec, params, feats)


def cmd_analyze(args):
    from .features import load_features
    from .lattice_msm import load_trajectory
    from .theory import encode_by_quantile, evaluate_encoding, optimal_encoding_loss, parse_encoding

    feats = load_features(args.features)
    traj = load_trajectory(args.traj)
    if traj.n_steps != feats.n_frames:
        raise ValueError("features and trajectory differ in length")
    result = {}
    grid = _grid_from(args) if (args.model or args.grid) else None
    for text in args.encoding:
        result[text] = evaluate_encoding(feats, parse_encoding(text, traj, grid), args.lag).to_dict()
    for run_path in args.run:
        z = _run_latent(json.loads(Path(run_path).read_text()), feats)
        enc = encode_by_quantile(z, args.bins)
        result[f"{Path(run_path).stem}:quantile:{args.bins}"] = evaluate_encoding(feats, enc, args.lag).to_dict()
    result["optimal_loss"] = optimal_encoding_loss(feats, traj, args.lag)
    if args.out:
        _write_json(_out(args, args.out), result)
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_experiment_run(args):
    from .pipeline import load_config, preset, run_experiment

    cfg = preset(args.preset) if args.preset else load_config(args.config)
    if args.seed is not None:
        cfg.sections.setdefault("training", {})["seed"] = str(args.seed)
    out_dir = Path(args.out_dir or f"runs/{cfg.get('experiment', 'name', 'experiment')}")
    report = run_experiment(cfg, out_dir, log=log.info)
    for e in report.doc["expectations"]:
        print(f"{'PASS' if e['passed'] else 'FAIL'}  {e['name']} {e['expect']}  (got {e['value']})")
    print(f"report: {out_dir / 'report.json'}")
    return 0 if report.passed else 2


def cmd_compare(args):
    from .features import load_features
    from .lattice_msm import load_trajectory
    from .pipeline import compare_modes

    feats = load_features(args.features)
    digest = _file_digest(args.features)
    traj = load_trajectory(args.traj)
    if traj.n_steps != feats.n_frames:
        raise ValueError("features and trajectory differ in length")
    modes = _load_modes(args.modes)
    latents = {}
    for path in args.runs:
        doc = json.loads(Path(path).read_text())
        if doc.get("features", {}).get("sha256") != digest:
            raise ValueError(f"{path} was trained on different features than {args.features}")
        latents[Path(path).stem] = _run_latent(doc, feats)
    table = compare_modes(latents, modes, traj)
    if args.out:
        _write_json(_out(args, args.out), table)
    width = max(len(n) for n in table)
    for name, row in table.items():
        cells = "  ".join(f"psi{k}={v:.3f}" for k, v in row["overlap"].items())
        print(f"{name:<{width}}  {cells}  found=psi{row['found_mode']}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def add_common(parser, default):
        # subcommands repeat the global flags; SUPPRESS keeps them from
        # overwriting values given before the subcommand
        parser.add_argument("--seed", type=int, default=default(None),
                            help="random seed (default 0; experiments: preset)")
        parser.add_argument("--deterministic", action="store_true", default=default(False),
                            help="bit-reproducible training")
        parser.add_argument("--out-dir", default=default(None), help="directory for relative output paths")
        parser.add_argument("-v", "--verbose", action="store_true", default=default(False))

    common = argparse.ArgumentParser(add_help=False)
    add_common(common, lambda value: argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="slowmode", description=__doc__.splitlines()[0])
    add_common(p, lambda value: value)
    sub = p.add_subparsers(dest="command", required=True)

    msm = sub.add_parser("msm", help="build or sample a lattice Markov model")
    msm_sub = msm.add_subparsers(dest="action", required=True)
    b = msm_sub.add_parser("build", parents=[common])
    b.add_argument("--potential", choices=["beltway", "torus-surrogate"], default="beltway")
    b.add_argument("--nr", type=int, default=20)
    b.add_argument("--ntheta", type=int, default=200)
    b.add_argument("--n", type=int, default=50, help="torus lattice side")
    b.add_argument("--barrier-phi", type=float, default=5.0)
    b.add_argument("--barrier-psi", type=float, default=2.5)
    b.add_argument("--convention", type=int, choices=[4, 8], default=4)
    b.add_argument("--out", default="model.bin")
    b.set_defaults(func=cmd_msm_build)
    s = msm_sub.add_parser("sample", parents=[common])
    s.add_argument("--model", required=True)
    s.add_argument("--steps", type=int, default=5_000_000)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--out", default="traj.bin")
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_msm_sample)

    sp = sub.add_parser("spectrum", parents=[common], help="leading eigenpairs of a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("-k", type=int, default=6)
    sp.add_argument("--method", choices=["auto", "dense", "lanczos"], default="auto")
    sp.add_argument("--out", default="modes.json")
    sp.set_defaults(func=cmd_spectrum)

    f = sub.add_parser("featurize", parents=[common], help="trajectory to feature file")
    f.add_argument("--traj", required=True)
    f.add_argument("--model", default=None, help="take the grid from this model file")
    f.add_argument("--grid", default=None, help="beltway[:NRxNTHETA] or torus[:N]")
    f.add_argument("--ring", choices=["slow-on-radius", "fast-on-radius"], default=None)
    f.add_argument("--r0", type=float, default=1.0)
    f.add_argument("--dr", type=float, default=0.02)
    f.add_argument("--whiten", action="store_true")
    f.add_argument("--out", default="features.bin")
    f.add_argument("--csv", default=None)
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", parents=[common], help="train an encoder")
    t.add_argument("objective", choices=["tae", "srv", "mtae", "vde"])
    t.add_argument("--features", required=True)
    t.add_argument("--lag", type=int, default=3000)
    t.add_argument("--stride", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=1024)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--hidden", type=int, default=50)
    t.add_argument("--lambda", dest="lam", type=float, default=0.5, help="VDE reconstruction weight")
    t.add_argument("--out", default="run.json")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", parents=[common], help="loss decomposition of encodings")
    a.add_argument("--features", required=True)
    a.add_argument("--traj", required=True)
    a.add_argument("--model", default=None)
    a.add_argument("--grid", default=None)
    a.add_argument("--encoding", action="append", default=[], help="e.g. by-theta-bin:200 (repeatable)")
    a.add_argument("--run", action="append", default=[], help="run file whose latent is quantile-binned")
    a.add_argument("--bins", type=int, default=200)
    a.add_argument("--lag", type=int, default=3000)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("experiment", help="run a full experiment")
    e_sub = e.add_subparsers(dest="action", required=True)
    r = e_sub.add_parser("run", parents=[common])
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", default=None)
    src.add_argument("--config", default=None, help="INI experiment file")
    r.set_defaults(func=cmd_experiment_run)

    c = sub.add_parser("compare", parents=[common], help="overlap of learned latents with oracle modes")
    c.add_argument("runs", nargs="+")
    c.add_argument("--features", required=True)
    c.add_argument("--traj", required=True)
    c.add_argument("--modes", required=True, help="modes.json written by 'spectrum'")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.func is not cmd_experiment_run and args.seed is None:
        args.seed = 0
    try:
        status = args.func(args)
    except Exception as err:  # report, do not dump a traceback on users
        if args.verbose:
            raise
        print(f"slowmode: error: {err}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
