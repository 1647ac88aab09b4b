"""Command line entry point: ``flowrefine <command> [options]``.

Every command reads an optional ``key = value`` config file (``--config``),
applies flag overrides, rejects unknown keys and writes the resolved settings
to ``resolved_config.txt`` inside the output directory. Feeding that snapshot
back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, diagnostics, metrics, pipeline
from .interpolant import Schedule, ScheduleKind, wh_rmsd_quantile
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint

log = logging.getLogger("flowrefine")

OUT_ENV = "FLOWREFINE_OUT"
SNAPSHOT = "resolved_config.txt"

EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


def _as_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() == "none" else float(text)


GLOBAL_KEYS = {"seed": int, "jobs": int, "out": str}

COMMAND_KEYS: dict[str, dict] = {
    "synth": {
        "n_molecules": int, "min_length": int, "max_length": int, "torsion_profile": _float_list,
        "bond_length": float, "bond_angle": float, "jitter": float, "max_rotatable": int, "id_prefix": str,
    },
    "train": {
        "dataset": str, "kind": str, "sigma": float, "epochs": int, "batch_size": int, "lr": float,
        "lr_final": _opt_float, "stochastic": _as_bool, "align_base": _as_bool, "hidden": int, "layers": int,
        "n_rbf": int, "cutoff": float,
    },
    "generate": {"checkpoint": str, "dataset": str, "sigma": float, "steps": int, "per_reference": int},
    "refine": {"checkpoint": str, "manifest": str, "steps": int, "trajectories": _as_bool},
    "eval": {"manifest": str, "before": str, "delta": float, "tau": _float_list, "label": str},
    "diagnose": {
        "manifest": str, "checkpoint": str, "radius": _float_list, "sigma": float, "steps": int,
        "n_samples": int, "times": _float_list,
    },
    "bound": {"n": int, "sigma_star": float, "qk": float},
}

DEFAULTS: dict[str, dict] = {
    "synth": {"n_molecules": 200, "min_length": 4, "max_length": 8, "torsion_profile": (-60.0, 60.0, 180.0),
              "bond_length": 1.5, "bond_angle": 112.0, "jitter": 0.05, "max_rotatable": 2, "id_prefix": "mol"},
    "train": {"dataset": "", "kind": "refiner", "sigma": 1.0, "epochs": 100, "batch_size": 64, "lr": 2e-3,
              "lr_final": None, "stochastic": False, "align_base": True, "hidden": 64, "layers": 3, "n_rbf": 16,
              "cutoff": 5.0},
    "generate": {"checkpoint": "", "dataset": "", "sigma": 0.0, "steps": 20, "per_reference": 2},
    "refine": {"checkpoint": "", "manifest": "", "steps": 20, "trajectories": True},
    "eval": {"manifest": "", "before": "", "delta": 0.75, "tau": (0.02, 0.05, 0.1, 0.2, 0.5), "label": ""},
    "diagnose": {"manifest": "", "checkpoint": "", "radius": (2.5, 5.0), "sigma": 1.0, "steps": 20,
                 "n_samples": 200, "times": (0.0, 0.25, 0.5, 0.75, 1.0)},
    "bound": {"n": 10, "sigma_star": 1.0, "qk": 1.96},
}


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, command: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    allowed = {**GLOBAL_KEYS, **COMMAND_KEYS[command]}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "command":
            if value != command:
                raise ConfigError(f"{source}:{lineno}: snapshot belongs to command {value!r}, not {command!r}")
            continue
        if key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} for command {command!r}")
        try:
            out[key] = allowed[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def resolve_config(command: str, file_values: dict, overrides: dict) -> dict:
    allowed = {**GLOBAL_KEYS, **COMMAND_KEYS[command]}
    cfg = {"seed": 0, "jobs": 1, "out": os.environ.get(OUT_ENV, "runs")}
    cfg.update(DEFAULTS[command])
    cfg.update(file_values)
    for key, value in overrides.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} for command {command!r}")
        if isinstance(value, str) and allowed[key] is not str:
            try:
                value = allowed[key](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        cfg[key] = value
    return cfg


def snapshot_text(command: str, cfg: dict) -> str:
    lines = [f"command = {command}"] + [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg) if k != "out"]
    return "\n".join(lines) + "\n"


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _abs_from(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


# --- commands ------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> Path:
    spec = data.ToyDatasetSpec(
        n_molecules=cfg["n_molecules"], min_length=cfg["min_length"], max_length=cfg["max_length"],
        torsion_profile=cfg["torsion_profile"], bond_length=cfg["bond_length"], bond_angle=cfg["bond_angle"],
        jitter=cfg["jitter"], seed=cfg["seed"], max_rotatable=cfg["max_rotatable"], id_prefix=cfg["id_prefix"],
    )
    records = data.synth_dataset(spec)
    manifest = data.write_dataset(_out_dir(cfg), records)
    print(f"wrote {len(records)} molecules to {manifest} (digest {data.dataset_digest(records)[:16]})")
    return manifest


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def cmd_train(cfg: dict) -> Path:
    records, _ = data.read_ensemble_manifest(_require(cfg, "dataset"))
    if cfg["kind"] not in ("refiner", "generator"):
        raise ConfigError("kind must be 'refiner' or 'generator'")
    kind = ScheduleKind.REFINER_LINEAR if cfg["kind"] == "refiner" else ScheduleKind.GENERATOR_GAUSSIAN
    mcfg = ModelConfig(n_layers=cfg["layers"], hidden=cfg["hidden"], n_rbf=cfg["n_rbf"], cutoff=cfg["cutoff"])
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(2)
    model = init_model(mcfg, np.random.default_rng(seeds[0]))
    tcfg = pipeline.TrainConfig(
        sigma=cfg["sigma"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], lr_final=cfg["lr_final"],
        seed=cfg["seed"], schedule=Schedule(kind, cfg["stochastic"]), align_base=cfg["align_base"],
    )
    model, history, _ = pipeline.train_flow(records, model, tcfg, np.random.default_rng(seeds[1]))
    out = _out_dir(cfg)
    ckpt = out / "model.npz"
    save_checkpoint(model, ckpt, {"kind": cfg["kind"], "sigma": cfg["sigma"], "epochs": cfg["epochs"]})
    with open(out / "loss.tsv", "w") as fh:
        fh.write("epoch\tloss\n")
        for k, v in enumerate(history):
            fh.write(f"{k}\t{v:.8f}\n")
    final = f"{history[-1]:.5f}" if history else "n/a"
    print(f"trained {cfg['kind']} for {cfg['epochs']} epochs, final loss {final}; checkpoint {ckpt}")
    return ckpt


def cmd_generate(cfg: dict) -> Path:
    model, meta = load_checkpoint(_require(cfg, "checkpoint"))
    sigma = cfg["sigma"] or float(meta.get("sigma", 1.0))
    records, _ = data.read_ensemble_manifest(_require(cfg, "dataset"))
    graphs = [rec.graph for rec in records for _ in range(cfg["per_reference"] * len(rec.references))]
    rng = np.random.default_rng(cfg["seed"])
    out_confs, _ = pipeline.generate_many(model, graphs, pipeline.SampleConfig(cfg["steps"]), sigma, rng)
    generated, pos = {}, 0
    for rec in records:
        k = cfg["per_reference"] * len(rec.references)
        generated[rec.id] = out_confs[pos : pos + k]
        pos += k
    manifest = data.write_dataset(_out_dir(cfg), records, generated)
    print(f"generated {len(out_confs)} conformers with {cfg['steps']} steps; manifest {manifest}")
    return manifest


def cmd_refine(cfg: dict) -> Path:
    model, _ = load_checkpoint(_require(cfg, "checkpoint"))
    records, ensembles = data.read_ensemble_manifest(_require(cfg, "manifest"))
    pairs = [(r, e) for r, e in zip(records, ensembles) if e.conformers]
    if not pairs:
        raise ValueError("manifest lists no upstream conformers to refine")
    scfg = pipeline.SampleConfig(cfg["steps"], capture_trajectory=cfg["trajectories"])
    refined = pipeline.pipeline_refine_ensemble([e for _, e in pairs], [r.graph for r, _ in pairs], model, scfg)
    out = _out_dir(cfg)
    manifest = data.write_dataset(out, records, {e.molecule_id: e.after for e in refined if e.after})
    if cfg["trajectories"]:
        pipeline.write_trajectory_dump(out / "trajectories.tsv", refined, {r.id: r.references for r in records})
    drift = [tr.centroid_drift for e in refined for tr in (e.trajectories or [])]
    if drift:
        log.info("max centroid drift %.4f A", max(drift))
    print(f"refined {sum(len(e.after) for e in refined)} conformers with {cfg['steps']} steps; manifest {manifest}")
    return manifest


def _matrices(records, ensembles, jobs: int) -> dict[str, np.ndarray]:
    pairs = [(rec, ens) for rec, ens in zip(records, ensembles) if ens.conformers]

    def one(pair):
        rec, ens = pair
        return rec.id, metrics.rmsd_matrix(ens.conformers, rec.references)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    return dict(results)


def cmd_eval(cfg: dict) -> metrics.EnsembleReport:
    records, ensembles = data.read_ensemble_manifest(_require(cfg, "manifest"))
    after = _matrices(records, ensembles, cfg["jobs"])
    if not after:
        raise data.XYZParseError(cfg["manifest"], 0, "manifest lists no generated conformers")
    report = metrics.ensemble_report(after, cfg["delta"], cfg["label"])
    out = _out_dir(cfg)
    metrics.write_report_tsv(out / "report.tsv", [report])
    metrics.write_per_molecule_tsv(out / "per_molecule.tsv", report)
    payload = {"report": report}
    if cfg["before"]:
        b_records, b_ensembles = data.read_ensemble_manifest(cfg["before"])
        before = _matrices(b_records, b_ensembles, cfg["jobs"])
        b_vals, a_vals = [], []
        for mol_id, mat in after.items():
            if mol_id not in before or before[mol_id].shape != mat.shape:
                raise ValueError(f"molecule {mol_id}: before/after ensembles are not paired one-to-one")
            b_vals.append(before[mol_id].min(axis=0))
            a_vals.append(mat.min(axis=0))
        rows = metrics.improvement_downgrade(np.concatenate(b_vals), np.concatenate(a_vals), cfg["tau"])
        metrics.write_irdr_tsv(out / "irdr.tsv", rows)
        payload["irdr"] = rows
    metrics.write_json(out / "report.json", payload)
    print(
        f"COV-R {report.cov_r.mean:.2f}/{report.cov_r.median:.2f}  AMR-R {report.amr_r.mean:.4f}/{report.amr_r.median:.4f}  "
        f"COV-P {report.cov_p.mean:.2f}/{report.cov_p.median:.2f}  AMR-P {report.amr_p.mean:.4f}/{report.amr_p.median:.4f}"
    )
    return report


def cmd_diagnose(cfg: dict) -> Path:
    records, ensembles = data.read_ensemble_manifest(_require(cfg, "manifest"))
    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg["seed"])
    confs = [r for rec in records for r in rec.references]
    with open(out / "degree_summary.tsv", "w") as fh:
        fh.write("radius\tt\tnoise\tmean_degree\tmedian_degree\n")
        for radius in cfg["radius"]:
            for t, noise, hist in diagnostics.degree_vs_time(confs, cfg["sigma"], radius, rng, cfg["times"], cfg["n_samples"]):
                fh.write(f"{radius:g}\t{t:g}\t{noise:g}\t{hist.mean:.6f}\t{hist.median:g}\n")
                diagnostics.write_histogram_tsv(out / f"degree_R{radius:g}_t{t:g}.tsv", hist, f"R={radius:g} t={t:g}")
    stds = diagnostics.pair_perturbation_stats(confs[0], cfg["sigma"], max(1000, cfg["n_samples"] * 50), rng)
    with open(out / "pair_perturbation.tsv", "w") as fh:
        fh.write(f"# sigma={cfg['sigma']:g} expected={np.sqrt(2.0) * cfg['sigma']:.6f}\npair\tstd\n")
        for k, s in enumerate(stds):
            fh.write(f"{k}\t{s:.6f}\n")
    if cfg["checkpoint"] and any(e.conformers for e in ensembles):
        model, _ = load_checkpoint(cfg["checkpoint"])
        scfg = pipeline.SampleConfig(cfg["steps"], capture_trajectory=True)
        pairs = [(r, e) for r, e in zip(records, ensembles) if e.conformers]
        refined = pipeline.pipeline_refine_ensemble([e for _, e in pairs], [r.graph for r, _ in pairs], model, scfg)
        trajs = [tr for e in refined for tr in e.trajectories]
        graphs = [rec.graph for (rec, _), e in zip(pairs, refined) for _ in e.trajectories]
        correct = diagnostics.velocity_histogram(trajs, "correct_t")
        randomized = diagnostics.velocity_histogram(trajs, "randomized_t", model, graphs, rng)
        diagnostics.write_histogram_tsv(out / "speed_correct_t.tsv", correct, "correct_t")
        diagnostics.write_histogram_tsv(out / "speed_randomized_t.tsv", randomized, "randomized_t")
        refs = {rec.id: rec.references for rec in records}
        traces = [
            (e.molecule_id, idx, diagnostics.rmsd_trace(tr, refs[e.molecule_id]))
            for e in refined for idx, tr in zip(e.indices, e.trajectories)
        ]
        diagnostics.write_trace_tsv(out / "rmsd_traces.tsv", traces)
    print(f"diagnostics written to {out}")
    return out


def cmd_bound(cfg: dict) -> float:
    value = wh_rmsd_quantile(cfg["n"], cfg["sigma_star"], cfg["qk"])
    print(f"{value:.2f}")
    return value


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "generate": cmd_generate, "refine": cmd_refine,
    "eval": cmd_eval, "diagnose": cmd_diagnose, "bound": cmd_bound,
}

# flag -> config key, per command
FLAG_KEYS = {
    "steps": "steps", "sigma": "sigma", "delta": "delta", "tau": "tau", "radius": "radius", "n": "n", "qk": "qk",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrefine", description="Flow-matching conformer refiner toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (e.g. a resolved_config.txt snapshot)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--deterministic", action="store_true", help="omit timestamps from run metadata")
        keys = COMMAND_KEYS[name]
        for flag, key in FLAG_KEYS.items():
            if key in keys:
                p.add_argument(f"--{flag}", dest=f"flag_{key}")
        if name == "bound":
            p.add_argument("--sigma-star", dest="flag_sigma_star")
        for key in ("dataset", "manifest", "checkpoint", "before", "kind", "epochs", "label"):
            if key in keys:
                p.add_argument(f"--{key}", dest=f"flag_{key}")
    return parser


def _overrides(args) -> dict:
    out = {}
    for k in ("seed", "jobs", "out"):
        v = getattr(args, k)
        if v is not None:
            out[k] = v
    for k, v in vars(args).items():
        if k.startswith("flag_") and v is not None:
            out[k[len("flag_"):]] = v
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _error_line(code: int, kind: str, exc: BaseException) -> None:
    message = str(exc).replace('"', "'").replace("\n", " ")
    print(f'flowrefine-error code={code} kind={kind} message="{message}"', file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FLOWREFINE_LOGLEVEL", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = {}
        if args.config:
            path = Path(args.config)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            file_values = parse_config_text(path.read_text(), args.command, str(path))
        cfg = resolve_config(args.command, file_values, _overrides(args))
        if args.command != "bound":
            out = _out_dir(cfg)
            (out / SNAPSHOT).write_text(snapshot_text(args.command, cfg))
            if not args.deterministic:
                (out / "run_info.txt").write_text(
                    f"started = {time.strftime('%Y-%m-%dT%H:%M:%S')}\npython = {platform.python_version()}\n"
                    f"numpy = {np.__version__}\n"
                )
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _error_line(EXIT_CONFIG, "config", exc)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError, KeyError) as exc:
        _error_line(EXIT_VALIDATION, "validation", exc)
        return EXIT_VALIDATION
    except FloatingPointError as exc:
        _error_line(EXIT_NUMERICAL, "numerical", exc)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
