"""Command-line entry point: ``sbldoa {simulate,solve,sweep,gram}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.

Environment variables ``SBLDOA_CONFIG``, ``SBLDOA_OUT``, ``SBLDOA_SEED`` and
``SBLDOA_RUNS`` supply defaults for the matching flags; ``SBLDOA_SET`` holds
extra ``KEY=VALUE`` overrides separated by ``;`` and is applied before any
``--set`` flag.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .baselines import SearchBudgetExceeded, cbf_spectrum, exhaustive_search, music_spectrum, mvdr_spectrum
from .core import NumericalBreakdown, SblProblem, find_local_peaks, run_sbl_cc, run_sbl_mc
from .experiments import ArraySpec, ExperimentConfig, MethodSpec, run_experiment
from .model import ConfigError, SceneSpec, frequency_dictionaries, synthesize_frequencies

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
ENV_PREFIX = "SBLDOA_"

_SCENE_KEYS = set(SceneSpec.__dataclass_fields__)
_ARRAY_KEYS = set(ArraySpec.__dataclass_fields__)
_TOP_KEYS = {"scene", "array", "methods", "runs", "seed", "sweep", "delta0", "batch_size",
             "near_tolerance_deg"}


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config_path: Optional[Path]
    output_dir: Path
    seed: Optional[int]
    overrides: list[tuple[str, object]] = field(default_factory=list)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> tuple[str, object]:
    key, sep, value = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
    return key, _parse_value(value.strip())


def _normalise(doc: dict) -> dict:
    """Experiment-shaped dict; a bare scene becomes ``{"scene": ...}``."""
    if not isinstance(doc, dict):
        raise ConfigError("config", "expected a JSON object")
    if "scene" in doc:
        return dict(doc)
    scene = {k: v for k, v in doc.items() if k not in _TOP_KEYS}
    rest = {k: v for k, v in doc.items() if k in _TOP_KEYS}
    return {"scene": scene, **rest}


def apply_overrides(doc: dict, overrides: Sequence[tuple[str, object]]) -> dict:
    """Set dotted keys; bare scene keys such as ``snr_dB`` resolve into ``scene``."""
    doc = json.loads(json.dumps(doc))
    for key, value in overrides:
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in _SCENE_KEYS and parts[0] not in _TOP_KEYS:
            parts = ["scene", parts[0]]
        head = parts[0]
        valid = (
            (len(parts) == 1 and head in _TOP_KEYS and head not in ("scene", "array"))
            or (len(parts) == 2 and head == "scene" and parts[1] in _SCENE_KEYS)
            or (len(parts) == 2 and head == "array" and parts[1] in _ARRAY_KEYS)
            or (len(parts) == 2 and head == "sweep" and parts[1] in ("parameter", "values"))
        )
        if not valid:
            raise ConfigError(key, "unknown override key")
        node = doc
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return doc


def load_config(manifest: RunManifest, stored: Optional[dict] = None) -> ExperimentConfig:
    if manifest.config_path is not None:
        try:
            text = Path(manifest.config_path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {manifest.config_path}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    elif stored is not None:
        doc = stored
    else:
        raise ConfigError("config", "no --config given")
    doc = apply_overrides(_normalise(doc), manifest.overrides)
    if manifest.seed is not None:
        doc["seed"] = manifest.seed
    return ExperimentConfig.from_dict(doc)


# commands

def cmd_simulate(manifest: RunManifest, args) -> int:
    config = load_config(manifest)
    dicts = frequency_dictionaries(config.array.dictionary(), config.scene.frequencies)
    snaps = synthesize_frequencies(config.scene, dicts, config.seed, run=args.run,
                                   delta0=config.delta0)
    doc = config.to_dict()
    prov = io.provenance(doc, config.seed)
    # the config travels with the data so ``solve`` can run without --config
    path = io.write_snapshots(manifest.output_dir / "snapshots.json", snaps,
                              config.scene.frequencies, prov, extra={"config": doc, "run": args.run})
    print(f"wrote {path}")
    return EXIT_OK


def _sbl_spectra(method: MethodSpec, dicts, snaps, k):
    unc = method.uncertainty()
    opts = method.solver_options(k)
    if method.multi_dictionary:
        problem = SblProblem.shared(dicts, snaps, unc)
    else:
        problem = SblProblem.single(dicts[0], snaps[0], unc)
    result = run_sbl_mc(problem, opts) if method.name == "sbl-mc" else run_sbl_cc(problem, opts)
    extra = []
    if method.name == "sbl-mc" and problem.n_dictionaries > 1:
        extra = [(f"_f{f}", r.gamma) for f, r in enumerate(result.per_dictionary)]
    return result.gamma, result.to_dict(), extra


def _classical(method: MethodSpec, dicts, snaps, k):
    S = snaps[0].sample_covariance
    if method.name == "cbf":
        values = cbf_spectrum(S, dicts[0]).values
    elif method.name == "mvdr":
        values = mvdr_spectrum(S, dicts[0], method.params.get("diagonal_load")).values
    elif method.name == "music":
        values = music_spectrum(S, dicts[0], k).values
    else:
        Y = snaps[0].data
        try:
            support = list(exhaustive_search(Y, dicts[0], k, **method.params))
        except SearchBudgetExceeded as exc:
            raise ConfigError("methods.exhaustive.budget", str(exc)) from None
        values = np.zeros(dicts[0].size)
        values[support] = np.mean(np.abs(np.linalg.pinv(dicts[0].matrix[:, support]) @ Y) ** 2, axis=1)
        return values, {"support": support}, []
    return values, {"support": find_local_peaks(values, k)}, []


def cmd_solve(manifest: RunManifest, args) -> int:
    try:
        snaps, freqs, doc = io.read_snapshots(args.input)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError("input", str(exc)) from None
    if args.method:
        manifest.overrides.append(("methods", list(args.method)))
    config = load_config(manifest, stored=doc.get("config"))
    base = config.array.dictionary()
    if snaps[0].sensors != base.sensors:
        raise ConfigError("array.sensors", f"snapshots have {snaps[0].sensors} sensors, config has {base.sensors}")
    dicts = frequency_dictionaries(base, freqs)
    k = len(config.scene.sources)
    prov = io.provenance(config.to_dict(), config.seed)
    for method in config.methods:
        if method.is_sbl:
            values, result, extra = _sbl_spectra(method, dicts, snaps, k)
        else:
            values, result, extra = _classical(method, dicts, snaps, k)
        result = dict(result)
        result["method"] = method.name
        result["support_angles_deg"] = [float(base.angles[i]) for i in result["support"]]
        result.pop("gamma", None)
        io.write_spectrum_csv(manifest.output_dir / f"{method.label}.csv", base.angles, values, prov)
        for suffix, g in extra:
            io.write_spectrum_csv(manifest.output_dir / f"{method.label}{suffix}.csv", base.angles, g, prov)
        io.write_json(manifest.output_dir / f"{method.label}.json", result, prov)
        print(f"{method.label}: support {result['support_angles_deg']}")
    return EXIT_OK


def cmd_sweep(manifest: RunManifest, args) -> int:
    if args.runs is not None:
        manifest.overrides.append(("runs", args.runs))
    config = load_config(manifest)
    table = run_experiment(config)
    doc = config.to_dict()
    prov = io.provenance(doc, config.seed)
    out = manifest.output_dir
    io.write_json(out / "metrics.json", {"config": doc, **table.to_dict()}, prov)
    io.write_table_csv(out / "metrics.csv", *io.metrics_rows(table), prov=prov)
    io.write_table_csv(out / "histogram.csv", *io.histogram_rows(table), prov=prov)
    for param, value in config.sweep_points():
        cells = [r for r in table.rows if r.sweep_value == value]
        label = "all" if param is None else f"{param}={value:g}"
        parts = [f"{r.method} rmse={r.rmse_weakest_deg:.4g} band={r.band_width:.4g} "
                 f"alias={r.aliased_mass_fraction:.4g} failures={r.failures}/{r.runs}" for r in cells]
        print(f"{label}: " + "; ".join(parts))
    if all(r.failures == r.runs for r in table.rows):
        raise CliFailure(EXIT_NUMERICAL, "every run failed")
    return EXIT_OK


def cmd_gram(manifest: RunManifest, args) -> int:
    config = load_config(manifest) if manifest.config_path else None
    array = config.array if config else ArraySpec()
    freqs = config.scene.frequencies if config else (1.0,)
    doc = config.to_dict() if config else {"array": array.to_dict()}
    prov = io.provenance(doc, manifest.seed)
    for f, d in enumerate(frequency_dictionaries(array.dictionary(), freqs)):
        labels = [f"{a:.10g}" for a in d.angles]
        io.write_matrix_csv(manifest.output_dir / f"dictionary_f{f}.csv", d.matrix.T, labels, prov)
        io.write_matrix_csv(manifest.output_dir / f"gram_f{f}.csv", d.gram(), labels, prov)
    print(f"wrote {len(freqs)} dictionary/gram pair(s) to {manifest.output_dir}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "sweep": cmd_sweep, "gram": cmd_gram}


def _env(name: str, cast=str):
    value = os.environ.get(ENV_PREFIX + name)
    if value is None or value == "":
        return None
    try:
        return cast(value)
    except ValueError:
        raise ConfigError(ENV_PREFIX + name, f"cannot parse {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbldoa", description="Sparse Bayesian DoA estimation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config (scene or experiment)")
    common.add_argument("--out", type=Path, help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="random seed, overrides the config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. scene.snr_dB=5 (repeatable)")
    common.add_argument("--runs", type=int, help="Monte Carlo runs (sweep)")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="synthesize snapshots")
    sim.add_argument("--run", type=int, default=0, help="run index used to key the generators")
    solve = sub.add_parser("solve", parents=[common], help="estimate spectra from snapshots")
    solve.add_argument("--input", type=Path, required=True, help="snapshots JSON from simulate")
    solve.add_argument("--method", action="append", help="method name (repeatable)")
    sub.add_parser("sweep", parents=[common], help="Monte Carlo sweep")
    sub.add_parser("gram", parents=[common], help="write dictionary and Gram matrices")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = []
        env_set = _env("SET")
        if env_set:
            overrides += [parse_override(s) for s in env_set.split(";") if s.strip()]
        overrides += [parse_override(s) for s in args.set]
        if args.runs is None:
            args.runs = _env("RUNS", int)
        if args.runs is not None and args.runs < 1:
            raise ConfigError("runs", "must be >= 1")
        seed = args.seed if args.seed is not None else _env("SEED", int)
        config_path = args.config or _env("CONFIG", Path)
        out = args.out or _env("OUT", Path) or Path(".")
        manifest = RunManifest(args.command, config_path, Path(out), seed, overrides)
        return COMMANDS[args.command](manifest, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalBreakdown as exc:
        it = "unknown" if exc.iteration is None else exc.iteration
        print(f"numerical failure at iteration {it}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"config error: output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
