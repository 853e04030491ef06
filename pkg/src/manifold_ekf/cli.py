"""Command-line simulator for the two-direction attitude experiment.

Configuration is a single JSON document; flags override file fields, which
override the built-in defaults::

    {
      "scenario": {
        "dt": 0.02, "duration": 30.0, "seed": 0,
        "omega_profile": {"type": "oscillatory", "amplitude": 0.1},
        "gyro_var": 0.02,
        "meas_cov_ambient": [[0.01, 0, 0], [0, 0.03, 0], [0, 0, 0.05]],
        "d1": [0, 1, 0], "d2": [0.7071067811865476, 0, 0.7071067811865476],
        "init_cov": [[2.25, 0, 0], [0, 2.25, 0], [0, 0, 2.25]],
        "process_floor": 1e-12
      },
      "variants": [{"name": "baseline", "iterations": 0, "geometric_reset": false}],
      "runs": 1,
      "output_path": null
    }

``omega_profile`` may also be ``{"type": "constant", "omega": [x, y, z]}``.
A variant's ``geometric_reset`` defaults to false for ``baseline`` and true
otherwise. Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 at
least one run diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .attitude import (
    ConstantOmega,
    MonteCarloResult,
    OscillatoryOmega,
    ScenarioConfig,
    SimRecord,
    monte_carlo,
    summarize,
)
from .exceptions import ConfigError
from .filter import UpdateKind, UpdateVariant

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

CSV_HEADER = ("t", "variant", "run_id", "attitude_error_rad", "energy")
DEFAULT_ITERATIONS = 5

SCENARIO_KEYS = (
    "dt",
    "duration",
    "seed",
    "omega_profile",
    "gyro_var",
    "meas_cov_ambient",
    "d1",
    "d2",
    "init_cov",
    "process_floor",
)
TOP_KEYS = ("scenario", "variants", "runs", "output_path")
VARIANT_KEYS = ("name", "iterations", "geometric_reset")
VARIANT_NAMES = tuple(k.value for k in UpdateKind)
_VARIANT_RE = re.compile(r"([a-z_]+?)(?:[:_](\d+))?([+-]reset)?")


@dataclass
class RunConfigFile:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    variants: List[UpdateVariant] = field(
        default_factory=lambda: [
            UpdateVariant.baseline(),
            UpdateVariant.measurement(),
            UpdateVariant.naive_posterior(),
        ]
    )
    runs: int = 1
    output_path: Optional[str] = None

    def to_dict(self) -> dict:
        sc = self.scenario
        prof = sc.omega_profile
        if isinstance(prof, OscillatoryOmega):
            profile = {"type": "oscillatory", "amplitude": prof.amplitude}
        elif isinstance(prof, ConstantOmega):
            profile = {"type": "constant", "omega": [float(w) for w in prof.omega]}
        else:
            raise ConfigError("custom omega profiles cannot be serialized", "scenario.omega_profile")
        return {
            "scenario": {
                "dt": sc.dt,
                "duration": sc.duration,
                "seed": sc.seed,
                "omega_profile": profile,
                "gyro_var": sc.gyro_var,
                "meas_cov_ambient": sc.meas_cov_ambient.tolist(),
                "d1": sc.d1.tolist(),
                "d2": sc.d2.tolist(),
                "init_cov": sc.init_cov.tolist(),
                "process_floor": sc.process_floor,
            },
            "variants": [
                {"name": v.kind.value, "iterations": v.iterations, "geometric_reset": v.geometric_reset}
                for v in self.variants
            ],
            "runs": self.runs,
            "output_path": self.output_path,
        }


def _key_line(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    match = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, match.start()) + 1 if match else None


class _Resolver:
    """Validates one JSON document, reporting the field and source line on errors."""

    def __init__(self, text: Optional[str]):
        self.text = text

    def error(self, message: str, path: str) -> ConfigError:
        return ConfigError(message, path, _key_line(self.text, path.split(".")[-1].split("[")[0]))

    def check_keys(self, obj, allowed, path: str) -> dict:
        if not isinstance(obj, dict):
            raise self.error("expected a JSON object", path or "<root>")
        for key in obj:
            if key not in allowed:
                raise self.error("unknown key", f"{path}.{key}" if path else key)
        return obj

    def number(self, value, path: str, *, minimum=None, strict=False) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error("expected a number", path)
        value = float(value)
        if not math.isfinite(value):
            raise self.error("must be finite", path)
        if minimum is not None and (value < minimum or (strict and value == minimum)):
            op = ">" if strict else ">="
            raise self.error(f"must be {op} {minimum:g}, got {value:g}", path)
        return value

    def integer(self, value, path: str, minimum: int) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error("expected an integer", path)
        if value < minimum:
            raise self.error(f"must be >= {minimum}, got {value}", path)
        return value

    def vector(self, value, path: str, n: int) -> np.ndarray:
        if not isinstance(value, list) or len(value) != n:
            raise self.error(f"expected a list of {n} numbers", path)
        return np.array([self.number(v, f"{path}[{i}]") for i, v in enumerate(value)])

    def matrix(self, value, path: str, *, definite: bool) -> np.ndarray:
        if not isinstance(value, list) or len(value) != 3:
            raise self.error("expected a 3x3 matrix (list of 3 rows)", path)
        mat = np.array([self.vector(row, f"{path}[{i}]", 3) for i, row in enumerate(value)])
        if np.any(np.diag(mat) < 0):
            raise self.error("diagonal entries must be non-negative", path)
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise self.error("matrix must be symmetric", path)
        low = np.linalg.eigvalsh(mat).min()
        if (definite and low <= 0) or low < -1e-12:
            kind = "positive-definite" if definite else "positive semi-definite"
            raise self.error(f"matrix must be {kind}", path)
        return mat

    def profile(self, value, path: str):
        obj = self.check_keys(value, ("type", "amplitude", "omega"), path)
        kind = obj.get("type", "oscillatory")
        if kind == "oscillatory":
            if "omega" in obj:
                raise self.error("unknown key for an oscillatory profile", f"{path}.omega")
            return OscillatoryOmega(self.number(obj.get("amplitude", 0.1), f"{path}.amplitude"))
        if kind == "constant":
            if "amplitude" in obj:
                raise self.error("unknown key for a constant profile", f"{path}.amplitude")
            omega = self.vector(obj.get("omega", [0.0, 0.0, 0.0]), f"{path}.omega", 3)
            return ConstantOmega(tuple(float(w) for w in omega))
        raise self.error("type must be 'oscillatory' or 'constant'", f"{path}.type")

    def scenario(self, obj) -> ScenarioConfig:
        obj = self.check_keys(obj, SCENARIO_KEYS, "scenario")
        kw = {}
        p = "scenario."
        if "dt" in obj:
            kw["dt"] = self.number(obj["dt"], p + "dt", minimum=0.0, strict=True)
        if "duration" in obj:
            kw["duration"] = self.number(obj["duration"], p + "duration", minimum=0.0)
        if "seed" in obj:
            kw["seed"] = self.integer(obj["seed"], p + "seed", 0)
        if "omega_profile" in obj:
            kw["omega_profile"] = self.profile(obj["omega_profile"], p + "omega_profile")
        if "gyro_var" in obj:
            kw["gyro_var"] = self.number(obj["gyro_var"], p + "gyro_var", minimum=0.0)
        if "process_floor" in obj:
            kw["process_floor"] = self.number(obj["process_floor"], p + "process_floor", minimum=0.0)
        if "meas_cov_ambient" in obj:
            kw["meas_cov_ambient"] = self.matrix(
                obj["meas_cov_ambient"], p + "meas_cov_ambient", definite=False
            )
        if "init_cov" in obj:
            kw["init_cov"] = self.matrix(obj["init_cov"], p + "init_cov", definite=True)
        for name in ("d1", "d2"):
            if name in obj:
                d = self.vector(obj[name], p + name, 3)
                if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                    raise self.error("direction must be a unit vector", p + name)
                kw[name] = d
        try:
            return ScenarioConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc), "scenario") from exc

    def variant(self, obj, path: str, allow_true_output: bool) -> UpdateVariant:
        obj = self.check_keys(obj, VARIANT_KEYS, path)
        if "name" not in obj:
            raise self.error("missing variant name", f"{path}.name")
        name = obj["name"]
        if name not in VARIANT_NAMES:
            raise self.error(f"unknown variant {name!r}; choose from {', '.join(VARIANT_NAMES)}", f"{path}.name")
        kind = UpdateKind(name)
        iterations = 0
        if "iterations" in obj:
            iterations = self.integer(obj["iterations"], f"{path}.iterations", 0)
            if kind is not UpdateKind.ITERATED and iterations:
                raise self.error("only the iterated variant takes an iteration count", f"{path}.iterations")
        elif kind is UpdateKind.ITERATED:
            iterations = DEFAULT_ITERATIONS
        reset = obj.get("geometric_reset", kind is not UpdateKind.BASELINE)
        if not isinstance(reset, bool):
            raise self.error("expected true or false", f"{path}.geometric_reset")
        if kind is UpdateKind.TRUE_OUTPUT and not allow_true_output:
            raise self.error(
                "the true_output variant is a simulation diagnostic; pass --allow-true-output",
                f"{path}.name",
            )
        return UpdateVariant(kind, iterations, reset)

    def document(self, obj, allow_true_output: bool) -> RunConfigFile:
        obj = self.check_keys(obj, TOP_KEYS, "")
        cfg = RunConfigFile()
        if "scenario" in obj:
            cfg.scenario = self.scenario(obj["scenario"])
        if "variants" in obj:
            items = obj["variants"]
            if not isinstance(items, list) or not items:
                raise self.error("expected a non-empty list", "variants")
            cfg.variants = [
                self.variant(v, f"variants[{i}]", allow_true_output) for i, v in enumerate(items)
            ]
        if "runs" in obj:
            cfg.runs = self.integer(obj["runs"], "runs", 1)
        if "output_path" in obj:
            out = obj["output_path"]
            if out is not None and (not isinstance(out, str) or not out):
                raise self.error("expected a non-empty string or null", "output_path")
            cfg.output_path = out
        return cfg


def parse_variant_spec(spec: str, iterations: Optional[int] = None, allow_true_output: bool = False):
    """Parse a comma-separated list such as ``baseline,iterated:15,measurement-reset``.

    ``iterated`` without an explicit ``:N`` uses ``iterations`` (default 5).
    A trailing ``+reset``/``-reset`` overrides the variant's default reset.
    """
    out = []
    for item in spec.split(","):
        item = item.strip()
        match = _VARIANT_RE.fullmatch(item)
        if match is None:
            raise ConfigError(f"cannot parse variant {item!r}", "--variant")
        name, count, reset = match.groups()
        obj = {"name": name}
        if count is not None:
            obj["iterations"] = int(count)
        elif name == "iterated" and iterations is not None:
            obj["iterations"] = iterations
        if reset is not None:
            obj["geometric_reset"] = reset == "+reset"
        out.append(_Resolver(None).variant(obj, "--variant", allow_true_output))
    return out


def parse_config(
    source=None, overrides: Optional[dict] = None, allow_true_output: bool = False
) -> RunConfigFile:
    """Resolve a run configuration.

    ``source`` is a path, a JSON string starting with ``{`` or a dict; None
    means an empty document. ``overrides`` is a document merged on top
    (scenario fields key by key).
    """
    text = None
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = source
    else:
        if isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            path = Path(source)
            try:
                text = path.read_text()
            except OSError as exc:
                raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if overrides:
        if not isinstance(doc, dict):
            raise ConfigError("expected a JSON object", "<root>")
        doc = dict(doc)
        for key, value in overrides.items():
            if key == "scenario" and isinstance(doc.get("scenario"), dict):
                doc["scenario"] = {**doc["scenario"], **value}
            else:
                doc[key] = value
    return _Resolver(text).document(doc, allow_true_output)


def _fmt(x: float) -> str:
    return "%.17g" % x


def sorted_records(records: Iterable[SimRecord]) -> List[SimRecord]:
    return sorted(records, key=lambda r: (r.variant, r.run_id, r.t))


def emit_csv(records: Iterable[SimRecord], path) -> None:
    """Write records sorted by ``(variant, run_id, t)`` with round-trippable floats."""
    rows = sorted_records(records)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in rows:
                writer.writerow(
                    (_fmt(r.t), r.variant, r.run_id, _fmt(r.attitude_error), _fmt(r.energy))
                )
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_summary(result: MonteCarloResult, as_json: bool = False, stream=None) -> str:
    """Per-variant transient/steady errors, mean energy and failures."""
    rows = summarize(result)
    if as_json:
        text = json.dumps({"runs": len(result.runs), "variants": rows}, indent=2)
    else:
        width = max(len("variant"), *(len(r["variant"]) for r in rows))
        lines = [
            f"{'variant':<{width}}  {'transient':>12}  {'steady':>12}  {'energy':>12}  failures"
        ]
        for r in rows:
            lines.append(
                f"{r['variant']:<{width}}  {r['transient_error']:12.6g}  "
                f"{r['steady_error']:12.6g}  {r['mean_energy']:12.6g}  {r['failures']}"
            )
        text = "\n".join(lines)
    print(text, file=stream or sys.stdout)
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="manifold-ekf",
        description="Monte Carlo attitude estimation with geometric EKF variants.",
    )
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument(
        "--variant",
        metavar="NAME[,NAME...]",
        help=f"variants to run: {', '.join(VARIANT_NAMES)}; 'iterated:N' sets a count",
    )
    p.add_argument("--iters", type=int, metavar="N", help="iteration count for 'iterated'")
    p.add_argument("--runs", type=int, metavar="N", help="number of paired runs")
    p.add_argument("--seed", type=int, metavar="N", help="base seed")
    p.add_argument("--duration", type=float, metavar="S", help="simulated seconds")
    p.add_argument("--out", metavar="PATH", help="CSV output path")
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.add_argument(
        "--allow-true-output",
        action="store_true",
        help="enable the diagnostics-only true_output variant",
    )
    p.add_argument(
        "--dump-config", action="store_true", help="print the resolved configuration and exit"
    )
    return p


def resolve(args: argparse.Namespace) -> RunConfigFile:
    if args.iters is not None and args.iters < 0:
        raise ConfigError(f"must be >= 0, got {args.iters}", "--iters")
    overrides: dict = {}
    scenario = {}
    if args.seed is not None:
        scenario["seed"] = args.seed
    if args.duration is not None:
        scenario["duration"] = args.duration
    if scenario:
        overrides["scenario"] = scenario
    if args.runs is not None:
        overrides["runs"] = args.runs
    if args.out is not None:
        overrides["output_path"] = args.out
    cfg = parse_config(args.config, overrides, args.allow_true_output)
    if args.variant is not None:
        cfg.variants = parse_variant_spec(args.variant, args.iters, args.allow_true_output)
    elif args.iters is not None:
        cfg.variants = [
            UpdateVariant(v.kind, args.iters, v.geometric_reset)
            if v.kind is UpdateKind.ITERATED
            else v
            for v in cfg.variants
        ]
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK

    result = monte_carlo(cfg.scenario, cfg.variants, cfg.runs)
    if cfg.output_path is not None:
        try:
            emit_csv(result.records(), cfg.output_path)
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
    emit_summary(result, args.json)
    if any(result.failures):
        for fails in result.failures:
            for msg in fails:
                print(f"diverged: {msg}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
