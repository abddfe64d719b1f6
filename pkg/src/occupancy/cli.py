"""Command-line front end: reproducible CSV/JSON reports.

Subcommands
-----------
``verify``          exact per-level occupation times from the truncated
                    chain vs the closed form, plus stationary balance
                    checks (phase-type lifetimes only)
``simulate``        Monte Carlo occupation-time estimates vs the closed
                    form across lifetime distributions
``solve-w``         stage-weight fixed point for the size-capped
                    population process
``estimate``        birth-rate estimators from an observed occupation
                    time or extinction time
``counterexample``  batch-birth and age-varying-birth experiments that
                    break insensitivity
``tn-growth``       growth of the mean time below a population ceiling

Reports embed the fully resolved configuration (CSV: a leading
``# config {...}`` comment; JSON: a ``config`` object), so any report
can be reproduced byte-for-byte by re-running its embedded config.
Floats are printed with 9 significant digits.

Exit codes: 0 success, 1 tolerance breach, 2 invalid configuration,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import analysis, markov
from .lifetime import (
    BUILTIN_SAMPLERS,
    DeterministicLifetime,
    PhaseTypeSampler,
    PhaseTypeSpec,
    SpecValidationError,
    builtin_spec,
    make_sampler,
    spec_from_json,
)
from .simulate import (
    EXPERIMENT_COLUMNS,
    StoppingPolicy,
    counterexample_age_varying,
    counterexample_batch,
    default_policy,
    insensitivity_experiment,
    tn_growth_experiment,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

VERIFY_COLUMNS = (
    "record",
    "dist",
    "delta",
    "K",
    "value",
    "reference",
    "rel_err",
    "tolerance",
    "status",
)

SOLVE_W_COLUMNS = (
    "record",
    "dist",
    "delta",
    "component",
    "stage",
    "value",
    "residual",
    "method",
    "iterations",
)

ESTIMATE_COLUMNS = ("method", "input", "K", "regime", "delta_hat")

BALANCE_TOL = 1e-10


# ---------------------------------------------------------------------------
# Formatting and report emission
# ---------------------------------------------------------------------------


def _round9(value):
    """Round floats to 9 significant digits; leave other values alone."""
    if isinstance(value, float):
        return float(f"{value:.9g}")
    if isinstance(value, list):
        return [_round9(v) for v in value]
    if isinstance(value, tuple):
        return [_round9(v) for v in value]
    if isinstance(value, dict):
        return {k: _round9(v) for k, v in value.items()}
    return value


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.9g}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _csv_report(rows, columns, config) -> str:
    lines = ["# config " + json.dumps(config, sort_keys=True)]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_cell(row.get(c)) for c in columns))
    return "\n".join(lines) + "\n"


def _json_report(rows, columns, config, extra=None) -> str:
    doc = {"config": config, "columns": list(columns), "rows": _round9(rows)}
    if extra:
        doc.update(_round9(extra))
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _report(rows, columns, config, extra=None) -> None:
    # The destination is not a parameter of the computation, so it is not
    # embedded: reports written to different paths stay byte-identical.
    out = config["out"]
    config = {k: v for k, v in config.items() if k != "out"}
    if config["format"] == "json":
        _emit(_json_report(rows, columns, config, extra), out)
    else:
        _emit(_csv_report(rows, columns, config), out)


# ---------------------------------------------------------------------------
# Configuration resolution
# ---------------------------------------------------------------------------


def _resolve_config(args: argparse.Namespace, fields: tuple[str, ...],
                    required: tuple[str, ...] = ()) -> dict:
    """Collect the subcommand's parameters, then apply ``--config``.

    Values from the JSON config file override command-line flags; the
    returned dict is exactly what reports embed.  ``required`` settings
    must be present after both sources are merged -- they are plain
    optional flags to argparse so that a config file alone can supply
    them (replaying an embedded config needs no flags).
    """
    config = {"command": args.command}
    for f in fields:
        config[f] = getattr(args, f.replace("-", "_"))
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ValueError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ValueError("config file must hold a JSON object")
        for key, value in overrides.items():
            if key == "command":
                if value != config["command"]:
                    raise ValueError(
                        f"config command {value!r} does not match {config['command']!r}"
                    )
                continue
            if key not in config:
                raise ValueError(f"unknown config key {key!r} for {args.command}")
            config[key] = value
    for key in required:
        if config[key] is None:
            flag = "--" + key.replace("_", "-")
            raise ValueError(f"{flag} is required (as a flag or a config file entry)")
    return config


def _resolve_spec(dist: str) -> PhaseTypeSpec:
    """A phase-type spec from a built-in name or a JSON spec file."""
    if dist == "det1":
        raise ValueError(
            "this command requires a phase-type lifetime (a stage structure); "
            "det1 is deterministic -- use the `simulate` command for it"
        )
    if dist in BUILTIN_SAMPLERS:
        return builtin_spec(dist)
    path = Path(dist)
    if path.exists():
        return spec_from_json(path.read_text())
    return builtin_spec(dist)  # raises with the list of known names


def _resolve_sampler(dist: str):
    if dist in BUILTIN_SAMPLERS:
        return make_sampler(dist)
    path = Path(dist)
    if path.exists():
        return PhaseTypeSampler(spec_from_json(path.read_text()), name=path.stem)
    return make_sampler(dist)


def _policy_from_config(config: dict, delta: float) -> StoppingPolicy:
    if (
        config.get("pop_cap") is None
        and config.get("event_cap") is None
        and config.get("time_cap") is None
    ):
        return default_policy(delta)
    kwargs = {}
    if config.get("pop_cap") is not None:
        kwargs["population_cap"] = config["pop_cap"]
    if config.get("event_cap") is not None:
        kwargs["event_cap"] = config["event_cap"]
    if config.get("time_cap") is not None:
        kwargs["time_cap"] = config["time_cap"]
    return StoppingPolicy(**kwargs)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_verify(args) -> int:
    fields = ("dist", "delta", "kmax", "ntrunc", "tol", "seed", "workers", "out", "format")
    config = _resolve_config(args, fields, required=("dist", "delta"))
    spec = _resolve_spec(config["dist"])
    delta = float(config["delta"])
    k_max = int(config["kmax"])
    n_trunc = int(config["ntrunc"])
    tol = config["tol"]
    if tol is None:
        tol = 1e-8 if delta < 1.0 else 1e-3
    tol = float(tol)
    config["tol"] = tol

    exact = markov.expected_occupation_exact(spec, delta, k_max, n_trunc)
    rows = []
    worst = 0.0
    for k in range(1, k_max + 1):
        theory = analysis.expected_occupation(delta, k)
        rel = abs(exact[k - 1] - theory) / theory
        worst = max(worst, rel)
        rows.append(
            {
                "record": "occupation",
                "dist": config["dist"],
                "delta": delta,
                "K": k,
                "value": float(exact[k - 1]),
                "reference": theory,
                "rel_err": rel,
                "tolerance": tol,
                "status": "pass" if rel < tol else "FAIL",
            }
        )

    # Stationary balance checks of the closed forms on small chains.
    balance_rows = []
    if 0.0 < delta < 1.0:
        n_chain = min(n_trunc, 30)
        gen = markov.build_regeneration_generator(spec, delta, n_chain)
        pi = [markov.closed_form_pi_subcritical(spec, delta, s) for s in gen.space.states]
        total = math.fsum(pi)
        res = markov.balance_residuals(gen, [p / total for p in pi])
        balance_rows.append(("balance_regeneration", res))
    if delta > 0.0:
        n_level = min(8, max(2, k_max))
        w = markov.solve_w(spec, delta)
        gen = markov.build_population_process_generator(spec, delta, n_level, w)
        pi = [
            markov.closed_form_pi_supercritical(spec, delta, n_level, w, s)
            for s in gen.space.states
        ]
        res = markov.balance_residuals(gen, pi)
        balance_rows.append(("balance_population", res))
    for name, res in balance_rows:
        worst_ok = res < BALANCE_TOL
        rows.append(
            {
                "record": name,
                "dist": config["dist"],
                "delta": delta,
                "K": None,
                "value": res,
                "reference": 0.0,
                "rel_err": None,
                "tolerance": BALANCE_TOL,
                "status": "pass" if worst_ok else "FAIL",
            }
        )

    _report(rows, VERIFY_COLUMNS, config)
    if any(r["status"] == "FAIL" for r in rows):
        return EXIT_TOLERANCE
    return EXIT_OK


def _cmd_simulate(args) -> int:
    fields = (
        "dist",
        "delta",
        "kmax",
        "reps",
        "pop_cap",
        "event_cap",
        "time_cap",
        "seed",
        "workers",
        "out",
        "format",
    )
    config = _resolve_config(args, fields, required=("dist", "delta"))
    delta = float(config["delta"])
    names = [d.strip() for d in str(config["dist"]).split(",") if d.strip()]
    if not names:
        raise ValueError("at least one distribution name is required")
    samplers = [_resolve_sampler(n) for n in names]
    policy = _policy_from_config(config, delta)
    rows = insensitivity_experiment(
        delta,
        samplers,
        k_max=int(config["kmax"]),
        replicates=int(config["reps"]),
        seed=int(config["seed"]),
        policy=policy,
        workers=int(config["workers"]),
    )
    _report(rows, EXPERIMENT_COLUMNS, config)
    return EXIT_OK


def _cmd_solve_w(args) -> int:
    fields = ("dist", "delta", "seed", "workers", "out", "format")
    config = _resolve_config(args, fields, required=("dist", "delta"))
    spec = _resolve_spec(config["dist"])
    delta = float(config["delta"])
    w = markov.solve_w(spec, delta)
    rows = []
    for i, stage_values in enumerate(w.values):
        for j, value in enumerate(stage_values):
            rows.append(
                {
                    "record": "w",
                    "dist": config["dist"],
                    "delta": delta,
                    "component": i,
                    "stage": j,
                    "value": value,
                    "residual": w.residual,
                    "method": w.method,
                    "iterations": w.iterations,
                }
            )
    rows.append(
        {
            "record": "death_flow",
            "dist": config["dist"],
            "delta": delta,
            "component": None,
            "stage": None,
            "value": w.d_scalar,
            "residual": w.residual,
            "method": w.method,
            "iterations": w.iterations,
        }
    )
    _report(rows, SOLVE_W_COLUMNS, config)
    return EXIT_OK


def _cmd_estimate(args) -> int:
    fields = ("from_ak", "from_t", "k", "regime", "seed", "workers", "out", "format")
    config = _resolve_config(args, fields)
    if (config["from_ak"] is None) == (config["from_t"] is None):
        raise ValueError("exactly one of --from-ak and --from-t is required")
    rows = []
    if config["from_ak"] is not None:
        if config["k"] is None or config["regime"] is None:
            raise ValueError("--from-ak requires --k and --regime")
        regime = {
            "sub": analysis.Regime.SUBCRITICAL,
            "super": analysis.Regime.SUPERCRITICAL,
        }.get(config["regime"])
        if regime is None:
            raise ValueError(f"regime must be 'sub' or 'super', got {config['regime']!r}")
        delta_hat = analysis.estimate_delta_from_AK(
            float(config["from_ak"]), int(config["k"]), regime
        )
        rows.append(
            {
                "method": "from_ak",
                "input": float(config["from_ak"]),
                "K": int(config["k"]),
                "regime": config["regime"],
                "delta_hat": delta_hat,
            }
        )
    else:
        delta_hat = analysis.estimate_delta_from_T(float(config["from_t"]))
        rows.append(
            {
                "method": "from_t",
                "input": float(config["from_t"]),
                "K": None,
                "regime": None,
                "delta_hat": delta_hat,
            }
        )
    _report(rows, ESTIMATE_COLUMNS, config)
    return EXIT_OK


def _cmd_counterexample(args) -> int:
    fields = (
        "which",
        "delta",
        "reps",
        "batch_size",
        "kmax",
        "pop_cap",
        "seed",
        "workers",
        "out",
        "format",
    )
    config = _resolve_config(args, fields, required=("which", "delta"))
    which = config["which"]
    reps = int(config["reps"])
    seed = int(config["seed"])
    workers = int(config["workers"])
    rows = []
    if which == "batch":
        pop_cap = 64 if config["pop_cap"] is None else int(config["pop_cap"])
        out = counterexample_batch(
            float(config["delta"]),
            int(config["batch_size"]),
            replicates=reps,
            seed=seed,
            k_max=int(config["kmax"]),
            population_cap=pop_cap,
            workers=workers,
        )
        for name in ("det1", "exp1"):
            table = out[name]
            for idx in range(int(config["kmax"])):
                rows.append(
                    {
                        "experiment": "batch",
                        "delta": out["delta"],
                        "dist": name,
                        "K": idx + 1,
                        "estimate": table["estimate"][idx],
                        "stderr": table["stderr"][idx],
                        "theory": None,
                        "z_score": None,
                        "n_reps": reps,
                        "capped_frac": table["capped_frac"],
                        "seed": table["seed"],
                    }
                )
        for entry in out["per_k"]:
            rows.append(
                {
                    "experiment": "batch",
                    "delta": out["delta"],
                    "dist": "difference",
                    "K": entry["K"],
                    "estimate": entry["difference"],
                    "stderr": entry["pooled_se"],
                    "theory": None,
                    "z_score": entry["z_score"],
                    "n_reps": reps,
                    "capped_frac": None,
                    "seed": seed,
                }
            )
    elif which == "age-varying":
        pop_cap = 100 if config["pop_cap"] is None else int(config["pop_cap"])
        out = counterexample_age_varying(
            float(config["delta"]),
            replicates=reps,
            seed=seed,
            population_cap=pop_cap,
            workers=workers,
        )
        for name in ("front", "back"):
            rows.append(
                {
                    "experiment": "age_varying",
                    "delta": out["delta"],
                    "dist": name,
                    "K": 1,
                    "estimate": out[name]["estimate"],
                    "stderr": out[name]["stderr"],
                    "theory": None,
                    "z_score": None,
                    "n_reps": reps,
                    "capped_frac": out[name]["capped_frac"],
                    "seed": out[name]["seed"],
                }
            )
        rows.append(
            {
                "experiment": "age_varying",
                "delta": out["delta"],
                "dist": "difference",
                "K": 1,
                "estimate": out["difference"],
                "stderr": out["pooled_se"],
                "theory": None,
                "z_score": out["z_score"],
                "n_reps": reps,
                "capped_frac": None,
                "seed": seed,
            }
        )
    else:
        raise ValueError(f"unknown counterexample {which!r}")
    _report(rows, EXPERIMENT_COLUMNS, config)
    return EXIT_OK


def _cmd_tn_growth(args) -> int:
    fields = ("dist", "delta", "n_values", "reps", "seed", "workers", "out", "format")
    config = _resolve_config(args, fields, required=("delta",))
    raw = config["n_values"]
    if isinstance(raw, str):
        n_values = [int(v) for v in raw.split(",") if v.strip()]
    else:
        n_values = [int(v) for v in raw]
    out = tn_growth_experiment(
        float(config["delta"]),
        _resolve_sampler(str(config["dist"])),
        n_values,
        replicates=int(config["reps"]),
        seed=int(config["seed"]),
        workers=int(config["workers"]),
    )
    rows = []
    for n, mean, se, capped in zip(
        out["n_values"], out["means"], out["stderrs"], out["capped_fracs"]
    ):
        rows.append(
            {
                "experiment": "tn_growth",
                "delta": out["delta"],
                "dist": out["dist"],
                "K": n,
                "estimate": mean,
                "stderr": se,
                "theory": None,
                "z_score": None,
                "n_reps": out["n_reps"],
                "capped_frac": capped,
                "seed": out["seed"],
            }
        )
    rows.append(
        {
            "experiment": "tn_growth",
            "delta": out["delta"],
            "dist": "slope",
            "K": 0,
            "estimate": out["slope"],
            "stderr": out["slope_se"],
            "theory": out["theory_slope"],
            "z_score": out["z_score"],
            "n_reps": out["n_reps"],
            "capped_frac": None,
            "seed": out["seed"],
        }
    )
    _report(rows, EXPERIMENT_COLUMNS, config)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _default_workers() -> int:
    raw = os.environ.get("OCCUPANCY_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument(
        "--workers",
        type=int,
        default=_default_workers(),
        help="worker processes (default: OCCUPANCY_WORKERS or 1); "
        "results do not depend on this",
    )
    common.add_argument("--out", default=None, help="write the report to this path")
    common.add_argument(
        "--format", choices=("csv", "json"), default="csv", help="report format"
    )
    common.add_argument(
        "--config",
        default=None,
        help="JSON file whose keys override the command-line flags",
    )

    parser = argparse.ArgumentParser(
        prog="occupancy",
        description="Occupation times of splitting populations: exact "
        "chain computations, Monte Carlo, and estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "verify",
        parents=[common],
        help="exact occupation times vs the closed form (phase-type only)",
    )
    p.add_argument("--dist", default=None, help="built-in spec name or spec JSON file")
    p.add_argument("--delta", type=float, default=None, help="birth rate per individual")
    p.add_argument("--kmax", type=int, default=5, help="levels K = 1..kmax")
    p.add_argument("--ntrunc", type=int, default=400, help="truncation level")
    p.add_argument(
        "--tol",
        type=float,
        default=None,
        help="relative tolerance (default 1e-8 below delta=1, else 1e-3)",
    )
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser(
        "simulate",
        parents=[common],
        help="Monte Carlo occupation-time estimates vs the closed form",
    )
    p.add_argument(
        "--dist",
        default=None,
        help="comma-separated distribution names (or spec JSON files)",
    )
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--reps", type=int, default=10_000, help="replicate count")
    p.add_argument("--pop-cap", type=int, default=None, help="population cap")
    p.add_argument("--event-cap", type=int, default=None, help="event cap")
    p.add_argument("--time-cap", type=float, default=None, help="time cap")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser(
        "solve-w",
        parents=[common],
        help="stage weights of the size-capped population process",
    )
    p.add_argument("--dist", default=None)
    p.add_argument("--delta", type=float, default=None)
    p.set_defaults(func=_cmd_solve_w)

    p = sub.add_parser(
        "estimate", parents=[common], help="birth-rate estimators from one observation"
    )
    p.add_argument("--from-ak", type=float, default=None, help="observed occupation time")
    p.add_argument("--from-t", type=float, default=None, help="observed extinction time")
    p.add_argument("--k", type=int, default=None, help="level of the occupation time")
    p.add_argument("--regime", choices=("sub", "super"), default=None)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser(
        "counterexample",
        parents=[common],
        help="experiments where the lifetime law does matter",
    )
    p.add_argument("--which", choices=("batch", "age-varying"), default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--pop-cap", type=int, default=None)
    p.set_defaults(func=_cmd_counterexample)

    p = sub.add_parser(
        "tn-growth",
        parents=[common],
        help="mean time below a population ceiling vs log N",
    )
    p.add_argument("--dist", default="exp1")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument(
        "--n-values", default="100,1000,10000", help="comma-separated ceilings"
    )
    p.add_argument("--reps", type=int, default=10_000)
    p.set_defaults(func=_cmd_tn_growth)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SpecValidationError, markov.CapacityError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
