"""Command-line experiment runner.

Every subcommand resolves its parameters from defaults, an optional YAML
config file and command-line flags (flags win), evaluates one row per
(policy, U alpha) point and writes three kinds of output to ``--out``:

* ``<command>.csv``: the result table, one row per point, fixed columns;
* ``manifest.json``: every resolved parameter, the tool version and seed;
* ``<command>_*.png``: figures of the table.

Exit status: 0 on success, 1 when ``validate`` finds a disagreement,
2 on configuration errors, 3 when the exact solver's state cap is exceeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import numbers
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import yaml

from . import __version__
from .approx import evaluate
from .delivery import ChannelParams, DecodingMode
from .errors import ConfigError, DegenerateChainError, NoRefreshError, StateSpaceTooLarge
from .exact import DEFAULT_STATE_CAP, build_ancillary_chain, exact_avp, inter_refresh_moments_exact
from .model import SystemConfig, TransmissionPolicy, battery_steady_state, m1_transition_matrix
from .optimizer import Baseline, Metric, Objective, OptimizerOptions, baseline_policy, optimize_policy
from .simulator import SimParams, simulate

OUT_ENV = "AOI_HARVEST_OUT"
DEFAULT_OUT = "results"

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_STATE_CAP = 0, 1, 2, 3

COLUMNS = [
    "u_alpha", "policy", "label", "mode",
    "avg_aoi_exact", "avg_aoi_approx", "avp_exact", "avp", "throughput",
    "sim_mean", "sim_stderr", "sim_avp", "sim_avp_stderr", "sim_throughput", "sim_throughput_stderr",
    "seed",
]
CHECK_COLUMNS = ["rel_exact_approx", "z_aoi_exact", "z_aoi_approx", "z_avp_exact", "z_avp_approx", "ok"]

TOP_KEYS = {"u", "e", "alpha", "u_alpha", "eta", "pi", "mode", "theta", "channel", "sim", "state_cap", "workers"}
CHANNEL_KEYS = {"slot_length", "rate", "noise_db", "noise_linear", "ideal"}
SIM_KEYS = {"slots", "warmup", "seed", "batches"}
# library field names -> user-facing keys, for error messages
FIELD_NAMES = {
    "device_count": "u", "battery_capacity": "e", "update_prob": "alpha", "harvest_prob": "eta",
    "slot_length": "channel.slot_length", "rate": "channel.rate", "noise_power": "channel.noise",
}

VALIDATE_DEFAULTS = {
    "u": 30, "e": 2, "eta": 0.05, "theta": 1000, "mode": "capture",
    "u_alpha": [0.25, 0.5, 1.0, 1.5, 2.0, 2.5], "pi": ["1,1", "0,1"],
}
VALIDATE_REL_TOL = 0.05
VALIDATE_Z = 3.0


@dataclass
class Settings:
    """Fully resolved run parameters."""

    u: int = 30
    e: int = 2
    eta: float = 0.05
    u_alpha: list[float] = field(default_factory=lambda: [1.0])
    pi: list[str] = field(default_factory=lambda: ["always-transmit"])
    mode: str = "capture"
    theta: int = 1000
    channel: dict = field(default_factory=lambda: {"slot_length": 100, "rate": 0.8, "noise_db": -20.0, "ideal": False})
    sim: dict = field(default_factory=lambda: {"slots": 1_000_000, "warmup": 10_000, "seed": 0, "batches": 100})
    state_cap: int = DEFAULT_STATE_CAP
    workers: int = 1

    def channel_params(self) -> ChannelParams:
        ch = dict(self.channel)
        ideal = bool(ch.get("ideal", False))
        if "noise_linear" in ch:
            return ChannelParams(ch["slot_length"], ch["rate"], ch["noise_linear"], ideal)
        return ChannelParams.from_db(ch["noise_db"], slot_length=ch["slot_length"], rate=ch["rate"], ideal=ideal)

    def system(self, u_alpha: float) -> SystemConfig:
        return SystemConfig(self.u, self.e, u_alpha / self.u, self.eta, self.channel_params(), self.mode)

    def policies(self) -> list[tuple[str, TransmissionPolicy]]:
        return [(label, parse_policy(label, self.e)) for label in self.pi]

    def sim_params(self) -> SimParams:
        s = self.sim
        return SimParams(int(s["slots"]), seed=int(s["seed"]), warmup_slots=int(s["warmup"]),
                         theta=self.theta, batches=int(s["batches"]))


def parse_policy(text: str, E: int) -> TransmissionPolicy:
    """``"0,0.5,1"`` or a baseline name (``full-battery-only``, ``always-transmit``)."""
    text = str(text).strip()
    try:
        return baseline_policy(Baseline(text.lower()), E)
    except ValueError:
        pass
    try:
        probs = tuple(float(v) for v in text.strip("()[] ").split(","))
    except ValueError:
        raise ConfigError("pi", f"cannot parse policy {text!r}") from None
    policy = TransmissionPolicy(probs)
    if policy.E != E:
        raise ConfigError("pi", f"policy {text!r} has {policy.E} levels but e = {E}")
    return policy


def _float_list(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def load_config(path: str) -> dict:
    """Read a YAML config: flat keys plus ``channel`` and ``sim`` blocks."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else path
        raise ConfigError("config", f"{where}: malformed YAML ({getattr(exc, 'problem', exc)})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: top level must be a mapping")
    _check_keys(data, TOP_KEYS, "")
    for block, keys in (("channel", CHANNEL_KEYS), ("sim", SIM_KEYS)):
        if block in data:
            if not isinstance(data[block], dict):
                raise ConfigError(block, "must be a mapping")
            _check_keys(data[block], keys, block + ".")
    return data


def _check_keys(data: dict, allowed: set, prefix: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(prefix + str(key), "unknown key")


def resolve_settings(args: argparse.Namespace, defaults: dict | None = None) -> Settings:
    """Merge defaults, config file and flags into a validated :class:`Settings`."""
    s = Settings()
    layers = [defaults or {}]
    if getattr(args, "config", None):
        layers.append(load_config(args.config))
    flags = {
        "u": args.u, "e": args.e, "eta": args.eta, "alpha": args.alpha, "u_alpha": args.u_alpha,
        "pi": args.pi, "mode": args.mode, "theta": args.theta, "state_cap": args.state_cap,
        "workers": args.workers,
        "channel": {"slot_length": args.n, "rate": args.rate, "noise_db": args.noise_db,
                    "noise_linear": args.noise_linear},
        "sim": {"slots": args.slots, "seed": args.seed, "warmup": args.warmup, "batches": args.batches},
    }
    layers.append(flags)

    alpha = None
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key == "channel":
                given = {k: v for k, v in value.items() if v is not None}
                if "noise_db" in given and "noise_linear" in given:
                    raise ConfigError("channel.noise", "give exactly one of noise_db and noise_linear")
                if "noise_db" in given or "noise_linear" in given:
                    s.channel.pop("noise_db", None)
                    s.channel.pop("noise_linear", None)
                s.channel.update(given)
            elif key == "sim":
                s.sim.update({k: v for k, v in value.items() if v is not None})
            elif key == "alpha":
                alpha = _float_list(value)
            elif key == "u_alpha":
                s.u_alpha = _float_list(value)
                alpha = None
            elif key == "pi":
                s.pi = [value] if isinstance(value, str) else [
                    v if isinstance(v, str) else ",".join(str(x) for x in v) for v in value
                ]
            else:
                setattr(s, key, value)
    _coerce(s)
    if alpha is not None:
        s.u_alpha = [a * s.u for a in alpha]
    _validate(s)
    return s


def _coerce(s: Settings) -> None:
    for name, kind in (("u", int), ("e", int), ("theta", int), ("state_cap", int), ("workers", int), ("eta", float)):
        value = getattr(s, name)
        try:
            cast = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(name, f"expected a number, got {value!r}") from None
        if kind is int and cast != float(value):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        setattr(s, name, cast)


def _validate(s: Settings) -> None:
    if not s.u_alpha:
        raise ConfigError("u_alpha", "sweep grid is empty")
    for ua in s.u_alpha:
        if not (0.0 <= ua <= s.u) or math.isnan(ua):
            raise ConfigError("alpha", f"update probability {ua / max(s.u, 1):g} must lie in [0, 1]")
    if s.theta < 1:
        raise ConfigError("theta", "must be at least 1")
    if s.workers < 1:
        raise ConfigError("workers", "must be at least 1")
    if not s.pi:
        raise ConfigError("pi", "no policy given")
    try:
        s.system(s.u_alpha[0])
        s.policies()
    except ConfigError as exc:
        raise ConfigError(FIELD_NAMES.get(exc.field, exc.field), str(exc).split(": ", 1)[-1]) from None
    try:
        s.sim_params()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("sim", str(exc)) from None


@dataclass(frozen=True)
class PointTask:
    config: SystemConfig
    policy: TransmissionPolicy
    label: str
    u_alpha: float
    outputs: tuple[str, ...]
    theta: int
    sim: SimParams | None
    state_cap: int


def evaluate_point(task: PointTask) -> dict:
    """One result row; cells not requested stay empty."""
    cfg, policy = task.config, task.policy
    row = {"u_alpha": task.u_alpha, "policy": str(policy), "label": task.label, "mode": cfg.decoding_mode.value}
    if "approx" in task.outputs:
        try:
            m = evaluate(cfg, policy, task.theta)
            row.update(avg_aoi_approx=m.avg_aoi, avp=m.avp, throughput=m.throughput)
        except NoRefreshError:
            row.update(avg_aoi_approx=math.inf, avp=1.0, throughput=0.0)
    if "exact" in task.outputs:
        chain = build_ancillary_chain(cfg, policy, state_cap=task.state_cap)
        try:
            mean, second = inter_refresh_moments_exact(chain)
            row.update(avg_aoi_exact=1.0 + second / (2.0 * mean), avp_exact=exact_avp(chain, task.theta))
        except NoRefreshError:
            row.update(avg_aoi_exact=math.inf, avp_exact=1.0)
    if "sim" in task.outputs and task.sim is not None:
        res = simulate(cfg, policy, task.sim)
        row.update(
            sim_mean=res.avg_aoi, sim_stderr=res.avg_aoi_se, sim_avp=res.avp, sim_avp_stderr=res.avp_se,
            sim_throughput=res.throughput, sim_throughput_stderr=res.throughput_se, seed=res.seed,
        )
    return row


def _tasks(s: Settings, outputs: Sequence[str]) -> list[PointTask]:
    sim = s.sim_params() if "sim" in outputs else None
    return [
        PointTask(s.system(ua), policy, label, ua, tuple(outputs), s.theta, sim, s.state_cap)
        for label, policy in s.policies()
        for ua in s.u_alpha
    ]


def run_points(tasks: Sequence[PointTask], workers: int, fn: Callable = evaluate_point) -> list[dict]:
    """Evaluate tasks, in a process pool when ``workers > 1``; rows keep task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return repr(float(value))
    return str(value)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_outputs(out: Path, command: str, rows: Sequence[dict], columns: Sequence[str], manifest: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{command}.csv"
    table.write_text(format_table(rows, columns))
    manifest = dict(manifest, outputs=sorted(p.name for p in out.glob(f"{command}*")))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return table


def _manifest(command: str, s: Settings, argv: Sequence[str], extra: dict | None = None) -> dict:
    return {
        "tool": "aoi-harvest",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "parameters": asdict(s),
        "seed": s.sim.get("seed"),
        **(extra or {}),
    }


def _figures(command: str, out: Path, rows: Sequence[dict]) -> None:
    from . import plotting

    out.mkdir(parents=True, exist_ok=True)
    if any(r.get(k) not in (None, "") for r in rows for k in ("avg_aoi_approx", "avg_aoi_exact", "sim_mean")):
        plotting.plot_aoi_sweep(rows, str(out / f"{command}_aoi.png"))
    for col, label in (("avp", "age-violation probability"), ("throughput", "throughput [packets/slot]")):
        if any(r.get(col) not in (None, "") for r in rows):
            plotting.plot_metric_sweep(rows, col, str(out / f"{command}_{col}.png"), label)


# ---------------------------------------------------------------- commands


def cmd_steady_state(args, s: Settings) -> tuple[list[dict], list[str], dict]:
    rows = []
    for label, policy in s.policies():
        for ua in s.u_alpha:
            cfg = s.system(ua)
            nu = battery_steady_state(m1_transition_matrix(cfg, policy))
            for level, p in enumerate(nu):
                rows.append({"u_alpha": ua, "policy": str(policy), "label": label, "level": level, "nu": float(p)})
    return rows, ["u_alpha", "policy", "label", "level", "nu"], {}


def _analysis(outputs: Sequence[str]):
    def run(args, s: Settings):
        rows = run_points(_tasks(s, outputs), s.workers)
        return rows, COLUMNS, {"outputs_requested": list(outputs)}

    return run


def cmd_sweep(args, s: Settings):
    outputs = [o.strip() for o in args.outputs.split(",") if o.strip()]
    bad = [o for o in outputs if o not in ("exact", "approx", "sim")]
    if bad or not outputs:
        raise ConfigError("outputs", f"choose from exact, approx, sim; got {args.outputs!r}")
    return _analysis(outputs)(args, s)


def validation_checks(row: dict, rel_tol: float = VALIDATE_REL_TOL, z_max: float = VALIDATE_Z) -> dict:
    """Agreement statistics of one validation row and the overall verdict."""
    exact, approx = row["avg_aoi_exact"], row["avg_aoi_approx"]
    se, avp_se = row["sim_stderr"], row["sim_avp_stderr"]

    def z(sim, ref, err):
        if err > 0:
            return (sim - ref) / err
        return 0.0 if sim == ref else math.inf

    checks = {
        "rel_exact_approx": abs(approx - exact) / exact,
        "z_aoi_exact": z(row["sim_mean"], exact, se),
        "z_aoi_approx": z(row["sim_mean"], approx, se),
        "z_avp_exact": z(row["sim_avp"], row["avp_exact"], avp_se),
        "z_avp_approx": z(row["sim_avp"], row["avp"], avp_se),
    }
    checks["ok"] = checks["rel_exact_approx"] <= rel_tol and all(
        abs(v) <= z_max for k, v in checks.items() if k.startswith("z_")
    )
    return checks


def cmd_validate(args, s: Settings):
    rows = run_points(_tasks(s, ("exact", "approx", "sim")), s.workers)
    for row in rows:
        row.update(validation_checks(row))
    return rows, COLUMNS + CHECK_COLUMNS, {"rel_tol": VALIDATE_REL_TOL, "z_max": VALIDATE_Z}


def _optimize_point(task: tuple) -> list[dict]:
    cfg, ua, objective, opts = task
    res = optimize_policy(cfg, objective, opts)
    rows = []
    named = [("optimized", res.policy)] + [(b.value, baseline_policy(b, cfg.E)) for b in Baseline]
    for label, policy in named:
        row = evaluate_point(PointTask(cfg, policy, label, ua, ("approx",), objective.theta, None, 0))
        row["metric"] = objective.metric.value
        row["objective"] = res.value if label == "optimized" else objective.value(cfg, policy)
        row["evaluations"] = res.evaluations if label == "optimized" else ""
        rows.append(row)
    return rows


def cmd_optimize(args, s: Settings):
    objective = Objective(Metric.parse(args.metric), theta=s.theta)
    opts = OptimizerOptions(max_evaluations=args.max_evals, restarts=args.restarts, seed=int(s.sim["seed"]))
    tasks = [(s.system(ua), ua, objective, opts) for ua in s.u_alpha]
    rows = [r for group in run_points(tasks, s.workers, _optimize_point) for r in group]
    cols = ["u_alpha", "label", "policy", "mode", "metric", "objective", "avg_aoi_approx", "avp", "throughput",
            "evaluations"]
    return rows, cols, {"metric": objective.metric.value, "optimizer": asdict(opts)}


COMMANDS = {
    "steady-state": (cmd_steady_state, "battery-level steady-state distribution"),
    "exact": (_analysis(("exact",)), "exact average AoI and AVP from the full chain"),
    "approx": (_analysis(("approx",)), "approximate average AoI, AVP and throughput"),
    "simulate": (_analysis(("sim",)), "slot-level Monte-Carlo simulation"),
    "optimize": (cmd_optimize, "optimise the transmission policy against the baselines"),
    "sweep": (cmd_sweep, "sweep U alpha with any combination of exact, approx, sim"),
    "validate": (cmd_validate, "cross-check exact, approximate and simulated metrics"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (flags override it)")
    p.add_argument("--u", type=int, help="number of devices")
    p.add_argument("--e", type=int, help="battery capacity")
    p.add_argument("--alpha", help="update probability per slot (comma list sweeps)")
    p.add_argument("--u-alpha", dest="u_alpha", help="U*alpha grid, comma separated")
    p.add_argument("--eta", type=float, help="harvest probability per slot")
    p.add_argument("--pi", action="append", help="policy '0,0,1' or baseline name; repeatable")
    p.add_argument("--mode", choices=[m.value for m in DecodingMode])
    p.add_argument("--theta", type=int, help="age threshold for the violation probability")
    p.add_argument("--n", type=int, help="channel uses per slot")
    p.add_argument("--rate", type=float, help="bits per channel use")
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--noise-db", dest="noise_db", type=float)
    noise.add_argument("--noise-linear", dest="noise_linear", type=float)
    p.add_argument("--slots", type=int, help="simulated slots")
    p.add_argument("--warmup", type=int, help="simulated warm-up slots")
    p.add_argument("--batches", type=int, help="batches for batch-means errors")
    p.add_argument("--seed", type=int)
    p.add_argument("--state-cap", dest="state_cap", type=int, help="largest exact chain allowed")
    p.add_argument("--workers", type=int, help="worker processes for sweep points")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoi-harvest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "sweep":
            p.add_argument("--outputs", default="approx", help="comma list of exact, approx, sim")
        if name == "optimize":
            p.add_argument("--metric", default="avg-aoi", choices=[m.value for m in Metric])
            p.add_argument("--restarts", type=int, default=OptimizerOptions.restarts)
            p.add_argument("--max-evals", dest="max_evals", type=int, default=OptimizerOptions.max_evaluations)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        settings = resolve_settings(args, VALIDATE_DEFAULTS if args.command == "validate" else None)
        fn = COMMANDS[args.command][0]
        rows, columns, extra = fn(args, settings)
    except ConfigError as exc:
        print(f"config error [{exc.field}]: {str(exc).split(': ', 1)[-1]}", file=sys.stderr)
        return EXIT_CONFIG
    except StateSpaceTooLarge as exc:
        print(f"state space too large: {exc}", file=sys.stderr)
        return EXIT_STATE_CAP
    except (DegenerateChainError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if not args.no_figures and args.command not in ("steady-state", "optimize"):
        _figures(args.command, out, rows)
    if not args.no_figures and args.command == "optimize":
        from . import plotting

        out.mkdir(parents=True, exist_ok=True)
        named = {f"{r['label']} @ {r['u_alpha']:g}": [float(v) for v in r["policy"].strip("()").split(",")]
                 for r in rows if r["label"] == "optimized"}
        plotting.plot_policies(named, str(out / "optimize_policies.png"))
    table = write_outputs(out, args.command, rows, columns, _manifest(args.command, settings, argv, extra))
    sys.stdout.write(format_table(rows, columns))
    print(f"# wrote {table}", file=sys.stderr)
    if args.command == "validate" and not all(r["ok"] for r in rows):
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
