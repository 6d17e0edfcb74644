"""Command-line front end.

    gwspeed <command> <config> [--set key=value ...] [--output-dir DIR]

Exit status is 0 on success, 2 for invalid input (bad config, bias outside
the allowed window) and 3 when a runtime guard trips (tree too large,
non-backtracking rejections, truncation not converging).  The output
directory can also be set through ``GWSPEED_OUTPUT_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conductance import ConvergenceError, annealed_escape, escape_probability_truncated
from .config import ConfigError, ExperimentConfig, emit, parse
from .estimators import (InsufficientBlocksError, estimate_at, finite_difference_derivative,
                         girsanov_transfer_estimate, trap_moment_diagnostics,
                         uniform_moment_diagnostics, window_flags)
from .offspring import LawError, backbone_law, extinction_probability, lambda_c, trap_law
from .regeneration import NBRejectionError
from .tree import GW, TreeArena, TreeCapacityError, TreeSpec
from .walk import RegimeError

OUTPUT_ENV = "GWSPEED_OUTPUT_DIR"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg: ExperimentConfig, outdir: Path):
        self.command = command
        self.cfg = cfg
        self.outdir = outdir
        self.files: list[str] = []
        outdir.mkdir(parents=True, exist_ok=True)

    def write_csv(self, name: str, header, rows) -> None:
        with open(self.outdir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        self.files.append(name)

    def write_json(self, name: str, obj) -> None:
        (self.outdir / name).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
        self.files.append(name)

    def finish(self) -> None:
        (self.outdir / "config.txt").write_text(emit(self.cfg))
        self.files.append("config.txt")
        import numba
        import sklearn

        manifest = {
            "command": self.command,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "versions": {"gwspeed": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "numba": numba.__version__,
                         "scikit-learn": sklearn.__version__},
            "files": {f: _sha256(self.outdir / f) for f in sorted(self.files)},
        }
        (self.outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return _plain({k: getattr(obj, k) for k in obj.__dataclass_fields__})
    return obj


def _spec(cfg: ExperimentConfig) -> TreeSpec:
    try:
        return TreeSpec.for_law(cfg.law, cfg.mode)
    except LawError as exc:
        raise ConfigError(str(exc)) from None


def _window(spec: TreeSpec) -> tuple[float, float]:
    lc = lambda_c(spec.law) if spec.mode == GW else 0.0
    return lc, spec.law.mean


def _check_transient(spec: TreeSpec, cfg: ExperimentConfig) -> None:
    lc, mu = _window(spec)
    for lam in cfg.lambdas:
        if not lam < mu or (spec.mode == GW and lam <= 0):
            raise RegimeError(f"lambda {lam:g} outside the transient range; the ballistic window "
                              f"(lambda_c, mu) is ({lc:.6g}, {mu:.6g})")


def cmd_speed(cfg: ExperimentConfig, run: Run) -> None:
    spec = _spec(cfg)
    _check_transient(spec, cfg)
    rows, reports = [], []
    for lam in cfg.lambdas:
        rep, sim = estimate_at(spec, lam, cfg.steps, cfg.replicas, cfg.seed, cfg.censor_buffer,
                               cfg.bootstrap, cfg.workers)
        rows.append([lam, rep.speed.value, rep.speed.lo, rep.speed.hi, rep.block_count, rep.total_steps])
        reports.append(rep.to_dict())
        if cfg.dump_blocks:
            name = f"blocks_{len(reports) - 1}.csv"
            sim.blocks.write_csv(run.outdir / name)
            run.files.append(name)
    run.write_csv("speed_curve.csv", ["lambda", "speed", "lo", "hi", "blocks", "steps"], rows)
    run.write_json("summary.json", {"reports": reports})


def cmd_derivative(cfg: ExperimentConfig, run: Run) -> None:
    spec = _spec(cfg)
    _check_transient(spec, cfg)
    rows, out = [], []
    for lam in cfg.lambdas:
        rep, _ = estimate_at(spec, lam, cfg.steps, cfg.replicas, cfg.seed, cfg.censor_buffer,
                             cfg.bootstrap, cfg.workers)
        fd = None
        if cfg.h_fd > 0:
            fd = finite_difference_derivative(spec, lam, cfg.h_fd, cfg.steps, cfg.replicas, cfg.seed,
                                              cfg.censor_buffer, cfg.bootstrap, workers=cfg.workers)
        c, lit = rep.sigma01_centered, rep.sigma01_literal
        nan = float("nan")
        rows.append([lam, c.value, c.lo, c.hi, lit.value,
                     fd.estimate.value if fd else nan, fd.estimate.lo if fd else nan,
                     fd.estimate.hi if fd else nan])
        entry = {"report": rep.to_dict()}
        if fd is not None:
            entry["finite_difference"] = fd
            entry["matching_variants"] = [name for name, e in (("centered", c), ("literal", lit))
                                          if e.overlaps(fd.estimate)]
        out.append(entry)
    run.write_csv("derivative.csv", ["lambda", "exy_centered", "exy_lo", "exy_hi", "exy_literal",
                                     "fd", "fd_lo", "fd_hi"], rows)
    run.write_json("summary.json", {"derivative": out})


def cmd_girsanov(cfg: ExperimentConfig, run: Run) -> None:
    spec = _spec(cfg)
    _check_transient(spec, cfg)
    rows = []
    for lam in cfg.lambdas:
        if lam + cfg.girsanov_h <= 0:
            raise RegimeError(f"lambda + h = {lam + cfg.girsanov_h:g} must be positive")
        tr = girsanov_transfer_estimate(spec, lam, cfg.girsanov_h, cfg.functional, cfg.horizon,
                                        cfg.trees, cfg.seed, cfg.paths)
        rows.append([lam, cfg.girsanov_h, cfg.functional, cfg.horizon, tr.reweighted,
                     tr.reweighted_se, tr.direct, tr.direct_se, tr.z])
    run.write_csv("girsanov.csv", ["lambda", "h", "functional", "steps", "reweighted", "reweighted_se",
                                   "direct", "direct_se", "z"], rows)
    run.write_json("summary.json", {"rows": [dict(zip(("lambda", "z"), (r[0], r[-1]))) for r in rows],
                                    "all_within_3se": all(abs(r[-1]) <= 3 for r in rows)})


def cmd_escape(cfg: ExperimentConfig, run: Run) -> None:
    spec = _spec(cfg)
    rows = []
    for lam in cfg.lambdas:
        if spec.mode == GW:
            e = annealed_escape(spec, lam, cfg.trees, cfg.truncation, cfg.seed, cfg.escape_tol,
                                cfg.truncation_cap)
            rows.append([lam, e.N, e.escape, e.lo, e.hi, e.gap])
        else:
            if lam <= 0:
                raise RegimeError("escape probabilities need lambda > 0")
            a = TreeArena(spec, 0)
            p = escape_probability_truncated(a, lam, cfg.truncation)
            gap = p - escape_probability_truncated(a, lam, 2 * cfg.truncation) \
                if 2 * cfg.truncation <= cfg.truncation_cap else float("nan")
            rows.append([lam, cfg.truncation, p, p, p, gap])
    run.write_csv("escape.csv", ["lambda", "N", "escape", "lo", "hi", "gap"], rows)
    run.write_json("summary.json", {"rows": [dict(zip(("lambda", "N", "escape", "lo", "hi", "gap"), r))
                                             for r in rows]})


def cmd_diagnostics(cfg: ExperimentConfig, run: Run) -> None:
    spec = _spec(cfg)
    _check_transient(spec, cfg)
    mom = uniform_moment_diagnostics(spec, cfg.lambdas, cfg.alphas, cfg.blocks_per_lambda, cfg.seed,
                                     cfg.steps, cfg.censor_buffer)
    cols = ["lambda", "alpha", "moment", "stability_ratio", "stable", "kappa", "blocks"]
    run.write_csv("moments.csv", cols, [[r[c] for c in cols] for r in mom])
    summary = {"window": window_flags(spec, cfg.lambdas[0])}
    if spec.mode == GW and spec.law.probs[0] > 0:
        tm = trap_moment_diagnostics(spec.law, cfg.trap_depth, cfg.trap_moments, cfg.trap_replicas,
                                     cfg.seed)
        run.write_csv("trap_moments.csv", ["n", "m", "moment", "ratio"],
                      [[r["n"], r["m"], r["moment"], r["ratio"]] for r in tm["rows"]])
        summary["trap"] = {k: tm[k] for k in ("sup", "pairs", "lambda_c", "method")}
    run.write_json("summary.json", summary)


def cmd_validate(cfg: ExperimentConfig, run: Run) -> None:
    spec = _spec(cfg)
    law = spec.law
    info = {"mode": cfg.mode, "mu": law.mean, "lambdas": list(cfg.lambdas)}
    if spec.mode == GW:
        lc, mu = _window(spec)
        info.update({"q": extinction_probability(law), "lambda_c": lc,
                     "ballistic_window": [lc, mu], "derivative_window": [lc**0.5, mu],
                     "backbone_law": backbone_law(law).as_dict(), "trap_law": trap_law(law).as_dict()})
    info["window_flags"] = [window_flags(spec, lam) for lam in cfg.lambdas]
    _check_transient(spec, cfg)
    run.write_json("validate.json", info)


COMMANDS = {
    "speed": cmd_speed,
    "derivative": cmd_derivative,
    "girsanov-check": cmd_girsanov,
    "escape": cmd_escape,
    "diagnostics": cmd_diagnostics,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gwspeed", description="Speed of biased walks on Galton-Watson trees.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="key = value experiment file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config line (repeatable)")
    p.add_argument("--output-dir", default=None)
    return p


def load_config(path: str, overrides=()) -> ExperimentConfig:
    text = Path(path).read_text()
    if overrides:
        keys = {o.partition("=")[0].strip() for o in overrides}
        kept = [ln for ln in text.splitlines() if ln.split("#", 1)[0].partition("=")[0].strip() not in keys]
        text = "\n".join(kept + list(overrides)) + "\n"
    return parse(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        outdir = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
        run = Run(args.command, cfg, outdir)
        COMMANDS[args.command](cfg, run)
        run.finish()
    except (InsufficientBlocksError, TreeCapacityError, NBRejectionError, ConvergenceError,
            MemoryError) as exc:
        print(f"gwspeed: runtime guard: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, LawError, RegimeError, OSError, ValueError) as exc:
        print(f"gwspeed: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"gwspeed: runtime guard: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
