"""Command-line entry point: ``relax2d {envelope|roc|fem|compare|plotdata}``.

Every subcommand reads a JSON config (``--config``; missing keys take
defaults), prints a short table at 6 significant digits and writes full
precision CSV files to ``--out``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 resource
limit.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import energy as en
from .convexify import even_extension, lower_convex_hull
from .fem import FemConfig, QuadMesh, export_csv, export_vtk, minimize
from .io import ensure_dir, save_grid, write_csv
from .laminate import extract_laminates, reconstruct_microstructure
from .roc import ResourceLimitError, RocConfig, build_grid, directions, roc_iterate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCE = 4

log = logging.getLogger("relax2d")

ENERGY_NAMES = ("biot", "dist", "biot_penalized")


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


def fmt(v) -> str:
    """Six significant digits for console tables."""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def print_table(header: List[str], rows: List[list], out=None) -> None:
    out = out or sys.stdout
    cells = [[fmt(c) for c in r] for r in [header] + rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=out)


@dataclass
class RunSpec:
    """Validated command-line run: subcommand, energy, F0, config blob, output dir."""

    subcommand: str
    energy: str = "dist"
    f0: List[float] = field(default_factory=lambda: [0.4, 0.0, 0.0, 0.4])
    config: dict = field(default_factory=dict)
    out: Path = Path("relax2d_out")
    seed: Optional[int] = None
    threads: Optional[int] = None

    def __post_init__(self):
        name = self.energy
        if not (name in ENERGY_NAMES or name.startswith("seth_hill:")):
            raise ConfigError(f"unknown energy {name!r}")
        try:
            en.get_energy(name)
        except (KeyError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(str(exc)) from exc
        f0 = np.asarray(self.f0, dtype=float)
        if f0.shape != (4,) or not np.all(np.isfinite(f0)):
            raise ConfigError("f0 must be 4 finite numbers")
        try:
            self.out = ensure_dir(self.out)
        except OSError as exc:
            raise ConfigError(f"output directory not usable: {exc}") from exc

    @property
    def F0(self) -> np.ndarray:
        return np.asarray(self.f0, dtype=float).reshape(2, 2)


def _penalty(cfg: dict) -> Optional[en.PenaltyConfig]:
    p = cfg.get("penalty")
    return None if p is None else en.PenaltyConfig(**p)


# --------------------------------------------------------------------- envelope

_ENVELOPE_COLUMNS = ("w_biot", "w_dist", "q_biot_unconstrained", "q_dist_unconstrained", "q_glp",
                     "q_biot_pipkin_oracle")


def envelope_row(F) -> list:
    """Raw energies and analytic envelopes at ``F``; domain errors become labels."""
    funcs = (en.w_biot, en.w_dist, en.q_biot_unconstrained, en.q_dist_unconstrained, en.q_glp,
             en.q_biot_pipkin_oracle)
    row = []
    for f in funcs:
        try:
            row.append(float(f(F)))
        except en.DomainError:
            row.append("domain error")
    return row


def cmd_envelope(spec: RunSpec) -> int:
    points = spec.config.get("f0_list") or [spec.f0]
    rows = []
    for p in points:
        F = np.asarray(p, dtype=float)
        if F.shape != (4,) or not np.all(np.isfinite(F)):
            raise ConfigError(f"invalid matrix {p}")
        rows.append(list(F) + envelope_row(F.reshape(2, 2)))
    header = ["a11", "a12", "a21", "a22", *_ENVELOPE_COLUMNS]
    print_table(header, rows)
    write_csv(spec.out / "envelope.csv", header, rows)
    return EXIT_OK


# -------------------------------------------------------------------------- roc


def analytic_reference(energy: str, constrained: bool) -> Optional[Callable]:
    if energy == "biot":
        return en.q_glp if constrained else en.q_biot_unconstrained
    if energy == "dist":
        return en.q_glp if constrained else en.q_dist_unconstrained
    if energy == "biot_penalized":
        return en.q_glp
    return None


def roc_config(cfg: dict) -> RocConfig:
    keys = {"delta", "radius", "bounds", "order", "k_max", "constrained", "epsilon", "memory_budget"}
    kwargs = {k: cfg[k] for k in keys if k in cfg}
    if cfg.get("box") == "compression":
        delta = kwargs.pop("delta", 0.1)
        return RocConfig.compression_box(delta, **kwargs)
    if cfg.get("box") not in (None, "compression"):
        raise ConfigError(f"unknown box {cfg['box']!r}")
    return RocConfig(**kwargs)


def run_roc(energy: str, F0, cfg: dict, threads=None, penalty=None):
    W = en.get_energy(energy, penalty)
    rc = roc_config(cfg)
    grid = build_grid(W, rc)
    if grid.index_of(F0) is None:
        raise ConfigError("f0 must be a lattice point inside the ROC box")
    result = roc_iterate(grid, directions(rc.order, rc.delta), rc, threads=threads)
    value = float(result.value_at(F0))
    if not np.isfinite(value):
        raise NumericalFailure("ROC value at F0 is not finite")
    return W, rc, result, value


def cmd_roc(spec: RunSpec) -> int:
    cfg = spec.config
    W, rc, result, value = run_roc(spec.energy, spec.F0, cfg, spec.threads, _penalty(cfg))
    ref = analytic_reference(spec.energy, rc.constrained)
    ref_value = float(ref(spec.F0)) if ref is not None else float("nan")
    out = spec.out
    save_grid(result.grid, out / "roc_grid")
    write_csv(out / "roc_trace.csv", ["iteration", "max_decrease", "updated_nodes", "seconds"],
              ([t["iteration"], t["max_decrease"], t["updated_nodes"], t["seconds"]] for t in result.trace))
    tree = extract_laminates(result, spec.F0)
    tree.to_json(out / "laminate_tree.json", indent=1)
    micro = reconstruct_microstructure(tree, frequency=int(cfg.get("frequency", 10)),
                                       resolution=int(cfg.get("resolution", 101)))
    micro.to_csv(out / "microstructure.csv")
    micro.to_vtk(out / "microstructure.vtk")
    header = ["energy", "constrained", "roc_value", "analytic", "tree_energy", "tree_depth", "ties",
              "self_intersecting", "iterations"]
    row = [spec.energy, rc.constrained, value, ref_value, tree.energy(W), tree.depth, tree.ties,
           micro.has_negative_det, len(result.trace)]
    print_table(header, [row])
    write_csv(out / "roc_summary.csv", header, [row])
    return EXIT_OK


# -------------------------------------------------------------------------- fem


def fem_config(spec: RunSpec, overrides: Optional[dict] = None) -> FemConfig:
    d = {"energy": spec.energy, "f0": list(spec.f0)}
    d.update({k: v for k, v in spec.config.items() if k in FemConfig.__dataclass_fields__})
    d.update(overrides or {})
    if spec.seed is not None:
        d["seed"] = spec.seed
    try:
        return FemConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


_REPORT_COLUMNS = ["energy", "energy_per_area", "iterations", "grad_norm", "min_det", "max_det",
                   "negative_det_count", "orientation_violating", "status", "start", "wall_time"]


def run_fem(fc: FemConfig):
    mesh = QuadMesh(fc.n_per_side)
    try:
        W = fc.density()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    fld, report = minimize(mesh, W, fc.F0(), fc.options())
    return mesh, fld, report


def cmd_fem(spec: RunSpec) -> int:
    fc = fem_config(spec)
    mesh, fld, rep = run_fem(fc)
    out = spec.out
    export_csv(out / "fem_mesh.csv", fld)
    export_vtk(out / "fem_mesh.vtk", fld)
    (out / "fem_config.json").write_text(fc.to_json())
    s = rep.summary()
    row = [s["energy"], rep.energy_density(mesh.area)] + [s[k] for k in _REPORT_COLUMNS[2:]]
    print_table(_REPORT_COLUMNS, [row])
    write_csv(out / "fem_report.csv", _REPORT_COLUMNS, [row])
    write_csv(out / "fem_history.csv", ["step", "energy"], enumerate(rep.history))
    if not rep.converged:
        print(f"optimizer did not converge: {rep.status}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------- compare

COMPARE_ROWS = (
    # label, energy, domain, constrained ROC, FEM energy name
    ("Biot", "biot", "R2x2", False, "biot"),
    ("dist", "dist", "R2x2", False, "dist"),
    ("Biot", "biot", "GLp", True, "biot_penalized"),
)


def cmd_compare(spec: RunSpec) -> int:
    F0 = spec.F0
    cfg = spec.config
    roc_cfg = cfg.get("roc", {})
    fem_cfg = cfg.get("fem", {"restarts": 3})
    records = []
    failed = False
    for label, energy, domain, constrained, fem_energy in COMPARE_ROWS:
        W = en.get_energy(energy)
        raw = float(W(F0))
        analytic = float((en.q_glp if constrained else (en.q_biot_unconstrained if energy == "biot"
                                                         else en.q_dist_unconstrained))(F0))
        try:
            rcfg = dict(roc_cfg)
            if constrained:
                rcfg.setdefault("box", "compression")
            _, _, _, roc_value = run_roc(energy, F0, rcfg, spec.threads)
        except (NumericalFailure, ResourceLimitError, ConfigError, ValueError) as exc:
            log.error("ROC %s/%s failed: %s", label, domain, exc)
            roc_value, failed = "FAILED", True
        try:
            fc = fem_config(spec, dict(fem_cfg, energy=fem_energy, f0=list(F0.ravel())))
            mesh, _, rep = run_fem(fc)
            fem_value = rep.energy_density(mesh.area) if rep.converged else "FAILED"
            failed |= not rep.converged
        except (ConfigError, FloatingPointError, ValueError) as exc:
            log.error("FEM %s/%s failed: %s", label, domain, exc)
            fem_value, failed = "FAILED", True
        for method, value in (("FEM", fem_value), ("ROC", roc_value), ("analytic_Q", analytic), ("raw_W", raw)):
            records.append([method, label, domain, value])
    header = ["energy", "domain", "FEM", "ROC", "analytic_Q", "raw_W"]
    table = []
    for i, (label, _, domain, _, _) in enumerate(COMPARE_ROWS):
        vals = [r[3] for r in records[4 * i: 4 * i + 4]]
        table.append([label, domain] + vals)
    print_table(header, table)
    print("PINN and HROC columns are omitted: neither method is computed by this tool.")
    write_csv(spec.out / "compare.csv", ["method", "energy", "domain", "value"], records)
    return EXIT_NUMERICAL if failed else EXIT_OK


# --------------------------------------------------------------------- plotdata


def _linspace(cfg: dict, lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(float(cfg.get("min", lo)), float(cfg.get("max", hi)), int(cfg.get("n", n)))


def plot_sections(cfg: dict) -> Dict[str, tuple]:
    """Sections of the energies and their envelopes as (header, rows)."""
    out = {}
    x = _linspace(cfg.get("one_d", {}), -2.0, 2.0, 401)
    out["one_d"] = (["x", "w_dist_1d", "w_biot_1d"], list(zip(x, (x - 1.0) ** 2, (np.abs(x) - 1.0) ** 2)))

    a = _linspace(cfg.get("volumetric", {}), -2.0, 2.0, 401)
    F = a[:, None, None] * np.eye(2)
    out["volumetric"] = (["alpha", "w_dist", "q_dist", "w_biot", "q_biot"],
                         list(zip(a, en.w_dist(F), en.q_dist_unconstrained(F), en.w_biot(F),
                                  en.q_biot_unconstrained(F))))

    g = _linspace(cfg.get("shear", {}), -2.0, 2.0, 401)
    F = np.zeros((len(g), 2, 2))
    F[:, 0, 0] = F[:, 1, 1] = 1.0
    F[:, 0, 1] = g
    out["shear"] = (["gamma", "w_dist", "q_dist", "w_biot", "q_biot", "q_glp"],
                    list(zip(g, en.w_dist(F), en.q_dist_unconstrained(F), en.w_biot(F),
                             en.q_biot_unconstrained(F), en.q_glp(F))))

    dcfg = cfg.get("diag", {})
    a = _linspace(dcfg, -2.0, 2.0, 401)
    rows = []
    for beta in dcfg.get("betas", [0.0, 1.0]):
        F = np.zeros((len(a), 2, 2))
        F[:, 0, 0] = a
        F[:, 1, 1] = beta
        rows += list(zip(a, np.full(len(a), float(beta)), en.w_dist(F), en.q_dist_unconstrained(F)))
    out["diag"] = (["alpha", "beta", "w_dist", "q_dist"], rows)

    vcfg = cfg.get("vl", {})
    radius, step = float(vcfg.get("radius", 4.0)), float(vcfg.get("step", 1e-3))

    def h(t):
        return (t - 1.0) ** 2

    curve = even_extension(h, radius, step)
    hull = lower_convex_hull(curve)
    t = _linspace(vcfg, -3.0, 3.0, 601)
    out["valanis_landel"] = (["t", "h", "h_even", "conv_h_even"], list(zip(t, h(t), h(np.abs(t)), hull(t))))
    return out


def cmd_plotdata(spec: RunSpec) -> int:
    rows = []
    for name, (header, data) in plot_sections(spec.config).items():
        path = write_csv(spec.out / f"plot_{name}.csv", header, data)
        rows.append([name, len(data), str(path)])
    print_table(["section", "rows", "file"], rows)
    return EXIT_OK


# ------------------------------------------------------------------------- main

COMMANDS = {
    "envelope": cmd_envelope,
    "roc": cmd_roc,
    "fem": cmd_fem,
    "compare": cmd_compare,
    "plotdata": cmd_plotdata,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relax2d", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON file with run settings")
    p.add_argument("--out", type=Path, default=Path("relax2d_out"), help="output directory")
    p.add_argument("--seed", type=int, help="seed for the FEM initial perturbation")
    p.add_argument("--threads", type=int, help="worker threads for the ROC sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_spec(args) -> RunSpec:
    cfg = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if args.threads is not None and args.threads < 1:
        raise ConfigError("threads must be positive")
    return RunSpec(
        subcommand=args.command,
        energy=cfg.get("energy", "dist"),
        f0=cfg.get("f0", [0.4, 0.0, 0.0, 0.4]),
        config=cfg,
        out=args.out,
        seed=args.seed,
        threads=args.threads,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = load_spec(args)
        return COMMANDS[args.command](spec)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ResourceLimitError, MemoryError) as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (NumericalFailure, FloatingPointError, en.DomainError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TypeError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
