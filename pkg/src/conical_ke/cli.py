"""Batch front end: config ingestion, orchestration, persistence.

Runs are driven by a versioned JSON config and write four artifact kinds
into the output directory:

  trace.csv              one row per solved path state (append-only; every
                         flushed row is a fully converged solve)
  functional_report.csv  the full energy family per state
  audits.csv             every executable estimate applied to every state
  *.ckpt                 binary checkpoints (ASCII header + little-endian
                         float64 payload in s-major order)

Determinism contract: identical config implies byte-identical CSV output.
All floats print through repr-faithful %.17g, iteration orders are fixed,
and nothing reads the clock or an unseeded generator.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import math
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__, audit, geometry, ma_core, paths

log = logging.getLogger("conical_ke")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_AUDIT = 4

CKPT_MAGIC = "conical-ke-ckpt"
CKPT_VERSION = 1
CONFIG_VERSION = 1


class ConfigError(Exception):
    pass


class CheckpointError(Exception):
    pass


def _fmt(x):
    """Repr-faithful float formatting; the determinism contract hangs on it."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


# ---- configuration -------------------------------------------------------

_GRID_KEYS = {"L": float, "Ns": int, "Nphi": int, "symmetry_mode": str}
_DIVISOR_KEYS = {"mode": str, "points": list, "lambdas": list, "betas": list}
_PATH_KEYS = {
    "kind": str,
    "eps_ladder": list,
    "target_betas": list,
    "targets": list,
    "t_end": float,
    "dt": float,
    "dt_min": float,
    "leg_order": list,
    "audit_angles": list,
}
_OUTPUT_KEYS = {"directory": str, "emit_plots": bool}
_TOL_KEYS = {
    "newton_tol": float,
    "max_iter": int,
    "ladder_limit": float,
    "with_lambda1": bool,
    "with_richardson": bool,
}
_TOP_KEYS = {"version", "grid", "divisor", "path", "output", "tolerances"}


def _check_block(name, block, allowed):
    if not isinstance(block, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    for key, val in block.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        want = allowed[key]
        if want is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{name}.{key} must be a number")
        elif want is int:
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{name}.{key} must be an integer")
        elif not isinstance(val, want):
            raise ConfigError(f"{name}.{key} must be {want.__name__}")


@dataclasses.dataclass
class RunConfig:
    """Validated run description; construction performs full validation."""

    raw: dict
    grid_block: dict
    divisor_block: dict
    path_block: dict
    output_block: dict
    tol_block: dict

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        if data.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}")
        for blk in ("grid", "divisor", "path"):
            if blk not in data:
                raise ConfigError(f"missing config block {blk!r}")
        _check_block("grid", data["grid"], _GRID_KEYS)
        _check_block("divisor", data["divisor"], _DIVISOR_KEYS)
        _check_block("path", data["path"], _PATH_KEYS)
        _check_block("output", data.get("output", {}), _OUTPUT_KEYS)
        _check_block("tolerances", data.get("tolerances", {}), _TOL_KEYS)
        rc = cls(
            raw=data,
            grid_block=dict(data["grid"]),
            divisor_block=dict(data["divisor"]),
            path_block=dict(data["path"]),
            output_block=dict(data.get("output", {})),
            tol_block=dict(data.get("tolerances", {})),
        )
        rc.validate()
        return rc

    def validate(self):
        for key in _GRID_KEYS:
            if key not in self.grid_block:
                raise ConfigError(f"missing grid.{key}")
        mode = self.divisor_block.get("mode")
        if mode is None:
            raise ConfigError("missing divisor.mode")
        if mode not in ("none",) + geometry.DIVISOR_MODES:
            raise ConfigError(f"unknown divisor.mode {mode!r}")
        if mode != "none":
            for key in ("points", "lambdas", "betas"):
                if key not in self.divisor_block:
                    raise ConfigError(f"missing divisor.{key}")
        kind = self.path_block.get("kind")
        if kind not in ("fixed_angle", "angle", "snc"):
            raise ConfigError(f"path.kind must be fixed_angle, angle or snc, got {kind!r}")
        ladder = self.path_block.get("eps_ladder")
        if not ladder or not all(
            isinstance(e, (int, float)) and not isinstance(e, bool) and e > 0 for e in ladder
        ):
            raise ConfigError("path.eps_ladder must be a nonempty list of positive numbers")
        if not all(b < a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("path.eps_ladder must strictly decrease")
        if kind != "fixed_angle" and mode == "none":
            raise ConfigError(f"path.kind {kind!r} needs a divisor")
        if kind == "angle":
            tb = self.path_block.get("target_betas")
            if tb is None and "targets" not in self.path_block:
                raise ConfigError("path.kind angle needs target_betas or targets")
            if tb is not None and len(set(float(b) for b in tb)) != 1:
                raise ConfigError("uniform angle run needs equal target angles")
        if kind == "snc" and "target_betas" not in self.path_block:
            raise ConfigError("path.kind snc needs target_betas")
        for a in self.path_block.get("audit_angles", []):
            if not 0.0 < a < 1.0:
                raise ConfigError(f"audit angle {a} outside (0, 1)")
        for b in self.divisor_block.get("betas", []):
            if not (isinstance(b, (int, float)) and 0.0 < b < 1.0):
                raise ConfigError(f"cone angle {b} outside (0, 1)")
        for b in self.path_block.get("target_betas") or []:
            if not (isinstance(b, (int, float)) and 0.0 < b < 1.0):
                raise ConfigError(f"target angle {b} outside (0, 1)")
        for b in self.path_block.get("targets") or []:
            if not (isinstance(b, (int, float)) and 0.0 < b < 1.0):
                raise ConfigError(f"target angle {b} outside (0, 1)")
        # dry-build to trigger geometry-level validation before any output
        grid = self.build_grid()
        cfg = self.build_divisor()
        if cfg is not None:
            cfg.validate_against_grid(grid)
            if self.path_block.get("kind") == "snc":
                cfg.with_betas(self.path_block["target_betas"])

    def build_grid(self):
        g = self.grid_block
        try:
            return geometry.build_grid(g["L"], g["Ns"], g["Nphi"], g["symmetry_mode"])
        except (geometry.GeometryError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def build_divisor(self):
        d = self.divisor_block
        if d["mode"] == "none":
            return None
        points = []
        for p in d["points"]:
            if p == "pole_0":
                points.append(geometry.POLE_0)
            elif p == "pole_inf":
                points.append(geometry.POLE_INF)
            elif isinstance(p, list) and len(p) == 2:
                points.append((float(p[0]), float(p[1])))
            else:
                raise ConfigError(f"bad divisor point {p!r}")
        try:
            return geometry.DivisorConfig(
                tuple(points),
                tuple(float(x) for x in d["lambdas"]),
                tuple(float(x) for x in d["betas"]),
                d["mode"],
            )
        except geometry.GeometryError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self):
        return paths.PathSchedule(
            dt=float(self.path_block.get("dt", 0.02)),
            dt_min=float(self.path_block.get("dt_min", 1e-4)),
        )

    def newton_opts(self):
        return ma_core.NewtonOptions(
            tol_residual=float(self.tol_block.get("newton_tol", 1e-10)),
            max_iter=int(self.tol_block.get("max_iter", 50)),
        )

    @property
    def audit_angles(self):
        return tuple(float(a) for a in self.path_block.get("audit_angles", []))

    @property
    def eps_ladder(self):
        return tuple(float(e) for e in self.path_block["eps_ladder"])

    @property
    def kind(self):
        return self.path_block["kind"]

    @property
    def with_lambda1(self):
        return bool(self.tol_block.get("with_lambda1", True))

    @property
    def with_richardson(self):
        return bool(self.tol_block.get("with_richardson", True))

    @property
    def n_betas(self):
        if self.divisor_block["mode"] == "none":
            return 1
        return len(self.divisor_block["betas"])


# ---- checkpoints ---------------------------------------------------------


def write_checkpoint(path, grid, eps, t, betas, stage, values, base=None):
    payload = np.asarray(values, dtype="<f8").ravel().tobytes()
    fields = [
        CKPT_MAGIC,
        f"v{CKPT_VERSION}",
        f"L={_fmt(grid.L)}",
        f"Ns={grid.Ns}",
        f"Nphi={grid.Nphi}",
        f"sym={grid.symmetry_mode}",
        f"eps={_fmt(eps)}",
        f"t={_fmt(t)}",
        "betas=" + ",".join(_fmt(b) for b in betas),
        f"stage={stage}",
        f"n={len(payload) // 8}",
        f"crc32={zlib.crc32(payload):08x}",
    ]
    if base is not None:
        fields.insert(10, "base=" + ",".join(_fmt(b) for b in base))
    header = " ".join(fields) + "\n"
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii", errors="replace").strip()
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    parts = header.split(" ")
    if len(parts) < 3 or parts[0] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if parts[1] != f"v{CKPT_VERSION}":
        raise CheckpointError(f"checkpoint version mismatch: {parts[1]}")
    kv = {}
    for item in parts[2:]:
        key, _, val = item.partition("=")
        kv[key] = val
    n = int(kv["n"])
    if len(payload) != 8 * n:
        raise CheckpointError(f"payload length {len(payload)} != 8*{n}")
    if f"{zlib.crc32(payload):08x}" != kv["crc32"]:
        raise CheckpointError("checksum mismatch")
    out = {
        "L": float(kv["L"]),
        "Ns": int(kv["Ns"]),
        "Nphi": int(kv["Nphi"]),
        "sym": kv["sym"],
        "eps": float(kv["eps"]),
        "t": float(kv["t"]),
        "betas": tuple(float(x) for x in kv["betas"].split(",")),
        "stage": kv["stage"],
        "values": np.frombuffer(payload, dtype="<f8").copy(),
    }
    if "base" in kv:
        out["base"] = tuple(float(x) for x in kv["base"].split(","))
    return out


def _check_grid_match(ck, grid):
    if (ck["Ns"], ck["Nphi"], ck["sym"]) != (grid.Ns, grid.Nphi, grid.symmetry_mode) or ck[
        "L"
    ] != grid.L:
        raise CheckpointError("checkpoint grid does not match the config grid")


# ---- CSV writers ---------------------------------------------------------


class _CsvWriter:
    """Append-only writer; every row is flushed before control returns."""

    def __init__(self, path, columns, append=False):
        self.path = Path(path)
        self.columns = list(columns)
        exists = self.path.exists() and append
        self.fh = open(self.path, "a" if append else "w", encoding="ascii", newline="\n")
        if not exists:
            self.fh.write(",".join(self.columns) + "\n")
            self.fh.flush()

    def row(self, values):
        if len(values) != len(self.columns):
            raise ValueError(f"row width {len(values)} != header width {len(self.columns)}")
        self.fh.write(",".join(str(v) for v in values) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def trace_columns(n_betas, audit_angles):
    cols = ["run_id", "eps", "t"]
    cols += [f"beta_{i}" for i in range(n_betas)]
    cols += ["I", "J", "J_omega0", "E", "E_logD_eps"]
    cols += [f"E_modified_{a:g}" for a in audit_angles]
    cols += ["osc", "sup_norm", "min_density", "lambda1", "newton_iters"]
    return cols


def report_columns(n_betas, n_points, audit_angles):
    cols = ["run_id", "eps", "t"]
    cols += [f"beta_{i}" for i in range(n_betas)]
    cols += ["I", "J", "J_omega0", "E", "E_logD", "E_logD_eps"]
    cols += [f"E_modified_{a:g}" for a in audit_angles]
    cols += [f"J_chi_eps_{i}" for i in range(n_points)]
    cols += ["J_omega_phi_eps"]
    cols += [f"coercivity_C_{a:g}" for a in audit_angles]
    return cols


AUDIT_COLUMNS = ["run_id", "eps", "t", "check", "passed", "measured", "bound", "tol", "note"]


def _trace_row(run_id, state, audit_angles):
    r = state.report
    vals = [run_id, _fmt(state.eps), _fmt(state.t)]
    vals += [_fmt(b) for b in state.betas]
    vals += [_fmt(r.I), _fmt(r.J), _fmt(r.J_omega0), _fmt(r.E), _fmt(r.E_logD_eps)]
    vals += [_fmt(r.E_modified.get(a, math.nan)) for a in audit_angles]
    vals += [
        _fmt(state.osc),
        _fmt(state.sup_norm),
        _fmt(state.min_density),
        _fmt(state.lambda1),
        str(state.newton_iters),
    ]
    return vals


def _report_row(run_id, state, audit_angles, n_points):
    r = state.report
    vals = [run_id, _fmt(state.eps), _fmt(state.t)]
    vals += [_fmt(b) for b in state.betas]
    vals += [_fmt(r.I), _fmt(r.J), _fmt(r.J_omega0), _fmt(r.E), _fmt(r.E_logD), _fmt(r.E_logD_eps)]
    vals += [_fmt(r.E_modified.get(a, math.nan)) for a in audit_angles]
    jce = list(r.J_chi_eps) + [math.nan] * (n_points - len(r.J_chi_eps))
    vals += [_fmt(j) for j in jce]
    vals += [_fmt(r.J_omega_phi_eps)]
    vals += [_fmt(r.coercivity_C.get(a, math.nan)) for a in audit_angles]
    return vals


def _audit_row(run_id, eps, t, entry):
    return [
        run_id,
        _fmt(eps),
        _fmt(t),
        entry.name,
        "True" if entry.passed else "False",
        _fmt(entry.measured),
        _fmt(entry.bound),
        _fmt(entry.tol),
        entry.note.replace(",", ";"),
    ]


# ---- orchestration -------------------------------------------------------


class ExperimentRunner:
    """Drives one config end to end and owns all artifact files."""

    def __init__(self, rc, out_dir, run_prefix="run", file_suffix=""):
        self.rc = rc
        self.out = Path(out_dir)
        self.grid = rc.build_grid()
        self.cfg = rc.build_divisor()
        self.run_prefix = run_prefix
        self.file_suffix = file_suffix
        self.audit_failures = 0
        self.trace_w = None
        self.report_w = None
        self.audit_w = None
        n_points = 0 if self.cfg is None else self.cfg.k

        self._trace_cols = trace_columns(rc.n_betas, rc.audit_angles)
        self._report_cols = report_columns(rc.n_betas, n_points, rc.audit_angles)
        self._n_points = n_points

    def open_writers(self, append=False):
        self.out.mkdir(parents=True, exist_ok=True)
        sfx = self.file_suffix
        self.trace_w = _CsvWriter(self.out / f"trace{sfx}.csv", self._trace_cols, append)
        self.report_w = _CsvWriter(self.out / f"functional_report{sfx}.csv", self._report_cols, append)
        self.audit_w = _CsvWriter(self.out / f"audits{sfx}.csv", AUDIT_COLUMNS, append)

    def close_writers(self):
        for w in (self.trace_w, self.report_w, self.audit_w):
            if w is not None:
                w.close()

    # -- per-state hooks --

    def _emit_state(self, run_id, state, stage, base=None):
        self.trace_w.row(_trace_row(run_id, state, self.rc.audit_angles))
        self.report_w.row(_report_row(run_id, state, self.rc.audit_angles, self._n_points))
        for entry in self._state_audits(state):
            if not entry.passed:
                self.audit_failures += 1
                log.warning("audit %s failed at eps=%g t=%g", entry.name, state.eps, state.t)
            self.audit_w.row(_audit_row(run_id, state.eps, state.t, entry))
        write_checkpoint(
            self.out / f"{run_id}.ckpt",
            self.grid,
            state.eps,
            state.t,
            state.betas,
            stage,
            state.potential.values,
            base=base,
        )

    def _state_audits(self, state):
        grid = self.grid
        entries = [
            audit.chern_lu_check(grid, state.potential),
            audit.aubin_compare_check(grid, state.potential),
            audit.mass_check(grid, state.rho_rhs),
            audit.ricci_lower_bound_check(grid, state.rho_rhs, state.t, state.slack_density),
        ]
        if self.rc.with_lambda1:
            entries.append(
                audit.lichnerowicz_check(
                    grid,
                    state.rho_rhs,
                    state.t,
                    with_richardson=self.rc.with_richardson,
                    lam1=state.lambda1,
                )
            )
        return entries

    def _emit_trace_audits(self, run_id, trace):
        """Whole-trace monitors: modified-energy monotonicity, I drift."""
        eps, t_term = trace.eps, trace.terminal.t
        increasing = trace.states[-1].t >= trace.states[0].t
        for a in self.rc.audit_angles:
            vals = [
                st.report.E_modified[a]
                for st in trace.states
                if a in st.report.E_modified and st.t <= a + 1e-12
            ]
            if len(vals) < 2 or not increasing:
                continue
            worst = -math.inf
            ok = True
            for u, v in zip(vals, vals[1:]):
                allow = 1e-6 * (1.0 + abs(u))
                worst = max(worst, v - u)
                if v - u > allow:
                    ok = False
            entry = audit.AuditEntry(
                f"modified_energy_monotone:{a:g}", ok, worst, 0.0, tol=1e-6, note=f"states<=t={a:g}"
            )
            if not ok:
                self.audit_failures += 1
            self.audit_w.row(_audit_row(run_id, eps, t_term, entry))
        drift = paths.i_drift_monitor(trace)
        entry = audit.AuditEntry(
            "i_drift", drift["max_drift"] < 1.0, drift["max_drift"], 1.0, note=trace.kind
        )
        if not entry.passed:
            self.audit_failures += 1
        self.audit_w.row(_audit_row(run_id, eps, t_term, entry))

    def _emit_leg_audit(self, run_id, leg):
        if len(leg.states) < 2:
            return
        vals = paths.leg_monitor(leg)
        worst = float(np.max(np.diff(vals)))
        allow = 1e-6 * (1.0 + float(np.max(np.abs(vals))))
        entry = audit.AuditEntry(
            f"leg_monotone:{leg.meta['coordinate']}",
            worst <= allow,
            worst,
            0.0,
            tol=allow,
            note=f"end_betas={leg.meta['end_betas']}",
        )
        if not entry.passed:
            self.audit_failures += 1
        self.audit_w.row(_audit_row(run_id, leg.eps, leg.terminal.t, entry))

    def _emit_terminal_audits(self, run_id, state, qi_entries):
        if self.cfg is not None:
            bp = None if len(set(state.betas)) > 1 else state.betas[0]
            try:
                entry = audit.quasi_isometry_check(
                    self.grid, self.cfg.with_betas(state.betas), state.rho_rhs, bp, state.eps
                )
                qi_entries.append(entry)
                self.audit_w.row(_audit_row(run_id, state.eps, state.t, entry))
            except audit.AuditError as exc:
                log.warning("quasi-isometry audit skipped: %s", exc)
        if state.g_values is not None:
            entry = audit.kolodziej_monitor(self.grid, state.g_values, state.t, state.potential)
            self.audit_w.row(_audit_row(run_id, state.eps, state.t, entry))

    def _emit_plot(self, run_id, state):
        if not self.rc.output_block.get("emit_plots", False):
            return
        grid = self.grid
        v = grid.as_field_values(state.potential.values)
        rho = grid.as_field_values(state.rho_rhs)
        with open(self.out / f"profile_{run_id}.dat", "w", encoding="ascii") as fh:
            fh.write("# s rho_phi phi (azimuthal column 0)\n")
            for i in range(grid.Ns):
                fh.write(f"{_fmt(grid.s[i])} {_fmt(rho[i, 0])} {_fmt(v[i, 0])}\n")

    # -- cell drivers --

    def run_all(self, resume_info=None):
        """Execute every (eps) cell; returns the terminal PathState."""
        ladder = self.rc.eps_ladder
        qi_entries = []
        seed_phi = None
        terminal = None
        gaps = []
        prev_terminal_values = None
        sup_norms = []
        for ci, eps in enumerate(ladder):
            run_id = f"{self.run_prefix}-{ci:02d}"
            info = None if resume_info is None else resume_info.get(ci)
            terminal, seed_phi = self._run_cell(ci, eps, run_id, seed_phi, qi_entries, info)
            if eps <= 1e-2 + 1e-15:
                # terminal sup-norm uniformity is only expected once the
                # mollification is inside its small-eps regime, and holds for
                # the constant-free representative of the path equation
                sn = terminal.sup_norm_pinned
                sup_norms.append(terminal.sup_norm if math.isnan(sn) else sn)
            term_vals = terminal.potential.normalized("sup_zero").values
            if prev_terminal_values is not None:
                gap = float(np.max(np.abs(term_vals - prev_terminal_values)))
                if gaps and gap > gaps[-1] and gap > 1e-11:
                    raise paths.NonCauchy(gaps + [gap])
                gaps.append(gap)
                self.audit_w.row(
                    _audit_row(
                        run_id,
                        eps,
                        terminal.t,
                        audit.AuditEntry(f"ladder_gap:{ci}", True, gap, 0.0),
                    )
                )
            prev_terminal_values = term_vals

        run_id = f"{self.run_prefix}-{len(ladder) - 1:02d}"
        if len(qi_entries) >= 2:
            entry = audit.quasi_isometry_stability(qi_entries)
            if not entry.passed:
                self.audit_failures += 1
            self.audit_w.row(_audit_row(run_id, ladder[-1], terminal.t, entry))
        if len(sup_norms) >= 2 and min(sup_norms) > 0:
            # each cell within +-10% of the ladder's central value
            center = sum(sup_norms) / len(sup_norms)
            spread = max(abs(v - center) for v in sup_norms) / center
            entry = audit.AuditEntry("sup_norm_variation", spread <= 0.10, spread, 0.10)
            if not entry.passed:
                self.audit_failures += 1
            self.audit_w.row(_audit_row(run_id, ladder[-1], terminal.t, entry))

        write_checkpoint(
            self.out / f"final_potential{self.file_suffix}.ckpt",
            self.grid,
            terminal.eps,
            terminal.t,
            terminal.betas,
            "done",
            terminal.potential.values,
        )
        return terminal

    def _run_cell(self, ci, eps, run_id, seed_phi, qi_entries, info):
        rc = self.rc
        common = dict(
            schedule=rc.schedule(),
            newton_opts=rc.newton_opts(),
            audit_angles=rc.audit_angles,
            with_lambda1=rc.with_lambda1,
        )
        done_stage = None

        if info is not None and info["stage"] == "done":
            pot = ma_core.Potential(
                geometry.ScalarField(self.grid, self.grid.as_field_values(info["values"]))
            )
            _, phi_eps = ma_core.smooth_volume_family(self.grid, self.cfg, eps)
            state = self._rebuild_terminal_state(eps, info, pot, phi_eps)
            log.info("cell %d (eps=%g) already complete, skipping", ci, eps)
            return state, phi_eps

        if rc.kind == "fixed_angle":
            resume_from = None
            if info is not None and info["stage"] == "fixed_angle":
                resume_from = (info["t"], info["values"])
            trace = paths.run_fixed_angle_path(
                self.grid,
                self.cfg,
                eps,
                seed_phi_eps=seed_phi,
                on_state=lambda st: self._emit_state(run_id, st, "fixed_angle"),
                t_end=self.rc.path_block.get("t_end"),
                resume_from=resume_from,
                **common,
            )
            self._emit_trace_audits(run_id, trace)
            terminal = trace.terminal
            phi_eps = trace.meta["phi_eps"]
        elif rc.kind == "angle":
            terminal, phi_eps = self._run_angle_cell(run_id, eps, seed_phi, common, info)
        else:
            terminal, phi_eps = self._run_snc_cell(run_id, eps, seed_phi, common, info)

        self._emit_terminal_audits(run_id, terminal, qi_entries)
        self._emit_plot(run_id, terminal)
        write_checkpoint(
            self.out / f"{run_id}.ckpt",
            self.grid,
            terminal.eps,
            terminal.t,
            terminal.betas,
            "done",
            terminal.potential.values,
        )
        return terminal, phi_eps

    def _rebuild_terminal_state(self, eps, info, pot, phi_eps):
        grid = self.grid
        betas = info["betas"]
        cfg_t = None if self.cfg is None else self.cfg.with_betas(betas)
        stage = info.get("stage", "done")
        solved_fixed = stage == "fixed_angle" or (stage == "done" and self.rc.kind == "fixed_angle")
        if solved_fixed:
            psi, c_norm = ma_core.solve_reference(grid, self.cfg, eps, phi_eps)
            g = paths._fixed_angle_rhs(
                grid, cfg_t, eps, info["t"], phi_eps, c_norm, paths._log_norms(grid, cfg_t, eps)
            )
        else:
            g = paths._angle_rhs(grid, cfg_t, paths._log_norms(grid, cfg_t, eps))
        return paths._make_state(
            grid, cfg_t, eps, info["t"], pot, g, phi_eps, self.rc.audit_angles, None,
            self.rc.with_lambda1,
        )

    def _angle_target(self):
        tb = self.rc.path_block.get("target_betas")
        if tb is None:
            raise ConfigError("angle run needs path.target_betas")
        vals = set(float(b) for b in tb)
        if len(vals) != 1:
            raise ConfigError("uniform angle run needs equal target angles")
        return vals.pop()

    def _run_angle_cell(self, run_id, eps, seed_phi, common, info):
        grid, cfg = self.grid, self.cfg
        target = self._angle_target()
        if info is not None and info["stage"] == "angle":
            _, phi_eps = ma_core.smooth_volume_family(grid, cfg, eps, newton_init=seed_phi)
            base_cfg = cfg.with_betas(info["base"])
            pot = ma_core.Potential(
                geometry.ScalarField(grid, grid.as_field_values(info["values"]))
            )
            trace = paths.run_angle_path(
                grid, base_cfg, eps, info["t"], target,
                law=paths.anticanonical_law(base_cfg),
                start=pot, phi_eps=phi_eps, emit_start=False,
                on_state=lambda st: self._emit_state(
                    run_id, st, "angle", base=base_cfg.betas
                ),
                **common,
            )
            self._emit_trace_audits(run_id, trace)
            return trace.terminal, phi_eps

        resume_from = None
        if info is not None and info["stage"] == "fixed_angle":
            resume_from = (info["t"], info["values"])
        seed_trace = paths.run_fixed_angle_path(
            grid, cfg, eps, seed_phi_eps=seed_phi,
            on_state=lambda st: self._emit_state(run_id, st, "fixed_angle"),
            resume_from=resume_from,
            **common,
        )
        self._emit_trace_audits(run_id, seed_trace)
        phi_eps = seed_trace.meta["phi_eps"]
        t0 = cfg.mu
        trace = paths.run_angle_path(
            grid, cfg, eps, t0, target,
            law=paths.anticanonical_law(cfg),
            start=seed_trace.terminal.potential, phi_eps=phi_eps,
            on_state=lambda st: self._emit_state(run_id, st, "angle", base=cfg.betas),
            **common,
        )
        self._emit_trace_audits(run_id, trace)
        return trace.terminal, phi_eps

    def _run_snc_cell(self, run_id, eps, seed_phi, common, info):
        """Seed at the start angles, then walk the legs with stage labels.

        Mirrors paths.deform_angles but keeps per-stage checkpoint metadata
        so an interrupted cell resumes inside the correct leg.
        """
        grid, cfg = self.grid, self.cfg
        targets = tuple(float(b) for b in self.rc.path_block["target_betas"])
        order = tuple(self.rc.path_block.get("leg_order") or range(cfg.k))
        if sorted(order) != list(range(cfg.k)):
            raise ConfigError("path.leg_order must be a permutation of the coordinates")

        start_pos = 0
        resume_t = None
        if info is not None and info["stage"].startswith("leg:"):
            start_pos = int(info["stage"].split(":")[1])
            resume_t = info["t"]
            _, phi_eps = ma_core.smooth_volume_family(grid, cfg, eps, newton_init=seed_phi)
            current = cfg.with_betas(info["base"])
            pot = ma_core.Potential(
                geometry.ScalarField(grid, grid.as_field_values(info["values"]))
            )
        else:
            resume_from = None
            if info is not None and info["stage"] == "fixed_angle":
                resume_from = (info["t"], info["values"])
            seed_trace = paths.run_fixed_angle_path(
                grid, cfg, eps, seed_phi_eps=seed_phi,
                on_state=lambda st: self._emit_state(run_id, st, "fixed_angle"),
                resume_from=resume_from,
                **common,
            )
            self._emit_trace_audits(run_id, seed_trace)
            phi_eps = seed_trace.meta["phi_eps"]
            current = cfg
            pot = seed_trace.terminal.potential

        terminal = None
        for p in range(start_pos, len(order)):
            j = order[p]
            target_cfg = current.with_betas(
                tuple(targets[j] if i == j else b for i, b in enumerate(current.betas))
            )
            resuming_here = resume_t is not None and p == start_pos
            leg = paths.run_angle_path(
                grid, current, eps,
                resume_t if resuming_here else current.mu,
                target_cfg.mu,
                law=paths.leg_law(current, j), start=pot,
                phi_eps=phi_eps, emit_start=not resuming_here, kind=f"leg:{j}",
                on_state=lambda st, p=p, cur=current: self._emit_state(
                    run_id, st, f"leg:{p}", base=cur.betas
                ),
                **common,
            )
            leg.meta["coordinate"] = j
            leg.meta["end_betas"] = target_cfg.betas
            self._emit_leg_audit(run_id, leg)
            self._emit_trace_audits(run_id, leg)
            current = target_cfg
            pot = leg.terminal.potential
            terminal = leg.terminal
        if terminal is None:  # all legs resumed away; rebuild from checkpoint
            terminal = self._rebuild_terminal_state(eps, info, pot, phi_eps)
        return terminal, phi_eps


def _write_meta(out_dir, rc, seed, extra=None):
    meta = {
        "package_version": __version__,
        "config": rc.raw,
        "seed": seed,
        "trace_columns": trace_columns(rc.n_betas, rc.audit_angles),
    }
    if extra:
        meta.update(extra)
    with open(Path(out_dir) / "run_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---- verbs ---------------------------------------------------------------


def _load_config(args):
    if not getattr(args, "config", None):
        raise ConfigError("--config is required")
    return RunConfig.from_file(args.config)


def _out_dir(args, rc):
    if getattr(args, "out", None):
        return Path(args.out)
    d = rc.output_block.get("directory")
    if not d:
        raise ConfigError("no output directory (set output.directory or pass --out)")
    return Path(d)


def cmd_deform(args):
    try:
        rc = _load_config(args)
        out = _out_dir(args, rc)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    runner = ExperimentRunner(rc, out)
    runner.open_writers()
    _write_meta(out, rc, args.seed)
    try:
        runner.run_all()
    except (ma_core.SolverError, paths.NonCauchy) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    finally:
        runner.close_writers()
    if runner.audit_failures:
        log.error("%d audit entries failed", runner.audit_failures)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_resume(args):
    try:
        rc = _load_config(args)
        out = _out_dir(args, rc)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    runner = ExperimentRunner(rc, out)
    resume_info = {}
    try:
        for ci in range(len(rc.eps_ladder)):
            path = out / f"run-{ci:02d}.ckpt"
            if path.exists():
                ck = read_checkpoint(path)
                _check_grid_match(ck, runner.grid)
                if abs(ck["eps"] - rc.eps_ladder[ci]) > 0:
                    raise CheckpointError(
                        f"checkpoint eps {ck['eps']} does not match ladder cell {ci}"
                    )
                resume_info[ci] = ck
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CONFIG
    runner.open_writers(append=True)
    try:
        runner.run_all(resume_info=resume_info)
    except (ma_core.SolverError, paths.NonCauchy) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    finally:
        runner.close_writers()
    if runner.audit_failures:
        return EXIT_AUDIT
    return EXIT_OK


def cmd_audit(args):
    try:
        rc = _load_config(args)
        out = _out_dir(args, rc)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        ck = read_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CONFIG
    runner = ExperimentRunner(rc, out, file_suffix="_reaudit")
    try:
        _check_grid_match(ck, runner.grid)
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CONFIG
    grid = runner.grid
    pot = ma_core.Potential(geometry.ScalarField(grid, grid.as_field_values(ck["values"])))
    _, phi_eps = ma_core.smooth_volume_family(grid, runner.cfg, ck["eps"])
    state = runner._rebuild_terminal_state(ck["eps"], ck, pot, phi_eps)
    runner.open_writers()
    try:
        run_id = "reaudit"
        runner.trace_w.row(_trace_row(run_id, state, rc.audit_angles))
        runner.report_w.row(_report_row(run_id, state, rc.audit_angles, runner._n_points))
        for entry in runner._state_audits(state):
            if not entry.passed:
                runner.audit_failures += 1
            runner.audit_w.row(_audit_row(run_id, state.eps, state.t, entry))
        runner._emit_terminal_audits(run_id, state, [])
    finally:
        runner.close_writers()
    if runner.audit_failures:
        return EXIT_AUDIT
    print(f"audit ok: eps={state.eps:g} t={state.t:g} betas={state.betas}")
    return EXIT_OK


def cmd_sweep(args):
    try:
        rc = _load_config(args)
        out = _out_dir(args, rc)
        targets = rc.path_block.get("targets")
        if not targets:
            raise ConfigError("sweep needs path.targets (list of target angles)")
        if rc.kind != "angle":
            raise ConfigError("sweep only supports path.kind = angle")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    _write_meta(out, rc, args.seed, extra={"sweep_targets": list(targets)})
    cells = [(ti, float(tb)) for ti, tb in enumerate(targets)]

    def run_one(ti, target):
        sub = dict(rc.raw)
        sub_path = dict(sub["path"])
        sub_path["target_betas"] = [target] * len(rc.divisor_block["betas"])
        sub_path.pop("targets", None)
        sub = {**sub, "path": sub_path}
        rc_cell = RunConfig.from_dict(sub)
        runner = ExperimentRunner(
            rc_cell, out, run_prefix=f"sweep-{ti:02d}", file_suffix=f"_cell{ti:02d}"
        )
        runner.open_writers()
        try:
            runner.run_all()
        finally:
            runner.close_writers()
        return runner.audit_failures

    failures = 0
    errors = []
    n_threads = max(1, args.threads)
    if n_threads == 1:
        for ti, tb in cells:
            try:
                failures += run_one(ti, tb)
            except (ma_core.SolverError, paths.NonCauchy) as exc:
                errors.append((ti, tb, str(exc)))
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_threads) as pool:
            futs = {pool.submit(run_one, ti, tb): (ti, tb) for ti, tb in cells}
            for fut in concurrent.futures.as_completed(futs):
                ti, tb = futs[fut]
                try:
                    failures += fut.result()
                except (ma_core.SolverError, paths.NonCauchy) as exc:
                    errors.append((ti, tb, str(exc)))

    # deterministic merge regardless of completion order
    for name, cols_fn in (
        ("trace", lambda r: trace_columns(r.n_betas, r.audit_angles)),
        ("functional_report", lambda r: report_columns(
            r.n_betas, 0 if r.divisor_block["mode"] == "none" else len(r.divisor_block["betas"]),
            r.audit_angles)),
        ("audits", lambda r: AUDIT_COLUMNS),
    ):
        with open(out / f"{name}.csv", "w", encoding="ascii", newline="\n") as dst:
            dst.write(",".join(cols_fn(rc)) + "\n")
            for ti, _ in cells:
                part = out / f"{name}_cell{ti:02d}.csv"
                if part.exists():
                    with open(part, "r", encoding="ascii") as src:
                        next(src, None)
                        dst.write(src.read())

    for ti, tb, msg in sorted(errors):
        log.error("sweep cell %d (target %g) failed: %s", ti, tb, msg)
    if errors:
        return EXIT_SOLVER
    if failures:
        return EXIT_AUDIT
    return EXIT_OK


# ---- entry point ---------------------------------------------------------


def _setup_logging():
    level = os.environ.get("CONE_KE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def main(argv=None):
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="cone-ke",
        description="Continuity-method laboratory for conical constant-curvature metrics",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="parallel cells (sweep only)")
        p.add_argument("--seed", type=int, default=0, help="recorded in run metadata")
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint file to read")

    common(sub.add_parser("deform", help="run the configured deformation pipeline"))
    common(sub.add_parser("audit", help="re-run the audit suite on a checkpoint"), checkpoint=True)
    common(sub.add_parser("resume", help="continue an interrupted run"))
    common(sub.add_parser("sweep", help="fan out one config over many target angles"))

    args = parser.parse_args(argv)
    handler = {
        "deform": cmd_deform,
        "audit": cmd_audit,
        "resume": cmd_resume,
        "sweep": cmd_sweep,
    }[args.verb]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
