"""Command-line front end: certify parameter points, scan (t, s) grids, build trees.

Configuration is one JSON document; ``--set a.b=value`` overrides a field
by its dotted path.  Outputs are written to ``output_dir``:

* ``certify``: report.json, report.csv
* ``scan``: report.json, report.csv, scan_plot.csv, boxes.csv
* ``tree``: report.json, tree.json, tree.csv, density.csv

Exit codes: 0 when every mandated certificate passes, 1 when one fails,
2 on a configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import homoclinic_tree as ht
from . import hypotheses as hy
from . import skew3d as sk
from .central_maps import CentralMap, CentralMapSpec, Regime, build_central_map
from .certify import Policy
from .domains import build_ladder
from .errors import ConfigError, PreconditionFailed, SNHCError
from .return_maps import build_return_model, default_floor

SCHEMA = "v1"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
# report-only: the sampled hyperbolic threshold fails for the canonical map
REPORT_ONLY = {hy.Condition.T1}

DEFAULTS: dict[str, Any] = {
    "regime": None,
    "map": {"lam": None, "beta": None, "delta": 0.1, "s": 0.0},
    "lambda_s": sk.LAMBDA_S,
    "lambda_u": sk.LAMBDA_U,
    "t_grid": {"values": [1e-3]},
    "s_grid": None,
    "budgets": {
        "iteration_cap": 200_000_000,
        "max_branches": 1024,
        "box_resolution": 64,
        "box_horizon": 1000,
        "tree_depth": 8,
        "tree_width": 64,
    },
    "output_dir": "snhc_out",
    "mode": "fast",
}

MAP_DEFAULTS = {
    Regime.HYPERBOLIC: {"lam": 0.95, "beta": 1.01},
    Regime.SADDLE_NODE: {"lam": 0.999},
    Regime.TWO_PARAM: {"lam": 0.999, "beta": 1.001},
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated configuration."""

    regime: Regime
    map: dict
    lambda_s: float
    lambda_u: float
    t_values: tuple[float, ...]
    s_values: tuple[float, ...]
    budgets: dict
    output_dir: Path
    mode: str

    @property
    def policy(self) -> Policy:
        return Policy(directed=self.mode == "directed-rounding")

    def points(self) -> list[tuple[float, float]]:
        return [(t, s) for s in self.s_values for t in self.t_values]

    def central(self, s: float) -> CentralMap:
        reg = self.regime
        kw = {"regime": reg, "lam": self.map["lam"], "delta": self.map["delta"], "s": s}
        if reg is not Regime.SADDLE_NODE:
            kw["beta"] = self.map["beta"]
        return build_central_map(CentralMapSpec(**kw))

    def to_dict(self) -> dict:
        return {"regime": self.regime.value, "map": self.map, "lambda_s": self.lambda_s,
                "lambda_u": self.lambda_u, "t_values": list(self.t_values),
                "s_values": list(self.s_values), "budgets": self.budgets,
                "output_dir": str(self.output_dir), "mode": self.mode}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, sets: Sequence[str]) -> dict:
    """Apply ``key.path=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(raw)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"{key}: {p} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(val)
    return out


def grid_values(spec: Any, name: str) -> tuple[float, ...]:
    """Expand ``{"values": [...]}`` or ``{"min", "max", "count", "scale"}``.

    Raises:
        ConfigError: Malformed or empty grid.
    """
    if isinstance(spec, (int, float)):
        return (float(spec),)
    if not isinstance(spec, dict):
        raise ConfigError(f"{name} must be a number or an object")
    if "values" in spec:
        vals = tuple(float(v) for v in spec["values"])
    else:
        try:
            lo, hi, n = float(spec["min"]), float(spec["max"]), int(spec["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{name} needs min, max and count") from exc
        if n < 1:
            raise ConfigError(f"{name} is empty")
        scale = spec.get("scale", "linear")
        if scale == "log":
            if lo <= 0 or hi <= 0:
                raise ConfigError(f"{name}: a log grid needs positive bounds")
            vals = tuple(float(v) for v in np.geomspace(lo, hi, n))
        elif scale == "linear":
            vals = tuple(float(v) for v in np.linspace(lo, hi, n))
        else:
            raise ConfigError(f"{name}: unknown scale {scale!r}")
    if not vals:
        raise ConfigError(f"{name} is empty")
    if not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"{name} has non-finite values")
    return vals


def load_config(raw: dict) -> ScenarioConfig:
    """Validate a raw configuration dictionary.

    Raises:
        ConfigError: Any field is missing or invalid.
    """
    if not isinstance(raw, dict):
        raise ConfigError("the configuration must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown fields: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    # a grid is replaced whole; merging would mix "values" with min/max/count
    for key in ("t_grid", "s_grid"):
        if key in raw:
            cfg[key] = copy.deepcopy(raw[key])
    try:
        regime = Regime(str(cfg["regime"]).upper())
    except ValueError as exc:
        raise ConfigError(f"unknown regime {cfg['regime']!r}") from exc
    mp = dict(cfg["map"])
    for k, v in MAP_DEFAULTS[regime].items():
        if mp.get(k) is None:
            mp[k] = v
    if regime is Regime.SADDLE_NODE:
        mp.pop("beta", None)
    try:
        mp = {k: float(v) for k, v in mp.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"map parameters must be numbers: {mp}") from exc
    t_vals = grid_values(cfg["t_grid"], "t_grid")
    s_spec = cfg["s_grid"] if cfg["s_grid"] is not None else {"values": [mp["s"]]}
    s_vals = grid_values(s_spec, "s_grid")
    budgets = dict(cfg["budgets"])
    for k, v in budgets.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"budget {k} must be positive, got {v!r}")
    budgets = {k: int(v) for k, v in budgets.items()}
    if cfg["mode"] not in ("fast", "directed-rounding"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    try:
        ls, lu = float(cfg["lambda_s"]), float(cfg["lambda_u"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("lambda_s and lambda_u must be numbers") from exc
    if not (0 < ls < 1 < lu):
        raise ConfigError("need 0 < lambda_s < 1 < lambda_u")
    return ScenarioConfig(regime, mp, ls, lu, t_vals, s_vals, budgets,
                          Path(str(cfg["output_dir"])), cfg["mode"])


def read_config(path: str | os.PathLike, sets: Sequence[str] = ()) -> ScenarioConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return load_config(apply_overrides(raw, sets))


# ---------------------------------------------------------------------------
# per-point work
# ---------------------------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def certify_point(cfg: ScenarioConfig, t: float, s: float) -> dict:
    """Hypotheses and return-map certificates at one (t, s); errors become failures."""
    row: dict[str, Any] = {"t": t, "s": s, "regime": cfg.regime.value, "hypotheses": [],
                           "ell_cert": None, "i_bounds": None, "L": None, "error": None}
    mandated: list[bool] = []
    try:
        m = cfg.central(s)
        ladder = build_ladder(m, t, cap=cfg.budgets["iteration_cap"], policy=cfg.policy)
        reports = hy.all_reports(m, ladder)
        row["hypotheses"] = [r.to_dict() for r in reports]
        for r in reports:
            if r.condition is hy.Condition.L_HALF:
                row["L"] = r.lhs
            if r.condition not in REPORT_ONLY:
                mandated.append(r.passed)
        model = build_return_model(m, ladder, max_branches=cfg.budgets["max_branches"],
                                   cap=cfg.budgets["iteration_cap"])
        row["ell_cert"] = model.ell_cert
        row["i_bounds"] = list(model.i_bounds)
        row["ell_floor"] = default_floor(model)
        mandated.append(bool(model.ell_cert > row["ell_floor"]))
    except SNHCError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        mandated.append(False)
    row["passed"] = all(mandated)
    return row


def scan_point(cfg: ScenarioConfig, t: float, s: float) -> dict:
    """Certification flags plus the box classification verdict at one (t, s)."""
    row = certify_point(cfg, t, s)
    row["certified"] = row["passed"]
    row["verdict"] = None
    row["counts"] = None
    row["boxes_csv"] = ""
    try:
        fam = sk.make_family(cfg.central(s), t, cfg.lambda_s, cfg.lambda_u)
        bs = sk.max_invariant_boxes(fam, cfg.budgets["box_resolution"],
                                    cfg.budgets["box_horizon"])
        sk.classify_boxes(fam, bs)
        row["verdict"] = bs.verdict.value
        row["counts"] = bs.counts()
        row["adjacency"] = bs.contacts
        row["boxes_csv"] = bs.to_csv()
    except SNHCError as exc:
        row["box_error"] = f"{type(exc).__name__}: {exc}"
    return row


def _workers(n_tasks: int) -> int:
    env = os.environ.get("SNHC_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"SNHC_THREADS={env!r} is not an integer") from exc
    return max(1, min(cap, n_tasks))


def _run(fn: Callable, cfg: ScenarioConfig, points: list[tuple[float, float]]) -> list[dict]:
    n = _workers(len(points))
    if n == 1:
        return [fn(cfg, t, s) for t, s in points]
    with ProcessPoolExecutor(max_workers=n) as ex:
        futs = [ex.submit(fn, cfg, t, s) for t, s in points]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("t", "s", "regime", "passed", "ell_cert", "i_first", "i_last", "L",
                  "failed_conditions", "error")


def _report_csv(rows: list[dict], extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS + tuple(extra))
    for r in rows:
        ib = r["i_bounds"] or [None, None]
        failed = ";".join(h["condition"] for h in r["hypotheses"] if not h["pass"])
        vals = [r["t"], r["s"], r["regime"], r["passed"], r["ell_cert"], ib[0], ib[1],
                r["L"], failed, r["error"]]
        vals += [r.get(k) for k in extra]
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _report_json(command: str, cfg: ScenarioConfig, body: dict) -> str:
    doc = {"schema": SCHEMA, "command": command, "config": cfg.to_dict()}
    doc.update(body)
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def cmd_certify(cfg: ScenarioConfig) -> int:
    rows = _run(certify_point, cfg, cfg.points())
    ok = all(r["passed"] for r in rows)
    _write(cfg.output_dir, "report.json",
           _report_json("certify", cfg, {"rows": rows, "passed": ok}))
    _write(cfg.output_dir, "report.csv", _report_csv(rows))
    return EXIT_OK if ok else EXIT_FAIL


PLOT_COLUMNS = ("t", "s", "verdict", "verdict_code") + tuple(lab.value for lab in sk.Label)


def cmd_scan(cfg: ScenarioConfig) -> int:
    rows = _run(scan_point, cfg, cfg.points())
    boxes = io.StringIO()
    bw = csv.writer(boxes, lineterminator="\n")
    bw.writerow(("t", "s", "ix", "iy", "iz", "label"))
    plot = io.StringIO()
    pw = csv.writer(plot, lineterminator="\n")
    pw.writerow(PLOT_COLUMNS)
    for r in rows:
        text = r.pop("boxes_csv")
        for line in text.splitlines()[1:]:
            bw.writerow([_fmt(r["t"]), _fmt(r["s"])] + line.split(","))
        v = r["verdict"]
        code = sk.VERDICT_CODE[sk.Verdict(v)] if v else None
        counts = r["counts"] or {}
        pw.writerow([_fmt(r["t"]), _fmt(r["s"]), _fmt(v), _fmt(code)]
                    + [_fmt(counts.get(lab.value)) for lab in sk.Label])
        r["flag"] = "CERTIFIED" if r["certified"] else "UNCERTIFIED"
    ok = all(r["certified"] and r["verdict"] for r in rows)
    _write(cfg.output_dir, "report.json", _report_json("scan", cfg, {"rows": rows, "passed": ok}))
    _write(cfg.output_dir, "report.csv", _report_csv(rows, ("flag", "verdict")))
    _write(cfg.output_dir, "scan_plot.csv", plot.getvalue())
    _write(cfg.output_dir, "boxes.csv", boxes.getvalue())
    return EXIT_OK if ok else EXIT_FAIL


def cmd_tree(cfg: ScenarioConfig) -> int:
    """Build the homoclinic tree at the first grid point.

    Raises:
        PreconditionFailed: The point is not a saddle-node point or (SN) fails.
    """
    if cfg.regime is not Regime.SADDLE_NODE:
        raise PreconditionFailed("tree needs the SADDLE_NODE regime")
    t, s = cfg.t_values[0], cfg.s_values[0]
    m = cfg.central(s)
    ladder = build_ladder(m, t, cap=cfg.budgets["iteration_cap"], policy=cfg.policy)
    tree = ht.build_tree(m, ladder, depth=1, width=cfg.budgets["tree_width"])
    gaps = [(1, ht.density_gap(tree))]
    for d in range(2, cfg.budgets["tree_depth"] + 1):
        ht.grow(tree, d)
        gaps.append((d, ht.density_gap(tree)))
    report = ht.verify_H(tree)
    dens = io.StringIO()
    w = csv.writer(dens, lineterminator="\n")
    w.writerow(("depth", "density_gap"))
    for d, g in gaps:
        w.writerow((d, repr(g)))
    ok = report.all_passed
    body = {"t": t, "s": s, "realized_depth": tree.realized_depth, "H": report.to_dict(),
            "density": [{"depth": d, "gap": g} for d, g in gaps], "passed": ok}
    _write(cfg.output_dir, "report.json", _report_json("tree", cfg, body))
    _write(cfg.output_dir, "tree.json", tree.to_json())
    _write(cfg.output_dir, "tree.csv", tree.to_csv())
    _write(cfg.output_dir, "density.csv", dens.getvalue())
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"certify": cmd_certify, "scan": cmd_scan, "tree": cmd_tree}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snhc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a field by dotted path (repeatable)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = read_config(args.config, args.set)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SNHCError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
