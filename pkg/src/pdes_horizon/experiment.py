"""Batch experiments: spec files, ensemble sweeps, archives and reports."""

import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from . import __version__
from . import scaling
from .engine import run_ensemble
from .errors import (
    ArchiveIOError,
    ConfigError,
    FitError,
    HorizonError,
    MissingCellsError,
    NotSaturatedError,
    ResourceLimitError,
    UnknownSelectionError,
)
from .horizon import Mode, SimConfig
from .model_fits import MeanFieldCounters, eval_composite, eval_u_kpz, mean_field_u
from .rng import derive_seed
from .statistics import FIELDS, INDEX, N_FIELDS, EnsembleSeries, default_tail_start, steady_state_mean

ARCHIVE_FORMAT = "pdes-horizon-archive"
DEFAULT_BUDGET = 1e10
OUTPUT_ENV = "PDES_HORIZON_OUTPUT"
# infinite-size utilization of the unconstrained single-site model
U_INF_NV1 = 0.246461
SUMMARY_COLUMNS = ("L", "N_V", "delta", "u_mean", "u_stderr", "w_mean", "w_stderr",
                   "wa_mean", "wa_stderr", "saturated")
TASKS = ("exponents", "extrapolate", "composite-fit", "meanfield")
DEFAULT_TOLERANCE = {"exponents": 0.05, "extrapolate": 0.02, "composite-fit": 0.07,
                     "meanfield": 0.15}


def _parse_delta(d):
    if d is None:
        return None
    if isinstance(d, str):
        if d.strip().lower() in ("unconstrained", "none", "inf", "infinity", "null"):
            return None
        try:
            d = float(d)
        except ValueError as exc:
            raise ConfigError(f"bad delta {d!r}") from exc
    d = float(d)
    return None if math.isinf(d) else d


def _fmt(x):
    return "%.17g" % x


@dataclass
class ExperimentSpec:
    """A sweep over (L, N_V, delta) cells sharing one protocol.

    ``steps`` and ``burn_in`` accept ``"auto"``. ``overrides`` is a list of
    rules ``{L:…, n_v:…, delta:…, steps:…, n_trials:…, burn_in:…}``; a rule
    applies to every cell matching all of its given keys, later rules win.
    """

    L: list
    n_v: list
    delta: list
    n_trials: int
    master_seed: int
    steps: Union[int, str] = "auto"
    mode: str = "conservative"
    name: str = "experiment"
    burn_in: Union[int, str] = "auto"
    tail: int = 10_000
    record: tuple = FIELDS
    record_every: int = 1
    instrument: bool = False
    spread: Optional[float] = None
    site_policy: str = "persist"
    workers: int = 1
    budget: float = DEFAULT_BUDGET
    allow_large: bool = False
    overrides: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("L", "n_v", "delta"):
            v = getattr(self, name)
            if not isinstance(v, (list, tuple)):
                v = [v]
            if len(v) == 0:
                raise ConfigError(f"sweep list {name} is empty")
            setattr(self, name, list(v))
        self.delta = [_parse_delta(d) for d in self.delta]
        self.L = [int(x) for x in self.L]
        self.n_v = [int(x) for x in self.n_v]
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        Mode(self.mode)
        unknown = set(self.record) - set(FIELDS)
        if unknown:
            raise ConfigError(f"unknown statistics {sorted(unknown)}; known: {list(FIELDS)}")
        self.record = tuple(f for f in FIELDS if f in set(self.record))
        if int(self.record_every) < 1:
            raise ConfigError("record_every must be >= 1")
        for key in ("steps", "burn_in"):
            v = getattr(self, key)
            if v != "auto" and (int(v) != v or int(v) < (1 if key == "steps" else 0)):
                raise ConfigError(f"{key} must be 'auto' or a nonnegative integer, got {v!r}")
        for rule in self.overrides:
            bad = set(rule) - {"L", "n_v", "delta", "steps", "n_trials", "burn_in"}
            if bad:
                raise ConfigError(f"unknown override keys {sorted(bad)}")
        for cfg, _ in self.cells():
            pass

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown spec keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ArchiveIOError(f"cannot read spec {path}: {exc}") from exc
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse spec {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"spec {path} is not a mapping")
        return cls.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        d["record"] = list(self.record)
        d["delta"] = ["unconstrained" if x is None else x for x in self.delta]
        d["overrides"] = [
            {k: ("unconstrained" if k == "delta" and v is None else v) for k, v in r.items()}
            for r in self.overrides
        ]
        return d

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def _cell_settings(self, L, n_v, delta):
        s = {"steps": self.steps, "n_trials": self.n_trials, "burn_in": self.burn_in}
        for rule in self.overrides:
            if "L" in rule and int(rule["L"]) != L:
                continue
            if "n_v" in rule and int(rule["n_v"]) != n_v:
                continue
            if "delta" in rule and _parse_delta(rule["delta"]) != delta:
                continue
            s.update({k: rule[k] for k in ("steps", "n_trials", "burn_in") if k in rule})
        return s

    def cells(self):
        """Yield ``(SimConfig, plan)`` per cell in sweep order (L, N_V, delta)."""
        for L, n_v, delta in itertools.product(self.L, self.n_v, self.delta):
            s = self._cell_settings(L, n_v, delta)
            plan = resolve_plan(L, delta, s["steps"], s["burn_in"], self.tail)
            plan["n_trials"] = int(s["n_trials"])
            cfg = SimConfig(L=L, n_v=n_v, delta=delta, mode=Mode(self.mode),
                            steps=plan["steps"], seed=0, site_policy=self.site_policy)
            yield cfg, plan

    def pe_steps(self):
        return sum(c.L * c.steps * p["n_trials"] for c, p in self.cells())


def auto_burn_in(L, delta):
    """Unconstrained: three times the crossover estimate L^(3/2)."""
    if delta is None:
        return int(math.ceil(3 * L**1.5))
    return None


def resolve_plan(L, delta, steps, burn_in, tail):
    b = auto_burn_in(L, delta) if burn_in == "auto" else int(burn_in)
    if steps == "auto":
        steps = b + int(tail) if b is not None else 4 * int(tail)
    steps = int(steps)
    short = False
    if b is not None and b >= steps - 1:
        if burn_in != "auto":
            raise ConfigError(f"burn-in {b} leaves no measurement steps out of {steps} (L={L})")
        # explicit short run: keep the default tail but never call it saturated
        b, short = None, True
    tail_start = default_tail_start(steps, b or 0)
    return {"steps": steps, "burn_in": tail_start - 1 if b is None else b,
            "tail_start": tail_start, "auto_plateau": b is None and not short,
            "short": short}


@dataclass
class CellTable:
    """One cell of an archive: metadata, steady-state summary and a thinned series."""

    meta: dict
    t: np.ndarray
    mean: dict
    stderr: dict

    @property
    def key(self):
        m = self.meta
        return (m["L"], m["n_v"], m["delta"])

    def series(self):
        """Rebuild an EnsembleSeries for the analysis functions."""
        T = self.t.shape[0]
        mean = np.full((T, N_FIELDS), np.nan)
        err = np.full((T, N_FIELDS), np.nan)
        tail_mean = np.full(N_FIELDS, np.nan)
        tail_err = np.full(N_FIELDS, np.nan)
        drift = np.full(N_FIELDS, np.nan)
        drift_err = np.full(N_FIELDS, np.nan)
        for f in self.mean:
            mean[:, INDEX[f]] = self.mean[f]
            err[:, INDEX[f]] = self.stderr[f]
        for f, s in self.meta["steady"].items():
            tail_mean[INDEX[f]] = s["mean"]
            tail_err[INDEX[f]] = s["stderr"]
            drift[INDEX[f]] = s.get("drift", np.nan)
            drift_err[INDEX[f]] = s.get("drift_stderr", np.nan)
        m = self.meta
        cfg = SimConfig(L=m["L"], n_v=m["n_v"], delta=m["delta"], mode=Mode(m["mode"]),
                        steps=m["steps"], site_policy=m["site_policy"])
        return EnsembleSeries(cfg, m["n_trials"], self.t.copy(), mean, err, m["tail_start"],
                              tail_mean, tail_err, drift, drift_err)

    def counters(self):
        c = self.meta.get("counters")
        if c is None:
            return None
        s = self.meta["steady"].get("u", {})
        return MeanFieldCounters(c["n_OK"], c["n_w"], c["n_Delta"], c["idle_w"],
                                 c["idle_Delta"], s.get("mean", math.nan),
                                 s.get("stderr", math.nan))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["t"] + [f"{f}_{k}" for f in self.mean for k in ("mean", "stderr")]
        w.writerow(cols)
        for i in range(self.t.shape[0]):
            row = [str(int(self.t[i]))]
            for f in self.mean:
                row += [_fmt(self.mean[f][i]), _fmt(self.stderr[f][i])]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, meta, text):
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        data = np.array([[float(x) for x in r] for r in body]).reshape(len(body), len(header))
        names = [h[: -len("_mean")] for h in header[1::2]]
        mean = {n: data[:, 1 + 2 * i] for i, n in enumerate(names)}
        err = {n: data[:, 2 + 2 * i] for i, n in enumerate(names)}
        return cls(meta, data[:, 0].astype(np.int64), mean, err)


class ResultArchive:
    """Manifest plus one table per cell; stored as a directory.

    The directory holds ``manifest.json``, ``cells/<id>.json`` (summary) and
    ``cells/<id>.csv`` (series). Wall-clock information goes to
    ``run_info.json`` so the rest stays byte-identical across reruns.
    """

    def __init__(self, manifest, cells, run_info=None):
        self.manifest = manifest
        self.cells = list(cells)
        self.run_info = run_info or {}

    def __len__(self):
        return len(self.cells)

    def table_names(self):
        return ["summary"] + [c.meta["id"] for c in self.cells]

    def find(self, L=None, n_v=None, delta="any"):
        out = []
        for c in self.cells:
            m = c.meta
            if L is not None and m["L"] != L:
                continue
            if n_v is not None and m["n_v"] != n_v:
                continue
            if delta != "any" and m["delta"] != delta:
                continue
            out.append(c)
        return out

    # ---- persistence -------------------------------------------------------
    def save(self, path):
        path = Path(path)
        try:
            (path / "cells").mkdir(parents=True, exist_ok=True)
            _write(path / "manifest.json", _dumps(self.manifest))
            for c in self.cells:
                _write(path / "cells" / f"{c.meta['id']}.json", _dumps(c.meta))
                _write(path / "cells" / f"{c.meta['id']}.csv", c.to_csv())
            _write(path / "run_info.json", _dumps(self.run_info))
        except OSError as exc:
            raise ArchiveIOError(f"cannot write archive {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
            if manifest.get("format") != ARCHIVE_FORMAT:
                raise ArchiveIOError(f"{path} is not a result archive")
            cells = []
            for ref in manifest["cells"]:
                cid = ref["id"]
                meta = _undump(json.loads((path / "cells" / f"{cid}.json").read_text()))
                text = (path / "cells" / f"{cid}.csv").read_text()
                cells.append(CellTable.from_csv(meta, text))
            info_path = path / "run_info.json"
            info = json.loads(info_path.read_text()) if info_path.exists() else {}
        except (OSError, KeyError, ValueError) as exc:
            raise ArchiveIOError(f"cannot read archive {path}: {exc}") from exc
        return cls(manifest, cells, info)

    def to_document(self):
        return _jsonable({
            "manifest": self.manifest,
            "cells": [
                {"meta": c.meta, "series": {
                    "t": [int(x) for x in c.t],
                    "mean": {f: list(map(float, v)) for f, v in c.mean.items()},
                    "stderr": {f: list(map(float, v)) for f, v in c.stderr.items()},
                }}
                for c in self.cells
            ],
        })

    @classmethod
    def from_document(cls, doc):
        cells = []
        for c in doc["cells"]:
            s = c["series"]
            arr = lambda v: np.array([math.nan if x is None else x for x in v], dtype=float)
            cells.append(CellTable(
                _undump(c["meta"]), np.array(s["t"], dtype=np.int64),
                {f: arr(v) for f, v in s["mean"].items()},
                {f: arr(v) for f, v in s["stderr"].items()},
            ))
        return cls(doc["manifest"], cells)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if not math.isfinite(x) else x
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _undump(meta):
    """Restore NaN for nulls inside the numeric summary fields."""
    for s in meta.get("steady", {}).values():
        for k in ("mean", "stderr", "drift", "drift_stderr"):
            if s.get(k) is None:
                s[k] = math.nan
    return meta


def _dumps(obj):
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---- running -----------------------------------------------------------------

def check_budget(spec):
    need = spec.pe_steps()
    if need > spec.budget and not spec.allow_large:
        raise ResourceLimitError(
            f"spec needs about {need:.3g} PE-step attempts, over the budget of "
            f"{spec.budget:.3g}; raise 'budget' or set 'allow_large: true'"
        )
    return need


def run_experiment(spec, out=None, workers=None, progress=None):
    """Run every cell of ``spec``; returns the ResultArchive (saved when ``out`` is given).

    Trial ``i`` of cell ``c`` uses seed ``derive_seed(master_seed, c, i)``, so
    results do not depend on ``workers``.
    """
    check_budget(spec)
    workers = spec.workers if workers is None else workers
    started = time.time()
    cells = []
    pool_cm = ProcessPoolExecutor(max_workers=workers) if workers > 1 else nullcontext()
    with pool_cm as pool:
        for idx, (cfg, plan) in enumerate(spec.cells()):
            t0 = time.time()
            try:
                cells.append(_run_cell(spec, idx, cfg, plan, pool))
            except HorizonError:
                raise
            except Exception as exc:
                raise HorizonError(f"cell {idx} ({cfg.L}, {cfg.n_v}, {cfg.delta}): {exc}") from exc
            if progress:
                progress(idx, cfg, time.time() - t0)
    manifest = {
        "format": ARCHIVE_FORMAT,
        "version": 1,
        "tool_version": __version__,
        "name": spec.name,
        "spec": spec.to_dict(),
        "spec_hash": spec.digest(),
        "master_seed": spec.master_seed,
        "cells": [{"id": c.meta["id"], "L": c.meta["L"], "n_v": c.meta["n_v"],
                   "delta": c.meta["delta"]} for c in cells],
    }
    info = {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "wall_seconds": round(time.time() - started, 3), "workers": workers}
    archive = ResultArchive(manifest, cells, info)
    if out is not None:
        archive.save(out)
    return archive


def _run_cell(spec, idx, cfg, plan, pool):
    n = plan["n_trials"]
    seeds = [derive_seed(spec.master_seed, idx, i) for i in range(n)]
    run = run_ensemble(cfg, n, seeds=seeds, burn_in=plan["burn_in"],
                       tail_start=plan["tail_start"], spread=spec.spread,
                       instrument=spec.instrument, pool=pool)
    series = run.series
    steady = {}
    if len(series) >= 100:
        for f in FIELDS:
            ss = steady_state_mean(series, f)
            steady[f] = {"mean": ss.mean, "stderr": ss.stderr, "saturated": ss.saturated,
                         "drift": ss.drift, "drift_stderr": ss.drift_stderr}
    else:
        for f in FIELDS:
            steady[f] = {"mean": float(series.tail_mean[INDEX[f]]),
                         "stderr": float(series.tail_stderr[INDEX[f]]),
                         "saturated": False, "drift": math.nan, "drift_stderr": math.nan}
    t_p = None
    if cfg.constrained and len(series) >= 100:
        try:
            t_p = scaling.plateau_start(series, "w")
        except (NotSaturatedError, HorizonError):
            t_p = None
        if plan["auto_plateau"] and (t_p is None or t_p > plan["tail_start"]):
            for s in steady.values():
                s["saturated"] = False
    if plan.get("short"):
        for s in steady.values():
            s["saturated"] = False
    keep = np.nonzero((series.t % spec.record_every == 0) | (series.t == 1))[0]
    meta = {
        "id": f"c{idx:03d}",
        "index": idx,
        "L": cfg.L, "n_v": cfg.n_v, "delta": cfg.delta,
        "mode": cfg.mode.value, "site_policy": cfg.site_policy,
        "steps": cfg.steps, "n_trials": n,
        "burn_in": plan["burn_in"], "tail_start": plan["tail_start"],
        "t_plateau": t_p,
        "seeds": seeds,
        "steady": steady,
        "counters": None,
    }
    if spec.instrument:
        c = MeanFieldCounters.from_array(run.counters)
        meta["counters"] = {"n_OK": c.n_OK, "n_w": c.n_w, "n_Delta": c.n_Delta,
                            "idle_w": c.idle_w, "idle_Delta": c.idle_Delta,
                            "n_tot": c.n_tot, "delta_bar": c.delta_bar,
                            "kappa_bar": c.kappa_bar, "p_w": c.p_w, "p_Delta": c.p_Delta}
    mean = {f: series.get(f)[keep].copy() for f in spec.record}
    err = {f: series.err(f)[keep].copy() for f in spec.record}
    return CellTable(meta, series.t[keep].copy(), mean, err)


# ---- emitting ----------------------------------------------------------------

def summary_rows(archive):
    rows = []
    for c in archive.cells:
        m, s = c.meta, c.meta["steady"]
        rows.append([
            str(m["L"]), str(m["n_v"]),
            "unconstrained" if m["delta"] is None else _fmt(m["delta"]),
            _fmt(s["u"]["mean"]), _fmt(s["u"]["stderr"]),
            _fmt(s["w"]["mean"]), _fmt(s["w"]["stderr"]),
            _fmt(s["wa"]["mean"]), _fmt(s["wa"]["stderr"]),
            str(all(s[f]["saturated"] for f in ("u", "w", "wa"))).lower(),
        ])
    return rows


def emit(archive, fmt, out_dir, selection=None):
    """Write CSV files (one per selected cell plus the summary) or one JSON document.

    ``selection`` names tables from ``archive.table_names()``; None means all.
    Returns the written paths.
    """
    names = archive.table_names()
    if selection:
        unknown = [s for s in selection if s not in names]
        if unknown:
            raise UnknownSelectionError(
                f"unknown tables {unknown}; available: {', '.join(names)}", names
            )
        chosen = list(selection)
    else:
        chosen = names
    out_dir = Path(out_dir)
    stem = archive.manifest.get("name", "experiment")
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            doc = archive.to_document()
            keep = set(chosen)
            doc["cells"] = [c for c in doc["cells"] if c["meta"]["id"] in keep]
            if "summary" in keep:
                doc["summary"] = {"columns": list(SUMMARY_COLUMNS), "rows": summary_rows(archive)}
            p = out_dir / f"{stem}.json"
            _write(p, json.dumps(doc, indent=1, sort_keys=True) + "\n")
            written.append(p)
        elif fmt == "csv":
            if "summary" in chosen:
                buf = io.StringIO()
                w = csv.writer(buf, lineterminator="\n")
                w.writerow(SUMMARY_COLUMNS)
                w.writerows(summary_rows(archive))
                p = out_dir / f"{stem}_summary.csv"
                _write(p, buf.getvalue())
                written.append(p)
            for c in archive.cells:
                if c.meta["id"] in chosen:
                    p = out_dir / f"{stem}_{c.meta['id']}.csv"
                    _write(p, c.to_csv())
                    written.append(p)
        else:
            raise ConfigError(f"unknown format {fmt!r}; use csv or json")
    except OSError as exc:
        raise ArchiveIOError(f"cannot write to {out_dir}: {exc}") from exc
    return written


# ---- analysis ----------------------------------------------------------------

def _groups(archive):
    groups = {}
    for c in archive.cells:
        m = c.meta
        groups.setdefault((m["n_v"], m["delta"], m["mode"]), []).append(c)
    for cells in groups.values():
        cells.sort(key=lambda c: c.meta["L"])
    return groups


def _label(n_v, delta):
    return f"N_V={n_v}, delta={'unconstrained' if delta is None else _fmt(delta)}"


def reference_u(n_v, delta, mode="conservative"):
    """Published infinite-size utilization for a cell, None where there is none."""
    if mode != Mode.CONSERVATIVE.value:
        return 1.0 if delta is None else None
    if delta is None:
        return U_INF_NV1 if n_v == 1 else eval_u_kpz(n_v)
    return eval_composite(n_v, delta)


def _verdict(value, ref, tol, relative=True):
    if ref is None or value is None or not math.isfinite(value):
        return None
    dev = abs(value - ref) / abs(ref) if relative else abs(value - ref)
    return bool(dev <= tol)


def _extrapolation_points(cells):
    return [(1.0 / c.meta["L"], c.meta["steady"]["u"]["mean"], c.meta["steady"]["u"]["stderr"])
            for c in cells]


def analyze(archive, task, tolerance=None):
    """Run one analysis task; returns a JSON-ready report with pass/fail verdicts."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    if len(archive) == 0:
        raise MissingCellsError("archive has no cells; run an experiment first",
                                ["any (L, N_V, delta) cell"])
    tol = DEFAULT_TOLERANCE[task] if tolerance is None else float(tolerance)
    fn = {"exponents": _analyze_exponents, "extrapolate": _analyze_extrapolate,
          "composite-fit": _analyze_composite, "meanfield": _analyze_meanfield}[task]
    items = fn(archive, tol)
    verdicts = [it["pass"] for it in items if it.get("pass") is not None]
    return {
        "task": task,
        "archive": archive.manifest.get("name"),
        "spec_hash": archive.manifest.get("spec_hash"),
        "tolerance": tol,
        "items": items,
        "pass": bool(verdicts) and all(verdicts),
    }


def _need_three_L(archive):
    groups = _groups(archive)
    ok = {k: v for k, v in groups.items() if len({c.meta["L"] for c in v}) >= 3}
    if not ok:
        missing = [
            f"{_label(k[0], k[1])}: have L={sorted({c.meta['L'] for c in v})}, need 3 distinct L"
            for k, v in groups.items()
        ]
        raise MissingCellsError("extrapolation needs at least three L per (N_V, delta)", missing)
    return ok


def _analyze_exponents(archive, tol):
    items = []
    for (n_v, delta, mode), cells in _groups(archive).items():
        rd = mode == Mode.RANDOM_DEPOSITION.value
        beta_ref = 0.5 if rd and delta is None else (1 / 3 if delta is None else None)
        for c in cells:
            s = c.series()
            it = {"kind": "beta", "cell": c.meta["id"], "L": c.meta["L"], "n_v": n_v,
                  "delta": delta, "mode": mode, "reference": beta_ref}
            try:
                b = scaling.growth_exponent(s)
                it.update(value=b.value, stderr=b.stderr,
                          pass_=_verdict(b.value, beta_ref, tol, relative=False))
            except HorizonError as exc:
                it.update(value=None, error=str(exc), pass_=None if beta_ref is None else False)
            try:
                it["t_cross"] = scaling.crossover_time(s, constrained=delta is not None)
            except HorizonError as exc:
                it["t_cross"] = None
                it["t_cross_error"] = str(exc)
            it["pass"] = it.pop("pass_")
            items.append(it)
        if rd or len({c.meta["L"] for c in cells}) < 3:
            continue
        w2 = [(c.meta["L"], c.meta["steady"]["w2"]["mean"], c.meta["steady"]["w2"]["stderr"],
               c.meta["steady"]["w2"]["saturated"]) for c in cells]
        alpha_ref = 0.5 if delta is None else None
        it = {"kind": "alpha", "n_v": n_v, "delta": delta, "mode": mode,
              "L": [p[0] for p in w2], "reference": alpha_ref}
        try:
            a = scaling.roughness_exponent(w2)
            it.update(value=a.value, stderr=a.stderr,
                      **{"pass": _verdict(a.value, alpha_ref, tol, relative=False)})
        except HorizonError as exc:
            it.update(value=None, error=str(exc), **{"pass": None if alpha_ref is None else False})
        items.append(it)
    return items


def _analyze_extrapolate(archive, tol):
    items = []
    for (n_v, delta, mode), cells in _need_three_L(archive).items():
        pts = _extrapolation_points(cells)
        ref = reference_u(n_v, delta, mode)
        it = {"n_v": n_v, "delta": delta, "mode": mode, "L": [c.meta["L"] for c in cells],
              "u_L": [p[1] for p in pts], "reference": ref}
        km = scaling.krug_meakin_extrapolate([(c.meta["L"], p[1], p[2]) for c, p in zip(cells, pts)])
        it["krug_meakin"] = {"u_inf": km.u_inf, "stderr": km.stderr, **km.coefficients}
        try:
            r = scaling.rational_extrapolate(pts)
            it["rational"] = {"u_inf": r.u_inf, "stderr": r.stderr, "degrees": list(r.degrees),
                              **r.coefficients}
        except HorizonError as exc:
            it["rational"] = {"error": str(exc)}
        try:
            ri = scaling.rational_interpolation_extrapolate(pts)
            it["rational_interp"] = {"u_inf": ri.u_inf, "error_estimate": ri.stderr}
        except HorizonError as exc:
            it["rational_interp"] = {"error": str(exc)}
        it["pass"] = _verdict(km.u_inf, ref, tol)
        items.append(it)
    return items


def _analyze_composite(archive, tol):
    items = []
    for (n_v, delta, mode), cells in _need_three_L(archive).items():
        if delta is None or mode != Mode.CONSERVATIVE.value:
            continue
        pts = _extrapolation_points(cells)
        ref = eval_composite(n_v, delta)
        it = {"n_v": n_v, "delta": delta, "L": [c.meta["L"] for c in cells],
              "u_L": [p[1] for p in pts], "composite": ref}
        try:
            r = scaling.rational_extrapolate(pts)
            it.update(u_inf=r.u_inf, stderr=r.stderr, degrees=list(r.degrees),
                      rel_dev=(r.u_inf - ref) / ref, **{"pass": _verdict(r.u_inf, ref, tol)})
        except (FitError, HorizonError) as exc:
            it.update(u_inf=None, error=str(exc), **{"pass": False})
        items.append(it)
    if not items:
        raise MissingCellsError("composite fit needs constrained conservative cells with three L",
                                ["delta in {1, 10, 100} x N_V in {1, 10, 100}, three L each"])
    return items


def _analyze_meanfield(archive, tol):
    items = []
    for c in archive.cells:
        counters = c.counters()
        m = c.meta
        if counters is None or m["n_v"] < 3 or m["mode"] != Mode.CONSERVATIVE.value:
            continue
        regime = "unconstrained" if m["delta"] is None else "large_delta"
        pred = mean_field_u(counters, m["n_v"], regime)
        items.append({"cell": m["id"], "L": m["L"], "n_v": m["n_v"], "delta": m["delta"],
                      "regime": regime, "delta_bar": counters.delta_bar,
                      "kappa_bar": counters.kappa_bar, "p_w": counters.p_w,
                      "p_Delta": counters.p_Delta, "u_measured": counters.u,
                      "u_mean_field": pred, "rel_dev": (pred - counters.u) / counters.u,
                      "pass": _verdict(pred, counters.u, tol)})
    if not items:
        raise MissingCellsError("mean-field check needs instrumented cells with N_V >= 3",
                                ["rerun with 'instrument: true' and N_V >= 3"])
    return items


def format_report(report):
    """Short human-readable rendering of an analysis report."""
    lines = [f"{report['task']}: {'PASS' if report['pass'] else 'FAIL'} "
             f"(tolerance {report['tolerance']:g})"]
    for it in report["items"]:
        tag = {True: "ok  ", False: "FAIL", None: "--  "}[it.get("pass")]
        head = _label(it.get("n_v"), it.get("delta"))
        if "L" in it and not isinstance(it["L"], list):
            head = f"L={it['L']}, " + head
        if report["task"] == "exponents":
            v = it.get("value")
            body = f"{it['kind']}={v:.4f}±{it['stderr']:.4f}" if v is not None else it.get("error", "")
        elif report["task"] == "extrapolate":
            body = f"u_inf(KM)={it['krug_meakin']['u_inf']:.5f}"
            if "u_inf" in it.get("rational", {}):
                body += f", u_inf(rational)={it['rational']['u_inf']:.5f}"
        elif report["task"] == "composite-fit":
            body = (f"u_inf={it['u_inf']:.5f} vs {it['composite']:.5f} ({100 * it['rel_dev']:+.1f}%)"
                    if it.get("u_inf") is not None else it.get("error", ""))
        else:
            body = (f"u={it['u_measured']:.4f}, mean-field {it['u_mean_field']:.4f} "
                    f"({100 * it['rel_dev']:+.1f}%)")
        ref = it.get("reference")
        if ref is not None:
            body += f" [ref {ref:.4f}]"
        lines.append(f"  {tag} {head}: {body}")
    return "\n".join(lines)


def default_output_dir(name):
    return Path(os.environ.get(OUTPUT_ENV, "results")) / name
