"""CSV and JSON ingestion with schema validation, and plot-ready exports.

Every emitted CSV starts with a ``#`` comment line naming the currency unit;
readers skip such lines.
"""
from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from dataclasses import asdict
from typing import Iterable, Sequence

import numpy as np

from .calibration import InfectionPanel, ThetaSpec
from .firmmodel import Firm

UNIT_LINE = "# currency: EUR million (revenue rates in EUR million per day)"

PORTFOLIO_COLUMNS = ["firm_id", "sector", "K", "rho", "subunit_idx", "z0", "mu_daily", "sigma_daily"]
REVENUE_COLUMNS = ["firm_id", "sector", "year", "revenue_meur"]
INFECTION_COLUMNS = ["day", "size", "count"]
SECTOR_COLUMNS = ["sector", "share"]


class InputError(Exception):
    """Invalid or missing input file; the message names the location."""


def _rows(path: str, columns: Sequence[str]):
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.lstrip().startswith("#") and ln.strip()]
    reader = csv.DictReader(lines)
    missing = [c for c in columns if c not in (reader.fieldnames or [])]
    if missing:
        raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
    for n, row in enumerate(reader, start=2):
        yield n, row


def _num(path, n, row, col, kind=float):
    raw = row[col]
    try:
        v = kind(raw)
    except (TypeError, ValueError):
        raise InputError(f"{path}: row {n}, column {col}: cannot parse {raw!r}") from None
    if isinstance(v, float) and not np.isfinite(v):
        raise InputError(f"{path}: row {n}, column {col}: non-finite value")
    return v


def _int(path, n, row, col):
    v = _num(path, n, row, col, float)
    if v != int(v):
        raise InputError(f"{path}: row {n}, column {col}: expected an integer, got {row[col]!r}")
    return int(v)


def read_portfolio(path: str) -> list[Firm]:
    """Firms from ``firm_id,sector,K,rho,subunit_idx,z0,mu_daily,sigma_daily``."""
    subs = defaultdict(dict)
    meta = {}
    for n, row in _rows(path, PORTFOLIO_COLUMNS):
        fid = row["firm_id"]
        K = _int(path, n, row, "K")
        j = _int(path, n, row, "subunit_idx")
        z0 = _num(path, n, row, "z0")
        mu = _num(path, n, row, "mu_daily")
        sig = _num(path, n, row, "sigma_daily")
        rho = _num(path, n, row, "rho")
        if K < 1:
            raise InputError(f"{path}: row {n}, column K: must be >= 1")
        if z0 <= 0:
            raise InputError(f"{path}: row {n}, column z0: must be positive")
        if sig <= 0:
            raise InputError(f"{path}: row {n}, column sigma_daily: must be positive")
        if not 1 <= j <= K:
            raise InputError(f"{path}: row {n}, column subunit_idx: must lie in 1..K")
        if fid in meta and meta[fid][1:] != (K, rho):
            raise InputError(f"{path}: row {n}: inconsistent K or rho for firm {fid}")
        meta.setdefault(fid, (row["sector"], K, rho))
        subs[fid][j] = (z0, mu, sig)
    firms = []
    for fid, (sector, K, rho) in meta.items():
        if sorted(subs[fid]) != list(range(1, K + 1)):
            raise InputError(f"{path}: firm {fid}: expected subunits 1..{K}")
        arr = np.array([subs[fid][j] for j in range(1, K + 1)])
        try:
            firms.append(Firm(fid, sector, arr[:, 0], arr[:, 1], arr[:, 2], rho))
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from None
    return firms


def write_portfolio(path: str, firms: Iterable[Firm]) -> None:
    rows = []
    for f in firms:
        for j in range(f.size):
            rows.append((f.id, f.sector, f.size, f.rho, j + 1, f.z0[j], f.drift[j], f.vol[j]))
    write_csv(path, PORTFOLIO_COLUMNS, rows)


def read_revenues(path: str):
    """Annual revenue panel: ``{firm_id: series}`` (ordered by year) and sectors."""
    data = defaultdict(dict)
    sectors = {}
    for n, row in _rows(path, REVENUE_COLUMNS):
        fid = row["firm_id"]
        year = _int(path, n, row, "year")
        rev = _num(path, n, row, "revenue_meur")
        if rev <= 0:
            raise InputError(f"{path}: row {n}, column revenue_meur: must be positive")
        if year in data[fid]:
            raise InputError(f"{path}: row {n}: duplicate year {year} for firm {fid}")
        data[fid][year] = rev
        sectors[fid] = row["sector"]
    if not data:
        raise InputError(f"{path}: no rows")
    series = {fid: [ys[y] for y in sorted(ys)] for fid, ys in data.items()}
    return series, sectors


def read_infections(path: str, K: int | None = None) -> InfectionPanel:
    """Panel from ``day,size,count``; missing cells are zero."""
    cells = []
    for n, row in _rows(path, INFECTION_COLUMNS):
        day = _int(path, n, row, "day")
        size = _int(path, n, row, "size")
        count = _int(path, n, row, "count")
        if count < 0:
            raise InputError(f"{path}: row {n}, column count: negative count {count}")
        if day < 0:
            raise InputError(f"{path}: row {n}, column day: negative day")
        if size < 1:
            raise InputError(f"{path}: row {n}, column size: must be >= 1")
        cells.append((day, size, count))
    if not cells:
        raise InputError(f"{path}: no rows")
    days = max(c[0] for c in cells) + 1
    K = K or max(c[1] for c in cells)
    counts = np.zeros((days, K))
    for d, s, c in cells:
        if s > K:
            raise InputError(f"{path}: size {s} exceeds the configured maximum {K}")
        counts[d, s - 1] += c
    return InfectionPanel(counts)


def write_infections(path: str, panel: InfectionPanel) -> None:
    rows = [(u, k + 1, int(panel.counts[u, k])) for u in range(panel.n_days) for k in range(panel.K)]
    write_csv(path, INFECTION_COLUMNS, rows, unit=False)


def read_sector_rates(path: str) -> dict:
    out = {}
    for n, row in _rows(path, SECTOR_COLUMNS):
        share = _num(path, n, row, "share")
        if share < 0:
            raise InputError(f"{path}: row {n}, column share: negative share")
        out[row["sector"]] = share
    # tolerance for shares published as rounded percentages
    if sum(out.values()) > 1 + 1e-3:
        raise InputError(f"{path}: shares sum to more than 1")
    return out


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence], unit: bool = True) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write((UNIT_LINE if unit else "# no currency columns") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_theta(path: str) -> ThetaSpec:
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        d = doc.get("theta", doc)
        return ThetaSpec(**{k: float(d[k]) for k in asdict(ThetaSpec())})
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: invalid theta document ({exc})") from None


def write_json(path: str, doc) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
