"""Nearest-neighbour retrieval and Recall@N over geo-tagged descriptors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvaluationError, ParameterError

REPORT_SCHEMA = "event_vpr.recall/1"
DEFAULT_NS = (1, 5, 10, 20)


@dataclass
class RecallReport:
    recalls: dict[int, float]
    n_queries: int
    phi: float
    model_version: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ns(self) -> list[int]:
        return sorted(self.recalls)

    def __getitem__(self, n: int) -> float:
        return self.recalls[n]

    def is_monotone(self) -> bool:
        vals = [self.recalls[n] for n in self.ns]
        return all(a <= b for a, b in zip(vals, vals[1:])) and all(0.0 <= v <= 1.0 for v in vals)

    def to_record(self) -> dict:
        rec = {"schema": REPORT_SCHEMA, "model_version": self.model_version,
               "phi": self.phi, "n_queries": self.n_queries}
        rec.update({f"recall@{n}": self.recalls[n] for n in self.ns})
        rec.update(self.extra)
        return rec

    def format_table(self) -> str:
        head = "".join(f"{'R@' + str(n):>9}" for n in self.ns)
        row = "".join(f"{100 * self.recalls[n]:8.2f}%" for n in self.ns)
        return (f"queries={self.n_queries}  phi={self.phi:g} m  model_version={self.model_version}\n"
                f"{head}\n{row}\n")


def retrieve(query_desc: np.ndarray, db_desc: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest database rows per query (Euclidean, ties -> lower index)."""
    out = np.empty((len(query_desc), min(k, len(db_desc))), dtype=np.int64)
    for i, q in enumerate(query_desc):
        d2 = ((db_desc - q) ** 2).sum(1)
        out[i] = np.argsort(d2, kind="stable")[:out.shape[1]]
    return out


def recall_at_n(query_desc, query_coords, db_desc, db_coords, ns: Sequence[int] = DEFAULT_NS,
                phi: float = 20.0, model_version: int | None = None) -> RecallReport:
    """Fraction of queries with a geo-true match (distance < phi) among their N nearest."""
    query_desc = np.asarray(query_desc, dtype=np.float64)
    db_desc = np.asarray(db_desc, dtype=np.float64)
    query_coords = np.asarray(query_coords, dtype=np.float64).reshape(-1, 2)
    db_coords = np.asarray(db_coords, dtype=np.float64).reshape(-1, 2)
    if len(db_desc) == 0:
        raise EvaluationError("empty database")
    if len(query_desc) == 0:
        raise EvaluationError("no queries")
    if query_desc.shape[1] != db_desc.shape[1]:
        raise EvaluationError("query and database descriptors differ in dimension")
    if len(query_coords) != len(query_desc) or len(db_coords) != len(db_desc):
        raise EvaluationError("one coordinate pair per descriptor required")
    ns = sorted(set(int(n) for n in ns))
    if ns[0] < 1:
        raise ParameterError("N must be >= 1")

    nearest = retrieve(query_desc, db_desc, ns[-1])
    hits = np.zeros(len(ns))
    for i, row in enumerate(nearest):
        geo = np.sqrt(((db_coords[row] - query_coords[i]) ** 2).sum(1))
        good = np.flatnonzero(geo < phi)
        if good.size:
            first = good[0] + 1  # rank of the first correct match
            hits += np.array([first <= n for n in ns])
    recalls = {n: float(h / len(query_desc)) for n, h in zip(ns, hits)}
    return RecallReport(recalls, len(query_desc), float(phi), model_version)


def split_queries(place_ids: Sequence[str], query_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per place, pick ``query_fraction`` of its entries as queries (at least one, never all).

    Places with a single entry contribute only to the database.
    """
    rng = np.random.default_rng(seed)
    place_ids = np.asarray(place_ids)
    queries = []
    for place in sorted(set(place_ids.tolist())):
        idx = np.flatnonzero(place_ids == place)
        if len(idx) < 2:
            continue
        n_q = int(np.clip(round(query_fraction * len(idx)), 1, len(idx) - 1))
        queries.extend(rng.choice(idx, size=n_q, replace=False).tolist())
    q = np.array(sorted(queries), dtype=np.int64)
    db = np.setdiff1d(np.arange(len(place_ids)), q)
    return q, db


def evaluate_model(model, db, ns=DEFAULT_NS, phi: float = 20.0, query_fraction: float = 0.5,
                   seed: int = 0, model_version: int | None = None, batch_size: int = 32) -> RecallReport:
    """Describe every bin of ``db`` and score the query/database partition."""
    q_idx, db_idx = split_queries(db.place_ids, query_fraction, seed)
    desc = model.describe(db.bins(), batch_size=batch_size)
    return recall_at_n(desc[q_idx], db.coords[q_idx], desc[db_idx], db.coords[db_idx], ns, phi,
                       model_version)


def write_report(report: RecallReport, out_dir, name: str = "recall") -> tuple[Path, Path]:
    """Write ``<name>.txt`` (human table) and ``<name>.csv`` (one data row)."""
    out_dir = Path(out_dir)
    txt = out_dir / f"{name}.txt"
    txt.write_text(report.format_table(), encoding="utf-8")
    rec = report.to_record()
    path = out_dir / f"{name}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rec), lineterminator="\n")
        w.writeheader()
        w.writerow(rec)
    return txt, path
