"""Geo-tagged database, descriptor cache and triplet mining.

All searches are exhaustive scans; ties are broken by the lower entry index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, MiningError, ParameterError
from .events import EventBin, ManifestRecord, read_events, read_manifest, resolve_record_path

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DbEntry:
    bin_id: str
    place_id: str
    coords: tuple[float, float]
    source: str | None = None  # file the bin was read from, if any


class GeoTaggedDatabase:
    """Event bins with planar coordinates (metres) and a descriptor cache."""

    def __init__(self, entries: Sequence[DbEntry], bins: Sequence[EventBin] | None = None,
                 loader: Callable[[DbEntry], EventBin] | None = None):
        self.entries = list(entries)
        self.coords = np.array([e.coords for e in self.entries], dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.coords)):
            raise DataError("database coordinates must be finite")
        if bins is not None and len(bins) != len(self.entries):
            raise DataError("one bin per entry required")
        self._bins = list(bins) if bins is not None else [None] * len(self.entries)
        self._loader = loader or _load_from_source
        self.cache = DescriptorCache()

    @classmethod
    def from_manifest(cls, path) -> GeoTaggedDatabase:
        records = read_manifest(path)
        entries = [
            DbEntry(Path(r.path).stem, r.place_id, r.coords, str(resolve_record_path(r, path)))
            for r in records
        ]
        for e in entries:
            if not Path(e.source).is_file():
                raise DataError(f"bin file {e.source} listed in {path} does not exist")
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def bin(self, i: int) -> EventBin:
        if self._bins[i] is None:
            self._bins[i] = self._loader(self.entries[i])
        return self._bins[i]

    def bins(self, indices: Sequence[int] | None = None) -> list[EventBin]:
        idx = range(len(self)) if indices is None else indices
        return [self.bin(int(i)) for i in idx]

    @property
    def place_ids(self) -> np.ndarray:
        return np.array([e.place_id for e in self.entries])

    def subset(self, indices: Sequence[int]) -> GeoTaggedDatabase:
        indices = [int(i) for i in indices]
        return GeoTaggedDatabase([self.entries[i] for i in indices],
                                 [self._bins[i] for i in indices], self._loader)

    def manifest_records(self) -> list[ManifestRecord]:
        return [ManifestRecord(e.source or e.bin_id, e.place_id, *e.coords) for e in self.entries]


def _load_from_source(entry: DbEntry) -> EventBin:
    if entry.source is None:
        raise DataError(f"entry {entry.bin_id} has no bin file")
    return read_events(entry.source, id=entry.bin_id)


# ---------------------------------------------------------------------------
# cache


@dataclass
class DescriptorCache:
    """Database descriptors computed by one model version.

    ``interval`` is the number of training queries between refreshes;
    :meth:`note_query` reports when one is due.
    """

    interval: int = 1000
    descriptors: np.ndarray | None = None
    version: int = -1
    queries_seen: int = 0
    refreshes: int = 0
    history: list = field(default_factory=list)  # (queries_seen, version) per refresh

    def __post_init__(self):
        if self.interval < 1:
            raise ParameterError("cache interval must be >= 1")

    @property
    def valid(self) -> bool:
        return self.descriptors is not None

    def refresh(self, db: GeoTaggedDatabase, model, version: int, batch_size: int = 32) -> None:
        self.descriptors = model.describe(db.bins(), batch_size=batch_size)
        self.version = int(version)
        self.refreshes += 1
        self.history.append((self.queries_seen, self.version))
        log.debug("cache refreshed at %d queries, version %d", self.queries_seen, version)

    def note_query(self) -> bool:
        """Count one mined query; True when the count reaches a multiple of the interval."""
        self.queries_seen += 1
        return self.queries_seen % self.interval == 0


def refresh_cache(db: GeoTaggedDatabase, model, interval_counter: int, step: int,
                  force: bool = False, batch_size: int = 32) -> bool:
    """Recompute the cache when ``interval_counter`` hits a multiple of the interval.

    Returns whether a refresh happened.
    """
    due = force or (interval_counter > 0 and interval_counter % db.cache.interval == 0)
    if due:
        db.cache.refresh(db, model, step, batch_size)
    return due


# ---------------------------------------------------------------------------
# selection rules


@dataclass(frozen=True)
class TrainingTriplet:
    query: int
    positive: int
    negatives: tuple[int, ...]


def geo_distances(coords: np.ndarray, q: int) -> np.ndarray:
    return np.sqrt(((coords - coords[q]) ** 2).sum(1))


def _sq_desc_dist(desc: np.ndarray, q: int, idx: np.ndarray) -> np.ndarray:
    return ((desc[idx] - desc[q]) ** 2).sum(1)


def potential_positives(coords: np.ndarray, query: int, radius: float) -> np.ndarray:
    """Indices within ``radius`` metres of the query (inclusive), query excluded."""
    if not radius > 0:
        raise ParameterError("positive radius must be > 0")
    d = geo_distances(coords, query)
    idx = np.flatnonzero(d <= radius)
    return idx[idx != query]


def best_positive(descriptors: np.ndarray, query: int, candidates) -> int:
    """Candidate with the smallest descriptor distance to the query."""
    candidates = np.sort(np.asarray(candidates, dtype=np.int64))
    if candidates.size == 0:
        raise MiningError(f"query {query} has no positive candidates")
    return int(candidates[np.argmin(_sq_desc_dist(descriptors, query, candidates))])


def negative_pool(coords: np.ndarray, query: int, radius: float) -> np.ndarray:
    """All indices at least ``radius`` metres from the query."""
    return np.flatnonzero(geo_distances(coords, query) >= radius)


def sample_negatives(coords: np.ndarray, query: int, radius: float, n_sample: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement from the negative pool, sorted.

    Returns the whole pool when it has at most ``n_sample`` entries.
    """
    if n_sample < 1:
        raise ParameterError("n_sample must be >= 1")
    pool = negative_pool(coords, query, radius)
    if len(pool) <= n_sample:
        return pool
    return np.sort(rng.choice(pool, size=n_sample, replace=False))


def hard_negatives(descriptors: np.ndarray, query: int, positive: int, sampled,
                   margin: float, n_neg: int) -> np.ndarray:
    """Sampled negatives with d^2(q, neg) <= d^2(q, pos) + margin.

    At most ``n_neg`` survivors are kept, nearest first.
    """
    sampled = np.sort(np.asarray(sampled, dtype=np.int64))
    if sampled.size == 0 or n_neg <= 0:
        return np.zeros(0, dtype=np.int64)
    d2_pos = float(((descriptors[positive] - descriptors[query]) ** 2).sum())
    d2 = _sq_desc_dist(descriptors, query, sampled)
    keep = d2 <= d2_pos + margin
    order = np.argsort(d2[keep], kind="stable")
    return sampled[keep][order][:n_neg]


@dataclass(frozen=True)
class MiningConfig:
    pos_radius: float = 10.0
    neg_radius: float = 25.0
    n_sample: int = 100
    n_neg: int = 10
    margin: float = 0.1

    def __post_init__(self):
        if not self.pos_radius > 0:
            raise ParameterError("pos_radius must be > 0")
        if not self.neg_radius > self.pos_radius:
            raise ParameterError("neg_radius must exceed pos_radius")
        if self.n_sample < 1 or self.n_neg < 0:
            raise ParameterError("n_sample must be >= 1 and n_neg >= 0")


def queries_with_positives(db: GeoTaggedDatabase, pos_radius: float) -> np.ndarray:
    return np.array([q for q in range(len(db)) if len(potential_positives(db.coords, q, pos_radius))],
                    dtype=np.int64)


def mine_triplet(db: GeoTaggedDatabase, query: int, cfg: MiningConfig,
                 rng: np.random.Generator) -> TrainingTriplet | None:
    """Triplet for one query against the current cache, or None without positives."""
    if not db.cache.valid:
        raise MiningError("descriptor cache is empty")
    desc = db.cache.descriptors
    cands = potential_positives(db.coords, query, cfg.pos_radius)
    if cands.size == 0:
        return None
    pos = best_positive(desc, query, cands)
    sampled = sample_negatives(db.coords, query, cfg.neg_radius, cfg.n_sample, rng)
    negs = hard_negatives(desc, query, pos, sampled, cfg.margin, cfg.n_neg)
    return TrainingTriplet(query, pos, tuple(int(i) for i in negs))
