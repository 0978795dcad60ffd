"""Weakly supervised triplet training with a periodically refreshed descriptor cache."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .config import RunConfig
from .errors import DataError, TrainingAborted
from .evaluation import evaluate_model
from .mining import (
    DescriptorCache,
    GeoTaggedDatabase,
    MiningConfig,
    TrainingTriplet,
    mine_triplet,
    queries_with_positives,
)
from .model import EventVPRNet
from .representations import EventBatch, Representation
from .vlad import NetVLAD, init_clusters

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "event_vpr.checkpoint/1"
METRICS_SCHEMA = "event_vpr.metrics/1"
METRICS_FIELDS = ("epoch", "step", "loss", "recall@1", "recall@5", "recall@10", "recall@20", "wall_time")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def build_model(cfg: RunConfig, height: int, width: int) -> EventVPRNet:
    """Fresh network for the given config and sensor geometry, seeded from the config."""
    r, b, v = cfg.representation, cfg.backbone, cfg.vlad
    torch.manual_seed(cfg.training.seed)
    rep = Representation(r.kind, r.channels, r.kernel, r.polarity_mode, r.tau_max, r.activation,
                         r.scale, seed=cfg.training.seed)
    bb = Backbone(BackboneConfig(b.architecture, rep.out_channels, b.descriptor_depth, (height, width),
                                 bias=b.bias))
    pool = NetVLAD(v.num_clusters, b.descriptor_depth, v.alpha, v.eps, v.normalize_input)
    model = EventVPRNet(rep, bb, pool).to(DTYPES[cfg.training.dtype])
    if b.freeze:
        for prm in model.backbone.parameters():
            prm.requires_grad_(False)
    return model


@torch.no_grad()
def calibrate_norm_stats(model: EventVPRNet, bins, batch_size: int = 32) -> None:
    """Recompute the recorded batch-norm statistics as a plain average over ``bins``.

    Fresh layers record mean 0 / variance 1, which would make evaluation-mode
    features (cache, k-means corpus) disagree with training-mode ones.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms or not bins:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    was_training = model.training
    model.train()
    try:
        for i in range(0, len(bins), batch_size):
            model.feature_maps(EventBatch.from_bins(bins[i:i + batch_size]))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.train(was_training)


def initialize_clusters(model: EventVPRNet, db: GeoTaggedDatabase, cfg: RunConfig,
                        rng: np.random.Generator) -> None:
    """k-means over local descriptors of a random subset of ``db`` bins."""
    v = cfg.vlad
    n_bins = min(v.init_bins, len(db))
    picked = np.sort(rng.choice(len(db), size=n_bins, replace=False))
    local = model.local_descriptors(db.bins(picked))
    if len(local) > v.init_descriptors:
        local = local[np.sort(rng.choice(len(local), size=v.init_descriptors, replace=False))]
    params = init_clusters(local, v.num_clusters, v.alpha, seed=cfg.training.seed, max_iter=v.kmeans_max_iter)
    params.centroids = params.centroids.to(model.dtype)
    params.weight = params.weight.to(model.dtype)
    params.bias = params.bias.to(model.dtype)
    model.pool.set_params(params)


# ---------------------------------------------------------------------------
# loss and batching


def triplet_loss(d_pos, d_negs, margin: float):
    """Sum over negatives of max(d_pos - d_neg + margin, 0)."""
    d_negs = torch.as_tensor(d_negs) if not torch.is_tensor(d_negs) else d_negs
    d_pos = torch.as_tensor(d_pos, dtype=d_negs.dtype) if not torch.is_tensor(d_pos) else d_pos
    return torch.clamp(d_pos - d_negs + margin, min=0.0).sum()


@dataclass
class TripletBatch:
    """Bins of several triplets merged into one event batch.

    Triplet i occupies bin positions ``offsets[i]`` (query), ``+1`` (best
    positive) and the next ``len(triplets[i].negatives)`` (hard negatives).
    """

    events: EventBatch
    triplets: list[TrainingTriplet]
    offsets: list[int]
    bin_indices: list[int]  # database index of every bin position

    def split(self, descriptors: torch.Tensor):
        """Per-triplet (query, positive, negatives) descriptor views."""
        for t, o in zip(self.triplets, self.offsets):
            n = len(t.negatives)
            yield descriptors[o], descriptors[o + 1], descriptors[o + 2:o + 2 + n]


def assemble_batch(triplets: Sequence[TrainingTriplet], db: GeoTaggedDatabase) -> TripletBatch | None:
    """Concatenate query, best positive and hard negatives of each triplet in turn.

    Triplets without hard negatives contribute no loss and are skipped.
    Returns None when nothing is left.
    """
    kept, offsets, order = [], [], []
    for t in triplets:
        if not t.negatives:
            log.debug("skipping query %d: no hard negatives", t.query)
            continue
        offsets.append(len(order))
        order.extend([t.query, t.positive, *t.negatives])
        kept.append(t)
    if not kept:
        return None
    return TripletBatch(EventBatch.from_bins(db.bins(order)), kept, offsets, order)


def _dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # clamp keeps the sqrt gradient finite for coincident descriptors
    return ((a - b) ** 2).sum(-1).clamp_min(1e-24).sqrt()


def batch_loss(descriptors: torch.Tensor, batch: TripletBatch, margin: float) -> torch.Tensor:
    """Mean over triplets of the per-triplet ranking loss."""
    losses = [triplet_loss(_dist(q, p), _dist(q, n), margin) for q, p, n in batch.split(descriptors)]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: EventVPRNet, optimizer, cfg: RunConfig, step: int, epoch: int,
                    geometry: tuple[int, int], queries_seen: int = 0,
                    rng: np.random.Generator | None = None) -> Path:
    path = Path(path)
    state = {
        "schema": CHECKPOINT_SCHEMA,
        "step": int(step),
        "epoch": int(epoch),
        "queries_seen": int(queries_seen),
        "geometry": [int(g) for g in geometry],
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "numpy_rng": rng.bit_generator.state if rng is not None else None,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[EventVPRNet, dict]:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("schema") != CHECKPOINT_SCHEMA:
        raise DataError(f"{path}: unsupported checkpoint schema {state.get('schema')!r}")
    cfg = RunConfig.from_dict(state["config"])
    h, w = state["geometry"]
    model = build_model(cfg, h, w)
    model.load_state_dict(state["model"])
    model.eval()
    state["config"] = cfg
    return model, state


def make_optimizer(model: EventVPRNet, cfg: RunConfig):
    t = cfg.training
    params = [p for p in model.parameters() if p.requires_grad]
    if t.optimizer == "adam":
        return torch.optim.Adam(params, lr=t.lr, weight_decay=t.weight_decay)
    return torch.optim.SGD(params, lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay)


# ---------------------------------------------------------------------------
# loop


class MetricsLog:
    """Newline-delimited JSON: a header line, then one record per epoch."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        if not (append and self.path.exists()):
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"schema": METRICS_SCHEMA, "fields": list(METRICS_FIELDS)}) + "\n")

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> tuple[dict, list[dict]]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return json.loads(lines[0]), [json.loads(x) for x in lines[1:]]


@dataclass
class TrainResult:
    model: EventVPRNet
    checkpoint: Path
    metrics: Path
    step: int
    epoch: int
    history: list[dict] = field(default_factory=list)
    cache: DescriptorCache | None = None


def _dump_nan(out_dir: Path, step: int, batch: TripletBatch, db: GeoTaggedDatabase, loss) -> Path:
    path = out_dir / "nan_dump.json"
    path.write_text(json.dumps({
        "step": step,
        "loss": repr(float(loss)),
        "triplets": [
            {"query": t.query, "positive": t.positive, "negatives": list(t.negatives),
             "bin_ids": [db.entries[i].bin_id for i in (t.query, t.positive, *t.negatives)]}
            for t in batch.triplets
        ],
    }, indent=2), encoding="utf-8")
    return path


def train(train_db: GeoTaggedDatabase, cfg: RunConfig, out_dir, val_db: GeoTaggedDatabase | None = None,
          resume=None, deterministic: bool = False) -> TrainResult:
    """Train on ``train_db``; optionally score Recall@N on ``val_db`` every ``eval_every`` epochs.

    Writes ``metrics.jsonl`` and ``checkpoint.pt`` (plus ``checkpoint_eNNN.pt``
    at the configured cadence) into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if deterministic:
        set_deterministic(True)
    t_cfg = cfg.training
    if len(train_db) == 0:
        raise DataError("training database is empty")
    geometry = (train_db.bin(0).height, train_db.bin(0).width)
    rng = np.random.default_rng(t_cfg.seed)

    if resume is not None:
        model, state = load_checkpoint(resume)
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_dict(state["optimizer"])
        step, start_epoch, queries_seen = state["step"], state["epoch"], state["queries_seen"]
        if state["numpy_rng"] is not None:
            rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])
    else:
        model = build_model(cfg, *geometry)
        picked = np.sort(rng.choice(len(train_db), size=min(cfg.vlad.init_bins, len(train_db)), replace=False))
        calibrate_norm_stats(model, train_db.bins(picked), cfg.eval.batch_size)
        initialize_clusters(model, train_db, cfg, rng)
        optimizer = make_optimizer(model, cfg)
        step, start_epoch, queries_seen = 0, 0, 0

    mining_cfg = MiningConfig(cfg.mining.pos_radius, cfg.mining.neg_radius, cfg.mining.n_sample,
                              cfg.mining.n_neg, t_cfg.margin)
    queries = queries_with_positives(train_db, mining_cfg.pos_radius)
    if len(queries) == 0:
        raise DataError("no training query has a potential positive")
    cache = DescriptorCache(interval=cfg.mining.cache_interval, queries_seen=queries_seen)
    train_db.cache = cache

    metrics = MetricsLog(out_dir / "metrics.jsonl", append=resume is not None)
    history = []
    t_start = time.perf_counter()
    ckpt = out_dir / "checkpoint.pt"

    for epoch in range(start_epoch, t_cfg.epochs):
        cache.refresh(train_db, model, step, cfg.eval.batch_size)
        order = rng.permutation(queries)
        losses = []
        for i in range(0, len(order), t_cfg.batch_size):
            triplets = []
            for q in order[i:i + t_cfg.batch_size]:
                trip = mine_triplet(train_db, int(q), mining_cfg, rng)
                if cache.note_query():
                    cache.refresh(train_db, model, step, cfg.eval.batch_size)
                if trip is not None:
                    triplets.append(trip)
            batch = assemble_batch(triplets, train_db)
            if batch is None:
                continue
            model.train()
            optimizer.zero_grad()
            loss = batch_loss(model(batch.events), batch, t_cfg.margin)
            if not torch.isfinite(loss):
                dump = _dump_nan(out_dir, step, batch, train_db, loss.item())
                raise TrainingAborted(f"non-finite loss at step {step}; triplets dumped to {dump}", dump)
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(loss.item())

        record = {"epoch": epoch + 1, "step": step,
                  "loss": float(np.mean(losses)) if losses else 0.0}
        if val_db is not None and t_cfg.eval_every and (epoch + 1) % t_cfg.eval_every == 0:
            rep = evaluate_model(model, val_db, cfg.eval.recall_ns, cfg.eval.phi, cfg.data.query_fraction,
                                 t_cfg.seed, step, cfg.eval.batch_size)
            record.update({f"recall@{n}": rep[n] for n in rep.ns})
        record["wall_time"] = None if deterministic else round(time.perf_counter() - t_start, 3)
        metrics.write(record)
        history.append(record)
        log.info("epoch %d step %d loss %.5f %s", epoch + 1, step, record["loss"],
                 " ".join(f"{k}={v:.3f}" for k, v in record.items() if k.startswith("recall")))
        if t_cfg.checkpoint_every and (epoch + 1) % t_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_e{epoch + 1:03d}.pt", model, optimizer, cfg, step,
                            epoch + 1, geometry, cache.queries_seen, rng)

    model.eval()
    save_checkpoint(ckpt, model, optimizer, cfg, step, max(start_epoch, t_cfg.epochs), geometry,
                    cache.queries_seen, rng)
    return TrainResult(model, ckpt, metrics.path, step, max(start_epoch, t_cfg.epochs), history, cache)


def geographic_split(db: GeoTaggedDatabase, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random partition of place ids into train and test sets; returns entry indices."""
    places = np.array(sorted(set(db.place_ids.tolist())))
    if len(places) < 2:
        raise DataError("need at least two places to split")
    rng = np.random.default_rng(seed)
    n_test = int(np.clip(round(test_fraction * len(places)), 1, len(places) - 1))
    test_places = set(rng.choice(places, size=n_test, replace=False).tolist())
    is_test = np.array([p in test_places for p in db.place_ids.tolist()])
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)
