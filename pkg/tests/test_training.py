import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from event_vpr.errors import TrainingAborted
from event_vpr.representations import EventBatch
from event_vpr.mining import DescriptorCache, MiningConfig, TrainingTriplet, mine_triplet
from event_vpr.training import (
    METRICS_FIELDS,
    MetricsLog,
    assemble_batch,
    batch_loss,
    build_model,
    calibrate_norm_stats,
    geographic_split,
    load_checkpoint,
    save_checkpoint,
    train,
    triplet_loss,
)
from helpers import fd_check


@pytest.mark.parametrize(
    "d_pos, d_negs, m, expected",
    [(0.5, [0.3, 0.9], 0.1, 0.3), (0.2, [1.0, 2.0], 0.1, 0.0), (0.0, [0.0], 0.1, 0.1), (1.0, [0.5, 0.5], 0.5, 2.0)],
)
def test_triplet_loss_examples(d_pos, d_negs, m, expected):
    got = triplet_loss(torch.tensor(d_pos, dtype=torch.float64), torch.tensor(d_negs, dtype=torch.float64), m)
    assert abs(float(got) - expected) < 1e-12


def test_assemble_batch_layout(tiny_db):
    trips = [TrainingTriplet(0, 1, (6, 9)), TrainingTriplet(3, 4, ()), TrainingTriplet(12, 13, (0,))]
    b = assemble_batch(trips, tiny_db)
    assert b.bin_indices == [0, 1, 6, 9, 12, 13, 0]
    assert b.offsets == [0, 4] and len(b.triplets) == 2
    assert b.events.batch_size == 7
    assert assemble_batch([TrainingTriplet(3, 4, ())], tiny_db) is None


def test_batch_loss_by_hand(tiny_db):
    trips = [TrainingTriplet(0, 1, (6, 9)), TrainingTriplet(12, 13, (0,))]
    b = assemble_batch(trips, tiny_db)
    desc = torch.tensor([[0.0, 0.0], [0.3, 0.4], [0.6, 0.0], [3.0, 4.0], [0, 0], [0, 0.2], [0, 0.25]],
                        dtype=torch.float64)
    # triplet 1: d_pos 0.5, negs 0.6 and 5 -> 0; triplet 2: d_pos 0.2, neg 0.25 -> 0.05
    assert abs(float(batch_loss(desc, b, 0.1)) - (0.0 + 0.05) / 2) < 1e-12
    # a coincident pair keeps a finite gradient
    d = desc.clone().requires_grad_()
    batch_loss(torch.cat([d[:1], d[:1], d[2:]]), b, 0.1).backward()
    assert torch.isfinite(d.grad).all()


def _micro_batch(tiny_db, cfg):
    model = build_model(cfg, 32, 32)
    tr = [TrainingTriplet(0, 1, (6, 9)), TrainingTriplet(12, 13, (0, 3))]
    return model, assemble_batch(tr, tiny_db)


def test_full_loss_gradient(tiny_db):
    cfg = tiny_config(training={"dtype": "float64", "margin": 1.5})
    model, batch = _micro_batch(tiny_db, cfg)
    model.train()
    names = [n for n, p in model.named_parameters()]
    buffers = {n: b for n, b in model.named_buffers()}

    def fn(ps):
        desc = torch.func.functional_call(model, ({**dict(zip(names, ps)), **buffers},), (batch.events,))
        return batch_loss(desc, batch, 1.5)

    params = [p.detach().clone().requires_grad_() for p in model.parameters()]
    assert fd_check(fn, params, n_dirs=3) < 1e-3


def test_sgd_step_descends(tiny_db):
    cfg = tiny_config(training={"dtype": "float64", "margin": 1.5})
    model, batch = _micro_batch(tiny_db, cfg)
    model.train()
    before = batch_loss(model(batch.events), batch, 1.5)
    before.backward()
    with torch.no_grad():
        for p in model.parameters():
            p -= 1e-4 * p.grad
    assert batch_loss(model(batch.events), batch, 1.5).item() < before.item()


def test_calibration_matches_batch_statistics(tiny_db):
    cfg = tiny_config()
    model = build_model(cfg, 32, 32)
    bins = tiny_db.bins(range(6))
    calibrate_norm_stats(model, bins, batch_size=6)
    bn = model.backbone.features[1]
    x = model.representation(EventBatch.from_bins(bins))
    with torch.no_grad():
        h = model.backbone.features[0](x)
    torch.testing.assert_close(bn.running_mean, h.mean((0, 2, 3)), atol=1e-5, rtol=1e-5)
    assert bn.momentum == 0.1


def test_geographic_split_is_disjoint(tiny_db):
    tr, te = geographic_split(tiny_db, 0.25, seed=3)
    assert len(tr) + len(te) == len(tiny_db)
    assert not set(tiny_db.place_ids[tr]) & set(tiny_db.place_ids[te])
    assert len(set(tiny_db.place_ids[te])) == 2


def test_zero_epochs_writes_checkpoint_and_header(tiny_db, tmp_path):
    res = train(tiny_db, tiny_config(training={"epochs": 0}), tmp_path)
    header, records = MetricsLog.read(res.metrics)
    assert header["fields"] == list(METRICS_FIELDS) and records == []
    assert res.checkpoint.is_file() and res.step == 0


def test_checkpoint_roundtrip(tiny_db, tmp_path):
    cfg = tiny_config()
    model = build_model(cfg, 32, 32)
    path = save_checkpoint(tmp_path / "c.pt", model, None, cfg, step=5, epoch=1, geometry=(32, 32))
    loaded, state = load_checkpoint(path)
    assert state["step"] == 5 and state["config"] == cfg
    bins = tiny_db.bins(range(4))
    np.testing.assert_array_equal(loaded.describe(bins), model.describe(bins))


def test_resume_continues_step_counter(tiny_db, tmp_path):
    cfg = tiny_config(training={"epochs": 2, "checkpoint_every": 1})
    full = train(tiny_db, cfg, tmp_path / "full", deterministic=True)
    resumed = train(tiny_db, cfg, tmp_path / "resumed",
                    resume=tmp_path / "full" / "checkpoint_e001.pt", deterministic=True)
    first = MetricsLog.read(tmp_path / "full" / "metrics.jsonl")[1][0]
    assert resumed.step == full.step > first["step"]
    assert resumed.history == MetricsLog.read(tmp_path / "full" / "metrics.jsonl")[1][1:]
    for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
        assert torch.equal(a, b)


def test_cache_refreshes_on_schedule(tiny_db):
    cache = DescriptorCache(interval=4)
    tiny_db.cache = cache
    model = build_model(tiny_config(), 32, 32)
    cache.refresh(tiny_db, model, version=0)
    rng = np.random.default_rng(0)
    for q in range(10):
        mine_triplet(tiny_db, q, MiningConfig(), rng)
        if cache.note_query():
            cache.refresh(tiny_db, model, version=q)
    assert cache.history == [(0, 0), (4, 3), (8, 7)]


def test_nan_loss_aborts_with_dump(tiny_db, tmp_path, monkeypatch):
    import event_vpr.training as training

    monkeypatch.setattr(training, "batch_loss", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingAborted) as info:
        train(tiny_db, tiny_config(mining={"cache_interval": 500}, training={"margin": 5.0}), tmp_path)
    dump = json.loads(info.value.dump_path.read_text())
    assert dump["step"] == 0 and dump["triplets"]
