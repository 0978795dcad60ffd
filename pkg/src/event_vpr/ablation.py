"""Representation / backbone sweep: train and score each variant on one split."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import jsonschema

from .config import REPRESENTATION_VARIANTS, RunConfig
from .errors import EventVPRError
from .evaluation import evaluate_model
from .mining import GeoTaggedDatabase
from .training import train

log = logging.getLogger(__name__)

TABLE_SCHEMA_ID = "event_vpr.ablation/1"

_VARIANT_OVERRIDES = {
    "est-mlp": {"kind": "est", "kernel": "mlp"},
    "est-trilinear": {"kind": "est", "kernel": "trilinear"},
    "ef": {"kind": "ef"},
    "evg": {"kind": "evg"},
    "4ch": {"kind": "4ch"},
}


def table_schema(ns: Sequence[int]) -> dict:
    recall = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
    row = {
        "type": "object",
        "required": ["variant", "backbone", "status", "error", "n_queries", "model_version",
                     *[f"recall@{n}" for n in ns]],
        "properties": {
            "variant": {"enum": list(REPRESENTATION_VARIANTS)},
            "backbone": {"type": "string"},
            "status": {"enum": ["ok", "failed"]},
            "error": {"type": ["string", "null"]},
            "n_queries": {"type": ["integer", "null"], "minimum": 0},
            "model_version": {"type": ["integer", "null"]},
            **{f"recall@{n}": recall for n in ns},
        },
        "additionalProperties": False,
    }
    return {
        "type": "object",
        "required": ["schema", "ns", "rows"],
        "properties": {
            "schema": {"const": TABLE_SCHEMA_ID},
            "ns": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            "rows": {"type": "array", "items": row},
        },
    }


def validate_table(table: dict) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``table`` is a well-formed sweep table."""
    jsonschema.validate(table, table_schema(table.get("ns", [])))


def variant_config(cfg: RunConfig, variant: str, backbone: str) -> RunConfig:
    arch = {"architecture": backbone, "input_channels": None}
    if backbone == "paper-deep":
        arch["descriptor_depth"] = 512
    return cfg.with_overrides(representation=_VARIANT_OVERRIDES[variant], backbone=arch)


def ablate(train_db: GeoTaggedDatabase, test_db: GeoTaggedDatabase, cfg: RunConfig, out_dir,
           variants: Sequence[str] | None = None, backbones: Sequence[str] | None = None,
           deterministic: bool = False) -> dict:
    """Train every variant x backbone with the same split and seed, then score it.

    A failing variant becomes a ``failed`` row and the sweep moves on. Writes
    ``ablation.json`` and ``ablation.csv`` to ``out_dir`` and returns the table.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = list(variants or cfg.ablation.variants)
    backbones = list(backbones or cfg.ablation.backbones)
    ns = sorted(cfg.eval.recall_ns)
    rows = []
    for backbone in backbones:
        for k, variant in enumerate(variants):
            row = {"variant": variant, "backbone": backbone, "status": "ok", "error": None,
                   "n_queries": None, "model_version": None, **{f"recall@{n}": None for n in ns}}
            try:
                vcfg = variant_config(cfg, variant, backbone)
                res = train(train_db, vcfg, out_dir / f"{k:02d}_{variant}_{backbone}",
                            deterministic=deterministic)
                rep = evaluate_model(res.model, test_db, ns, vcfg.eval.phi, vcfg.data.query_fraction,
                                     vcfg.training.seed, res.step, vcfg.eval.batch_size)
                row.update({"n_queries": rep.n_queries, "model_version": rep.model_version,
                            **{f"recall@{n}": rep[n] for n in ns}})
            except (EventVPRError, RuntimeError, ValueError) as exc:
                log.warning("variant %s/%s failed: %s", variant, backbone, exc)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            log.info("ablation %s/%s: %s", variant, backbone,
                     row["error"] or " ".join(f"R@{n}={row[f'recall@{n}']:.3f}" for n in ns))
    table = {"schema": TABLE_SCHEMA_ID, "ns": ns, "rows": rows}
    validate_table(table)
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["variant"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return table
