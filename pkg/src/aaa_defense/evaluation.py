"""Evaluation protocols: perturbation robustness, transfer, corruption.

Accuracies are percentages in [0,100]. PGD robustness counts an input
correct only if every restart's adversarial version is classified
correctly; restarts use prefix seeding, so accuracy is non-increasing in
the restart count. Reports are deterministic: identical configs and seeds
re-emit byte-identical files (wall-clock timing is kept out of the report
body).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as mm
from .attacks import cw_l2, pgd_restart_stream
from .data import CorruptionSpec, corrupt


class EvaluationError(RuntimeError):
    pass


class ProvenanceError(EvaluationError):
    pass


class ReportSchemaError(EvaluationError):
    pass


REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("protocol", "model_digest", "attack_or_corruption", "param",
               "accuracy_percent", "seed")


def eval_clean(model, dataset, batch_size=256):
    """Percent of argmax-correct predictions (lowest-index tie-break)."""
    if len(dataset) == 0:
        raise EvaluationError("empty dataset")
    preds = mm.predict(model, dataset.images, batch_size)
    return 100.0 * float(np.mean(preds == dataset.labels))


def eval_pgd(model, dataset, cfg, batch_size=250):
    """Robust accuracy: correct under every restart's adversarial version."""
    if len(dataset) == 0:
        raise EvaluationError("empty dataset")
    correct = np.zeros(len(dataset), dtype=bool)
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        ok = np.ones(len(y), dtype=bool)
        for _, _, preds in pgd_restart_stream(model, x, y, cfg):
            ok &= preds == y
            if not ok.any():
                break
        correct[i:i + batch_size] = ok
    return 100.0 * float(np.mean(correct))


def eval_cw(model, dataset, cfg, threshold=3.0, batch_size=200):
    """Accuracy under CW-L2: correct if no misclassifying perturbation with
    L2 distance below ``threshold`` was found."""
    if len(dataset) == 0:
        raise EvaluationError("empty dataset")
    correct = []
    for i in range(0, len(dataset), batch_size):
        batch = cw_l2(model, dataset.images[i:i + batch_size],
                      dataset.labels[i:i + batch_size], cfg,
                      threshold=threshold)
        correct.append(~batch.success)
    return 100.0 * float(np.mean(np.concatenate(correct)))


def eval_transfer(ae, transfer_clf, dataset, pgd_cfg=None, cw_cfg=None,
                  cw_threshold=3.0):
    """Stack the trained AE with a never-seen classifier at test time.

    Rejects classifiers recorded in the AE's training-ensemble digests;
    performs zero parameter updates (the AE digest is unchanged).
    """
    clf_digest = mm.param_digest(transfer_clf)
    trained_on = ae.meta.get("ensemble_digests", [])
    if clf_digest in trained_on:
        raise ProvenanceError(
            "transfer classifier was a member of the training ensemble")
    ae_digest_before = mm.param_digest(ae)
    pipeline = mm.stack(ae, transfer_clf)
    out = {"clean": eval_clean(pipeline, dataset)}
    if pgd_cfg is not None:
        out["pgd"] = eval_pgd(pipeline, dataset, pgd_cfg)
    if cw_cfg is not None:
        out["cw"] = eval_cw(pipeline, dataset, cw_cfg, threshold=cw_threshold)
    if mm.param_digest(ae) != ae_digest_before:
        raise EvaluationError("transfer evaluation mutated the autoencoder")
    return out


def eval_corruption(model, dataset, kinds, severities, seed=0, baseline=None):
    """Accuracy per (kind, severity); severity 0 is the identity corruption.

    When ``baseline`` (a {(kind, severity): accuracy} table) is given, a
    matching delta table is returned alongside.
    """
    table = {}
    for kind in kinds:
        for sev in severities:
            spec = CorruptionSpec(kind, sev, seed=seed)
            table[(kind, sev)] = eval_clean(model, corrupt(dataset, spec))
    if baseline is None:
        return table
    missing = set(table) - set(baseline)
    if missing:
        raise EvaluationError(f"baseline table lacks cells: {sorted(missing)}")
    deltas = {cell: table[cell] - baseline[cell] for cell in table}
    return table, deltas


# -- reports -----------------------------------------------------------------


@dataclass
class EvaluationReport:
    """Accuracy rows plus full provenance (configs, digests, seeds)."""

    seed: int = None
    configs: dict = field(default_factory=dict)
    model_digests: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)   # dicts keyed by CSV_COLUMNS
    extra: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION
    wall_clock_seconds: float = 0.0  # informational; excluded from emission

    def add_row(self, protocol, model_digest, attack_or_corruption, param,
                accuracy_percent, seed):
        if not 0.0 <= accuracy_percent <= 100.0:
            raise ReportSchemaError(f"accuracy {accuracy_percent} outside "
                                    "[0,100]")
        self.rows.append({
            "protocol": protocol,
            "model_digest": model_digest,
            "attack_or_corruption": attack_or_corruption,
            "param": str(param),
            "accuracy_percent": f"{accuracy_percent:.4f}",
            "seed": str(seed),
        })

    def validate(self):
        if self.seed is None:
            raise ReportSchemaError("report lacks a seed field")
        if self.schema_version != REPORT_SCHEMA_VERSION:
            raise ReportSchemaError(
                f"schema version {self.schema_version}, expected "
                f"{REPORT_SCHEMA_VERSION}")
        for row in self.rows:
            if set(row) != set(CSV_COLUMNS):
                raise ReportSchemaError(f"malformed row: {sorted(row)}")


def _atomic_write(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def emit_report(report, path, format="structured-text"):
    """Write a report with stable field ordering; re-emission is
    byte-identical."""
    report.validate()
    if format == "csv":
        lines = [",".join(CSV_COLUMNS)]
        for row in report.rows:
            lines.append(",".join(row[c] for c in CSV_COLUMNS))
        _atomic_write(path, "\n".join(lines) + "\n")
        return
    if format != "structured-text":
        raise EvaluationError(f"unknown report format {format!r}")
    lines = [f"schema_version: {report.schema_version}",
             f"seed: {report.seed}"]
    for name in sorted(report.configs):
        lines.append(f"config.{name}: {report.configs[name]}")
    for name in sorted(report.model_digests):
        lines.append(f"model_digest.{name}: {report.model_digests[name]}")
    for key in sorted(report.extra):
        lines.append(f"extra.{key}: {report.extra[key]}")
    lines.append(f"rows: {len(report.rows)}")
    for row in report.rows:
        lines.append("  " + " | ".join(row[c] for c in CSV_COLUMNS))
    _atomic_write(path, "\n".join(lines) + "\n")
