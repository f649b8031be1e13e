"""Inference, threshold decisions, metrics, sweeps, and QC reports.

Artifact is the positive class throughout. Decisions use an inclusive rule:
a volume is flagged when p_artifact >= threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import __version__, data
from .tensor import Tensor
from .volume_io import ARTIFACT, NORMAL, Manifest


class LengthMismatch(ValueError):
    pass


class InvalidInput(ValueError):
    pass


class MissingPredictions(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdPolicy:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self):
        d = self.tp + self.fp
        return None if d == 0 else self.tp / d

    @property
    def recall(self):
        d = self.tp + self.fn
        return None if d == 0 else self.tp / d

    @property
    def accuracy(self):
        if self.total == 0:
            return None
        # exact rational before any display rounding
        return float(Fraction(self.tp + self.tn, self.total))

    def to_dict(self):
        rounded = lambda v: None if v is None else round(v, 3)
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": rounded(self.precision),
            "recall": rounded(self.recall),
            "accuracy": rounded(self.accuracy),
        }


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float | None
    recall: float | None
    accuracy: float | None
    flagged: int


@dataclass
class PRCurve:
    points: list

    def to_csv(self) -> str:
        fmt = lambda v: "" if v is None else repr(float(v))
        lines = ["threshold,precision,recall,accuracy,flagged"]
        for p in self.points:
            lines.append(
                f"{fmt(p.threshold)},{fmt(p.precision)},{fmt(p.recall)},"
                f"{fmt(p.accuracy)},{p.flagged}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "points": [
                {
                    "threshold": p.threshold,
                    "precision": p.precision,
                    "recall": p.recall,
                    "accuracy": p.accuracy,
                    "flagged": p.flagged,
                }
                for p in self.points
            ]
        }


@dataclass(frozen=True)
class PredictFailure:
    record_id: str
    error: str


def predict(model, manifest: Manifest, batch_size: int = 5, cache=None):
    """Fill predicted_prob for every readable record; collect per-record failures.

    Returns (manifest with probabilities, list of PredictFailure). Record order
    is preserved; failed records keep predicted_prob None.
    """
    if cache is None:
        cache = data.VolumeCache(model.config.input_dims)
    probs = {}
    failures = []
    loaded = []
    for rec in manifest.records:
        try:
            loaded.append((rec, cache.get(manifest, rec)))
        except Exception as exc:  # per-record: keep going
            failures.append(PredictFailure(rec.id, f"{type(exc).__name__}: {exc}"))
    for start in range(0, len(loaded), batch_size):
        chunk = loaded[start : start + batch_size]
        x = np.stack([vol for _, vol in chunk])[:, None, :, :, :]
        out = model.forward(Tensor(x), mode="eval")
        p_art = out.data[:, 1]
        for (rec, _), p in zip(chunk, p_art):
            probs[rec.id] = float(p)
    new_records = [
        rec.with_prob(probs[rec.id]) if rec.id in probs else rec
        for rec in manifest.records
    ]
    out_manifest = Manifest(
        new_records,
        source_description=manifest.source_description,
        base_dir=manifest.base_dir,
    )
    return out_manifest, failures


def apply_threshold(p: float, policy) -> str:
    t = policy.threshold if isinstance(policy, ThresholdPolicy) else float(policy)
    if not 0.0 <= p <= 1.0:
        raise InvalidInput(f"probability {p} outside [0, 1]")
    return ARTIFACT if p >= t else NORMAL


def compute_metrics(decisions, labels) -> Metrics:
    if len(decisions) != len(labels):
        raise LengthMismatch(f"{len(decisions)} decisions vs {len(labels)} labels")
    tp = fp = fn = tn = 0
    for d, y in zip(decisions, labels):
        if d == ARTIFACT:
            if y == ARTIFACT:
                tp += 1
            else:
                fp += 1
        else:
            if y == ARTIFACT:
                fn += 1
            else:
                tn += 1
    return Metrics(tp=tp, fp=fp, fn=fn, tn=tn)


def threshold_sweep(probs, labels) -> PRCurve:
    """Metrics at every distinct probability plus the endpoints 0 and 1."""
    if len(probs) != len(labels):
        raise LengthMismatch(f"{len(probs)} probs vs {len(labels)} labels")
    thresholds = sorted({0.0, 1.0} | {float(p) for p in probs})
    points = []
    for t in thresholds:
        decisions = [apply_threshold(p, t) for p in probs]
        m = compute_metrics(decisions, labels)
        points.append(
            PRPoint(
                threshold=t,
                precision=m.precision,
                recall=m.recall,
                accuracy=m.accuracy,
                flagged=m.tp + m.fp,
            )
        )
    return PRCurve(points)


def annotation_savings(n_volumes: int, slices_per_volume: int) -> float:
    """Fraction of per-slice review effort avoided by rating whole volumes."""
    if n_volumes < 1 or slices_per_volume < 1:
        raise InvalidInput("n_volumes and slices_per_volume must both be >= 1")
    return 1.0 - n_volumes / (n_volumes * slices_per_volume)


def savings_percent(fraction: float) -> str:
    """Integer-percent display, truncated: 0.9875 -> '98%'."""
    return f"{int(fraction * 100)}%"


@dataclass
class QCReport:
    threshold: float
    volumes: list  # dicts: id, subject_id, p_artifact, decision, label?
    metrics: Metrics | None = None
    annotation: dict | None = None
    seed: int | None = None
    version: str = __version__

    def flagged_count(self) -> int:
        return sum(1 for v in self.volumes if v["decision"] == ARTIFACT)

    def to_json(self) -> str:
        doc = {
            "tool": "qcnet",
            "version": self.version,
            "threshold": self.threshold,
            "seed": self.seed,
            "total": len(self.volumes),
            "flagged_count": self.flagged_count(),
            "volumes": self.volumes,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "annotation_savings": self.annotation,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QCReport":
        doc = json.loads(text)
        metrics = doc.get("metrics")
        if metrics is not None:
            metrics = Metrics(
                tp=metrics["tp"], fp=metrics["fp"], fn=metrics["fn"], tn=metrics["tn"]
            )
        return cls(
            threshold=doc["threshold"],
            volumes=doc["volumes"],
            metrics=metrics,
            annotation=doc.get("annotation_savings"),
            seed=doc.get("seed"),
            version=doc.get("version", __version__),
        )

    def to_text(self) -> str:
        pct = lambda v: "n/a" if v is None else f"{100 * v:.0f}%"
        lines = [
            f"qcnet {self.version} QC report",
            f"threshold: {self.threshold:g}",
            f"volumes: {len(self.volumes)}   flagged: {self.flagged_count()}",
        ]
        if self.metrics is not None:
            m = self.metrics
            lines.append(
                f"precision: {pct(m.precision)}   recall: {pct(m.recall)}   "
                f"accuracy: {pct(m.accuracy)}   (tp={m.tp} fp={m.fp} fn={m.fn} tn={m.tn})"
            )
        if self.annotation is not None:
            lines.append(
                f"annotation effort avoided: {self.annotation['percent']} "
                f"({self.annotation['n_volumes']} volumes vs "
                f"{self.annotation['total_slices']} slices)"
            )
        lines.append("")
        lines.append(f"{'id':<24} {'subject':<12} {'p_artifact':>10} decision  label")
        for v in self.volumes:
            lines.append(
                f"{v['id']:<24} {v['subject_id']:<12} {v['p_artifact']:>10.4f} "
                f"{v['decision']:<9} {v.get('label') or '-'}"
            )
        return "\n".join(lines) + "\n"


def generate_report(
    manifest: Manifest,
    policy: ThresholdPolicy,
    slices_per_volume: int | None = None,
    seed: int | None = None,
) -> QCReport:
    """Build a QCReport; flagged volumes first, each group by descending p."""
    missing = [r.id for r in manifest.records if r.predicted_prob is None]
    if missing:
        raise MissingPredictions(
            f"{len(missing)} record(s) lack predictions, e.g. {missing[:3]}"
        )
    rows = []
    for rec in manifest.records:
        decision = apply_threshold(rec.predicted_prob, policy)
        row = {
            "id": rec.id,
            "subject_id": rec.subject_id,
            "p_artifact": rec.predicted_prob,
            "decision": decision,
        }
        if rec.label is not None:
            row["label"] = rec.label
        rows.append(row)
    rows.sort(key=lambda r: (r["decision"] != ARTIFACT, -r["p_artifact"], r["id"]))

    labeled = [r for r in rows if "label" in r]
    metrics = None
    if labeled:
        metrics = compute_metrics(
            [r["decision"] for r in labeled], [r["label"] for r in labeled]
        )

    annotation = None
    if slices_per_volume is not None and rows:
        frac = annotation_savings(len(rows), slices_per_volume)
        annotation = {
            "n_volumes": len(rows),
            "slices_per_volume": slices_per_volume,
            "total_slices": len(rows) * slices_per_volume,
            "fraction": frac,
            "percent": savings_percent(frac),
        }

    return QCReport(
        threshold=policy.threshold,
        volumes=rows,
        metrics=metrics,
        annotation=annotation,
        seed=seed,
    )
