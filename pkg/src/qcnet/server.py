"""HTTP backend for the human QC review loop.

Serves the predicted manifest, axial slice images, live-threshold metrics,
and label overrides. Overrides are journaled to a JSON-lines file before the
request is acknowledged and replayed on startup, so a session survives
restarts. Predictions themselves are immutable here; only the threshold and
the overrides move.
"""

from __future__ import annotations

import io
import json
import os
import threading
from pathlib import Path

import numpy as np

from . import qc, train, volume_io
from .data import VolumeCache
from .volume_io import ARTIFACT, NORMAL, Manifest

_SORTS = ("prob_desc", "prob_asc", "id")

try:
    from pydantic import BaseModel
except ImportError:  # pragma: no cover - fastapi always brings pydantic
    BaseModel = object


class LabelBody(BaseModel):
    label: str


class ExportBody(BaseModel):
    fraction: float | None = None
    include_overrides: bool = True
    seed: int = 0
    path: str | None = None


class ReviewSession:
    """Manifest + overrides + journal; the single source of review state."""

    def __init__(self, manifest: Manifest, journal_path, threshold: float = 0.5,
                 target_dims=None):
        self.manifest = manifest
        self.by_id = {r.id: r for r in manifest.records}
        self.policy = qc.ThresholdPolicy(threshold)
        self.journal_path = Path(journal_path)
        self.overrides: dict[str, str] = {}
        self.target_dims = tuple(target_dims) if target_dims else None
        self._cache = None
        self._lock = threading.Lock()
        if self.journal_path.exists():
            self._replay()

    def _replay(self):
        for lineno, line in enumerate(self.journal_path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            event = json.loads(line)
            vid = event.get("id")
            if vid not in self.by_id:
                raise ValueError(
                    f"{self.journal_path}:{lineno}: override for unknown id {vid!r}"
                )
            op = event.get("op")
            if op == "set":
                label = event.get("label")
                if label not in (ARTIFACT, NORMAL):
                    raise ValueError(
                        f"{self.journal_path}:{lineno}: bad label {label!r}"
                    )
                self.overrides[vid] = label
            elif op == "clear":
                self.overrides.pop(vid, None)
            else:
                raise ValueError(f"{self.journal_path}:{lineno}: bad op {op!r}")

    def _journal(self, event):
        with self._lock:
            with open(self.journal_path, "a") as fh:
                fh.write(json.dumps(event) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def set_override(self, vid: str, label: str):
        if vid not in self.by_id:
            raise KeyError(vid)
        if label not in (ARTIFACT, NORMAL):
            raise ValueError(f"label must be {ARTIFACT!r} or {NORMAL!r}")
        self._journal({"op": "set", "id": vid, "label": label})
        self.overrides[vid] = label

    def clear_override(self, vid: str):
        if vid not in self.by_id:
            raise KeyError(vid)
        self._journal({"op": "clear", "id": vid})
        self.overrides.pop(vid, None)

    def effective_label(self, rec):
        return self.overrides.get(rec.id, rec.label)

    def rows(self, threshold: float):
        out = []
        for rec in self.manifest.records:
            decision = (
                qc.apply_threshold(rec.predicted_prob, threshold)
                if rec.predicted_prob is not None
                else None
            )
            out.append(
                {
                    "id": rec.id,
                    "subject_id": rec.subject_id,
                    "p_artifact": rec.predicted_prob,
                    "decision": decision,
                    "label": rec.label,
                    "override": self.overrides.get(rec.id),
                    "effective_label": self.effective_label(rec),
                }
            )
        return out

    def _labeled(self):
        pairs = []
        for rec in self.manifest.records:
            label = self.effective_label(rec)
            if label is not None and rec.predicted_prob is not None:
                pairs.append((rec.predicted_prob, label))
        return pairs

    def metrics(self, threshold: float):
        pairs = self._labeled()
        if not pairs:
            return None
        decisions = [qc.apply_threshold(p, threshold) for p, _ in pairs]
        return qc.compute_metrics(decisions, [l for _, l in pairs])

    def sweep(self):
        pairs = self._labeled()
        if not pairs:
            return None
        return qc.threshold_sweep([p for p, _ in pairs], [l for _, l in pairs])

    def slice_image(self, vid: str, k: int) -> bytes:
        """8-bit grayscale PNG of axial slice k, windowed to [p1, p99]."""
        from PIL import Image

        rec = self.by_id.get(vid)
        if rec is None:
            raise KeyError(vid)
        if self._cache is None:
            if self.target_dims is None:
                scan = volume_io.read_nifti(self.manifest.resolve_scan_path(rec))
                self.target_dims = scan.volumes[0].voxels.shape
            self._cache = VolumeCache(self.target_dims)
        vol = self._cache.get(self.manifest, rec)  # [z, y, x]
        nz = vol.shape[0]
        if not 0 <= k < nz:
            raise IndexError(k)
        p1, p99 = np.percentile(vol, [1, 99])
        sl = vol[k]  # [y, x] -> PNG rows y, columns x
        if p99 > p1:
            scaled = np.clip((sl - p1) / (p99 - p1), 0.0, 1.0)
        else:
            scaled = np.zeros_like(sl)
        img = Image.fromarray((scaled * 255).astype(np.uint8), mode="L")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()

    def export_finetune_set(self, fraction=None, include_overrides=True, seed=0,
                            path=None):
        if fraction is None:
            chosen = [r for r in self.manifest.records if r.id in self.overrides]
            if not chosen:
                raise LookupError("no overrides to export")
            records = chosen
        else:
            subset = train.select_finetune_subset(self.manifest, fraction, seed)
            records = subset.records
        if include_overrides:
            records = [
                r.with_label(self.overrides[r.id]) if r.id in self.overrides else r
                for r in records
            ]
        out = Manifest(
            [r for r in records],
            source_description=self.manifest.source_description,
            base_dir=self.manifest.base_dir,
        )
        if path is None:
            path = self.journal_path.parent / "finetune-set.jsonl"
        path = Path(path)
        volume_io.save_manifest(out, path)
        return path, len(out)


def create_app(manifest: Manifest, journal_path, threshold: float = 0.5,
               static_dir=None, target_dims=None):
    from fastapi import FastAPI, HTTPException, Response

    session = ReviewSession(
        manifest, journal_path, threshold=threshold, target_dims=target_dims
    )
    app = FastAPI(title="qcnet review", docs_url=None, redoc_url=None)
    app.state.session = session

    @app.get("/api/volumes")
    def list_volumes(sort: str = "prob_desc", page: int = 0, page_size: int = 50,
                     threshold: float | None = None):
        if page < 0 or not 1 <= page_size <= 500:
            raise HTTPException(400, "bad paging: need page >= 0, 1 <= page_size <= 500")
        if sort not in _SORTS:
            raise HTTPException(400, f"sort must be one of {_SORTS}")
        t = session.policy.threshold if threshold is None else threshold
        if not 0.0 <= t <= 1.0:
            raise HTTPException(400, "threshold must lie in [0, 1]")
        rows = session.rows(t)
        none_low = lambda r: -1.0 if r["p_artifact"] is None else r["p_artifact"]
        if sort == "prob_desc":
            rows.sort(key=lambda r: (-none_low(r), r["id"]))
        elif sort == "prob_asc":
            rows.sort(key=lambda r: (none_low(r), r["id"]))
        else:
            rows.sort(key=lambda r: r["id"])
        start = page * page_size
        return {
            "total": len(rows),
            "page": page,
            "page_size": page_size,
            "threshold": t,
            "volumes": rows[start : start + page_size],
        }

    @app.get("/api/volumes/{vid}/slices/{k}.png")
    def get_slice(vid: str, k: int):
        try:
            png = session.slice_image(vid, k)
        except KeyError:
            raise HTTPException(404, f"unknown volume id {vid!r}")
        except IndexError:
            raise HTTPException(404, f"slice {k} out of range")
        except volume_io.NiftiError as exc:
            raise HTTPException(404, f"volume unreadable: {exc}")
        return Response(content=png, media_type="image/png")

    @app.get("/api/metrics")
    def get_metrics(threshold: float | None = None):
        t = session.policy.threshold if threshold is None else threshold
        if not 0.0 <= t <= 1.0:
            raise HTTPException(400, "threshold must lie in [0, 1]")
        m = session.metrics(t)
        if m is None:
            raise HTTPException(409, "no labels or overrides available")
        return {
            "threshold": t,
            "metrics": m.to_dict(),
            "flagged": m.tp + m.fp,
            "total": m.total,
        }

    @app.get("/api/sweep")
    def get_sweep():
        curve = session.sweep()
        if curve is None:
            raise HTTPException(409, "no labels or overrides available")
        return curve.to_dict()

    @app.post("/api/volumes/{vid}/label")
    def set_label(vid: str, body: LabelBody):
        try:
            session.set_override(vid, body.label)
        except KeyError:
            raise HTTPException(404, f"unknown volume id {vid!r}")
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        return {"id": vid, "override": body.label}

    @app.delete("/api/volumes/{vid}/label")
    def clear_label(vid: str):
        try:
            session.clear_override(vid)
        except KeyError:
            raise HTTPException(404, f"unknown volume id {vid!r}")
        return {"id": vid, "override": None}

    @app.post("/api/finetune-set/export")
    def export_set(body: ExportBody):
        try:
            path, count = session.export_finetune_set(
                fraction=body.fraction,
                include_overrides=body.include_overrides,
                seed=body.seed,
                path=body.path,
            )
        except LookupError as exc:
            raise HTTPException(409, str(exc))
        except train.InvalidFraction as exc:
            raise HTTPException(422, str(exc))
        return {"path": str(path), "count": count}

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
