"""Training loop, fine-tuning protocol, and fine-tune subset selection.

Cross-entropy loss, Adam, fixed epoch count, no early stopping. A run is
fully determined by (seed, config, manifests): batch order comes from a
seeded per-epoch shuffle and parameter init from the model config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import ops, qc
from .data import VolumeCache, make_batches
from .optim import AdamState, adam_step
from .tensor import Tensor
from .volume_io import Manifest


class EmptyTrainSet(ValueError):
    pass


class InvalidFraction(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 5
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int | None = None
    finetune_epochs: int = 5

    def __post_init__(self):
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)  # Metrics or None per epoch

    def to_dict(self):
        return {
            "train_loss": self.train_loss,
            "val_metrics": [
                None if m is None else m.to_dict() for m in self.val_metrics
            ],
        }


class _FlatParams:
    """View of a model's parameters as one flat float vector for the optimizer."""

    def __init__(self, params):
        self.params = params
        self.sizes = [p.data.size for p in params]
        self.total = sum(self.sizes)

    def gather(self):
        return np.concatenate([p.data.ravel() for p in self.params])

    def gather_grads(self):
        parts = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            parts.append(g.ravel())
        return np.concatenate(parts)

    def scatter(self, vec):
        offset = 0
        for p, n in zip(self.params, self.sizes):
            p.data = vec[offset : offset + n].reshape(p.data.shape).astype(
                p.data.dtype, copy=True
            )
            offset += n


def _run_epochs(model, manifest, config, epochs, phase, val_manifest=None,
                history=None, checkpoint_dir=None, cache=None):
    if len(manifest) == 0:
        raise EmptyTrainSet("training manifest has no records")
    if cache is None:
        cache = VolumeCache(model.config.input_dims)
    params = model.parameters()
    flat = _FlatParams(params)
    state = AdamState.init(flat.total, lr=config.lr)

    for epoch in range(epochs):
        total_loss = 0.0
        total_n = 0
        batches = make_batches(
            manifest, config.batch_size, shuffle=True,
            seed=(config.seed, phase, epoch), cache=cache,
        )
        for batch in batches:
            if np.any(batch.targets < 0):
                raise EmptyTrainSet("unlabeled record in training manifest")
            for p in params:
                p.zero_grad()
            probs = model.forward(Tensor(batch.x), mode="train")
            loss = ops.cross_entropy(probs, batch.targets)
            loss.backward()
            new_vec, state = adam_step(flat.gather(), flat.gather_grads(), state)
            flat.scatter(new_vec)
            total_loss += loss.item() * len(batch.ids)
            total_n += len(batch.ids)

        if history is not None:
            history.train_loss.append(total_loss / max(total_n, 1))
            history.val_metrics.append(
                _evaluate(model, val_manifest, config.batch_size)
                if val_manifest is not None and len(val_manifest) > 0
                else None
            )
        if (
            checkpoint_dir is not None
            and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            path = Path(checkpoint_dir) / f"checkpoint-epoch{epoch + 1:03d}.qc3d"
            model_mod.save_checkpoint(model, path)
    return model


def _evaluate(model, manifest, batch_size):
    predicted, _ = qc.predict(model, manifest, batch_size=batch_size)
    labeled = [r for r in predicted.records if r.label is not None and r.predicted_prob is not None]
    if not labeled:
        return None
    decisions = [qc.apply_threshold(r.predicted_prob, 0.5) for r in labeled]
    return qc.compute_metrics(decisions, [r.label for r in labeled])


def train(model, train_manifest: Manifest, val_manifest: Manifest | None,
          config: TrainConfig, checkpoint_dir=None):
    """Optimize the model in place; returns (model, TrainHistory)."""
    history = TrainHistory()
    _run_epochs(
        model, train_manifest, config, config.epochs, phase=0,
        val_manifest=val_manifest, history=history, checkpoint_dir=checkpoint_dir,
    )
    return model, history


def finetune(base, subset_manifest: Manifest, config: TrainConfig):
    """Retrain all layers of a copy of `base` with fresh optimizer state."""
    model = base.copy()
    _run_epochs(model, subset_manifest, config, config.finetune_epochs, phase=1)
    return model


def select_finetune_subset(manifest: Manifest, fraction: float, seed) -> Manifest:
    """Uniform volume-level sample of ceil(fraction * n) records."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidFraction(f"fraction must lie in (0, 1], got {fraction}")
    n = len(manifest)
    k = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=k, replace=False).tolist())
    records = [r for i, r in enumerate(manifest.records) if i in chosen]
    return Manifest(
        records,
        source_description=manifest.source_description,
        base_dir=manifest.base_dir,
    )
