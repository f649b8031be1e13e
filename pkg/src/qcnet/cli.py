"""Command-line entry point: qcnet <subcommand>.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable files, invalid
manifests, bad configuration values). All outputs are timestamp-free so two
identical invocations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, data, phantom, qc, train, volume_io
from . import model as model_mod


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--config", type=Path, help="JSON file of flag defaults")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default $QCNET_THREADS or 1)")


def build_parser():
    parser = _Parser(prog="qcnet", description="Volumetric QC for diffusion MRI scans.")
    parser.add_argument("--version", action="version", version=f"qcnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    parser.subcommands = {}

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus",
                       parents=[], description="Write phantom scans plus manifest.")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--volumes-per-subject", type=int, default=4)
    p.add_argument("--artifact-rate", type=float, default=0.3)
    p.add_argument("--kind-mix", type=str, default=None,
                   help='JSON weights, e.g. \'{"dropout": 2, "ghosting": 1}\'')
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 24],
                   metavar=("NX", "NY", "NZ"))
    p.add_argument("--texture-sigma", type=float, default=1.5)
    p.add_argument("--noise-level", type=float, default=0.05)
    p.add_argument("--intensity-scale", type=float, default=1.0)
    p.add_argument("--normal-subject-fraction", type=float, default=0.3)
    p.add_argument("--severity", choices=["strong", "subtle"], default="strong")

    p = sub.add_parser("train", help="train a model from a labeled manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--val-manifest", type=Path, default=None,
                   help="held-out manifest; default: subject-stratified split")
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--preset", choices=sorted(model_mod.PRESETS), default="desk-32")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="checkpoint file to write")
    p.add_argument("--history", type=Path, default=None, help="JSON history file")

    p = sub.add_parser("finetune", help="retrain all layers on a labeled subset")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("infer", help="predict artifact probabilities and report")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--text-out", type=Path, default=None, help="plain-text summary path")
    p.add_argument("--save-manifest", type=Path, default=None,
                   help="write the manifest with predicted probabilities")
    p.add_argument("--slices-per-volume", type=int, default=None,
                   help="include the annotation-savings note")

    p = sub.add_parser("eval", help="metrics for a predicted+labeled manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True,
                   help="JSONL with predicted_prob and label per record")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path, default=None, help="write metrics JSON here")

    p = sub.add_parser("sweep", help="precision/recall across all thresholds")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="CSV path")

    p = sub.add_parser("subset", help="sample a fine-tune subset from a manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("serve", help="start the review server")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True,
                   help="manifest with predictions (see `infer --save-manifest`)")
    p.add_argument("--journal", type=Path, default=Path("session.journal"))
    p.add_argument("--bind", type=str, default="127.0.0.1:8000")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--static", type=Path, default=None,
                   help="directory of built UI assets to serve at /")

    parser.subcommands = dict(sub.choices)
    return parser


def _apply_threads(args):
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("QCNET_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        if threads < 1:
            raise _UsageError("qcnet: error: --threads must be >= 1")
        os.environ["OMP_NUM_THREADS"] = str(threads)


def _labeled_probs(manifest):
    recs = [r for r in manifest.records if r.predicted_prob is not None]
    if len(recs) < len(manifest.records):
        missing = len(manifest.records) - len(recs)
        raise qc.MissingPredictions(f"{missing} record(s) lack predicted_prob")
    labels = [r.label for r in recs]
    if any(l is None for l in labels):
        raise volume_io.ManifestError("every record needs a label for evaluation")
    return [r.predicted_prob for r in recs], labels


def _cmd_synth(args):
    kind_mix = json.loads(args.kind_mix) if args.kind_mix else None
    severity = phantom.SUBTLE if args.severity == "subtle" else phantom.STRONG
    manifest = phantom.generate_dataset(
        args.subjects,
        args.volumes_per_subject,
        args.artifact_rate,
        kind_mix,
        args.seed,
        args.out,
        dims=tuple(args.dims),
        texture_sigma=args.texture_sigma,
        noise_level=args.noise_level,
        intensity_scale=args.intensity_scale,
        severity=severity,
        normal_subject_fraction=args.normal_subject_fraction,
    )
    n_art = sum(r.label == volume_io.ARTIFACT for r in manifest.records)
    print(f"wrote {len(manifest)} volumes ({n_art} artifact) under {args.out}")
    print(args.out / "manifest.jsonl")
    return 0


def _cmd_train(args):
    manifest = volume_io.load_manifest(args.manifest)
    if args.val_manifest is not None:
        train_man = manifest
        val_man = volume_io.load_manifest(args.val_manifest)
    else:
        train_man, val_man = data.stratified_subject_split(
            manifest, data.SplitSpec(args.val_fraction, seed=args.seed)
        )
    cfg = model_mod.preset_config(args.preset, seed=args.seed)
    model = model_mod.build_model(cfg)
    tc = train.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        seed=args.seed, checkpoint_every=args.checkpoint_every,
    )
    ckpt_dir = args.out.parent if args.checkpoint_every else None
    model, history = train.train(model, train_man, val_man, tc, checkpoint_dir=ckpt_dir)
    model_mod.save_checkpoint(model, args.out)
    if args.history is not None:
        args.history.write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    last = history.train_loss[-1] if history.train_loss else float("nan")
    print(f"trained {args.epochs} epochs on {len(train_man)} volumes; "
          f"final loss {last:.4f}; checkpoint {args.out}")
    return 0


def _cmd_finetune(args):
    model, _ = model_mod.load_checkpoint(args.checkpoint)
    manifest = volume_io.load_manifest(args.manifest)
    tc = train.TrainConfig(
        batch_size=args.batch_size, lr=args.lr, seed=args.seed,
        finetune_epochs=args.epochs,
    )
    tuned = train.finetune(model, manifest, tc)
    model_mod.save_checkpoint(tuned, args.out)
    print(f"fine-tuned {args.epochs} epochs on {len(manifest)} volumes; "
          f"checkpoint {args.out}")
    return 0


def _cmd_infer(args):
    model, _ = model_mod.load_checkpoint(args.checkpoint)
    manifest = volume_io.load_manifest(args.manifest)
    policy = qc.ThresholdPolicy(args.threshold)
    predicted, failures = qc.predict(model, manifest)
    for f in failures:
        print(f"warning: {f.record_id}: {f.error}", file=sys.stderr)
    ok = volume_io.Manifest(
        [r for r in predicted.records if r.predicted_prob is not None],
        source_description=predicted.source_description,
        base_dir=predicted.base_dir,
    )
    report = qc.generate_report(
        ok, policy, slices_per_volume=args.slices_per_volume, seed=args.seed
    )
    args.out.write_text(report.to_json())
    if args.text_out is not None:
        args.text_out.write_text(report.to_text())
    if args.save_manifest is not None:
        volume_io.save_manifest(predicted, args.save_manifest)
    print(f"{report.flagged_count()} of {len(ok)} volumes flagged at "
          f"t={args.threshold:g}; report {args.out}")
    return 0 if not failures else 2


def _cmd_eval(args):
    manifest = volume_io.load_manifest(args.manifest)
    probs, labels = _labeled_probs(manifest)
    policy = qc.ThresholdPolicy(args.threshold)
    decisions = [qc.apply_threshold(p, policy) for p in probs]
    metrics = qc.compute_metrics(decisions, labels)
    doc = dict(metrics.to_dict(), threshold=args.threshold,
               flagged=metrics.tp + metrics.fp)
    text = json.dumps(doc, indent=2) + "\n"
    if args.out is not None:
        args.out.write_text(text)
    print(text, end="")
    return 0


def _cmd_sweep(args):
    manifest = volume_io.load_manifest(args.manifest)
    probs, labels = _labeled_probs(manifest)
    curve = qc.threshold_sweep(probs, labels)
    args.out.write_text(curve.to_csv())
    print(f"{len(curve.points)} thresholds; curve {args.out}")
    return 0


def _cmd_subset(args):
    manifest = volume_io.load_manifest(args.manifest)
    subset = train.select_finetune_subset(manifest, args.fraction, args.seed)
    volume_io.save_manifest(subset, args.out)
    print(f"{len(subset)} of {len(manifest)} records; manifest {args.out}")
    return 0


def _cmd_serve(args):
    import uvicorn

    from .server import create_app

    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise _UsageError(f"qcnet serve: error: --bind must be host:port, got {args.bind!r}")
    manifest = volume_io.load_manifest(args.manifest)
    app = create_app(
        manifest,
        journal_path=args.journal,
        threshold=args.threshold,
        static_dir=args.static,
    )
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "subset": _cmd_subset,
    "serve": _cmd_serve,
}

_DATA_ERRORS = (
    volume_io.NiftiError,
    volume_io.ManifestError,
    model_mod.CheckpointError,
    ValueError,  # config/validation errors across the package subclass this
    OSError,
)


def _inject_config(parser, argv):
    """Splice config-file values in as flags right after the subcommand.

    Real command-line flags come later in argv, so they win. Keys that do not
    apply to the chosen subcommand are skipped, letting one config file serve
    a whole pipeline.
    """
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv  # parser reports the missing value
    loaded = json.loads(Path(argv[idx + 1]).read_text())
    if not isinstance(loaded, dict):
        raise volume_io.ManifestError("--config must hold a JSON object")
    cmd_idx = next((i for i, a in enumerate(argv) if not a.startswith("-")), None)
    if cmd_idx is None or argv[cmd_idx] not in parser.subcommands:
        return argv
    options = parser.subcommands[argv[cmd_idx]]._option_string_actions
    injected = []
    for key, value in loaded.items():
        flag = "--" + str(key).replace("_", "-")
        if flag == "--config" or flag not in options:
            continue
        if isinstance(value, (list, tuple)):
            injected += [flag, *[str(v) for v in value]]
        elif value is not None:
            injected += [flag, str(value)]
    return argv[: cmd_idx + 1] + injected + argv[cmd_idx + 1 :]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        if argv is None:
            argv = sys.argv[1:]
        args = parser.parse_args(_inject_config(parser, list(argv)))
        _apply_threads(args)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"qcnet: data error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"qcnet: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
