"""Release gate: every shipping criterion, one test each, one printed verdict each.

The heavyweight end-to-end criteria share the session-scoped ``e2e`` fixture
from conftest so the full pipeline trains exactly once per test session.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from _oracles import confusion_counts, naive_conv3d
from qcnet import cli, data, ops, qc, train, volume_io
from qcnet import model as model_mod
from qcnet.gradcheck import grad_check
from qcnet.tensor import Tensor
from qcnet.volume_io import ARTIFACT, NORMAL, Manifest, Scan4D, Volume3D, VolumeRecord


def verdict(announce, index, title, ok, detail):
    status = "PASS" if ok else "FAIL"
    announce(f"[acceptance {index:>2}/11] {title}: {status} ({detail})")
    return ok


# -- 1: layer and network gradients ----------------------------------------


def test_gradients_match_finite_differences(announce):
    t0 = time.monotonic()
    errors = {}

    errors["conv3d"] = grad_check(
        lambda x, w, b: ops.conv3d(x, w, b, stride=1, zero_padding=1),
        [(1, 2, 4, 4, 4), (2, 2, 3, 3, 3), (2,)],
        seed=1,
    )
    errors["conv3d_strided"] = grad_check(
        lambda x, w, b: ops.conv3d(x, w, b, stride=2, zero_padding=1),
        [(1, 1, 5, 5, 5), (2, 1, 3, 3, 3), (2,)],
        seed=2,
    )

    def bn_train(x, gamma, beta):
        rm = Tensor(np.zeros(2), dtype=np.float64)
        rv = Tensor(np.ones(2), dtype=np.float64)
        return ops.batchnorm3d(x, gamma, beta, rm, rv, mode="train")

    errors["batchnorm3d"] = grad_check(bn_train, [(2, 2, 3, 3, 3), (2,), (2,)], seed=3)
    errors["relu"] = grad_check(
        ops.relu, [(2, 2, 3, 3, 3)], seed=4,
        make_inputs=lambda rng: [rng.standard_normal((2, 2, 3, 3, 3)) + 0.2],
    )
    errors["avgpool3d"] = grad_check(lambda x: ops.avgpool3d(x), [(1, 2, 5, 4, 4)], seed=5)
    errors["global_avg_pool"] = grad_check(ops.global_avg_pool, [(2, 3, 3, 3, 3)], seed=6)
    errors["dense"] = grad_check(ops.dense, [(3, 4), (4, 2), (2,)], seed=7)
    errors["softmax_cross_entropy"] = grad_check(
        lambda z: ops.cross_entropy(ops.softmax(z), np.array([0, 1, 1])),
        [(3, 2)],
        seed=8,
    )

    def toy_network(x, w1, b1, gamma, beta, w2, b2, wd, bd):
        h = ops.conv3d(x, w1, b1, stride=1, zero_padding=1)
        rm = Tensor(np.zeros(2), dtype=np.float64)
        rv = Tensor(np.ones(2), dtype=np.float64)
        h = ops.relu(ops.batchnorm3d(h, gamma, beta, rm, rv, mode="train"))
        h = ops.avgpool3d(h)
        h = ops.conv3d(h, w2, b2, stride=1, zero_padding=0)
        h = ops.global_avg_pool(h)
        return ops.cross_entropy(ops.softmax(ops.dense(h, wd, bd)), np.array([1]))

    errors["toy_network"] = grad_check(
        toy_network,
        [(1, 1, 4, 4, 4), (2, 1, 3, 3, 3), (2,), (2,), (2,),
         (2, 2, 2, 2, 2), (2,), (2, 2), (2,)],
        seed=9,
    )

    elapsed = time.monotonic() - t0
    worst = max(errors.values())
    ok = worst <= 1e-3 and elapsed < 120
    verdict(announce, 1, "analytic gradients vs central differences",
            ok, f"worst rel err {worst:.2e} over {len(errors)} cases, {elapsed:.1f}s")
    assert worst <= 1e-3, errors
    assert elapsed < 120


# -- 2: convolution against a naive reference ------------------------------


def test_convolution_matches_naive_reference(announce):
    worst = 0.0
    for case in range(50):
        rng = np.random.default_rng(1000 + case)
        n, c, k = rng.integers(1, 3), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d, h, w = (int(rng.integers(4, 8)) for _ in range(3))
        kd, kh, kw = (int(rng.integers(1, 4)) for _ in range(3))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        kd, kh, kw = min(kd, d + 2 * pad), min(kh, h + 2 * pad), min(kw, w + 2 * pad)
        x = rng.standard_normal((n, c, d, h, w)).astype(np.float32)
        wt = rng.standard_normal((k, c, kd, kh, kw)).astype(np.float32)
        b = rng.standard_normal(k).astype(np.float32)
        got = ops.conv3d(
            Tensor(x), Tensor(wt), Tensor(b), stride=stride, zero_padding=pad
        ).data
        want = naive_conv3d(x, wt, b, stride=stride, zero_padding=pad)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-5
    verdict(announce, 2, "conv3d vs 7-loop reference, 50 random cases",
            ok, f"worst abs diff {worst:.2e}")
    assert ok


# -- 3: stratified split leakage -------------------------------------------


def fake_split_manifest(n_art, n_norm):
    recs = []
    for i in range(n_art + n_norm):
        label = ARTIFACT if i < n_art else NORMAL
        sid = f"sub-{i:03d}"
        recs.append(VolumeRecord(f"{sid}-v0", sid, f"{sid}.nii", 0, label=label))
    return Manifest(recs)


def test_split_never_leaks_subjects(announce):
    rng = np.random.default_rng(7)
    overlaps = 0
    worst_dev = 0.0
    for trial in range(200):
        n_art = int(rng.integers(2, 21))
        n_norm = int(rng.integers(2, 21))
        m = fake_split_manifest(n_art, n_norm)
        tr, va = data.stratified_subject_split(
            m, data.SplitSpec(0.25, seed=int(rng.integers(10_000)))
        )
        overlaps += len(set(tr.subjects()) & set(va.subjects()))
        val_ids = set(va.subjects())
        for cls, n_cls in ((ARTIFACT, n_art), (NORMAL, n_norm)):
            got = sum(
                1 for r in m.records
                if r.label == cls and r.subject_id in val_ids
            )
            worst_dev = max(worst_dev, abs(got - 0.25 * n_cls))
    ok = overlaps == 0 and worst_dev <= 1.0
    verdict(announce, 3, "subject split: no leakage, per-class 25%",
            ok, f"{overlaps} overlaps, worst count deviation {worst_dev:.2f}")
    assert ok


# -- 4: metrics formulas ----------------------------------------------------


def test_metrics_formulas_exact(announce):
    m = qc.Metrics(tp=8, fp=2, fn=1, tn=9)
    exact = (
        abs(m.precision - 0.800) < 5e-4
        and abs(m.recall - 0.889) < 5e-4
        and abs(m.accuracy - 0.850) < 5e-4
    )
    rng = np.random.default_rng(11)
    agree = True
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        decisions = [ARTIFACT if x else NORMAL for x in rng.integers(0, 2, n)]
        labels = [ARTIFACT if x else NORMAL for x in rng.integers(0, 2, n)]
        got = qc.compute_metrics(decisions, labels)
        if (got.tp, got.fp, got.fn, got.tn) != confusion_counts(decisions, labels):
            agree = False
            break
    ok = exact and agree
    verdict(announce, 4, "metrics: worked example and 1000-vector brute force",
            ok, f"P={m.precision:.3f} R={m.recall:.3f} A={m.accuracy:.3f}, brute force {'agrees' if agree else 'disagrees'}")
    assert ok


# -- 5: threshold monotonicity ----------------------------------------------


def test_threshold_monotonicity(announce):
    rng = np.random.default_rng(23)
    subset_ok = True
    recall_ok = True
    for _ in range(30):
        n = int(rng.integers(5, 60))
        probs = rng.random(n)
        labels = [ARTIFACT if x else NORMAL for x in rng.integers(0, 2, n)]
        thresholds = sorted({0.0, 1.0} | set(np.round(probs, 6)))
        flagged_sets = [
            {i for i, p in enumerate(probs) if qc.apply_threshold(p, t) == ARTIFACT}
            for t in thresholds
        ]
        for lo, hi in zip(flagged_sets, flagged_sets[1:]):
            if not hi <= lo:
                subset_ok = False
        recalls = [
            p.recall for p in qc.threshold_sweep(probs.tolist(), labels).points
            if p.recall is not None
        ]
        if any(b > a + 1e-12 for a, b in zip(recalls, recalls[1:])):
            recall_ok = False
    ok = subset_ok and recall_ok
    verdict(announce, 5, "raising the threshold only unflags",
            ok, f"flagged-set nesting {'holds' if subset_ok else 'broken'}, recall monotone {'yes' if recall_ok else 'no'}")
    assert ok


# -- 6: end-to-end synthetic training --------------------------------------


def test_end_to_end_recall(announce, e2e):
    m = e2e["metricsA"]
    minutes = e2e["train_seconds"] / 60.0
    ok = m.recall is not None and m.recall >= 0.80 and minutes <= 30.0
    verdict(announce, 6, "desk-32 trained on 200 volumes, held-out recall >= 0.80",
            ok, f"recall {m.recall:.3f}, precision {m.precision if m.precision is None else round(m.precision, 3)}, {minutes:.1f} min")
    assert m.recall >= 0.80
    assert minutes <= 30.0


# -- 7: fine-tuning lift under distribution shift ---------------------------


def test_finetune_lift_on_shifted_distribution(announce, e2e):
    base = e2e["metricsB_base"].recall or 0.0
    tuned = e2e["metricsB_tuned"].recall or 0.0
    minutes = e2e["finetune_seconds"] / 60.0
    lift = tuned - base
    ok = lift >= 0.10 and minutes <= 15.0
    verdict(announce, 7, "10% subset fine-tune lifts recall on shifted data",
            ok, f"recall {base:.3f} -> {tuned:.3f} (+{100 * lift:.1f} points), {minutes:.1f} min")
    assert lift >= 0.10
    assert minutes <= 15.0


# -- 8: annotation savings arithmetic ---------------------------------------


def test_annotation_savings_arithmetic(announce):
    frac = qc.annotation_savings(222, 80)
    text = qc.savings_percent(frac)
    ok = frac == 0.9875 and text == "98%"
    verdict(announce, 8, "annotation savings 222 volumes x 80 slices",
            ok, f"fraction {frac!r}, shown as {text!r}")
    assert ok


# -- 9: determinism and serialization ---------------------------------------


def test_determinism_and_round_trips(announce, small_corpus, tmp_path):
    cfg = model_mod.ModelConfig(input_dims=(16, 16, 8), seed=2)
    tc = train.TrainConfig(epochs=2, batch_size=6, lr=1e-3, seed=5)
    paths = []
    for run in range(2):
        model = model_mod.build_model(cfg)
        train.train(model, small_corpus, None, tc)
        p = tmp_path / f"run{run}.qc3d"
        model_mod.save_checkpoint(model, p)
        paths.append(p)
    same_train = paths[0].read_bytes() == paths[1].read_bytes()

    loaded, _ = model_mod.load_checkpoint(paths[0])
    resaved = tmp_path / "resaved.qc3d"
    model_mod.save_checkpoint(loaded, resaved)
    same_ckpt = resaved.read_bytes() == paths[0].read_bytes()

    rng = np.random.default_rng(0)
    vols = [
        Volume3D(rng.random((10, 9, 8), dtype=np.float32), spacing=(2.0, 2.0, 2.0))
        for _ in range(2)
    ]
    scan = Scan4D(volumes=vols, subject_id="sub-rt", b_values=[0.0, 1000.0])
    nii = tmp_path / "rt.nii"
    volume_io.write_nifti(scan, nii)
    back = volume_io.read_nifti(nii)
    same_nifti = all(
        np.array_equal(a.voxels, b.voxels) for a, b in zip(scan.volumes, back.volumes)
    ) and back.b_values == scan.b_values

    ok = same_train and same_ckpt and same_nifti
    verdict(announce, 9, "bit-exact reruns and round trips",
            ok, f"train rerun {'==' if same_train else '!='}, checkpoint {'==' if same_ckpt else '!='}, volume file {'==' if same_nifti else '!='}")
    assert ok


# -- 10: preprocessing geometry ---------------------------------------------


def test_preprocessing_geometry(announce):
    target = (96, 96, 70)

    ramp = np.ones((96, 96, 80), dtype=np.float32)
    for k in range(80):
        ramp[:, :, k] = k + 1.0
    out = volume_io.preprocess(Volume3D(ramp, spacing=(2, 2, 2)), target)
    # central crop keeps slices 5..74; slice values stay proportional
    per_slice = out.voxels.mean(axis=(0, 1))
    # an off-by-one crop would move these ratios by 2-3 percent
    crop_ok = (
        out.voxels.shape == (96, 96, 70)
        and np.allclose(out.voxels.std(axis=(0, 1)), 0.0, atol=1e-3)
        and np.isclose(per_slice[1] / per_slice[0], 7.0 / 6.0, rtol=1e-3)
        and np.isclose(per_slice[-1] / per_slice[0], 75.0 / 6.0, rtol=1e-3)
    )

    ones = np.ones((96, 96, 60), dtype=np.float32)
    out = volume_io.preprocess(Volume3D(ones, spacing=(2, 2, 2)), target)
    pad_ok = (
        out.voxels.shape == (96, 96, 70)
        and np.all(out.voxels[:, :, :5] == 0.0)
        and np.all(out.voxels[:, :, 65:] == 0.0)
        and np.all(out.voxels[:, :, 5:65] > 0.0)
    )

    rng = np.random.default_rng(31)
    dims_ok = True
    for _ in range(25):
        nx, ny, nz = (int(rng.integers(8, 101)) for _ in range(3))
        v = Volume3D(rng.random((nx, ny, nz), dtype=np.float32), spacing=(2, 2, 2))
        got = volume_io.preprocess(v, target)
        if got.voxels.shape != (96, 96, 70):
            dims_ok = False
            break

    ok = crop_ok and pad_ok and dims_ok
    verdict(announce, 10, "96-grid crop/pad geometry",
            ok, f"80->70 central crop {'ok' if crop_ok else 'BAD'}, 60->70 symmetric pad {'ok' if pad_ok else 'BAD'}, randomized dims {'ok' if dims_ok else 'BAD'}")
    assert ok


# -- 11 (review loop, server side): HTTP metrics == CLI eval -----------------


def test_review_loop_consistency(announce, small_corpus, tiny_model, tmp_path, capsys):
    from fastapi.testclient import TestClient

    from qcnet.data import VolumeCache
    from qcnet.server import create_app

    predicted, failures = qc.predict(
        tiny_model, small_corpus, cache=VolumeCache((16, 16, 8))
    )
    assert not failures
    pred_path = tmp_path / "pred.jsonl"
    volume_io.save_manifest(predicted, pred_path)
    client = TestClient(
        create_app(predicted, tmp_path / "j.journal", target_dims=(16, 16, 8))
    )

    parity = True
    for t in (0.15, 0.5):
        rc = cli.main(["eval", "--manifest", str(pred_path), "--threshold", str(t)])
        assert rc == 0
        cli_doc = json.loads(capsys.readouterr().out)
        http = client.get("/api/metrics", params={"threshold": t}).json()
        if http["metrics"] != {
            k: cli_doc[k]
            for k in ("tp", "fp", "fn", "tn", "precision", "recall", "accuracy")
        } or http["flagged"] != cli_doc["flagged"]:
            parity = False

    flagged = [
        client.get("/api/metrics", params={"threshold": t}).json()["flagged"]
        for t in np.linspace(0.0, 1.0, 21)
    ]
    monotone = flagged == sorted(flagged, reverse=True)

    vid = predicted.records[0].id
    flip = NORMAL if predicted.records[0].label == ARTIFACT else ARTIFACT
    client.post(f"/api/volumes/{vid}/label", json={"label": flip})
    out_path = tmp_path / "export.jsonl"
    client.post("/api/finetune-set/export", json={"path": str(out_path)})
    exported = volume_io.load_manifest(out_path)
    override_ok = len(exported) == 1 and exported.records[0].label == flip

    ok = parity and monotone and override_ok
    verdict(announce, 11, "review loop: HTTP metrics == CLI, overrides export",
            ok, f"CLI parity {'yes' if parity else 'NO'}, flagged monotone {'yes' if monotone else 'NO'}, override export {'ok' if override_ok else 'BAD'}")
    assert ok
