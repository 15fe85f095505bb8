"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` (or ``python tests/test_acceptance.py``);
the lines are also repeated in pytest's terminal summary.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from graspcount.cli import main as cli_main
from graspcount.dataset import CompositeStore, DatasetManifest, ManifestEntry, balance_classes
from graspcount.losses import (
    CountPrediction,
    EmbeddingBatch,
    LossConfig,
    error_sensitive_loss,
    error_sensitive_loss_from_logits,
    fourier_supcon_loss,
    supcon_loss,
    value_and_grad,
)
from graspcount.metrics import EvalReport, evaluate, evaluate_max_over_views, rmse_from_confusion
from graspcount.models import EncoderConfig, HeadConfig
from graspcount.synthgen import ClassDistribution, generate_dataset
from graspcount.trainer import TrainConfig, train_classifier, train_encoder

from oracles import central_difference, naive_fourier_embed, naive_supcon, random_labeled_batch, relative_error

RESULTS: dict = {}
REPORTS: list = []

# sphere benchmark: 2230 scenes -> 2004 train / 226 test after the 9:1 split
BENCH_N = 2230
BENCH_SEED = 1
STAGE1_EPOCHS = 20
STAGE2_EPOCHS = 30
# the three-seed view comparison trains 6 models, so it uses a shorter stage 1
COMPARE_EPOCHS = 10
COMPARE_SEEDS = (1, 2, 3)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print(line)
    assert ok, line


def summary_lines():
    return [RESULTS[k] for k in sorted(RESULTS)]


# 1-4: losses -------------------------------------------------------------


def _batch(z, labels):
    return EmbeddingBatch(torch.as_tensor(np.asarray(z), dtype=torch.float64), torch.as_tensor(labels))


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        z, labels = random_labeled_batch(rng, b_max=16, d_max=8)
        tau = float(rng.uniform(0.05, 2.0))
        w0, w1 = float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.0, 2.0))
        cfg = LossConfig(temperature=tau, w0=w0, w1=w1)
        got = float(supcon_loss(_batch(z, labels), cfg).loss)
        ref, _ = naive_supcon(z, labels, tau)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
        got_f = float(fourier_supcon_loss(_batch(z, labels), cfg).loss)
        ref_f, _ = naive_supcon(naive_fourier_embed(z, w0, w1), labels, tau)
        worst = max(worst, abs(got_f - ref_f) / max(abs(ref_f), 1e-300))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-6 and elapsed < 10, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_gradient_checks():
    t0 = time.perf_counter()
    worst = 0.0
    cfg = LossConfig(temperature=0.5)
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        z, labels = random_labeled_batch(rng, b_max=16, d_max=8)
        lab = torch.as_tensor(labels)
        for fn in (supcon_loss, fourier_supcon_loss):

            def f(x, fn=fn):
                return fn(EmbeddingBatch(x, lab), cfg).loss

            _, g = value_and_grad(f, torch.from_numpy(z))
            fd = central_difference(lambda x: float(f(torch.from_numpy(x))), z, h=1e-5)
            worst = max(worst, relative_error(g.numpy(), fd))
        b = int(rng.integers(2, 17))
        logits = rng.normal(size=(b, 5)) * 2
        truths = torch.as_tensor(rng.integers(0, 5, size=b))

        def h(x):
            return error_sensitive_loss_from_logits(x, truths)

        _, g = value_and_grad(h, torch.from_numpy(logits))
        fd = central_difference(lambda x: float(h(torch.from_numpy(x))), logits, h=1e-5)
        worst = max(worst, relative_error(g.numpy(), fd))
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-4 and elapsed < 60, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_3_reduction_identity():
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(5000 + seed)
        z, labels = random_labeled_batch(rng)
        cfg = LossConfig(temperature=float(rng.uniform(0.05, 2.0)), w0=float(rng.uniform(0.1, 3.0)), w1=0.0)
        a = float(fourier_supcon_loss(_batch(z, labels), cfg).loss)
        b = float(supcon_loss(_batch(z, labels), cfg).loss)
        worst = max(worst, abs(a - b))
    record(3, worst <= 1e-9, f"max abs diff {worst:.2e} over 200 batches")


def test_criterion_4_eq2_point_values():
    cfg = LossConfig()
    under = CountPrediction(torch.tensor([[0.1, 0.0, 0.0, 0.0, 0.0]], dtype=torch.float64), torch.tensor([4]))
    over = CountPrediction(torch.tensor([[0.0, 0.0, 0.0, 0.0, 0.1]], dtype=torch.float64), torch.tensor([0]))
    a, b = float(error_sensitive_loss(under, cfg)), float(error_sensitive_loss(over, cfg))
    # hand values: (4/70 - 1) ln 0.1 and (-4/70 - 1) ln 0.1
    ok = abs(a - 2.171009) <= 1e-6 and abs(b - 2.434162) <= 1e-6
    record(4, ok, f"{a:.6f}, {b:.6f}")


# 5-6: desk-scale sphere benchmark -----------------------------------------


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("bench")


_BENCH = {}


def _bench(outdir: Path):
    if "manifest" not in _BENCH:
        t0 = time.perf_counter()
        m = generate_dataset("sphere", BENCH_N, ClassDistribution(), BENCH_SEED, outdir)
        _BENCH.update(manifest=m, store=CompositeStore(), gen_time=time.perf_counter() - t0)
    return _BENCH["manifest"], _BENCH["store"]


def _pipeline(manifest, store, seed, stage1_epochs, single_view=False):
    enc_cfg, head_cfg = EncoderConfig(), HeadConfig()
    model, _ = train_encoder(
        manifest,
        enc_cfg,
        head_cfg,
        TrainConfig(stage="contrastive", epochs=stage1_epochs, seed=seed, single_view=single_view),
        LossConfig(),
        store,
    )
    cfg2 = TrainConfig(stage="classifier", loss="cross_entropy", epochs=STAGE2_EPOCHS, seed=seed, single_view=single_view)
    model, _ = train_classifier(model, manifest, None, cfg2, LossConfig(), store)
    return model


@pytest.mark.slow
def test_criterion_5_desk_reproduction(bench_dir):
    t0 = time.perf_counter()
    manifest, store = _bench(bench_dir)
    n_train = sum(manifest.class_counts("train"))
    test = manifest.subset("test")
    model = _pipeline(manifest, store, BENCH_SEED, STAGE1_EPOCHS)
    report = evaluate(model, test, store)
    REPORTS.append(report)
    elapsed = time.perf_counter() - t0
    ok = (
        report.overall_accuracy >= 0.90
        and report.rmse <= 0.35
        and elapsed <= 15 * 60
        and n_train >= 2000
        and manifest.num_classes == 5
    )
    record(
        5,
        ok,
        f"accuracy {report.overall_accuracy:.4f}, rmse {report.rmse:.4f}, {n_train} train / {len(test)} test, {elapsed / 60:.1f} min",
    )


@pytest.mark.slow
def test_criterion_6_views_combined_beat_max_over_views(bench_dir):
    manifest, store = _bench(bench_dir)
    test = manifest.subset("test")
    cascaded, single = [], []
    for seed in COMPARE_SEEDS:
        rc = evaluate(_pipeline(manifest, store, seed, COMPARE_EPOCHS), test, store)
        rm = evaluate_max_over_views(_pipeline(manifest, store, seed, COMPARE_EPOCHS, single_view=True), test, store)
        REPORTS.extend([rc, rm])
        cascaded.append(rc.overall_accuracy)
        single.append(rm.overall_accuracy)
    a, b = float(np.mean(cascaded)), float(np.mean(single))
    per_seed = ", ".join(f"{c:.3f}/{s:.3f}" for c, s in zip(cascaded, single))
    record(6, a >= b, f"mean cascaded {a:.4f} vs max-over-views {b:.4f}; per seed {per_seed}")


# 7: balancing ---------------------------------------------------------------


def test_criterion_7_balancing():
    counts = [1221, 381, 140, 40, 18]
    entries = []
    for c, k in enumerate(counts):
        for i in range(k):
            p = Path(f"/unused/{c}_{i}.png")
            entries.append(ManifestEntry(f"{c}_{i}", (p, p, p, p), c, "train"))
    out = balance_classes(DatasetManifest(entries, num_classes=5), "train")
    per_class = Counter(e.count for e in out)
    visits = Counter(e.id for e in out if e.count == 4)
    ok = all(per_class[c] == 1221 for c in range(5)) and len(visits) == 18 and set(visits.values()) <= {67, 68}
    record(7, ok, f"per class {[per_class[c] for c in range(5)]}, smallest-class visits {sorted(set(visits.values()))}")


# 9: end-to-end determinism ----------------------------------------------------

E2E = {
    "generate": {"image_size": 32, "n_samples": 150},
    "encoder": {"input_size": 64, "width": 8},
    "train": {"epochs": 2, "batch_size": 16},
}


def _e2e_run(root: Path, cfg_path: Path) -> bytes:
    data, run, ev = root / "data", root / "run", root / "eval"
    common = ["--config", str(cfg_path), "--seed", "11"]
    assert cli_main(["generate", *common, "--shape", "sphere", "--out", str(data)]) == 0
    for stage in ("contrastive", "classifier"):
        assert cli_main(["train", *common, "--stage", stage, "--data", str(data), "--out", str(run)]) == 0
    assert cli_main(["evaluate", *common, "--checkpoint", str(run / "classifier.safetensors"), "--data", str(data), "--out", str(ev)]) == 0
    return (ev / "metrics.json").read_bytes()


def test_criterion_9_end_to_end_determinism(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(E2E))
    a = _e2e_run(tmp_path / "a", cfg)
    b = _e2e_run(tmp_path / "b", cfg)
    REPORTS.append(EvalReport.from_dict(json.loads(a)))
    record(9, a == b, f"metrics.json identical: {a == b}, {len(a)} bytes")


# 8: metrics consistency (last, so it also covers every report produced above) ----


def test_criterion_8_metrics_consistency():
    rng = np.random.default_rng(8)
    reports = list(REPORTS)
    for _ in range(500):
        n = int(rng.integers(1, 400))
        truths = rng.integers(0, 5, size=n)
        preds = np.where(rng.random(n) < 0.7, truths, rng.integers(0, 5, size=n))
        reports.append(EvalReport.from_predictions(truths, preds, 5))
    worst, exact = 0.0, True
    for r in reports:
        r = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
        cm = np.asarray(r.confusion, dtype=np.int64)
        worst = max(worst, abs(r.rmse - rmse_from_confusion(cm)))
        t, p = np.indices(cm.shape)
        worst = max(worst, abs(r.rmse - math.sqrt(float((cm * (t - p) ** 2).sum()) / cm.sum())))
        exact &= r.overall_accuracy == int(np.trace(cm)) / r.n_samples and int(cm.sum()) == r.n_samples
    record(8, worst <= 1e-9 and exact, f"{len(reports)} reports ({len(REPORTS)} from pipelines), max rmse diff {worst:.1e}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
