"""Acceptance suite: one test per release criterion, each printing a pass/fail line.

The synthetic shifted benchmark (default generator settings, seeds 0..4) is
computed once per session and shared between the adaptation-benefit and
ablation-ordering criteria. Everything here runs CPU-only and without the
optional extraction package.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

import fakevid.autodiff as ad
from fakevid.autodiff import Tensor, grad_check
from fakevid.data import (
    ShiftConfig,
    event_kfold_split,
    strip_labels,
    synthesize_dataset,
    temporal_split,
)
from fakevid.encoder import decode_masked, encode, mlm_loss
from fakevid.engine import TrainConfig, run_pipeline, train, ttt_adapt
from fakevid.fusion import classify, fnd_loss, fuse
from fakevid.masking import apply_mask
from fakevid.metrics import compute_metrics
from fakevid.model import DetectionModel, ModelConfig

from helpers import TINY_HEADER, tiny_model, tiny_record

BENCH_MODEL = ModelConfig(d_model=32, n_heads=4, d_ff=64)
BENCH_TRAIN = TrainConfig(
    train_epochs=8, batch_size=16, train_lr=3e-3, ttt_lr=1.5e-3, ttt_epochs=20, seed=0
)
BENCH_SEEDS = (0, 1, 2, 3, 4)


def report(capsys, line: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance] {line}")


@pytest.fixture(scope="module")
def benchmark():
    """Run the shifted synthetic benchmark once: full model plus every ablation."""
    arms = {
        "full": BENCH_TRAIN,
        "no_mlm": replace(BENCH_TRAIN, no_mlm=True),
        "no_trans": replace(BENCH_TRAIN, no_trans=True),
        "no_v": replace(BENCH_TRAIN, no_v=True),
        "no_a": replace(BENCH_TRAIN, no_a=True),
    }
    acc = {name: [] for name in arms}
    acc["no_ttt"] = []
    mlm_drops = []
    started = time.perf_counter()
    full_wall = 0.0
    for seed in BENCH_SEEDS:
        header, records = synthesize_dataset(ShiftConfig(seed=seed))
        split = temporal_split(records, 0.8)
        for name, cfg in arms.items():
            t0 = time.perf_counter()
            fold = run_pipeline(header, records, split, cfg, BENCH_MODEL).folds[0]
            acc[name].append(fold.metrics.accuracy)
            if name == "full":
                full_wall += time.perf_counter() - t0
                acc["no_ttt"].append(fold.metrics_before_ttt.accuracy)
                extra = fold.ttt_report.extra
                mlm_drops.append(1.0 - extra["mlm_after"] / extra["mlm_before"])
    return {
        "accuracy": {k: sum(v) / len(v) for k, v in acc.items()},
        "per_seed": acc,
        "mlm_drops": mlm_drops,
        "full_wall_s": full_wall,
        "total_wall_s": time.perf_counter() - started,
    }


class TestGradientSuite:
    def test_every_block_passes_finite_difference_checks(self, rng, capsys):
        started = time.perf_counter()
        tol = 1e-4
        results = {}
        model = tiny_model(seed=41)
        record = tiny_record(rng)

        # Cross-attention unit.
        from helpers import random_unit

        unit = random_unit(rng, 8, 2, 16)
        q = Tensor(rng.normal(size=(3, 8)))
        kv = Tensor(rng.normal(size=(4, 8)))
        from fakevid.encoder import cross_attention_unit

        results["cross_attention_unit"] = grad_check(
            lambda: ad.mean_all(cross_attention_unit(q, kv, unit)), list(unit.named("u")), tol
        )

        # Decoder block with gathered logits and cross-entropy.
        seq = Tensor(rng.normal(size=(4, 8)))
        dec = model.decoder_audio
        results["decoder"] = grad_check(
            lambda: ad.cross_entropy_logits(decode_masked(seq, [0, 2], dec), [3, 11]),
            list(dec.named("dec")),
            tol,
        )

        # Fusion layer and classifier through the detection loss.
        fusion = model.fusion
        inputs = [
            Tensor(rng.normal(size=(1, 8))),
            Tensor(rng.normal(size=(1, 8))),
            Tensor(rng.normal(size=(1, TINY_HEADER.d_v))),
            Tensor(rng.normal(size=(1, TINY_HEADER.d_t))),
            Tensor(rng.normal(size=(1, TINY_HEADER.d_t))),
        ]
        results["fusion_and_classifier"] = grad_check(
            lambda: fnd_loss(classify(fuse(*inputs, fusion), fusion), 1),
            list(fusion.named("fusion")),
            tol,
        )

        # Both losses on free parameters.
        logits = Tensor(rng.uniform(-1, 1, (3, 6)), requires_grad=True)
        results["cross_entropy"] = grad_check(
            lambda: ad.cross_entropy_logits(logits, [0, 5, 2]), [("logits", logits)], tol
        )
        p_hat = Tensor(0.35, requires_grad=True)
        results["binary_cross_entropy"] = grad_check(
            lambda: ad.binary_cross_entropy(p_hat, 1), [("p", p_hat)], tol
        )

        # Full reconstruction pathway: projections, masking, both units, both
        # decoders, joint loss.
        enc = model.encoder

        def end_to_end():
            text = ad.add(
                ad.matmul(Tensor(record.text_feat), enc.projections.text.weight),
                enc.projections.text.bias,
            )
            masked = apply_mask(
                text, record.token_ids, 0.5, enc.mask_embedding, np.random.default_rng(5)
            )
            audio_text, visual_text = encode(masked, record.audio_feat, record.keyframe_feat, enc)
            return mlm_loss(
                audio_text, visual_text, masked.mask_positions, masked.target_ids,
                model.decoder_audio, model.decoder_visual,
            )

        params = (
            list(enc.named("encoder"))
            + list(model.decoder_audio.named("da"))
            + list(model.decoder_visual.named("dv"))
        )
        results["encode_decode_mlm"] = grad_check(end_to_end, params, tol)

        elapsed = time.perf_counter() - started
        failures = {k: r.max_rel_err for k, r in results.items() if not r.passed}
        ok = not failures and elapsed < 120.0
        report(
            capsys,
            f"gradient suite: {'PASS' if ok else 'FAIL'} "
            f"(worst {max(r.max_rel_err for r in results.values()):.2e}, {elapsed:.0f}s)",
        )
        assert not failures, failures
        assert elapsed < 120.0, f"gradient suite took {elapsed:.0f}s"


class TestLossIdentities:
    def test_uniform_ce_bce_and_fresh_decoder_level(self, capsys):
        for vocab in (2, 8, 64):
            loss = ad.cross_entropy_logits(Tensor(np.zeros((4, vocab))), [0, 1, 0, vocab - 1])
            assert abs(loss.item() - math.log(vocab)) < 1e-9
        assert abs(ad.binary_cross_entropy(Tensor(0.5), 1).item() - math.log(2)) < 1e-12
        assert abs(ad.binary_cross_entropy(Tensor(0.5), 0).item() - math.log(2)) < 1e-12

        # Freshly initialized model: reconstruction loss sits at twice the
        # uniform entropy, within five percent over 100 seeds.
        vocab = TINY_HEADER.vocab_size
        losses = []
        for seed in range(100):
            model = tiny_model(seed=seed)
            local = np.random.default_rng(10_000 + seed)
            record = tiny_record(local)
            enc = model.encoder
            text = ad.add(
                ad.matmul(Tensor(record.text_feat), enc.projections.text.weight),
                enc.projections.text.bias,
            )
            masked = apply_mask(text, record.token_ids, 0.5, enc.mask_embedding, local)
            audio_text, visual_text = encode(masked, record.audio_feat, record.keyframe_feat, enc)
            losses.append(
                mlm_loss(
                    audio_text, visual_text, masked.mask_positions, masked.target_ids,
                    model.decoder_audio, model.decoder_visual,
                ).item()
            )
        mean = sum(losses) / len(losses)
        rel = abs(mean - 2 * math.log(vocab)) / (2 * math.log(vocab))
        report(capsys, f"loss identities: PASS (fresh-decoder level off by {100 * rel:.1f}%)")
        assert rel < 0.05


class TestMaskingStatistics:
    def test_count_exact_and_frequency_uniform(self, capsys):
        l, trials = 32, 10_000
        feat = Tensor(np.zeros((l, 4)))
        emb = Tensor(np.ones(4))
        ids = list(range(l))
        gen = np.random.default_rng(77)
        counts = np.zeros(l)
        for _ in range(trials):
            batch = apply_mask(feat, ids, 0.15, emb, gen)
            assert len(batch.mask_positions) == 5
            counts[batch.mask_positions] += 1
        worst = np.abs(counts / trials - 5 / 32).max()
        report(capsys, f"masking statistics: PASS (worst frequency deviation {worst:.4f})")
        assert worst < 0.01


class TestPartitionDiscipline:
    def test_classifier_frozen_in_100_randomized_adaptations(self, capsys):
        for trial in range(100):
            gen = np.random.default_rng(trial)
            model = tiny_model(seed=trial)
            records = [
                tiny_record(gen, l=int(gen.integers(2, 8)), label=int(gen.integers(0, 2)))
                for _ in range(int(gen.integers(2, 6)))
            ]
            cfg = TrainConfig(
                batch_size=int(gen.integers(1, 5)),
                ttt_epochs=int(gen.integers(1, 3)),
                ttt_lr=float(gen.uniform(1e-4, 5e-3)),
                mask_ratio=float(gen.uniform(0.05, 0.9)),
                seed=trial,
            )
            before = model.checksum("classifier")
            ttt_adapt(model, strip_labels(records), cfg)
            assert model.checksum("classifier") == before, f"trial {trial}"
        report(capsys, "partition discipline: PASS (classifier bitwise frozen, 100 runs)")

    def test_no_mlm_keeps_decoder_gradients_at_zero(self, capsys):
        gen = np.random.default_rng(3)
        model = tiny_model(seed=55)
        records = [tiny_record(np.random.default_rng(i), label=i % 2) for i in range(8)]
        reportobj = train(model, records, TrainConfig(train_epochs=3, batch_size=4, no_mlm=True))
        worst = max(e.decoder_grad_max for e in reportobj.epochs)
        report(capsys, f"no_mlm decoder gradients: PASS (max {worst})")
        assert worst == 0.0


class TestSplitInvariants:
    def test_event_five_fold_on_738_events_and_temporal_ordering(self, rng, capsys):
        records = []
        for e in range(738):
            records.append(tiny_record(rng, label=e % 2))
            records[-1].event_id = f"e{e}"
            records[-1].video_id = f"v{e}"
            records[-1].timestamp = int(rng.integers(0, 10_000))
        plan = event_kfold_split(records, k=5, seed=9)
        sizes = []
        for fold in range(5):
            train_recs, test_recs = plan.fold_records(records, fold)
            train_events = {r.event_id for r in train_recs}
            test_events = {r.event_id for r in test_recs}
            assert not (train_events & test_events)
            sizes.append(len(test_events))
        assert set(sizes) <= {147, 148} and sum(sizes) == 738

        tplan = temporal_split(records, 0.8)
        train_recs, test_recs = tplan.fold_records(records, 0)
        assert max(r.timestamp for r in train_recs) <= min(r.timestamp for r in test_recs)
        report(capsys, f"split invariants: PASS (fold sizes {sorted(set(sizes))})")


class TestAdaptationBenefit:
    def test_ttt_recovers_accuracy_and_reduces_reconstruction_loss(self, benchmark, capsys):
        with_ttt = benchmark["accuracy"]["full"]
        without = benchmark["accuracy"]["no_ttt"]
        benefit = 100 * (with_ttt - without)
        mean_drop = 100 * sum(benchmark["mlm_drops"]) / len(benchmark["mlm_drops"])
        wall = benchmark["full_wall_s"]
        ok = benefit >= 1.0 and mean_drop >= 10.0 and wall < 900
        report(
            capsys,
            f"adaptation benefit: {'PASS' if ok else 'FAIL'} "
            f"(+{benefit:.1f} accuracy points, reconstruction loss -{mean_drop:.1f}%, {wall:.0f}s)",
        )
        assert benefit >= 1.0
        assert mean_drop >= 10.0
        assert wall < 900

    def test_before_adaptation_metrics_equal_a_no_ttt_run(self, capsys):
        # Training consumes identical rng streams whether or not adaptation
        # follows, so the adapted run's pre-adaptation metrics must replicate
        # a dedicated no-adaptation run exactly.
        header, records = synthesize_dataset(ShiftConfig(seed=BENCH_SEEDS[0]))
        split = temporal_split(records, 0.8)
        adapted = run_pipeline(header, records, split, BENCH_TRAIN, BENCH_MODEL).folds[0]
        plain = run_pipeline(
            header, records, split, replace(BENCH_TRAIN, no_ttt=True), BENCH_MODEL
        ).folds[0]
        assert adapted.metrics_before_ttt.to_dict() == plain.metrics.to_dict()
        report(capsys, "no-adaptation equivalence: PASS")


class TestAblationOrdering:
    def test_full_model_dominates_every_ablation(self, benchmark, capsys):
        full = benchmark["accuracy"]["full"]
        margins = {
            name: 100 * (full - benchmark["accuracy"][name])
            for name in ("no_ttt", "no_mlm", "no_trans", "no_v", "no_a")
        }
        ok = all(m >= 0 for m in margins.values())
        pretty = ", ".join(f"{k} +{v:.1f}" for k, v in margins.items())
        report(capsys, f"ablation ordering: {'PASS' if ok else 'FAIL'} ({pretty})")
        for name, margin in margins.items():
            assert margin >= 0, f"full model loses to {name} by {-margin:.1f} points"


class TestDeterminism:
    def test_identical_config_and_seed_twice(self, capsys):
        header, records = synthesize_dataset(ShiftConfig(n_events=8, samples_per_event=4, seed=12))
        split = temporal_split(records, 0.75)
        cfg = TrainConfig(train_epochs=1, batch_size=8, ttt_epochs=1, seed=5)
        model_cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16)
        a = run_pipeline(header, records, split, cfg, model_cfg)
        b = run_pipeline(header, records, split, cfg, model_cfg)
        assert a.mean == b.mean
        assert [f.checksums_final for f in a.folds] == [f.checksums_final for f in b.folds]
        assert [
            (p.video_id, p.p_fake) for f in a.folds for p in f.predictions
        ] == [(p.video_id, p.p_fake) for f in b.folds for p in f.predictions]
        report(capsys, "determinism: PASS")


class TestSweepHarness:
    def test_paper_protocol_shape_with_csv_and_plots(self, tmp_path, capsys):
        import json

        from fakevid.cli import main

        cfg = {
            "seed": 0,
            "dataset": {"synthetic": {"n_events": 8, "samples_per_event": 4}},
            "model": {"d_model": 8, "n_heads": 2, "d_ff": 16},
            "train": {"epochs": 1, "batch_size": 8, "lr": 1e-3, "mask_ratio": 0.15, "aux_weight": 1.0},
            "ttt": {"epochs": 1},
            "split": {"mode": "temporal", "train_fraction": 0.75},
            "output": {"dir": str(tmp_path / "out"), "plots": False},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))

        # Fix the mask ratio, sweep the auxiliary weight.
        assert main(["sweep", "--config", str(cfg_path), "--param", "alpha", "--values", "0,0.5,1"]) == 0
        fixed = json.loads((tmp_path / "out" / "sweep_alpha_fixed.json").read_text())
        assert fixed["fixed"]["mask_ratio"] == 0.15
        assert (tmp_path / "out" / "sweep_alpha.csv").exists()
        assert (tmp_path / "out" / "sweep_alpha.svg").exists()

        # Fix the auxiliary weight at one, sweep the mask ratio.
        assert main(
            ["sweep", "--config", str(cfg_path), "--param", "mask_ratio", "--values", "0.15,0.5,0.9"]
        ) == 0
        fixed = json.loads((tmp_path / "out" / "sweep_mask_ratio_fixed.json").read_text())
        assert fixed["fixed"]["aux_weight"] == 1.0
        assert (tmp_path / "out" / "sweep_mask_ratio.csv").exists()
        assert (tmp_path / "out" / "sweep_mask_ratio.svg").exists()
        report(capsys, "sweep harness: PASS (alpha and mask-ratio protocols, CSV + SVG)")
