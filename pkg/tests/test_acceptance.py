"""Acceptance gate: one test per criterion, each printing an ACCEPT line.

Run with `pytest tests/test_acceptance.py -v -s`. The slowest criteria
(overfit smoke, coupling ablation) dominate the runtime; the whole module
stays within its stated budgets on one CPU core.
"""

import io
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from dgtn import model as M
from dgtn import protein_io as pio
from dgtn import train as T
from dgtn import verify as V
from dgtn.diffusion import DiffusionConfig


def report(name: str, passed: bool, detail: str = ""):
    print(f"\nACCEPT\t{name}\t{'pass' if passed else 'fail'}\t{detail}")
    assert passed, f"{name}: {detail}"


class TestAcceptance:
    def test_01_fixed_point(self):
        t0 = time.perf_counter()
        results = V.suite_fixed_point(trials=50, seed=0, steps=60)
        elapsed = time.perf_counter() - t0
        terminal, envelope = results
        ok = terminal.passed and envelope.passed and elapsed < 5.0
        report(
            "theorem1_fixed_point", ok,
            f"terminal={terminal.observed:.3e} (<1e-8) envelope_ratio={envelope.observed:.3f} "
            f"(<=1) time={elapsed:.2f}s (<5s)",
        )

    def test_02_rate(self):
        results = V.suite_rate(trials=50, seed=0)
        (rate,) = results
        report(
            "rate_slope_within_5pct", rate.passed,
            f"{rate.observed:.0f}/50 instances within 5% (need >=45); {rate.detail}",
        )

    def test_03_lipschitz(self):
        results = V.suite_lipschitz(seed=0, pairs_per_beta=50)
        ok = all(r.passed for r in results)
        detail = "; ".join(f"beta={r.name.split('_')[-1]} ratio={r.observed:.4f}<={r.bound:.4f}"
                           for r in results)
        report("lipschitz_bound_zero_violations", ok, detail + " (100 pairs)")

    def test_04_gradient_integrity(self):
        t0 = time.perf_counter()
        results = V.suite_gradcheck(seed=0)
        elapsed = time.perf_counter() - t0
        worst = max(results, key=lambda r: r.observed)
        ok = all(r.passed for r in results) and elapsed < 60.0
        report(
            "gradient_integrity", ok,
            f"{len(results)} parameter groups, worst rel err {worst.observed:.2e} "
            f"({worst.name}) < 1e-5, time={elapsed:.1f}s (<60s)",
        )

    def test_05_no_diffusion_equivalence(self):
        desk = M.ModelConfig(d=8, heads=2, d_ffn=32, d_a=4, d_p=4, d_e=6, rbf_k=4,
                             angle_k=3, dropout=0.0, diffusion=DiffusionConfig(steps=3))
        forced = replace(desk, diffusion=replace(desk.diffusion, force_beta=0.0, force_gamma=0.0))
        bypass = replace(desk, diffusion=replace(desk.diffusion, enabled=False))
        spec = pio.SyntheticSpec(seed=13, n_samples=20, l_range=(8, 20), muts_per_structure=2)
        structures, records = pio.synthesize_dataset(spec)
        params = M.init_params(desk)
        exact = 0
        for r in records:
            st = structures[r.structure_id]
            a, _ = M.forward(st, st.seq, r, params, forced)
            b, _ = M.forward(st, st.seq, r, params, bypass)
            exact += a == b
        report("no_diffusion_bit_equivalence", exact == 20, f"{exact}/20 bit-identical")

    def test_06_overfit_smoke(self):
        spec = pio.SyntheticSpec(seed=7, n_samples=32, l_range=(10, 14),
                                 coupling_weight=1.0, noise_sd=0.0)
        structures, records = pio.synthesize_dataset(spec)
        cfg = M.ModelConfig(dropout=0.0)
        tc = T.TrainConfig(lr=3e-3, weight_decay=0.0, batch_size=32, max_epochs=2000,
                           patience=2000, seed=0, eval_every=25)
        t0 = time.perf_counter()
        res = T.train(records, structures, cfg, tc)
        elapsed = time.perf_counter() - t0
        steps_per_epoch = 1  # 27 train records, batch 32
        crossing = next((e.epoch for e in res.log if e.train_mse < 0.01), None)
        ok = crossing is not None and crossing * steps_per_epoch <= 2000 and elapsed < 300
        report(
            "overfit_smoke", ok,
            f"train MSE < 0.01 at step {crossing} (<=2000), time={elapsed:.0f}s (<300s)",
        )

    def test_07_coupling_ablation(self):
        # Matched arms share init, batch order and dropout masks; each arm
        # returns its best-validation checkpoint and is scored on held-out MSE.
        spec = pio.SyntheticSpec(seed=11, n_samples=512, l_range=(24, 24),
                                 coupling_weight=1.0, noise_sd=0.05)
        cfg = M.ModelConfig()
        tc = T.TrainConfig(lr=1e-3, weight_decay=1e-2, batch_size=32, max_epochs=220,
                           patience=220, seed=0, eval_every=5)
        t0 = time.perf_counter()
        rep = T.ablation_experiment(spec, cfg, tc, n_seeds=5)
        elapsed = time.perf_counter() - t0
        rows = "; ".join(f"s{r.seed}: {r.mse_on:.3f} vs {r.mse_off:.3f}" for r in rep.rows)
        ok = rep.wins >= 4 and elapsed < 1800
        report(
            "coupling_ablation_direction", ok,
            f"diffusion wins {rep.wins}/5 (need >=4); {rows}; time={elapsed:.0f}s (<1800s)",
        )

    def test_08_checkpoint_round_trip(self, tmp_path):
        cfg = M.ModelConfig(d=16, d_ffn=64, dropout=0.0)
        spec = pio.SyntheticSpec(seed=17, n_samples=20, l_range=(8, 16), muts_per_structure=4)
        structures, records = pio.synthesize_dataset(spec)
        params = M.init_params(cfg)
        path = str(tmp_path / "model.dgt")
        M.save_checkpoint(path, params, cfg)
        loaded, cfg2 = M.load_checkpoint(path)
        before = M.predict_batch(records, structures, params, cfg)
        after = M.predict_batch(records, structures, loaded, cfg2)
        ok = bool(np.all(before == after))
        report("checkpoint_round_trip", ok, "20/20 predictions bit-identical")

    def test_09_training_determinism(self, tmp_path):
        spec = pio.SyntheticSpec(seed=19, n_samples=24, l_range=(10, 12), muts_per_structure=8)
        structures, records = pio.synthesize_dataset(spec)
        cfg = M.ModelConfig(d=16, d_ffn=64)
        tc = T.TrainConfig(lr=1e-3, weight_decay=1e-2, batch_size=8, max_epochs=4,
                           patience=4, seed=23)
        logs, blobs = [], []
        for run in range(2):
            buf = io.StringIO()
            res = T.train(records, structures, cfg, tc, stream=buf)
            path = str(tmp_path / f"run{run}.dgt")
            M.save_checkpoint(path, res.params, cfg)
            logs.append(buf.getvalue())
            blobs.append(open(path, "rb").read())
        ok = logs[0] == logs[1] and blobs[0] == blobs[1]
        report("training_determinism", ok, "epoch logs and checkpoint bytes identical")

    def test_10_bench_shape(self):
        r = subprocess.run(
            [sys.executable, "-m", "dgtn", "bench", "--len", "64", "--reps", "11", "--seed", "0"],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        rows = [line.split("\t") for line in r.stdout.strip().splitlines()]
        steps = [int(row[0]) for row in rows]
        times = [float(row[1]) for row in rows]
        monotone = all(a < b for a, b in zip(times, times[1:]))
        ok = steps == [1, 3, 5, 7, 10] and monotone
        report(
            "bench_monotone_in_steps", ok,
            "ms per forward: " + ", ".join(f"T={s}: {t:g}" for s, t in zip(steps, times)),
        )
