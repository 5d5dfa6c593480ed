"""End-to-end acceptance checks, one test per criterion.

The terminal summary prints a PASS/FAIL line for each (see conftest.py).
"""

import json
import os
import time

import numpy as np
import pytest

from gynbtnet import ablation, bench, cli
from gynbtnet import metrics as M
from gynbtnet import network as N
from gynbtnet import sparse as S
from gynbtnet import stats
from gynbtnet import training as T
from gynbtnet.verify import gradient_suite
from gynbtnet.volume import LabelMap
from oracles import count_oracle, directed_oracle, random_pair, surface_oracle

KERNELS = {
    "conv3d k1 s1", "conv3d k1 s2", "conv3d k3 s1", "conv3d k3 s2", "instance_norm",
    "leaky_relu", "upsample_concat", "sparse_conv3d s1", "sparse_conv3d s2",
    "sparse_batch_norm", "l2_masked_loss", "dice_ce_loss",
}


@pytest.mark.criterion(1, "finite-difference gradients of every kernel")
def test_gradient_correctness(note):
    t0 = time.perf_counter()
    reports = gradient_suite(seed=0, h=1e-3, tol=1e-4, n_coords=50)
    elapsed = time.perf_counter() - t0
    for r in reports:
        note(f"{r.name}: max rel err {r.max_rel_err:.2e} over {r.n_coords} coords")
    note(f"gradient suite {elapsed:.1f} s on {os.cpu_count()} core(s)")
    assert {r.name for r in reports} == KERNELS
    assert all(r.n_coords >= 50 for r in reports)
    assert all(r.max_rel_err < 1e-4 for r in reports)
    assert elapsed < 120


def _random_toy(seed):
    rng = np.random.default_rng((seed, 77))
    cfg = N.NetworkConfig.toy(blocks_per_stage=int(rng.integers(1, 3))).for_pretraining()
    net = N.build(cfg, seed)
    for name, p in net.params.items():
        p += 0.1 * rng.standard_normal(p.shape)
    return net, rng


@pytest.mark.criterion(2, "sparse equals dense when all active; masked independence")
def test_sparse_dense_equivalence(note):
    worst = 0.0
    for seed in range(20):
        net, rng = _random_toy(seed)
        x = rng.standard_normal((2, 1, 16, 16, 16))
        dense = N.encode(net, x)
        full = N.encode(net, x, mask=np.ones((2, 16, 16, 16), bool))
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(dense, full)))

        mask = S.generate_patch_mask((16, 16, 16), S.MaskSpec((4, 4, 4), 0.6, seed))
        x2 = x.copy()
        for b in range(2):
            x2[b, 0][~mask] += 100 * rng.standard_normal(int((~mask).sum()))
        pyr = S.build_pyramid(mask, N.mask_levels(net.config))
        ya, yb = N.encode(net, x, mask), N.encode(net, x2, mask)
        for s, (a, b) in enumerate(zip(ya, yb)):
            m = pyr[min(s, len(pyr) - 1)]
            assert np.array_equal(a[:, :, m], b[:, :, m]), f"seed {seed} stage {s}"
    note(f"max |sparse - dense| over 20 networks: {worst:.2e}")
    assert worst < 1e-10


@pytest.mark.criterion(3, "DSC/HD95/ASD match brute force on 100 pairs; invariants exact")
def test_metric_oracle_equivalence(note):
    rng = np.random.default_rng(2024)
    spacing = (1.0, 1.5, 2.0)
    worst = 0.0
    for _ in range(100):
        a, b = random_pair(rng, 12)
        total = int(a.sum() + b.sum())
        expected = 2 * int(np.sum(a & b)) / total if total else 1.0
        assert M.dsc(a, b) == expected
        sa, sb = M.extract_surface(a, True, spacing), M.extract_surface(b, True, spacing)
        assert np.array_equal(sa, surface_oracle(a, spacing))
        assert np.array_equal(sb, surface_oracle(b, spacing))
        if not (len(sa) and len(sb)):
            continue
        dab, dba = directed_oracle(sa, sb), directed_oracle(sb, sa)
        hd = max(np.percentile(dab, 95), np.percentile(dba, 95))
        mean = (dab.sum() + dba.sum()) / (len(dab) + len(dba))
        worst = max(worst, abs(M.hd95(sa, sb) - hd), abs(M.asd(sa, sb) - mean))
    note(f"worst surface-metric deviation: {worst:.2e}")
    assert worst < 1e-9

    a, b = random_pair(rng, 12)
    pa, pb = a.astype(np.uint8), b.astype(np.uint8)
    base = M.evaluate_case(LabelMap(pa, 6, (1.0, 1.5, 0.5)), LabelMap(pb, 6, (1.0, 1.5, 0.5)))
    big_a, big_b = np.zeros((20, 20, 20), np.uint8), np.zeros((20, 20, 20), np.uint8)
    big_a[4:16, 1:13, 7:19], big_b[4:16, 1:13, 7:19] = pa, pb
    moved = M.evaluate_case(LabelMap(big_a, 6, (1.0, 1.5, 0.5)), LabelMap(big_b, 6, (1.0, 1.5, 0.5)))
    scaled = M.evaluate_case(LabelMap(pa, 6, (2.0, 3.0, 1.0)), LabelMap(pb, 6, (2.0, 3.0, 1.0)))
    r0, r1, r2 = base.structures[0], moved.structures[0], scaled.structures[0]
    assert (r0.dsc, r0.hd95_mm, r0.asd_mm) == (r1.dsc, r1.hd95_mm, r1.asd_mm)
    assert r2.dsc == r0.dsc and r2.hd95_mm == 2 * r0.hd95_mm and r2.asd_mm == 2 * r0.asd_mm


@pytest.mark.criterion(4, "parameter budget of the full-size network; toy count exact")
def test_parameter_budget(note):
    full = N.count_parameters(N.build(N.NetworkConfig.full(), allocate=False))
    toy_cfg = N.NetworkConfig.toy()
    toy = N.count_parameters(N.build(toy_cfg, allocate=False))
    note(f"full-size parameters {full:,}; toy {toy:,}")
    assert 396e6 <= full <= 484e6
    assert toy == count_oracle(toy_cfg.stage_channels(), 2, 2)


@pytest.mark.criterion(5, "cosine schedule endpoints/midpoint; AdamW hand example")
def test_schedule_and_optimizer(note):
    cfg = T.TrainConfig.full("pretrain")
    assert T.cosine_lr(0, 1000, cfg.lr_max, cfg.lr_min) == 1e-4
    assert T.cosine_lr(1000, 1000, cfg.lr_max, cfg.lr_min) == 0.0
    assert abs(T.cosine_lr(500, 1000, cfg.lr_max, cfg.lr_min) - 5e-5) < 1e-18
    params = {"t": np.array([0.0])}
    T.adamw_step(params, {"t": np.array([1.0])}, T.AdamWState(), 0.1, (0.9, 0.999), 1e-8, 0.0)
    note(f"theta after one step: {params['t'][0]!r}")
    assert abs(params["t"][0] + 0.1) < 1e-6


@pytest.mark.criterion(6, "ANOVA, Tukey, permutation test behaviour")
def test_statistics(note):
    from scipy import stats as sps

    r = stats.one_way_anova([[1, 2, 3]] * 3)
    assert r.statistic == 0.0 and r.p_value == 1.0
    r = stats.one_way_anova([[0, 0], [1, 1]])
    assert r.exact_separation and r.p_value == 0.0 and np.isinf(r.statistic)

    rng = np.random.default_rng(6)
    worst_t = 0.0
    for _ in range(10):
        a, b = rng.normal(0, 1, 8), rng.normal(0.8, 1, 8)
        worst_t = max(worst_t, abs(stats.tukey_hsd([a, b]).pairs[0]["p_value"] - sps.ttest_ind(a, b).pvalue))
    assert worst_t < 2e-3

    assert stats.paired_permutation_test([2, 3, 4], [1, 2, 3]).p_value == 0.25

    worst_p = 0.0
    for i in range(20):
        a = rng.standard_normal(12)
        b = a - rng.normal(0.4, 1.0, 12)
        ex = stats.paired_permutation_test(a, b)
        sm = stats.paired_permutation_test(a, b, n_perm=20_000, seed=i, method="sampled")
        assert ex.exhaustive and not sm.exhaustive
        worst_p = max(worst_p, abs(ex.p_value - sm.p_value))
    note(f"tukey vs t worst {worst_t:.2e}; sampled vs exhaustive worst {worst_p:.4f}")
    assert worst_p < 0.02


@pytest.mark.slow
@pytest.mark.criterion(7, "desk-scale pretrain vs scratch on phantoms, 5 seeds")
def test_desk_scale_ablation(note):
    summary = ablation.run(ablation.AblationConfig())
    for s in summary["seeds"]:
        pre = ", ".join(f"{k} {v:.3f}" for k, v in s["pretrained"].items())
        scr = ", ".join(f"{k} {v:.3f}" for k, v in s["scratch"].items())
        note(f"seed {s['seed']} pretrained [{pre}]")
        note(f"seed {s['seed']} scratch    [{scr}]  sigmoid gain {s['sigmoid_gain']:+.3f}")
    wall = summary["wall_seconds"]
    projected = wall if summary["workers"] >= 8 else summary["makespan_8_workers"]
    note(json.dumps({k: summary[k] for k in ("min_bladder", "pretrain_wins",
                                               "sigmoid_last_in_every_model", "mean_dsc")}))
    note(f"wall {wall / 60:.1f} min on {summary['workers']} worker(s); "
          f"8-worker schedule of measured job times {projected / 60:.1f} min")
    assert summary["min_bladder"] >= 0.85
    assert summary["pretrain_wins"] >= 4
    assert summary["sigmoid_last_in_every_model"]
    assert projected < 45 * 60


@pytest.mark.criterion(8, "sparse encoder MACs track the active fraction")
def test_compute_proportionality(note):
    for ratio in (0.4, 0.6, 0.8):
        row = bench.encoder_cost(ratio, dims=(32, 32, 32))
        note(f"mask ratio {ratio}: active {row['active_fraction']:.3f} MAC ratio {row['mac_ratio']:.4f}")
        assert row["mac_ratio"] <= row["active_fraction"] + 0.15


@pytest.mark.criterion(9, "deterministic CLI runs give byte-identical artifacts")
def test_reproducibility(tmp_path, capsys, note):
    small = ["--base-channels", "4", "--patch", "16", "--epochs", "1", "--steps-per-epoch", "2",
             "--batch-size", "2", "--deterministic"]

    def run(*argv):
        code = cli.main([str(a) for a in argv])
        capsys.readouterr()
        assert code == 0, argv

    outputs = []
    for run_id in ("a", "b"):
        d = tmp_path / run_id
        run("phantom", "--out", d / "coh", "--count", "2", "--dims", "32", "--spacing", "3",
            "--seed", "3", "--deterministic")
        c = d / "coh" / "cohort.json"
        run("pretrain", "--cohort", c, "--out", d / "p.ckpt", "--seed", "3", *small)
        run("finetune", "--cohort", c, "--init", d / "p.ckpt", "--out", d / "f.ckpt", "--seed", "3", *small)
        run("finetune", "--cohort", c, "--init", "none", "--out", d / "s.ckpt", "--seed", "3", *small)
        run("segment", "--ckpt", d / "f.ckpt", "--in", c, "--out", d / "pred", "--patch", "16",
            "--deterministic")
        run("evaluate", "--pred", d / "pred", "--gt", c, "--out", d / "ev", "--deterministic")
        files = sorted(p for p in d.rglob("*") if p.is_file())
        outputs.append({p.relative_to(d): p.read_bytes() for p in files})
    assert outputs[0].keys() == outputs[1].keys()
    assert any(k.suffix == ".ckpt" for k in outputs[0])
    assert any("ev" in k.parts for k in outputs[0])
    differing = [k for k in outputs[0] if outputs[0][k] != outputs[1][k]]
    assert not differing, differing
