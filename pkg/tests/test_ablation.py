import numpy as np
import pytest

from gynbtnet import ablation as A


def test_makespan_greedy():
    assert A.schedule_makespan([3, 3, 2, 2, 2], 2) == 7
    assert A.schedule_makespan([5, 1, 1], 8) == 5
    assert A.schedule_makespan([1.0] * 10, 1) == 10.0


def test_steps_must_fill_epochs():
    with pytest.raises(ValueError):
        A.AblationConfig(finetune_steps=30).finetune_config(0)
    cfg = A.AblationConfig(pretrain_steps=50, finetune_steps=75)
    assert cfg.pretrain_config(3).epochs == 2 and cfg.pretrain_config(3).stage == "pretrain"
    assert cfg.finetune_config(3).epochs == 3 and cfg.finetune_config(3).seed == 3


def _fake(seed, arm, sig, bladder=0.9):
    return {"seed": seed, "arm": arm, "dsc": [bladder, 0.8, 0.6, 0.7, sig], "seconds": 10.0}


def test_summary_counts_strict_wins():
    cfg = A.AblationConfig(seeds=(0, 1, 2))
    results = [_fake(0, "pretrained", 0.5), _fake(0, "scratch", 0.4),
               _fake(1, "pretrained", 0.3), _fake(1, "scratch", 0.3),
               _fake(2, "pretrained", 0.2, bladder=0.8), _fake(2, "scratch", 0.25)]
    s = A.summarize(cfg, results)
    assert s["pretrain_wins"] == 1
    assert s["min_bladder"] == 0.8
    assert s["sigmoid_last_in_every_model"]
    assert s["seeds"][0]["sigmoid_gain"] == pytest.approx(0.1)


def test_summary_flags_misordered_structures():
    cfg = A.AblationConfig(seeds=(0,))
    s = A.summarize(cfg, [_fake(0, "pretrained", 0.65), _fake(0, "scratch", 0.1)])
    assert not s["sigmoid_last_in_every_model"]


def test_tiny_arms_run_and_are_deterministic():
    cfg = A.AblationConfig(seeds=(0,), n_train=2, n_test=1, phantom_dims=(32, 32, 32),
                           phantom_spacing=3.0, patch_dims=(16, 16, 16), pretrain_steps=2,
                           pretrain_batch=2, finetune_steps=2, steps_per_epoch=1)
    a = A.run_arm(cfg, 0, "pretrained")
    b = A.run_arm(cfg, 0, "pretrained")
    c = A.run_arm(cfg, 0, "scratch")
    assert a["dsc"] == b["dsc"] and a["finetune_loss"] == b["finetune_loss"]
    assert len(a["pretrain_loss"]) == 2 and "pretrain_loss" not in c
    assert a["finetune_loss"] != c["finetune_loss"]
    assert all(0.0 <= d <= 1.0 for d in a["dsc"]) and len(a["dsc"]) == 5
    with pytest.raises(ValueError):
        A.run_arm(cfg, 0, "neither")


def test_run_serial_summary():
    cfg = A.AblationConfig(seeds=(0, 1), n_train=2, n_test=1, phantom_dims=(32, 32, 32),
                           phantom_spacing=3.0, patch_dims=(16, 16, 16), pretrain_steps=1,
                           pretrain_batch=2, finetune_steps=1, steps_per_epoch=1)
    s = A.run(cfg, workers=1)
    assert [x["seed"] for x in s["seeds"]] == [0, 1]
    assert len(s["job_seconds"]) == 4 and s["workers"] == 1
    assert s["makespan_8_workers"] == pytest.approx(max(s["job_seconds"]))
    assert np.isfinite(list(s["mean_dsc"].values())).all()
