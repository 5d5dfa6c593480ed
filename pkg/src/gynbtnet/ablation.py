"""Desk-scale pretrain-vs-scratch comparison on phantom cohorts.

Each seed gets its own cohort (40 training, 10 held-out cases). Two jobs run
per seed: masked-reconstruction pretraining followed by task finetuning, and
the same finetuning from a random initialization. Both finetunes see the same
batches, so the only difference is the starting encoder.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics
from . import network as N
from . import phantom
from . import training as T

ARMS = ("pretrained", "scratch")


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    n_train: int = 40
    n_test: int = 10
    phantom_dims: tuple = (48, 48, 48)
    phantom_spacing: float = 2.0
    patch_dims: tuple = (32, 32, 32)
    pretrain_steps: int = 200
    pretrain_batch: int = 4
    pretrain_lr: float = 1e-3
    finetune_steps: int = 400
    finetune_batch: int = 2
    finetune_lr: float = 3e-3
    steps_per_epoch: int = 25
    workers: int | None = None

    def cohort_spec(self, seed):
        return phantom.PhantomSpec(dims=self.phantom_dims, spacing=self.phantom_spacing,
                                   rng_seed=1000 + seed)

    def _epochs(self, steps):
        if steps % self.steps_per_epoch:
            raise ValueError(f"{steps} steps is not a multiple of {self.steps_per_epoch}")
        return steps // self.steps_per_epoch

    def pretrain_config(self, seed):
        return T.TrainConfig(stage="pretrain", patch_dims=self.patch_dims,
                             batch_size=self.pretrain_batch, lr_max=self.pretrain_lr,
                             epochs=self._epochs(self.pretrain_steps),
                             steps_per_epoch=self.steps_per_epoch, seed=seed)

    def finetune_config(self, seed):
        return T.TrainConfig(stage="task", patch_dims=self.patch_dims,
                             batch_size=self.finetune_batch, lr_max=self.finetune_lr,
                             epochs=self._epochs(self.finetune_steps),
                             steps_per_epoch=self.steps_per_epoch, seed=seed)


def _cohort(cfg: AblationConfig, seed):
    spec = cfg.cohort_spec(seed)
    cases = [T.prepare_case(i, *phantom.generate_case(spec, i))
             for i in range(cfg.n_train + cfg.n_test)]
    return cases[:cfg.n_train], cases[cfg.n_train:]


def held_out_dsc(net, cases, patch=(32, 32, 32)):
    """``(n_cases, n_structures)`` DSC matrix from sliding-window predictions."""
    out = np.zeros((len(cases), len(phantom.STRUCTURES)))
    for i, case in enumerate(cases):
        pred = T.segment(net, case.image, patch)
        for k in range(len(phantom.STRUCTURES)):
            out[i, k] = metrics.dsc(pred == k + 1, case.labels.labels == k + 1)
    return out


def run_arm(cfg: AblationConfig, seed: int, arm: str) -> dict:
    """Train and evaluate one arm for one seed; safe to run in a worker process."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    t0 = time.perf_counter()
    train, test = _cohort(cfg, seed)
    ft = cfg.finetune_config(seed)
    result = {"seed": seed, "arm": arm}
    if arm == "pretrained":
        pre, records = T.run_stage(cfg.pretrain_config(seed), cases=train)
        result["pretrain_loss"] = [r["loss"] for r in records]
        net = N.transfer_encoder(pre, ft.net_config(), seed)
    else:
        net = N.build(ft.net_config(), seed)
    net, records = T.run_stage(ft, cases=train, net=net)
    result["finetune_loss"] = [r["loss"] for r in records]
    result["dsc"] = held_out_dsc(net, test, cfg.patch_dims).mean(axis=0).tolist()
    result["seconds"] = time.perf_counter() - t0
    return result


def _run_job(args):
    from .kernels import reduce_page_faults

    reduce_page_faults()
    return run_arm(*args)


def schedule_makespan(durations, workers):
    """Wall time of a longest-first greedy schedule of ``durations`` on ``workers``."""
    loads = [0.0] * max(1, workers)
    for d in sorted(durations, reverse=True):
        loads[loads.index(min(loads))] += d
    return max(loads)


def summarize(cfg: AblationConfig, results) -> dict:
    by = {(r["seed"], r["arm"]): r for r in results}
    names = phantom.STRUCTURES
    sig = names.index("sigmoid")
    bladder = names.index("bladder")
    seeds = []
    for s in cfg.seeds:
        pre, scr = by[(s, "pretrained")]["dsc"], by[(s, "scratch")]["dsc"]
        seeds.append({
            "seed": s,
            "pretrained": dict(zip(names, pre)),
            "scratch": dict(zip(names, scr)),
            "sigmoid_gain": pre[sig] - scr[sig],
            "sigmoid_last": all(int(np.argmin(d)) == sig for d in (pre, scr)),
        })
    all_dsc = [r["dsc"] for r in results]
    mean = np.mean(all_dsc, axis=0)
    return {
        "config": asdict(cfg),
        "seeds": seeds,
        "min_bladder": float(min(d[bladder] for d in all_dsc)),
        "pretrain_wins": sum(1 for s in seeds if s["sigmoid_gain"] > 0),
        "sigmoid_last_in_every_model": all(s["sigmoid_last"] for s in seeds),
        "mean_dsc": dict(zip(names, mean.tolist())),
        "sigmoid_last_in_mean": int(np.argmin(mean)) == sig,
        "job_seconds": [r["seconds"] for r in results],
    }


def run(cfg: AblationConfig | None = None, workers=None) -> dict:
    """Run every (seed, arm) job in a process pool and summarize."""
    cfg = cfg or AblationConfig()
    workers = workers or cfg.workers or os.cpu_count() or 1
    # pretrained arms are the long ones; submit them first
    jobs = [(cfg, s, a) for a in ARMS for s in cfg.seeds]
    t0 = time.perf_counter()
    if workers == 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    summary = summarize(cfg, results)
    summary["workers"] = workers
    summary["wall_seconds"] = time.perf_counter() - t0
    summary["makespan_8_workers"] = schedule_makespan(summary["job_seconds"], 8)
    return summary


def main(argv=None):
    import argparse
    import json

    p = argparse.ArgumentParser(prog="python -m gynbtnet.ablation",
                                description="pretrain-vs-scratch comparison on phantom cohorts")
    p.add_argument("--workers", type=int, help="process pool size (default: CPU count)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", help="write the summary JSON here")
    args = p.parse_args(argv)
    summary = run(AblationConfig(seeds=tuple(args.seeds)), workers=args.workers)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
