"""``gynbtnet`` command-line tool.

Exit codes: 0 success, 1 usage error (bad flags, missing files, malformed
inputs), 2 runtime failure, 3 a verification check failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _dims(text):
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected D or D,H,W, got {text!r}")
    return tuple(parts)


# Defaults per subcommand; a --config JSON may override any of them and
# explicit flags override the config.
COMMON = {"seed": 0, "deterministic": False, "threads": 1}
TRAIN = {
    "cohort": None, "out": None, "log": None, "epochs": None, "steps_per_epoch": None,
    "batch_size": None, "lr": None, "patch": (32, 32, 32), "network": "toy",
    "base_channels": None, "num_stages": None, "grad_check_mode": False,
}
DEFAULTS = {
    "phantom": {"out": None, "count": 50, "start": 0, "dims": (64, 64, 64), "spacing": 1.5,
                "noise_sd": 8.0, "variant": "pelvic"},
    "pretrain": {**TRAIN, "mask_ratio": 0.6, "mask_patch": (8, 8, 8),
                 "mask_enforcement": "per_stage", "full_volume_l2": False},
    "finetune": {**TRAIN, "stage": "task", "init": None},
    "segment": {"ckpt": None, "input": None, "out": None, "patch": (32, 32, 32), "overlap": 0.5},
    "evaluate": {"pred": None, "gt": None, "out": None},
    "compare": {"reports": None, "test": "anova", "out": None, "n_perm": 10000,
                "alternative": "two_sided"},
    "gradcheck": {"h": 1e-3, "tol": 1e-4, "coords": 50},
    "bench": {"mask_ratio": [0.4, 0.6, 0.8], "dims": (32, 32, 32), "repeat": 5, "out": None,
              "backends": True},
}


def _add_common(p):
    p.add_argument("--config", help="JSON file of option defaults (flags override it)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single worker, bit-reproducible outputs")
    p.add_argument("--threads", type=int, help="worker threads for loading/evaluation (default 1)")


def _add_train(p):
    p.add_argument("--cohort", help="cohort.json of the training phantoms")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate of the cosine schedule")
    p.add_argument("--patch", type=_dims, help="training patch dims, D or D,H,W (default 32)")
    p.add_argument("--network", choices=("toy", "full"), help="network preset (default toy)")
    p.add_argument("--base-channels", type=int)
    p.add_argument("--num-stages", type=int)
    p.add_argument("--grad-check-mode", action="store_true", default=None,
                   help="spot-check network gradients on the first batch before training")


def build_parser():
    top = _Parser(prog="gynbtnet", description="Masked-pretraining segmentation toolkit on phantom CT.")
    sub = top.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    _add_common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, help="number of cases (default 50)")
    p.add_argument("--start", type=int, help="first case index (default 0)")
    p.add_argument("--dims", type=_dims, help="volume dims (default 64)")
    p.add_argument("--spacing", type=float, help="isotropic spacing in mm (default 1.5)")
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--variant", choices=("pelvic", "multiorgan"))

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    _add_common(p)
    _add_train(p)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--mask-patch", type=_dims, help="masking patch dims (default 8)")
    p.add_argument("--mask-enforcement", choices=("per_stage", "bottleneck_only"))
    p.add_argument("--full-volume-l2", action="store_true", default=None)

    p = sub.add_parser("finetune", help="supervised or task-stage segmentation training")
    _add_common(p)
    _add_train(p)
    p.add_argument("--stage", choices=("supervised", "task"))
    p.add_argument("--init", help="checkpoint to take the encoder from, or 'none'")

    p = sub.add_parser("segment", help="sliding-window inference")
    _add_common(p)
    p.add_argument("--ckpt", help="segmentation checkpoint")
    p.add_argument("--in", dest="input", help="image .gbtv or cohort.json")
    p.add_argument("--out", help="label .gbtv (single image) or directory (cohort)")
    p.add_argument("--patch", type=_dims)
    p.add_argument("--overlap", type=float)

    p = sub.add_parser("evaluate", help="DSC / HD95 / ASD reports")
    _add_common(p)
    p.add_argument("--pred", help="predicted label .gbtv or directory")
    p.add_argument("--gt", help="ground-truth label .gbtv, directory or cohort.json")
    p.add_argument("--out", help="report directory")

    p = sub.add_parser("compare", help="significance tests between evaluated models")
    _add_common(p)
    p.add_argument("--reports", nargs="+", help="evaluate output dirs; the first is the reference")
    p.add_argument("--test", choices=("anova", "tukey", "permutation"))
    p.add_argument("--out", help="output directory for comparison.json/.csv")
    p.add_argument("--n-perm", type=int)
    p.add_argument("--alternative", choices=("two_sided", "greater", "less"))

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel")
    _add_common(p)
    p.add_argument("--h", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--coords", type=int)

    p = sub.add_parser("bench", help="sparse vs dense encoder cost, compiled vs numpy kernels")
    _add_common(p)
    p.add_argument("--mask-ratio", type=float, nargs="+")
    p.add_argument("--dims", type=_dims)
    p.add_argument("--repeat", type=int)
    p.add_argument("--out", help="write the report as JSON here")
    p.add_argument("--no-backends", dest="backends", action="store_false", default=None)
    return top


def resolve(args) -> dict:
    """Defaults <- config file <- explicit flags."""
    defaults = {**COMMON, **DEFAULTS[args.command]}
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        value = flag if flag is not None else cfg.get(key, default)
        out[key] = list(value) if isinstance(value, tuple) else value
    if out["deterministic"]:
        out["threads"] = 1
    return out


def _require(opts, *keys):
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- handlers ------------------------------------------------------------------


def cmd_phantom(o):
    from . import phantom

    _require(o, "out")
    spec = phantom.PhantomSpec(dims=tuple(o["dims"]), spacing=o["spacing"], noise_sd=o["noise_sd"],
                               rng_seed=o["seed"], variant=o["variant"])
    path = phantom.write_cohort(spec, range(o["start"], o["start"] + o["count"]), o["out"])
    print(f"wrote {o['count']} cases to {path}")
    return EXIT_OK


def _train_config(o, stage):
    from . import network as N
    from . import training as T

    _require(o, "cohort", "out")
    _existing(o["cohort"], "cohort manifest")
    net = N.NetworkConfig.full() if o["network"] == "full" else N.NetworkConfig.toy()
    overrides = {k: o[k] for k in ("base_channels", "num_stages") if o[k] is not None}
    if stage == "pretrain":
        overrides["mask_enforcement"] = o["mask_enforcement"]
    net = N.NetworkConfig.from_dict({**net.to_dict(), **overrides})
    kw = dict(patch_dims=tuple(o["patch"]), seed=o["seed"], cohort=o["cohort"], out=o["out"],
              log=o["log"], network=net.to_dict(), grad_check_mode=bool(o["grad_check_mode"]),
              prefetch=0 if o["deterministic"] or o["threads"] <= 1 else 2)
    for key, field in (("epochs", "epochs"), ("steps_per_epoch", "steps_per_epoch"),
                       ("batch_size", "batch_size"), ("lr", "lr_max")):
        if o[key] is not None:
            kw[field] = o[key]
    if stage == "pretrain":
        kw.update(mask_ratio=o["mask_ratio"], mask_patch_dims=tuple(o["mask_patch"]),
                  full_volume_l2=bool(o["full_volume_l2"]))
    else:
        init = o["init"]
        kw["init"] = None if init in (None, "none") else str(_existing(init, "init checkpoint"))
    try:
        return T.TrainConfig.desk(stage, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train(o, stage):
    from . import training as T

    cfg = _train_config(o, stage)
    print("train config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    _, records = T.run_stage(cfg, log_stream=sys.stdout)
    print(f"wrote checkpoint {cfg.out}")
    return EXIT_OK


def cmd_pretrain(o):
    return _train(o, "pretrain")


def cmd_finetune(o):
    return _train(o, o["stage"])


def _load_segmenter(path):
    from . import network as N

    ck = N.load_checkpoint(_existing(path, "checkpoint"), expect_stage=("supervised", "task"))
    return ck.net


def cmd_segment(o):
    from . import phantom, training as T, volume

    _require(o, "ckpt", "input", "out")
    net = _load_segmenter(o["ckpt"])
    src = _existing(o["input"], "input")
    patch = tuple(o["patch"])

    def run_one(grid):
        norm = volume.znormalize(grid)
        pred = T.segment(net, norm.data, patch, o["overlap"])
        return volume.LabelMap(pred, net.config.num_classes, grid.spacing, grid.origin)

    if src.suffix == ".json":
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        for idx, grid, _ in phantom.read_cohort(src):
            volume.save(run_one(grid), out / f"case_{idx}_pred.gbtv")
        print(f"wrote predictions to {out}")
    else:
        grid = volume.load(src)
        if not isinstance(grid, volume.VoxelGrid):
            raise UsageError(f"{src} holds labels, not an image")
        volume.save(run_one(grid), o["out"])
        print(f"wrote {o['out']}")
    return EXIT_OK


def _label_files(path):
    """Map case id -> label file for a .gbtv file, a cohort manifest or a directory."""
    import re

    p = _existing(path, "labels")
    if p.is_file() and p.suffix == ".gbtv":
        return {p.stem: p}
    if p.is_file() and p.suffix == ".json":
        manifest = json.loads(p.read_text())
        return {f"case_{c['index']}": p.parent / c["labels"] for c in manifest["cases"]}
    found = {}
    for f in sorted(p.glob("case_*_*.gbtv")):
        m = re.fullmatch(r"(case_\d+)_(lbl|pred)", f.stem)
        if m and (m.group(2) == "pred" or m.group(1) not in found):
            found[m.group(1)] = f
    return found


def cmd_evaluate(o):
    from concurrent.futures import ThreadPoolExecutor

    from . import metrics, volume

    _require(o, "pred", "gt", "out")
    gt = _label_files(o["gt"])
    pred = _label_files(o["pred"])
    if not gt:
        raise UsageError(f"no ground-truth label maps under {o['gt']}")
    if len(gt) == 1 and len(pred) == 1:
        pairs = [(next(iter(gt)), next(iter(pred.values())), next(iter(gt.values())))]
    else:
        missing = sorted(set(gt) - set(pred))
        if missing:
            raise UsageError(f"no prediction for {missing[:5]}")
        pairs = [(cid, pred[cid], gt[cid]) for cid in sorted(gt, key=_case_key)]

    def one(item):
        cid, pf, gf = item
        p, g = volume.load(pf), volume.load(gf)
        if not (isinstance(p, volume.LabelMap) and isinstance(g, volume.LabelMap)):
            raise UsageError(f"{cid}: both inputs must be label maps")
        return metrics.evaluate_case(p, g, cid)

    with ThreadPoolExecutor(max_workers=max(1, o["threads"])) as pool:
        reports = list(pool.map(one, pairs))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (out / f"{r.case_id}_metrics.json").write_text(r.to_json())
    (out / "report.json").write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n")
    rows = metrics.aggregate(reports)
    metrics.write_aggregate_csv(rows, out / "aggregate.csv")
    for row in rows:
        if row["metric"] == "dsc":
            print(f"{row['structure']:<10} dsc {row['mean']:.4f} ± {row['sd']:.4f} (n={row['n']})")
    return EXIT_OK


def _case_key(cid):
    digits = "".join(ch for ch in cid if ch.isdigit())
    return (int(digits) if digits else -1, cid)


def _load_reports(path):
    from . import metrics

    p = _existing(path, "report")
    f = p / "report.json" if p.is_dir() else p
    if not f.is_file():
        raise UsageError(f"no report.json in {p}")
    try:
        data = json.loads(f.read_text())
        items = data if isinstance(data, list) else [data]
        return {r.case_id: r for r in (metrics.MetricsReport.from_dict(d) for d in items)}
    except (json.JSONDecodeError, ValueError) as e:
        raise UsageError(f"malformed report {f}: {e}") from None


def cmd_compare(o):
    import csv

    import numpy as np

    from . import metrics, stats

    if not o["reports"] or len(o["reports"]) < 2:
        raise UsageError("compare needs at least two --reports")
    models = [(str(Path(r).name or r), _load_reports(r)) for r in o["reports"]]
    names = [m for m, _ in models]
    if len(set(names)) != len(names):
        names = [f"{i}:{m}" for i, m in enumerate(names)]
    ref_cases = models[0][1]
    structures = [s.name for s in next(iter(ref_cases.values())).structures]
    rows = []
    for struct in structures:
        for metric in metrics.METRICS:
            series = []
            for _, reps in models:
                series.append({cid: r.value(struct, metric) for cid, r in reps.items()})
            groups = [stats.SampleGroup(n, [v for v in s.values() if v is not None])
                      for n, s in zip(names, series) if any(v is not None for v in s.values())]
            means = {n: float(np.mean(g.values)) for n, g in zip(names, groups)}
            base = {"structure": struct, "metric": metric}
            try:
                if o["test"] == "anova":
                    r = stats.one_way_anova(groups)
                    rows.append({**base, "comparison": "all", "statistic": r.statistic, "p_value": r.p_value,
                                 "stars": stats.stars(r.p_value), "means": means})
                elif o["test"] == "tukey":
                    r = stats.tukey_hsd(groups)
                    for pr in r.pairs:
                        rows.append({**base, "comparison": f"{pr['a']} vs {pr['b']}", "statistic": pr["q"],
                                     "p_value": pr["p_value"], "stars": stats.stars(pr["p_value"]),
                                     "means": means})
                else:
                    ref = series[0]
                    for n, s in zip(names[1:], series[1:]):
                        common = sorted(c for c in ref if c in s and ref[c] is not None and s[c] is not None)
                        if not common:
                            continue
                        r = stats.paired_permutation_test([ref[c] for c in common], [s[c] for c in common],
                                                          n_perm=o["n_perm"], seed=o["seed"],
                                                          alternative=o["alternative"])
                        rows.append({**base, "comparison": f"{names[0]} vs {n}", "statistic": r.statistic,
                                     "p_value": r.p_value, "stars": stats.stars(r.p_value), "means": means,
                                     "n_perm": r.n_perm, "exhaustive": r.exhaustive})
            except stats.StatsError as e:
                rows.append({**base, "comparison": "n/a", "statistic": None, "p_value": None, "stars": "",
                             "means": means, "note": str(e)})
    payload = {"test": o["test"], "reference": names[0], "models": names, "rows": rows}
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if o["out"]:
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(text, encoding="utf-8")
        with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["structure", "metric", "comparison", "statistic", "p_value", "stars"])
            for r in rows:
                w.writerow([r["structure"], r["metric"], r["comparison"], r["statistic"], r["p_value"], r["stars"]])
    for r in rows:
        p = "n/a" if r["p_value"] is None else f"{r['p_value']:.4g}"
        print(f"{r['structure']:<10} {r['metric']:<8} {r['comparison']:<30} p={p} {r['stars']}")
    return EXIT_OK


def cmd_gradcheck(o):
    from .verify import gradient_suite

    reports = gradient_suite(seed=o["seed"], h=o["h"], tol=o["tol"], n_coords=o["coords"])
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} kernel(s) exceed tolerance: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(reports)} kernels within tolerance")
    return EXIT_OK


def cmd_bench(o):
    from . import bench

    report = bench.run(tuple(o["mask_ratio"]), tuple(o["dims"]), o["seed"], o["repeat"], o["backends"])
    for row in report["encoder"]:
        print(f"mask_ratio {row['mask_ratio']:.2f} active {row['active_fraction']:.3f} "
              f"sparse/dense MACs {row['mac_ratio']:.4f} "
              f"({row['sparse_macs']}/{row['dense_macs']}) "
              f"time {row['sparse_ms']:.1f}/{row['dense_ms']:.1f} ms")
    for name, t in report.get("backends", {}).items():
        print(f"backend {name:<8} conv fwd+bwd dense {t['dense_conv_ms']:.1f} ms, sparse {t['sparse_conv_ms']:.1f} ms")
    if o["out"]:
        Path(o["out"]).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


HANDLERS = {
    "phantom": cmd_phantom, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "segment": cmd_segment,
    "evaluate": cmd_evaluate, "compare": cmd_compare, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        opts = resolve(args)
    except UsageError as e:
        print(f"gynbtnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    threads = str(max(1, int(opts["threads"])))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        os.environ.setdefault(var, threads)
    print("resolved: " + json.dumps({"command": args.command, "seed": opts["seed"], "config": opts},
                                    sort_keys=True), flush=True)

    from .kernels import reduce_page_faults
    from .network import CheckpointError
    from .volume import VolumeFormatError

    reduce_page_faults()
    try:
        return HANDLERS[args.command](opts)
    except UsageError as e:
        print(f"gynbtnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"gynbtnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"gynbtnet: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
