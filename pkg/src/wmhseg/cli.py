"""Command-line entry point: phantom generation, two-stage training,
prediction, evaluation, ranking, gradient self-check, and the
plain-vs-residual ablation harness.

Every sub-command emits a machine-readable JSON run report (to --report,
else stdout) echoing all resolved flag values, and logs human-readable
progress to stderr. Exit codes: 0 success, 2 usage errors, 1 runtime
failures (the failing stage is named).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .architectures import build_resunet, build_trimmed_unet
from .checkpoint import load_checkpoint, save_checkpoint
from .diff_core import Graph, Parameter, grad_check
from .metrics import (
    CaseMetrics,
    evaluate_case,
    rank_teams,
    read_team_summaries,
    summarize_cases,
    write_case_csv,
    write_rank_csv,
    write_rank_json,
)
from .phantom import PhantomConfig, generate_dataset, load_dataset, save_dataset
from .pipeline import (
    CaseInput,
    PipelineConfig,
    run_pipeline,
    segment_white_matter,
    wm_training_cases,
    wmh_training_cases,
)
from .training import LossConfig, TrainConfig, predict_probabilities, train
from .volume_io import read_nifti, read_nifti_mask, write_nifti

log = logging.getLogger("wmhseg")

REPORT_SCHEMA_VERSION = 1

TRAIN_KEYS = (
    "learning_rate",
    "momentum",
    "epochs",
    "seed",
    "validation_fraction",
    "augment",
    "batch_size",
    "precision",
    "max_iterations",
)
LOSS_KEYS = ("beta", "epsilon", "weight_placement")


def _emit_report(args, command: str, config: dict, outputs: dict, t0: float) -> None:
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "version": __version__,
        "command": command,
        "config": config,
        "outputs": outputs,
        "runtime_seconds": time.time() - t0,
        "status": "ok",
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
        log.info("run report written to %s", args.report)
    else:
        print(text)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - set(TRAIN_KEYS) - set(LOSS_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _resolve_train_configs(args) -> tuple[TrainConfig, LossConfig]:
    """File values first, then any flag the user set explicitly on top."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    train_kwargs = {k: file_cfg[k] for k in TRAIN_KEYS if k in file_cfg}
    loss_kwargs = {k: file_cfg[k] for k in LOSS_KEYS if k in file_cfg}
    for k in TRAIN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            train_kwargs[k] = v
    if getattr(args, "no_augment", False):
        train_kwargs["augment"] = False
    for k in LOSS_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            loss_kwargs[k] = v
    return TrainConfig(**train_kwargs), LossConfig(**loss_kwargs)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--beta", type=float, help="loss weight; computed when omitted")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--weight-placement", dest="weight_placement",
                   choices=("paper", "swapped"))
    p.add_argument("--base-width", dest="base_width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)


def _write_history(history, out_stem: Path) -> dict:
    csv_path = out_stem.with_suffix(".history.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(history.losses):
            w.writerow([i, repr(loss)])
    json_path = out_stem.with_suffix(".history.json")
    json_path.write_text(json.dumps(history.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"history_csv": str(csv_path), "history_json": str(json_path)}


# ---------------------------------------------------------------------------
# sub-commands


def cmd_phantom(args) -> int:
    t0 = time.time()
    cfg = PhantomConfig(
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        lesion_count_range=(args.lesion_count_min, args.lesion_count_max),
        confounder_count=0 if args.no_confounder else args.confounders,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    log.info("generating %d phantom cases into %s", args.cases, args.out)
    cases = generate_dataset(cfg, args.cases, args.seed)
    save_dataset(cases, cfg, args.out)
    _emit_report(
        args,
        "phantom",
        {"cases": args.cases, "seed": args.seed, "out": str(args.out),
         "phantom": cfg.to_dict()},
        {"dataset_dir": str(args.out), "case_ids": [c.case_id for c in cases]},
        t0,
    )
    return 0


def _train_stage(args, stage: str) -> int:
    t0 = time.time()
    train_cfg, loss_cfg = _resolve_train_configs(args)
    cases, _ = load_dataset(args.data)
    if stage == "wm":
        spec = build_trimmed_unet(
            base_width=args.base_width or 64, depth=args.depth or 3
        )
        tcs = wm_training_cases(cases)
    else:
        wm_net = load_checkpoint(args.wm_checkpoint)
        pcfg = PipelineConfig(
            threshold=args.threshold,
            dilation_radius=args.dilation_radius,
        )
        if args.use_truth_wm:
            masks = [c.wm_truth for c in cases]
        else:
            log.info("computing stage-1 white matter masks for normalization")
            masks = [segment_white_matter(c.t1, wm_net, pcfg) for c in cases]
        spec = build_resunet(base_width=args.base_width or 64, depth=args.depth or 4)
        tcs = wmh_training_cases(cases, masks)
    log.info(
        "training %s: %d cases, width %d, depth %d", stage, len(tcs),
        spec.base_width, spec.depth,
    )
    net, history = train(spec, tcs, train_cfg, loss_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, net)
    history.checkpoint_path = str(out)
    outputs = {"checkpoint": str(out), "beta": history.beta,
               "val_dice": history.val_dice, "iterations": history.iterations}
    outputs.update(_write_history(history, out))
    log.info("%s training done: final val dice %.4f", stage, history.val_dice[-1])
    _emit_report(
        args,
        f"train-{stage}",
        {
            "data": str(args.data),
            "out": str(args.out),
            "train": asdict(train_cfg),
            "loss": asdict(loss_cfg),
            "base_width": spec.base_width,
            "depth": spec.depth,
            **(
                {
                    "wm_checkpoint": args.wm_checkpoint,
                    "use_truth_wm": args.use_truth_wm,
                    "threshold": args.threshold,
                    "dilation_radius": args.dilation_radius,
                }
                if stage == "wmh"
                else {}
            ),
        },
        outputs,
        t0,
    )
    return 0


def cmd_train_wm(args) -> int:
    return _train_stage(args, "wm")


def cmd_train_wmh(args) -> int:
    return _train_stage(args, "wmh")


def _predict_one(case_dir: Path, out_dir: Path, cfg, wm_net, wmh_net) -> dict:
    case = CaseInput(
        t1=read_nifti(case_dir / "t1.nii"),
        flair=read_nifti(case_dir / "flair.nii"),
        case_id=case_dir.name,
    )
    wmh_mask, wm_mask, report = run_pipeline(case, cfg, wm_net, wmh_net)
    d = out_dir / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    write_nifti(wmh_mask, d / "wmh.nii")
    write_nifti(wm_mask, d / "wm.nii")
    (d / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    return report.to_dict()


def cmd_predict(args) -> int:
    t0 = time.time()
    cfg = PipelineConfig(
        wm_checkpoint=args.wm_checkpoint,
        wmh_checkpoint=args.wmh_checkpoint,
        threshold=args.threshold,
        dilation_radius=args.dilation_radius,
        confine=not args.no_confine,
    )
    wm_net = load_checkpoint(args.wm_checkpoint)
    wmh_net = load_checkpoint(args.wmh_checkpoint)
    out_dir = Path(args.out)
    if args.t1 or args.flair:
        if not (args.t1 and args.flair):
            raise ValueError("single-case mode needs both --t1 and --flair")
        case = CaseInput(
            t1=read_nifti(args.t1), flair=read_nifti(args.flair), case_id=args.case_id
        )
        wmh_mask, wm_mask, report = run_pipeline(case, cfg, wm_net, wmh_net)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_nifti(wmh_mask, out_dir / f"{case.case_id}_wmh.nii")
        write_nifti(wm_mask, out_dir / f"{case.case_id}_wm.nii")
        reports = [report.to_dict()]
    else:
        root = Path(args.data)
        case_dirs = sorted(
            d for d in root.iterdir() if d.is_dir() and (d / "t1.nii").exists()
        )
        log.info("predicting %d cases with %d threads", len(case_dirs), args.threads)
        # thread pool over independent cases; results collected in case order
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            futures = [
                pool.submit(_predict_one, d, out_dir, cfg, wm_net, wmh_net)
                for d in case_dirs
            ]
            reports = [f.result() for f in futures]
    _emit_report(
        args,
        "predict",
        {
            "data": args.data,
            "t1": args.t1,
            "flair": args.flair,
            "out": str(args.out),
            "threads": args.threads,
            "pipeline": cfg.to_dict(),
        },
        {"cases": reports},
        t0,
    )
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.time()
    rows: list[tuple[str, CaseMetrics]] = []
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ValueError("single-case mode needs both --pred and --gt")
        pairs = [(Path(args.pred).stem, Path(args.pred), Path(args.gt))]
    else:
        pred_root, gt_root = Path(args.pred_dir), Path(args.gt_dir)
        pairs = []
        for d in sorted(p for p in pred_root.iterdir() if p.is_dir()):
            gt_path = gt_root / d.name / "wmh.nii"
            if gt_path.exists():
                pairs.append((d.name, d / "wmh.nii", gt_path))
        if not pairs:
            raise ValueError(f"no prediction/truth pairs under {pred_root}")

    def one(item):
        case_id, pred_path, gt_path = item
        pred = read_nifti_mask(pred_path)
        gt = read_nifti_mask(gt_path)
        return case_id, evaluate_case(pred, gt, connectivity=args.connectivity)

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        rows = list(pool.map(one, pairs))

    outputs: dict = {
        "cases": {
            cid: {
                "dice": m.dice,
                "h95_mm": m.h95_mm,
                "avd_percent": m.avd_percent,
                "lesion_recall": m.lesion_recall,
                "lesion_f1": m.lesion_f1,
            }
            for cid, m in rows
        }
    }
    if args.out_csv:
        write_case_csv(args.out_csv, rows)
        outputs["case_csv"] = str(args.out_csv)
    if args.team:
        summary = summarize_cases(args.team, [m for _, m in rows])
        outputs["team_summary"] = asdict(summary)
    _emit_report(
        args,
        "evaluate",
        {
            "pred": args.pred,
            "gt": args.gt,
            "pred_dir": args.pred_dir,
            "gt_dir": args.gt_dir,
            "connectivity": args.connectivity,
            "threads": args.threads,
            "out_csv": args.out_csv,
            "team": args.team,
        },
        outputs,
        t0,
    )
    return 0


def cmd_rank(args) -> int:
    t0 = time.time()
    summaries = read_team_summaries(args.summaries)
    table = rank_teams(summaries)
    outputs = {
        "teams": table.teams,
        "overall": dict(zip(table.teams, table.overall)),
    }
    if args.out_csv:
        write_rank_csv(args.out_csv, table)
        outputs["rank_csv"] = str(args.out_csv)
    if args.out_json:
        write_rank_json(args.out_json, table)
        outputs["rank_json"] = str(args.out_json)
    for i, team in enumerate(table.teams):
        log.info("team %-16s overall rank %.4f", team, table.overall[i])
    _emit_report(
        args,
        "rank",
        {"summaries": str(args.summaries), "out_csv": args.out_csv,
         "out_json": args.out_json},
        outputs,
        t0,
    )
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    rng = np.random.default_rng(args.seed)
    results = {}

    # operator-level checks on small random shapes
    op_graphs = {
        "conv3x3": lambda g: g.add(
            "conv3x3", (0,),
            Parameter("w", rng.normal(size=(3, 2, 3, 3))),
            Parameter("b", rng.normal(size=3)),
        ),
        "conv1x1": lambda g: g.add(
            "conv1x1", (0,),
            Parameter("w", rng.normal(size=(3, 2, 1, 1))),
            Parameter("b", rng.normal(size=3)),
        ),
        "upconv2": lambda g: g.add(
            "upconv2", (0,),
            Parameter("w", rng.normal(size=(2, 3, 2, 2))),
            Parameter("b", rng.normal(size=3)),
        ),
    }
    worst = 0.0
    for name, builder in op_graphs.items():
        g = Graph()
        builder(g)
        rep = grad_check(g, rng.normal(size=(2, 2, 6, 6)), tolerance=args.tolerance)
        results[name] = {"passed": rep.passed, "max_rel_error": rep.max_rel_error}
        worst = max(worst, rep.max_rel_error)

    if args.arch == "resunet":
        spec = build_resunet(base_width=args.base_width, depth=args.depth)
    else:
        spec = build_trimmed_unet(base_width=args.base_width, depth=args.depth)
    from .architectures import Network

    net = Network(spec, seed=args.seed)
    x = rng.normal(size=(1, spec.in_channels, args.size, args.size))
    rep = grad_check(net.graph, x, tolerance=args.tolerance,
                     max_elements=args.max_elements)
    results["network"] = {
        "passed": rep.passed,
        "max_rel_error": rep.max_rel_error,
        "parameters_checked": len(rep.checks),
    }
    worst = max(worst, rep.max_rel_error)
    ok = all(r["passed"] for r in results.values())
    log.info("gradcheck %s: max rel error %.3g", "PASS" if ok else "FAIL", worst)
    _emit_report(
        args,
        "gradcheck",
        {
            "arch": args.arch,
            "base_width": args.base_width,
            "depth": args.depth,
            "size": args.size,
            "tolerance": args.tolerance,
            "seed": args.seed,
            "max_elements": args.max_elements,
        },
        {"results": results, "passed": ok},
        t0,
    )
    return 0 if ok else 1


def run_ablation(data_dir: str | Path, train_cfg: TrainConfig,
                 loss_cfg: LossConfig, base_width: int = 4,
                 depth: int = 4, wm_checkpoint: str | None = None,
                 wm_epochs: int = 8) -> dict:
    """Train plain U-Net and ResU-Net under identical seeds/configs on the
    lesion task and report paired validation metrics.

    Inputs are normalized with stage-1 predicted masks, exactly like the
    real pipeline: a white matter network is trained first (or loaded from
    wm_checkpoint), so the two variants differ in architecture only."""
    from dataclasses import replace

    from .metrics import dice as dice_metric, lesion_f1
    from .volume_io import BinaryMask3D

    cases, _ = load_dataset(data_dir)
    if wm_checkpoint:
        wm_net = load_checkpoint(wm_checkpoint)
    else:
        wm_net, _ = train(
            build_trimmed_unet(base_width=base_width, depth=3),
            wm_training_cases(cases),
            replace(train_cfg, epochs=wm_epochs, max_iterations=None),
            LossConfig(),
        )
    pcfg = PipelineConfig()
    masks = [segment_white_matter(c.t1, wm_net, pcfg) for c in cases]
    tcs = wmh_training_cases(cases, masks)
    report: dict = {"variants": {}}
    for kind in ("plain", "residual"):
        spec = build_resunet(base_width=base_width, depth=depth)
        spec = type(spec)(**{**spec.to_dict(), "block_kind": kind})
        net, history = train(spec, tcs, train_cfg, loss_cfg)
        val_ids = set(history.val_case_ids)
        dices, f1s = [], []
        for case, tc in zip(cases, tcs):
            if tc.case_id not in val_ids:
                continue
            probs = predict_probabilities(net, tc.images)
            pred = BinaryMask3D(
                data=(probs >= 0.5).astype(np.uint8), spacing=case.t1.spacing
            )
            dices.append(dice_metric(pred, case.wmh_truth))
            f1s.append(lesion_f1(pred, case.wmh_truth))
        report["variants"][kind] = {
            "val_dice": float(np.mean(dices)),
            "val_lesion_f1": float(np.mean(f1s)),
            "val_dice_per_epoch": history.val_dice,
            "iterations": history.iterations,
            "beta": history.beta,
        }
    report["seed"] = train_cfg.seed
    report["train"] = asdict(train_cfg)
    report["loss"] = asdict(loss_cfg)
    report["base_width"] = base_width
    report["depth"] = depth
    return report


def cmd_ablate(args) -> int:
    t0 = time.time()
    train_cfg, loss_cfg = _resolve_train_configs(args)
    report = run_ablation(
        args.data, train_cfg, loss_cfg,
        base_width=args.base_width or 4, depth=args.depth or 4,
        wm_checkpoint=args.wm_checkpoint,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for kind, r in report["variants"].items():
        log.info("%s: val dice %.4f lesion F1 %.4f", kind, r["val_dice"],
                 r["val_lesion_f1"])
    _emit_report(
        args,
        "ablate",
        {"data": str(args.data), "out": str(args.out),
         "train": asdict(train_cfg), "loss": asdict(loss_cfg)},
        {"report_path": str(out), "variants": report["variants"]},
        t0,
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmhseg",
        description="Two-stage white-matter-hyperintensity segmentation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 8])
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 3.0])
    p.add_argument("--lesion-count-min", type=int, default=2)
    p.add_argument("--lesion-count-max", type=int, default=5)
    p.add_argument("--confounders", type=int, default=1)
    p.add_argument("--no-confounder", action="store_true")
    p.add_argument("--noise-std", type=float, default=0.02)
    p.add_argument("--report")
    p.set_defaults(func=cmd_phantom, stage="phantom")

    p = sub.add_parser("train-wm", help="train the white matter network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train_wm, stage="train-wm")

    p = sub.add_parser("train-wmh", help="train the lesion network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wm-checkpoint", required=True)
    p.add_argument("--use-truth-wm", action="store_true",
                   help="normalize with ground-truth WM masks instead of stage-1 output")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--dilation-radius", type=int, default=2)
    _add_train_flags(p)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train_wmh, stage="train-wmh")

    p = sub.add_parser("predict", help="run the two-stage pipeline")
    p.add_argument("--data", help="dataset dir with per-case t1.nii/flair.nii")
    p.add_argument("--t1")
    p.add_argument("--flair")
    p.add_argument("--case-id", default="case")
    p.add_argument("--out", required=True)
    p.add_argument("--wm-checkpoint", required=True)
    p.add_argument("--wmh-checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--dilation-radius", type=int, default=2)
    p.add_argument("--no-confine", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(func=cmd_predict, stage="predict")

    p = sub.add_parser("evaluate", help="compute the five challenge metrics")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--connectivity", type=int, default=26)
    p.add_argument("--out-csv")
    p.add_argument("--team", help="also emit a team summary under this name")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate, stage="evaluate")

    p = sub.add_parser("rank", help="rank team summaries")
    p.add_argument("--summaries", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.add_argument("--report")
    p.set_defaults(func=cmd_rank, stage="rank")

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--arch", choices=("resunet", "trimmed"), default="resunet")
    p.add_argument("--base-width", type=int, default=2)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-elements", type=int, default=256)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck, stage="gradcheck")

    p = sub.add_parser("ablate", help="paired plain-vs-residual training run")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wm-checkpoint",
                   help="stage-1 checkpoint for input normalization; trained fresh when omitted")
    _add_train_flags(p)
    p.add_argument("--report")
    p.set_defaults(func=cmd_ablate, stage="ablate")

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report the failing stage, exit 1
        log.error("stage %s failed: %s", args.stage, exc)
        if getattr(args, "report", None):
            Path(args.report).write_text(
                json.dumps(
                    {
                        "schema_version": REPORT_SCHEMA_VERSION,
                        "command": args.stage,
                        "status": "error",
                        "error": str(exc),
                    },
                    indent=2,
                    sort_keys=True,
                )
                + "\n"
            )
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
