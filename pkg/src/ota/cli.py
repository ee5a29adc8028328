"""Command-line front end: config-driven, seeded, artifact-cached experiment runner.

Every subcommand is a thin wrapper over one library operation: given the same
config and seed, its artifacts are byte-identical to calling the library
directly. Stage-1 artifacts (tokenizer, index model, backbone) are cached under
content-addressed names, so they are trained once and reused.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .config import RunConfig, load_run_config
from .core import (Checkpoint, ConfigError, PipelineError, SeededRng, config_digest,
                   load_checkpoint, load_dataset, sample_few_data, save_checkpoint,
                   save_dataset)
from .digg import build_distill_set, contact_sheet
from .distill import (OTA_ORDERS, comparison_table, distill, final_finetune,
                      run_ota)
from .irf import (finetune as finetune_baseline, linear_probe, pretrain_backbone, run_irf,
                  stage3_deliver, stage4_calibrate, task_model_from_checkpoint,
                  warm_start_from, write_stage_report)
from .lt import SamplingParams, lt_model_from_checkpoint, train_lt
from .metrics import (FeatureBag, extract_features, fd_bar_chart, fd_score,
                      load_feature_bag, save_feature_bag, top1_accuracy)
from .synth import PALETTE_DOWNSTREAM, PALETTE_UPSTREAM, make_shapes_dataset
from .vq import rerepresent, tokenize, train_vq, vq_model_from_checkpoint

USAGE_ERROR = 2


class Workspace:
    """Output directory layout plus the run manifest of produced artifacts."""

    def __init__(self, rc: RunConfig, record: dict, jobs: int = 1):
        self.rc = rc
        self.record = record
        self.jobs = jobs
        self.root = Path(rc.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.rng = SeededRng(rc.seeds.master)

    # -- artifact cache ------------------------------------------------------
    def artifact_path(self, name: str, digest: str) -> Path:
        return self.root / "artifacts" / f"{name}-{digest[:12]}.ckpt"

    def pointer(self, name: str) -> Path:
        return self.root / "artifacts" / f"{name}.json"

    def store(self, name: str, ckpt: Checkpoint) -> Path:
        path = self.artifact_path(name, ckpt.meta.config_digest)
        save_checkpoint(ckpt, path)
        self.pointer(name).write_text(json.dumps(
            {"path": path.name, "config_digest": ckpt.meta.config_digest}, indent=2) + "\n")
        self.log_artifact(name, path)
        return path

    def fetch(self, name: str, path_override: Optional[str] = None) -> Checkpoint:
        if path_override:
            return load_checkpoint(path_override)
        ptr = self.pointer(name)
        if not ptr.exists():
            raise PipelineError(f"no {name!r} artifact in {self.root}; run `ota prime` first")
        info = json.loads(ptr.read_text())
        return load_checkpoint(ptr.parent / info["path"])

    def cached(self, name: str, digest: str) -> Optional[Checkpoint]:
        path = self.artifact_path(name, digest)
        if path.exists():
            return load_checkpoint(path)
        return None

    # -- run manifest ----------------------------------------------------------
    def log_artifact(self, name: str, path: Path) -> None:
        manifest_path = self.root / "run_manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {
            "seed": self.rc.seeds.master, "config": self.record, "artifacts": {}}
        manifest["artifacts"][name] = str(path.relative_to(self.root))
        manifest["config"] = self.record
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")

    # -- data ------------------------------------------------------------------
    def upstream(self):
        return load_dataset(self.rc.data.upstream)

    def downstream(self):
        return load_dataset(self.rc.data.downstream)

    def eval_data(self):
        return load_dataset(self.rc.data.eval or self.rc.data.downstream)

    def few_data(self):
        few = sample_few_data(self.downstream(), self.rc.data.few_fraction,
                              self.rng.derive("few_data"), stratified=self.rc.data.stratified)
        out = self.root / "few_data"
        meta = out / "dataset.json"
        stale = (not meta.exists()
                 or json.loads(meta.read_text()).get("source_seed") != few.source_seed)
        if stale:
            save_dataset(few, out)
            self.log_artifact("few_data", out)
        return few


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(ws: Workspace, args) -> int:
    s = ws.rc.synth
    rng = ws.rng.derive("synth")
    up = make_shapes_dataset(s.n_upstream, s.image_hw, PALETTE_UPSTREAM,
                             rng.derive("up"), s.num_classes, id_prefix="up")
    down = make_shapes_dataset(s.n_downstream, s.image_hw, PALETTE_DOWNSTREAM,
                               rng.derive("down"), s.num_classes, id_prefix="down")
    save_dataset(up, ws.rc.data.upstream)
    save_dataset(down, ws.rc.data.downstream)
    print(f"wrote {len(up)} upstream images to {ws.rc.data.upstream}")
    print(f"wrote {len(down)} downstream images to {ws.rc.data.downstream}")
    return 0


def cmd_prime(ws: Workspace, args) -> int:
    upstream = ws.upstream()
    vq_cfg, vq_stage = cfgmod.vq_configs(ws.rc)
    digest = config_digest({"stage": vq_stage, "vq": vq_cfg, "seed": ws.rc.seeds.master})
    vq_ckpt = ws.cached("vq", digest)
    if vq_ckpt is None:
        ckpt = train_vq(upstream, vq_stage, ws.rng.derive("vq"), vq_cfg)
        ckpt.meta.config_digest = digest
        ws.store("vq", ckpt)
        vq_ckpt = ckpt
        print(f"trained tokenizer: loss {ckpt.meta.extra['loss_first']:.4f} -> "
              f"{ckpt.meta.extra['loss_last']:.4f}")
    else:
        print("tokenizer: reusing cached artifact")

    lt_cfg, lt_stage = cfgmod.lt_configs(ws.rc)
    digest = config_digest({"stage": lt_stage, "lt": lt_cfg, "seed": ws.rc.seeds.master})
    if ws.cached("lt", digest) is None:
        vq_model = vq_model_from_checkpoint(vq_ckpt)
        n = min(ws.rc.lt.max_train_grids, len(upstream.records))
        grids = [tokenize(r.pixels, vq_model) for r in upstream.records[:n]]
        ckpt = train_lt(grids, lt_stage, ws.rng.derive("lt"), lt_cfg)
        ckpt.meta.config_digest = digest
        ws.store("lt", ckpt)
        print(f"trained index model: loss {ckpt.meta.extra['loss_first']:.4f} -> "
              f"{ckpt.meta.extra['loss_last']:.4f}")
    else:
        print("index model: reusing cached artifact")

    bb_cfg, bb_stage = cfgmod.backbone_configs(ws.rc)
    digest = config_digest({"stage": bb_stage, "backbone": bb_cfg, "seed": ws.rc.seeds.master})
    if ws.cached("backbone", digest) is None:
        ckpt = pretrain_backbone(upstream, bb_cfg, bb_stage, ws.rng.derive("backbone"))
        ckpt.meta.config_digest = digest
        ws.store("backbone", ckpt)
        print(f"pretrained backbone: upstream top-1 {ckpt.meta.extra['metrics']['train_top1']:.3f}")
    else:
        print("backbone: reusing cached artifact")
    return 0


def cmd_assemble(ws: Workspace, args) -> int:
    vq_model = vq_model_from_checkpoint(ws.fetch("vq"))
    data = load_dataset(args.data) if args.data else ws.few_data()
    rerep = rerepresent(data, vq_model)
    out = Path(args.out) if args.out else ws.root / "rerepresented"
    save_dataset(rerep, out)
    if out == ws.root / "rerepresented":
        ws.log_artifact("rerepresented", out)
    print(f"re-represented {len(rerep)} records -> {out}")
    return 0


def cmd_deliver(ws: Workspace, args) -> int:
    icfg = cfgmod.irf_config(ws.rc)
    few = ws.few_data()
    if args.delivering_data == "original" or icfg.delivering_data == "original":
        data, enforce = few, False
    else:
        rerep_dir = ws.root / "rerepresented"
        if (rerep_dir / "manifest.tsv").exists():
            data = load_dataset(rerep_dir)
        else:
            data = rerepresent(few, vq_model_from_checkpoint(ws.fetch("vq")))
        enforce = True
    model = warm_start_from(ws.fetch("backbone"), data.num_classes,
                            ws.rng.derive("irf").derive("warmstart"))
    ckpt = stage3_deliver(model, data, icfg.stage3, ws.rng.derive("irf"),
                          enforce_provenance=enforce, val_fraction=icfg.val_fraction)
    path = ws.root / "irf" / "stage3_deliver.ckpt"
    save_checkpoint(ckpt, path)
    ws.log_artifact("stage3_deliver", path)
    write_stage_report(ws.root / "irf", "stage3_deliver", ckpt, ws.rc.seeds.master)
    print(f"stage 3 metrics: {ckpt.meta.extra['metrics']}")
    return 0


def cmd_calibrate(ws: Workspace, args) -> int:
    icfg = cfgmod.irf_config(ws.rc)
    s3_path = ws.root / "irf" / "stage3_deliver.ckpt"
    if not s3_path.exists():
        raise PipelineError(f"stage-3 checkpoint missing at {s3_path}; run `ota deliver` first")
    model = task_model_from_checkpoint(load_checkpoint(s3_path))
    few = ws.few_data()
    if icfg.calibration_data == "rerep":
        data = rerepresent(few, vq_model_from_checkpoint(ws.fetch("vq")))
        enforce = False
    else:
        data, enforce = few, True
    ckpt, grid = stage4_calibrate(model, data, icfg.stage4, ws.rng.derive("irf"),
                                  val_fraction=icfg.val_fraction,
                                  enforce_provenance=enforce, jobs=ws.jobs)
    path = ws.root / "irf" / "stage4_calibrate.ckpt"
    save_checkpoint(ckpt, path)
    ws.log_artifact("stage4_calibrate", path)
    write_stage_report(ws.root / "irf", "stage4_calibrate", ckpt, ws.rc.seeds.master)
    print(f"stage 4 winner lr={grid.winner[0]:g} wd={grid.winner[1]:g}, "
          f"val top-1 {grid.winner_metric():.3f}")
    return 0


def cmd_irf(ws: Workspace, args) -> int:
    icfg = cfgmod.irf_config(ws.rc)
    ckpt = run_irf(ws.fetch("backbone"), ws.few_data(), ws.fetch("vq"), icfg,
                   ws.rng.derive("irf"), out_dir=ws.root / "irf", jobs=ws.jobs)
    ws.log_artifact("irf_final", ws.root / "irf" / "stage4_calibrate.ckpt")
    top1 = top1_accuracy(ckpt, ws.eval_data())
    report = {"method": "irf", "top1": top1, "metrics": ckpt.meta.extra["metrics"]}
    (ws.root / "irf" / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"IRF complete; eval top-1 {top1:.3f}")
    return 0


def cmd_baseline(ws: Workspace, args) -> int:
    cfg = cfgmod.baseline_config(ws.rc)
    few = ws.few_data()
    backbone = ws.fetch("backbone")
    out = ws.root / "baseline"
    out.mkdir(parents=True, exist_ok=True)
    for method, op in (("linear_probe", linear_probe), ("finetune", finetune_baseline)):
        if args.method not in ("both", method):
            continue
        ckpt = op(backbone, few, cfg, ws.rng.derive(method), dataset_name=args.dataset_name)
        path = out / f"{method}.ckpt"
        save_checkpoint(ckpt, path)
        ws.log_artifact(method, path)
        report = dict(ckpt.meta.extra["report"])
        report["eval_top1"] = top1_accuracy(ckpt, ws.eval_data())
        (out / f"{method}_report.json").write_text(json.dumps(report, indent=2) + "\n")
        print(f"{method}: val top-1 {report['top1']:.3f}, eval top-1 {report['eval_top1']:.3f}")
    return 0


def cmd_digg(ws: Workspace, args) -> int:
    vq_model = vq_model_from_checkpoint(ws.fetch("vq"))
    lt_model = lt_model_from_checkpoint(ws.fetch("lt"))
    few = ws.few_data()
    sampling = SamplingParams(rng=ws.rng.derive("sampling-template"),
                              temperature=ws.rc.digg.temperature,
                              top_k=min(ws.rc.digg.top_k, lt_model.cfg.vocab))
    corpus = build_distill_set(few, args.target or ws.rc.digg.target_count, vq_model,
                               lt_model, cfgmod.mask_spec(ws.rc), sampling,
                               ws.rng.derive("digg"), jobs=ws.jobs)
    out = ws.root / "distill_corpus"
    save_dataset(corpus, out)
    ws.log_artifact("distill_corpus", out)
    contact_sheet(few.records, corpus, out / "contact_sheet.png")

    # diversity monitor: sources whose variants all collapsed to one image
    by_source: dict[str, set] = {}
    for rec in corpus.records:
        by_source.setdefault(rec.source_id, set()).add(rec.pixels.tobytes())
    collapsed = sum(1 for pix in by_source.values() if len(pix) == 1)
    multi = sum(1 for rec in few.records
                if len([r for r in corpus.records if r.source_id == rec.id]) > 1)
    print(f"generated {len(corpus)} pseudo-images -> {out}")
    if multi:
        print(f"diversity: {collapsed}/{len(by_source)} sources with identical variants")
    return 0


def _build_student(ws: Workspace, args) -> "TaskModel":
    from .irf import build_task_model

    init = args.student_init or ws.rc.distill.student_init
    if init == "upstream":
        if not args.student_init_ckpt:
            raise ConfigError("--student-init upstream needs --student-init-ckpt")
        return warm_start_from(load_checkpoint(args.student_init_ckpt),
                               ws.downstream().num_classes, ws.rng.derive("student"))
    return build_task_model(cfgmod.student_backbone_config(ws.rc),
                            ws.downstream().num_classes, ws.rng.derive("student"))


def cmd_distill(ws: Workspace, args) -> int:
    teacher = (load_checkpoint(args.teacher) if args.teacher
               else load_checkpoint(ws.root / "irf" / "stage4_calibrate.ckpt"))
    corpus_dir = ws.root / "distill_corpus"
    if not (corpus_dir / "manifest.tsv").exists():
        raise PipelineError(f"no distillation corpus at {corpus_dir}; run `ota digg` first")
    corpus = load_dataset(corpus_dir)
    student = _build_student(ws, args)
    ckpt = distill(teacher, student, corpus, cfgmod.distill_config(ws.rc),
                   ws.rng.derive("distill"),
                   adapter_sidecar=ws.root / "distilled" / "adapter.ckpt")
    path = ws.root / "distilled" / "student.ckpt"
    save_checkpoint(ckpt, path)
    ws.log_artifact("distilled_student", path)
    m = ckpt.meta.extra["metrics"]
    print(f"distilled: epoch loss {m['loss_first_epoch']:.5f} -> {m['loss_last_epoch']:.5f}")
    return 0


def cmd_finetune(ws: Workspace, args) -> int:
    student_path = args.student or ws.root / "distilled" / "student.ckpt"
    ckpt = final_finetune(load_checkpoint(student_path), ws.few_data(),
                          cfgmod.finetune_stage_config(ws.rc), ws.rng.derive("ft"),
                          lp_then_ft=ws.rc.distill.lp_then_ft)
    path = ws.root / "distilled" / "student_finetuned.ckpt"
    save_checkpoint(ckpt, path)
    ws.log_artifact("student_finetuned", path)
    top1 = top1_accuracy(ckpt, ws.eval_data())
    print(f"final fine-tune: eval top-1 {top1:.3f}")
    return 0


def cmd_ota(ws: Workspace, args) -> int:
    out = ws.root / "ota" / args.order
    cfg = cfgmod.ota_config(ws.rc)
    if args.student_init:
        cfg = dataclasses.replace(cfg, student_init=args.student_init)
    init_ckpt = load_checkpoint(args.student_init_ckpt) if args.student_init_ckpt else None
    final, report = run_ota(args.order, ws.fetch("backbone"), ws.fetch("vq"), ws.fetch("lt"),
                            ws.few_data(), ws.eval_data(), cfg,
                            ws.rng.derive(f"ota/{args.order}"), out_dir=out,
                            dataset_name=args.dataset_name,
                            student_init_ckpt=init_ckpt, jobs=ws.jobs)
    ws.log_artifact(f"ota_{args.order}", out / "final.ckpt")
    print(f"{args.order}: average top-1 {report['average_top1']:.3f}")
    return 0


def _feature_bag(ws: Workspace, spec: str, extractor: Optional[Checkpoint]) -> FeatureBag:
    path = Path(spec)
    if path.suffix in (".npz", ".features"):
        return load_feature_bag(path)
    if extractor is None:
        extractor = ws.fetch("backbone")
    return extract_features(extractor, load_dataset(path))


def cmd_fdscore(ws: Workspace, args) -> int:
    extractor = load_checkpoint(args.extractor) if args.extractor else None
    bag_a = _feature_bag(ws, args.a, extractor)
    bag_b = _feature_bag(ws, args.b, extractor)
    result = fd_score(bag_a, bag_b, eps=ws.rc.metrics.eps)
    print(f"{result.value:.6f}")
    out = ws.root / "reports"
    label = args.label or f"{Path(args.a).name}_vs_{Path(args.b).name}"
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for side, spec, bag in (("a", args.a, bag_a), ("b", args.b, bag_b)):
        if Path(spec).suffix not in (".npz", ".features"):
            save_feature_bag(bag, feat_dir / f"{label}_{side}.npz")
    entry = {"label": label, "a": args.a, "b": args.b, "value": result.value,
             "trace_term": result.trace_term, "extractor": bag_a.extractor_id}
    fd_path = out / "fd_scores.json"
    scores = json.loads(fd_path.read_text()) if fd_path.exists() else []
    scores = [s for s in scores if s["label"] != label] + [entry]
    fd_path.write_text(json.dumps(scores, indent=2) + "\n")
    ws.log_artifact("fd_scores", fd_path)
    return 0


def cmd_eval(ws: Workspace, args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data) if args.data else ws.eval_data()
    print(f"{top1_accuracy(ckpt, data):.6f}")
    return 0


def cmd_report(ws: Workspace, args) -> int:
    out = ws.root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for order in OTA_ORDERS:
        path = ws.root / "ota" / order / "ota_report.json"
        if path.exists():
            reports.append(json.loads(path.read_text()))
    if reports:
        tsv = comparison_table(reports)
        (out / "ota_comparison.tsv").write_text(tsv)
        print(tsv, end="")
    fd_path = out / "fd_scores.json"
    if fd_path.exists():
        scores = json.loads(fd_path.read_text())
        fd_bar_chart({s["label"]: s["value"] for s in scores}, out / "fd_scores.png")
        print(f"fd chart -> {out / 'fd_scores.png'}")
    if not reports and not fd_path.exists():
        print("no stored artifacts to report on")
    ws.log_artifact("reports", out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common_flags(defaults: bool) -> argparse.ArgumentParser:
    """Shared flags, accepted both before and after the subcommand."""
    p = argparse.ArgumentParser(add_help=False,
                                argument_default=None if defaults else argparse.SUPPRESS)
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--set", action="append", default=[] if defaults else argparse.SUPPRESS,
                   dest="set", metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable; highest precedence)")
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.add_argument("--seed", type=int, help="override seeds.master")
    p.add_argument("--jobs", type=int, default=1 if defaults else argparse.SUPPRESS,
                   help="worker cap for parallel stages")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ota", description="Few-data transfer and distillation experiment runner",
        parents=[_common_flags(defaults=True)])
    common = [_common_flags(defaults=False)]
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name: str, help: str, func) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, parents=common)
        p.set_defaults(func=func)
        return p

    cmd("synth", "generate the two-domain shapes datasets", cmd_synth)
    cmd("prime", "train tokenizer, index model, and backbone on upstream data", cmd_prime)
    p = cmd("assemble", "re-represent the few-data split (or --data DIR)", cmd_assemble)
    p.add_argument("--data", help="dataset directory to re-represent (default: few split)")
    p.add_argument("--out", help="output directory (default: <output_dir>/rerepresented)")
    p = cmd("deliver", "train the task head on delivering data", cmd_deliver)
    p.add_argument("--delivering-data", choices=["rerep", "original"], default="rerep")
    cmd("calibrate", "grid-searched full fine-tune", cmd_calibrate)
    cmd("irf", "run re-representation fine-tuning end to end", cmd_irf)
    p = cmd("baseline", "linear-probe / fine-tune baselines", cmd_baseline)
    p.add_argument("--method", choices=["both", "linear_probe", "finetune"], default="both")
    p.add_argument("--dataset-name", default="synthetic")
    p = cmd("digg", "generate the pseudo-image distillation corpus", cmd_digg)
    p.add_argument("--target", type=int, help="override digg.target_count")
    p = cmd("distill", "feature distillation into the student", cmd_distill)
    p.add_argument("--teacher", help="teacher checkpoint (default: IRF stage-4 winner)")
    p.add_argument("--student-init", choices=["random", "upstream"],
                   help="override distill.student_init")
    p.add_argument("--student-init-ckpt", help="student-shaped checkpoint for upstream init")
    p = cmd("finetune", "final fine-tune of the distilled student", cmd_finetune)
    p.add_argument("--student", help="student checkpoint (default: distilled student)")
    p = cmd("ota", "full pipeline in either ordering", cmd_ota)
    p.add_argument("--order", choices=list(OTA_ORDERS), required=True)
    p.add_argument("--dataset-name", default="synthetic")
    p.add_argument("--student-init", choices=["random", "upstream"],
                   help="override distill.student_init")
    p.add_argument("--student-init-ckpt", help="student-shaped checkpoint for upstream init")
    p = cmd("fdscore", "Fréchet distance between two datasets or feature files", cmd_fdscore)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--extractor", help="feature extractor checkpoint (default: backbone)")
    p.add_argument("--label", help="name for this pairing in reports")
    p = cmd("eval", "top-1 accuracy of a checkpoint", cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: eval data from config)")
    cmd("report", "regenerate tables and figures from stored artifacts", cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR

    try:
        overrides = list(args.set)
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        if args.seed is not None:
            overrides.append(f"seeds.master={args.seed}")
        rc, record = load_run_config(args.config, overrides)
        ws = Workspace(rc, record, jobs=max(1, args.jobs))
        return args.func(ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
