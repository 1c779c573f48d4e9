"""Command-line entry point: ``esica {synth,train,infer,eval,count,verify}``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import io
from .errors import (ConfigurationError, ContractError, EsicaError, FormatError, InputError)
from .metrics import MetricReport, evaluate_case
from .model import ESICA, measure_cost
from .pipeline.data import LabeledVolume, class_prompts, normalize, synth_dataset
from .pipeline.infer import sliding_window_infer
from .pipeline.train import train
from .text import TableEmbedder, ToyEmbedder

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
MANIFEST_SCHEMA = "esica-manifest-v1"
log = logging.getLogger("esica")


class _Validation(Exception):
    pass


def _embedder(run: cfgmod.RunConfig):
    e = run.embedding
    if e.kind == "table":
        return TableEmbedder.from_file(e.path, run.model.d_text)
    return ToyEmbedder(run.model.d_text, e.seed)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# synth ---------------------------------------------------------------------------

def cmd_synth(a) -> int:
    if a.n < 0:
        raise _Validation("--n must be >= 0")
    if a.size < 32:
        raise _Validation(f"--size must be >= 32, got {a.size}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    vols = synth_dataset(a.seed, a.n, a.size, multi_instance=a.multi_instance)
    cases = []
    for v in vols:
        entry = {"name": v.name, "image": f"{v.name}_image.esv", "labels": f"{v.name}_labels.esv",
                 "spacing": list(v.spacing)}
        io.write_volume(out / entry["image"], v.image, v.spacing)
        io.write_volume(out / entry["labels"], v.labels.astype(np.uint16), v.spacing)
        if v.instances is not None:
            entry["instances"] = f"{v.name}_instances.esv"
            io.write_volume(out / entry["instances"], v.instances.astype(np.uint16), v.spacing)
        cases.append(entry)
    prompts = {str(k): p for k, p in class_prompts().items()}
    _write_json(out / "manifest.json", {"schema": MANIFEST_SCHEMA, "seed": a.seed, "size": a.size,
                                        "class_prompts": prompts, "cases": cases})
    print(f"wrote {len(cases)} volume(s) to {out}")
    return EXIT_OK


def load_manifest(directory) -> list[LabeledVolume]:
    d = Path(directory)
    try:
        man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"{d} has no manifest.json") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{d / 'manifest.json'}: {e}") from None
    if man.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"{d / 'manifest.json'}: unexpected schema {man.get('schema')!r}")
    prompts = {int(k): v for k, v in man.get("class_prompts", {}).items()} or class_prompts()
    vols = []
    for c in man["cases"]:
        img, spacing = io.read_volume(d / c["image"])
        lab, _ = io.read_volume(d / c["labels"])
        inst = io.read_volume(d / c["instances"])[0] if "instances" in c else None
        vols.append(LabeledVolume(img[None], lab, spacing, prompts, inst, c["name"]))
    return vols


# train ---------------------------------------------------------------------------

def cmd_train(a, run: cfgmod.RunConfig) -> int:
    tc = run.train
    if a.stage:
        from dataclasses import replace
        stage_defaults = ({"pos_per_instance": 2, "neg_per_instance": 0, "freeze_text": False}
                          if a.stage == "positive_only" else
                          {"pos_per_instance": 1, "neg_per_instance": 1, "freeze_text": True})
        try:
            tc = replace(tc, stage=a.stage, **stage_defaults)
        except ConfigurationError as e:
            raise _Validation(str(e)) from None
    if tc.stage == "balanced" and not a.init:
        raise _Validation("stage balanced requires --init <stage-1 checkpoint>")
    if a.dry_run:
        model = ESICA(run.model)
        report = model.cost_report(tc.patch, tc.n_passes)
        print(json.dumps({"params": report.params, "flops": report.flops,
                          "per_module": report.by_prefix(1)}, indent=2, sort_keys=True))
        return EXIT_OK
    if not run.paths.data_dir:
        raise _Validation("paths.data_dir is not set (use the config file or --set paths.data_dir=...)")
    data = load_manifest(run.paths.data_dir)
    init = io.load_checkpoint(a.init)[0] if a.init else None
    torch.manual_seed(run.seed)
    res = train(data, tc, init=init, model_cfg=run.model, embedder=_embedder(run))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(out / "checkpoint.esck", res.model, {"stage": tc.stage, "seed": tc.seed})
    _write_json(out / "loss_curve.json", res.curve())
    print(f"saved {out / 'checkpoint.esck'} after {len(res.step_losses)} steps")
    return EXIT_OK


# infer ---------------------------------------------------------------------------

def cmd_infer(a, run: cfgmod.RunConfig) -> int:
    model, _ = io.load_checkpoint(a.ckpt)
    img, spacing = io.read_volume(a.volume)
    emb = _embedder(run).embed(a.prompt)
    if emb.d_text != model.cfg.d_text:
        raise _Validation(f"embedding width {emb.d_text} does not match the checkpoint's d_text {model.cfg.d_text}")
    ic = run.infer
    prob = sliding_window_infer(model, normalize(img)[None], emb.vector, ic.patch, ic.overlap, ic.n_passes)
    mask = (prob >= ic.threshold).astype(np.uint16)
    io.write_volume(a.out, mask, spacing)
    if a.prob_out:
        io.write_volume(a.prob_out, prob.astype(np.float32), spacing)
    print(f"wrote {a.out} ({int(mask.sum())} foreground voxels)")
    return EXIT_OK


# eval ----------------------------------------------------------------------------

def cmd_eval(a, run: cfgmod.RunConfig) -> int:
    pred_dir, gt_dir = Path(a.pred_dir), Path(a.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise _Validation(f"{d} is not a directory")
    names = sorted(p.name for p in gt_dir.glob("*.esv"))
    report = MetricReport()
    ec = run.eval
    tau = a.tau if a.tau is not None else ec.tau_mm
    for name in names:
        if not (pred_dir / name).exists():
            raise InputError(f"prediction for {name} is missing from {pred_dir}")
        gt, sp = io.read_volume(gt_dir / name)
        pred, sp_p = io.read_volume(pred_dir / name)
        if gt.shape != pred.shape:
            raise ContractError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
        report.cases.append(evaluate_case(Path(name).stem, pred > 0, gt, sp, tau,
                                          a.instances or ec.instances, ec.symmetric_nsd))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.dumps() + "\n", encoding="utf-8")
    out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    print(json.dumps(report.aggregate(), sort_keys=True))
    return EXIT_OK


# count / verify --------------------------------------------------------------------

def cmd_count(a, run: cfgmod.RunConfig) -> int:
    model = ESICA(run.model)
    patch = tuple(a.patch) if a.patch else run.train.patch
    passes = a.passes or run.train.n_passes
    report = model.cost_report(patch, passes)
    if sum(p for _, p, _ in report.per_layer) != report.params or \
            sum(f for _, _, f in report.per_layer) != report.flops:
        return EXIT_VERIFY
    out = report.to_json()
    out["patch"], out["n_passes"] = list(patch), passes
    if a.check:
        measured = measure_cost(model, patch, passes)
        out["measured"] = {"params": measured.params, "flops": measured.flops}
        ok = measured.params == report.params and measured.flops == report.flops
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK if ok else EXIT_VERIFY
    if not a.per_layer:
        out.pop("per_layer")
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(a) -> int:
    from . import verify

    if a.suite == "trends":
        checks = verify.trends_suite(quick=a.quick)
    else:
        checks = verify.SUITES[a.suite]()
    for c in checks:
        seed = "" if c.seed is None else f" seed={c.seed}"
        print(f"{'PASS' if c.passed else 'FAIL'} {c.suite}/{c.name}{seed} value={c.value:.3e} limit={c.limit:g}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


# parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esica", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.lr=0.005")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--multi-instance", action="store_true")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="run one curriculum stage")
    with_config(s)
    s.add_argument("--stage", choices=["positive_only", "balanced"])
    s.add_argument("--init", help="stage-1 checkpoint (required for balanced)")
    s.add_argument("--out", default="run")
    s.add_argument("--dry-run", action="store_true")

    s = sub.add_parser("infer", help="sliding-window inference on one volume")
    with_config(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prob-out")

    s = sub.add_parser("eval", help="score predicted label volumes against ground truth")
    with_config(s)
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("--instances", action="store_true")

    s = sub.add_parser("count", help="analytic parameter and FLOP count")
    with_config(s)
    s.add_argument("--patch", type=int, nargs=3)
    s.add_argument("--passes", type=int)
    s.add_argument("--per-layer", action="store_true")
    s.add_argument("--check", action="store_true", help="cross-check against a hooked forward pass")

    s = sub.add_parser("verify", help="run a verification suite")
    s.add_argument("--suite", required=True,
                   choices=["attention", "cost", "gradcheck", "oracles", "serialization", "trends"])
    s.add_argument("--quick", action="store_true", help="shortened trend runs")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "synth":
            return cmd_synth(a)
        if a.command == "verify":
            return cmd_verify(a)
        run = cfgmod.load(a.config, a.set)
        return {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "count": cmd_count}[a.command](a, run)
    except (_Validation, ConfigurationError, InputError, ContractError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EsicaError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
