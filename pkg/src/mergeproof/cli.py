"""Command-line entry point.

Every subcommand maps onto one library operation plus file I/O. Checkpoints
carry their model spec, config hash and parent fingerprints in the header so
later commands need no extra arguments to interpret them.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .analysis import density, geometry
from .attacks import GradEraseConfig, estimate_disturbance, graderase_retrain, unmask
from .config import ConfigError, ExperimentConfig, canonical_json, fixture_config_dict
from .data import GENERATORS, gen_dataset, load_csv, save_csv
from .defense import DefenseConfig, protect
from .merging import METHODS, AdaConfig, MergeSpec, merge
from .params import ParamSet, atomic_write_bytes, load_checkpoint, save_checkpoint, sub
from .pipeline import StageError, aggregate_reports, dump_report, report_csv, run_pipeline
from .toymodels import ModelSpec, TrainConfig, evaluate, init_model, train

log = logging.getLogger("mergeproof")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _read_config(path) -> dict:
    if path is None:
        return {}
    if path == "fixture":
        return fixture_config_dict()
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file {p} does not exist")
    return p


def _load(path) -> ParamSet:
    return load_checkpoint(_need_file(path))


def _data(path, num_classes=None, split=None):
    return load_csv(_need_file(path), num_classes, split)


def model_spec_of(p: ParamSet) -> ModelSpec:
    """Read the model spec stored in a checkpoint header, or infer a ReLU MLP from shapes."""
    if "model_spec" in p.meta:
        return ModelSpec.from_dict(json.loads(p.meta["model_spec"]))
    depth = sum(1 for n in p if n.endswith(".weight"))
    if depth == 0:
        raise ConfigError("checkpoint has no layer{i}.weight tensors; cannot infer model spec")
    shapes = [p[f"layer{i}.weight"].shape for i in range(depth)]
    return ModelSpec(shapes[0][0], tuple(s[1] for s in shapes[:-1]), shapes[-1][1])


def _tag(p: ParamSet, spec: ModelSpec, role: str, *parents: ParamSet) -> ParamSet:
    hashes = sorted({q.meta["config_hash"] for q in parents if "config_hash" in q.meta})
    meta = dict(role=role, model_spec=canonical_json(spec.to_dict()),
                parents=",".join(q.fingerprint() for q in parents))
    if len(hashes) == 1:
        meta["config_hash"] = hashes[0]
    return p.with_meta(**meta)


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        atomic_write_bytes(out, text.encode())
    else:
        sys.stdout.write(text)


def _train_cfg(args, base: dict) -> TrainConfig:
    d = dict(base)
    for key in ("epochs", "batch_size", "learning_rate", "seed", "l2_alpha"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    return TrainConfig(**d)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--l2-alpha", type=float)
    p.add_argument("--seed", type=int)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _read_config(args.config)
    task = dict(cfg.get("tasks", {}).get(args.task, {})) if args.task else {}
    model = cfg.get("model", {})
    d = args.dim or model.get("input_dim")
    C = args.classes or model.get("num_classes")
    if d is None or C is None:
        raise ConfigError("gen-data needs --dim and --classes (or a config with a model section)")
    for key in ("generator", "n", "transform", "layout_seed", "seed", "noise"):
        if getattr(args, key) is not None:
            task[key] = getattr(args, key)
    seed = task.get("seed", 0) + args.run_seed
    try:
        ds = gen_dataset(task.get("generator", "blobs"), d, C, task.get("n", 2000), task.get("transform", "none"),
                         seed, split=args.split, task_id=args.task, layout_seed=task.get("layout_seed", 0),
                         noise=task.get("noise", 0.1))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return lambda: save_csv(ds, args.out)


def cmd_pretrain(args):
    cfg = _read_config(args.config)
    data = _data(args.data)
    model = dict(cfg.get("model", {"input_dim": data.dim, "num_classes": data.num_classes}))
    if args.hidden_dims is not None:
        model["hidden_dims"] = list(args.hidden_dims)
    if args.activation:
        model["activation"] = args.activation
    spec = ModelSpec.from_dict(model)
    tc = _train_cfg(args, cfg.get("train", {}).get("pretrain", {}))

    def run():
        init = init_model(spec, args.init_seed)
        save_checkpoint(_tag(train(spec, init, data, tc), spec, "theta_pre"), args.out)
    return run


def cmd_finetune(args):
    cfg = _read_config(args.config)
    base, data = _load(args.base), _data(args.data)
    spec = model_spec_of(base)
    train_sec = cfg.get("train", {})
    tc = _train_cfg(args, {**train_sec.get("finetune", {}), **train_sec.get(f"finetune_{args.task}", {})})
    return lambda: save_checkpoint(_tag(train(spec, base, data, tc), spec, f"theta_{args.task}", base), args.out)


def cmd_protect(args):
    cfg = _read_config(args.config)
    dd = dict(cfg.get("defense", {}))
    for key in ("alpha", "beta", "k", "k_prime"):
        if getattr(args, key) is not None:
            dd[key] = getattr(args, key)
    if args.exclude:
        dd["excluded_layer_patterns"] = list(args.exclude)
    dd["stage1"] = args.stages in ("both", "stage1")
    dd["stage2"] = args.stages in ("both", "stage2")
    s1 = dict(dd.get("stage1_train", {}))
    dcfg = DefenseConfig.from_dict(dd)
    dcfg = replace(dcfg, stage1_train=_train_cfg(args, {**asdict(DefenseConfig().stage1_train), **s1}))
    if dcfg.stage1 and not args.train:
        raise ConfigError("stage 1 needs --train")
    if dcfg.stage2 and not args.val:
        raise ConfigError("stage 2 needs --val")
    model, pre = _load(args.model), _load(args.pre)
    train_data = _data(args.train) if dcfg.stage1 else None
    val_data = _data(args.val) if dcfg.stage2 else None
    spec = model_spec_of(model)

    def run():
        res = protect(spec, model, pre, train_data, val_data, dcfg)
        out = res.params
        if out is not model:
            out = _tag(out, spec, "theta_hat_def", model, pre)
        save_checkpoint(out, args.out)
        if args.report:
            _emit(res.report, args.report)
    return run


def cmd_merge(args):
    cfg = _read_config(args.config)
    specs = {m["method"]: m for m in cfg.get("merges", [])}
    md = dict(specs.get(args.method, {}))
    md["method"] = args.method
    for flag, key in (("lam", "lambda"), ("keep_frac", "ties_keep_frac"), ("drop_p", "dare_drop_p"),
                      ("seed", "seed")):
        if getattr(args, flag) is not None:
            md[key] = getattr(args, flag)
    ada = dict(md.get("ada", {}))
    if args.ada_steps is not None:
        ada["steps"] = args.ada_steps
    if args.ada_lr is not None:
        ada["lr"] = args.ada_lr
    md["ada"] = AdaConfig(**ada)
    ms = MergeSpec.from_dict(md)
    base = _load(args.base)
    models = [_load(m) for m in args.models]
    unlabeled = _data(args.unlabeled) if args.unlabeled else None
    if ms.method == "adamerging" and unlabeled is None:
        raise ConfigError("adamerging needs --unlabeled")
    spec = model_spec_of(base)

    def run():
        out = merge(ms, base, models, unlabeled=unlabeled, model_spec=spec)
        save_checkpoint(_tag(out, spec, f"merge_{ms.method}", base, *models), args.out)
    return run


def _attack_report(args, spec, config: dict, before: ParamSet, after: ParamSet, eval_sets, extra=None):
    if not args.report:
        return
    acc = {str(p): {"before": evaluate(spec, before, ds).accuracy, "after": evaluate(spec, after, ds).accuracy}
           for p, ds in eval_sets}
    _emit({"attack": args.kind, "config": config, "accuracy": acc,
           "before_fingerprint": before.fingerprint(), "after_fingerprint": after.fingerprint(),
           **(extra or {})}, args.report)


def cmd_attack(args):
    cfg = _read_config(args.config)
    ac = cfg.get("attacks", {})
    pre, hat = _load(args.pre), _load(args.protected)
    spec = model_spec_of(hat)
    eval_sets = [(p, _data(p, spec.num_classes)) for p in (args.eval_data or [])]
    if args.kind == "unmask":
        if not args.fr:
            raise ConfigError("unmask needs --fr")
        fr = _load(args.fr)
        ms = MergeSpec.from_dict({"method": args.method, **({"lambda": args.lam} if args.lam is not None else {})})
        lam = args.unmask_lambda if args.unmask_lambda is not None else ac.get("unmask_lambda", 0.3)

        def run():
            out = unmask(pre, hat, fr, ms, lam)
            save_checkpoint(_tag(out, spec, "attack_unmask", hat, fr), args.out)
            _attack_report(args, spec, {"merge": ms.to_dict(), "unmask_lambda": lam},
                           merge(ms, pre, [hat, fr]), out, eval_sets)
        return run
    if not (args.merged and args.data):
        raise ConfigError("graderase needs --merged and --data")
    merged, data = _load(args.merged), _data(args.data)
    gd = dict(ac.get("graderase", {}))
    for flag, key in (("frac", "retrain_data_frac"), ("epochs", "epochs"), ("learning_rate", "lr"),
                      ("batch_size", "batch_size"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            gd[key] = getattr(args, flag)
    ge = GradEraseConfig(**gd)

    def run():
        v = estimate_disturbance(hat, pre)
        res = graderase_retrain(spec, merged, v, data.head_fraction(ge.retrain_data_frac, ge.seed), ge)
        save_checkpoint(_tag(res.params, spec, "attack_graderase", merged, hat, pre), args.out)
        _attack_report(args, spec, asdict(ge), merged, res.params, eval_sets,
                       {"steps": res.steps, "max_relative_residual": res.max_relative_residual})
    return run


def cmd_eval(args):
    model = _load(args.model)
    spec = model_spec_of(model)
    datasets = [_data(p, spec.num_classes) for p in args.data]

    def run():
        out = {"model": args.model, "fingerprint": model.fingerprint(),
               "results": {str(p): evaluate(spec, model, ds).to_dict() for p, ds in zip(args.data, datasets)}}
        _emit(out, args.out)
    return run


def cmd_analyze(args):
    pre, a, b = _load(args.pre), _load(args.a), _load(args.b)

    def run():
        ta, tb = sub(a, pre), sub(b, pre)
        out = {"geometry": geometry(ta, tb, args.lam, args.lam).to_dict(),
               "density": {"a": density(ta, args.top_frac).to_dict(), "b": density(tb, args.top_frac).to_dict()}}
        _emit(out, args.out)
        if args.csv:
            rows = ["metric,value"]
            for kind, vals in (("geometry", out["geometry"]), ("density.a", out["density"]["a"]),
                               ("density.b", out["density"]["b"])):
                for key, val in sorted(vals.items()):
                    for i, v in enumerate(val if isinstance(val, list) else [val]):
                        suffix = f"[{i}]" if isinstance(val, list) else ""
                        rows.append(f"{kind}.{key}{suffix},{v!r}")
            atomic_write_bytes(args.csv, ("\n".join(rows) + "\n").encode())
    return run


def _load_report(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    try:
        return json.loads(_need_file(p).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None


def cmd_report(args):
    reports = [_load_report(p) for p in args.inputs]
    hashes = sorted({r.get("config_hash") for r in reports})
    if len(hashes) != 1:
        raise ConfigError(f"refusing to aggregate reports with different config hashes: {hashes}")

    agg = aggregate_reports(reports)

    def run():
        out = Path(args.out)
        atomic_write_bytes(out / "report.json", dump_report(agg).encode())
        atomic_write_bytes(out / "report.csv", report_csv(agg).encode())
        _emit(agg["four_way_table"], None)
    return run


def cmd_run(args):
    raw = _read_config(args.config)
    if args.seeds is not None:
        raw["seeds"] = list(args.seeds)
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    if args.no_defense:
        raw["defense_enabled"] = False
    if args.no_ablation:
        raw["ablation"] = False
    cfg = ExperimentConfig.from_dict(raw)

    def run():
        report = run_pipeline(cfg)
        _emit({"config_hash": report["config_hash"], "output_dir": cfg.output_dir,
               "four_way_table": report["four_way_table"]}, None)
    return run


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mergeproof", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub_ = ap.add_subparsers(dest="command", required=True)

    p = sub_.add_parser("gen-data", help="draw a synthetic task split to CSV")
    p.add_argument("--config")
    p.add_argument("--task", choices=("pre", "def", "fr"))
    p.add_argument("--generator", choices=GENERATORS)
    p.add_argument("--dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--transform")
    p.add_argument("--layout-seed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-seed", type=int, default=0, help="added to the task seed")
    p.add_argument("--noise", type=float)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub_.add_parser("pretrain", help="train a fresh MLP")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden-dims", type=_csv_ints)
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.add_argument("--init-seed", type=int, default=0)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub_.add_parser("finetune", help="continue training from a base checkpoint")
    p.add_argument("--config")
    p.add_argument("--task", choices=("def", "fr"), default="def")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub_.add_parser("protect", help="apply the two-stage defense")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--pre", required=True)
    p.add_argument("--train")
    p.add_argument("--val")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--stage1-only", dest="stages", action="store_const", const="stage1")
    g.add_argument("--stage2-only", dest="stages", action="store_const", const="stage2")
    g.add_argument("--both", dest="stages", action="store_const", const="both")
    p.set_defaults(stages="both")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--k-prime", type=float)
    p.add_argument("--exclude", action="append", help="glob of layers never perturbed (repeatable)")
    _add_train_flags(p)
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_protect)

    p = sub_.add_parser("merge", help="merge models that share a base")
    p.add_argument("--config")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--keep-frac", type=float)
    p.add_argument("--drop-p", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ada-steps", type=int)
    p.add_argument("--ada-lr", type=float)
    p.add_argument("--unlabeled")
    p.add_argument("--base", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub_.add_parser("attack", help="run an adaptive attack on a protected model")
    p.add_argument("kind", choices=("unmask", "graderase"))
    p.add_argument("--config")
    p.add_argument("--pre", required=True)
    p.add_argument("--protected", required=True)
    p.add_argument("--fr")
    p.add_argument("--method", choices=METHODS, default="ta")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--unmask-lambda", type=float)
    p.add_argument("--merged")
    p.add_argument("--data")
    p.add_argument("--frac", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-data", nargs="+", help="CSV sets for the before/after accuracy report")
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub_.add_parser("eval", help="accuracy, loss and entropy of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub_.add_parser("analyze", help="task-vector geometry and density")
    p.add_argument("--pre", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--top-frac", type=float, default=0.01)
    p.add_argument("--out")
    p.add_argument("--csv", help="also write flat metric,value rows here")
    p.set_defaults(fn=cmd_analyze)

    p = sub_.add_parser("report", help="aggregate pipeline reports from one config")
    p.add_argument("inputs", nargs="+", help="report.json files or run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub_.add_parser("run", help="run the whole pipeline from a config ('fixture' for the shipped one)")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_csv_ints)
    p.add_argument("--output-dir")
    p.add_argument("--no-defense", action="store_true")
    p.add_argument("--no-ablation", action="store_true")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        action = args.fn(args)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # unreadable inputs are a failure of this stage
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    try:
        action()
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
