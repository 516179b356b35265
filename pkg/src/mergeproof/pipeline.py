"""End-to-end experiment: data -> pretrain -> finetune -> protect -> merge -> attack -> evaluate."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .analysis import density, geometry, stage1_noise_stats
from .attacks import estimate_disturbance, graderase_retrain, unmask
from .config import ExperimentConfig, canonical_json
from .data import Dataset
from .defense import protect
from .merging import MergeSpec, merge
from .params import ParamSet, atomic_write_bytes, load_checkpoint, save_checkpoint, sub
from .toymodels import ModelSpec, evaluate, init_model, train

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def tag_checkpoint(p: ParamSet, spec: ModelSpec, cfg_hash: str, role: str,
                   parents: tuple[ParamSet, ...] = ()) -> ParamSet:
    return p.with_meta(role=role, config_hash=cfg_hash, model_spec=canonical_json(spec.to_dict()),
                       parents=",".join(q.fingerprint() for q in parents))


class _Run:
    """State for a single seed; every stage writes its checkpoints before the next starts."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out_dir: Path):
        self.cfg, self.seed, self.dir = cfg, seed, out_dir
        self.spec = cfg.model
        self.models: dict[str, ParamSet] = {}
        self.extras: dict = {}

    def stage(self, name, fn):
        log.info("seed %d: %s", self.seed, name)
        try:
            return fn()
        except Exception as exc:
            raise StageError(name, exc) from exc

    def keep(self, role: str, p: ParamSet, *parents: ParamSet) -> ParamSet:
        p = tag_checkpoint(p, self.spec, self.cfg.hash, role, parents)
        save_checkpoint(p, self.dir / f"{role}.mgf")
        self.models[role] = p
        return p

    def tcfg(self, tc):
        return replace(tc, seed=tc.seed + self.seed)

    def data(self):
        d, C = self.spec.input_dim, self.spec.num_classes
        self.ds: dict[str, dict[str, Dataset]] = {}
        for task, ts in self.cfg.tasks.items():
            splits = ("train",) if task == "pre" else SPLITS
            self.ds[task] = {s: ts.build(d, C, s, self.seed, task) for s in splits}
        self.extras["datasets"] = {f"{t}/{s}": ds.fingerprint() for t, v in self.ds.items() for s, ds in v.items()}

    def pretrain(self):
        init = init_model(self.spec, self.seed)
        pre = train(self.spec, init, self.ds["pre"]["train"], self.tcfg(self.cfg.pretrain))
        self.keep("theta_pre", pre)

    def finetune(self):
        pre = self.models["theta_pre"]
        for task in ("def", "fr"):
            tc = self.cfg.finetune_def if task == "def" else self.cfg.finetune_fr
            self.keep(f"theta_{task}", train(self.spec, pre, self.ds[task]["train"], self.tcfg(tc)), pre)

    def protect(self):
        cfg, pre, dm = self.cfg.defense, self.models["theta_pre"], self.models["theta_def"]
        cfg = replace(cfg, stage1_train=self.tcfg(cfg.stage1_train))
        variants = {"theta_hat_def": cfg}
        if self.cfg.ablation:
            variants["theta_hat_def_stage1"] = replace(cfg, stage2=False)
            variants["theta_hat_def_stage2"] = replace(cfg, stage1=False)
        reports = {}
        for role, vcfg in variants.items():
            res = protect(self.spec, dm, pre, self.ds["def"]["train"], self.ds["def"]["val"], vcfg)
            self.keep(role, res.params, dm, pre)
            reports[role] = res.report
        self.extras["defense"] = reports

    def _merge(self, ms: MergeSpec, model: ParamSet):
        pre = self.models["theta_pre"]
        ms = ms if ms.seed is None else replace(ms, seed=ms.seed + self.seed)
        unlabeled = None
        if ms.method == "adamerging":
            n = ms.ada.unlabeled_n
            parts = [self.ds[t]["val"].subset(np.arange(min(n, len(self.ds[t]["val"])))) for t in ("def", "fr")]
            unlabeled = Dataset(np.concatenate([p.inputs for p in parts]),
                                np.concatenate([p.labels for p in parts]), self.spec.num_classes, "val", "unlabeled")
        return merge(ms, pre, [model, self.models["theta_fr"]], unlabeled=unlabeled, model_spec=self.spec)

    def merges(self):
        fr = self.models["theta_fr"]
        sources = {"": "theta_def"}
        if self.cfg.defense_enabled:
            sources["hat_"] = "theta_hat_def"
            if self.cfg.ablation:
                sources["hat_stage1_"] = "theta_hat_def_stage1"
                sources["hat_stage2_"] = "theta_hat_def_stage2"
        for ms in self.cfg.merges:
            for prefix, src in sources.items():
                m = self.models[src]
                self.keep(f"{prefix}merge_{ms.method}", self._merge(ms, m), m, fr)

    def attacks(self):
        ac, pre, hat, fr = self.cfg.attacks, self.models["theta_pre"], self.models["theta_hat_def"], self.models["theta_fr"]
        ms = self.cfg.merges[0]
        un = unmask(pre, hat, fr, ms, ac.unmask_lambda)
        self.keep(f"attack_unmask_{ms.method}", un, hat, fr)
        hm = self.models[f"hat_merge_{ms.method}"]
        v = estimate_disturbance(hat, pre, ac.disturb_estimator)
        ge = replace(ac.graderase, seed=ac.graderase.seed + self.seed)
        subset = self.ds["def"]["train"].head_fraction(ge.retrain_data_frac, ge.seed)
        res = graderase_retrain(self.spec, hm, v, subset, ge)
        self.keep(f"attack_graderase_{ms.method}", res.params, hm)
        self.extras["attacks"] = {
            "unmask": {"merge": ms.to_dict(), "unmask_lambda": ac.unmask_lambda,
                       "before": f"hat_merge_{ms.method}", "after": f"attack_unmask_{ms.method}"},
            "graderase": {"config": asdict(ge), "disturb_estimator": ac.disturb_estimator,
                          "steps": res.steps, "max_relative_residual": res.max_relative_residual,
                          "retrain_samples": len(subset),
                          "before": f"hat_merge_{ms.method}", "after": f"attack_graderase_{ms.method}"},
        }

    def evaluate(self):
        split = self.cfg.eval_split
        tasks = {"T_def": self.ds["def"][split], "T_fr": self.ds["fr"][split]}
        # without the defense only the merged models are of interest
        roles = [r for r in self.models if self.cfg.defense_enabled or r.startswith("merge_")]
        self.evals = {role: {t: evaluate(self.spec, self.models[role], ds).to_dict() for t, ds in tasks.items()}
                      for role in roles}

    def analyze(self):
        pre = self.models["theta_pre"]
        tau = {role: sub(self.models[role], pre) for role in self.models if role.startswith("theta_") and role != "theta_pre"}
        lam = self.cfg.merges[0].lam
        out = {"geometry": {}, "density": {}}
        for role in tau:
            if role != "theta_fr":
                try:
                    out["geometry"][role] = geometry(tau[role], tau["theta_fr"], lam, lam).to_dict()
                except ValueError as exc:
                    out["geometry"][role] = {"error": str(exc)}
            try:
                out["density"][role] = density(tau[role]).to_dict()
            except ValueError as exc:
                out["density"][role] = {"error": str(exc)}
        self.extras["analysis"] = out

    def execute(self) -> dict:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stage("gen-data", self.data)
        self.stage("pretrain", self.pretrain)
        self.stage("finetune", self.finetune)
        if self.cfg.defense_enabled:
            self.stage("protect", self.protect)
        self.stage("merge", self.merges)
        if self.cfg.defense_enabled:
            self.stage("attack", self.attacks)
        self.stage("eval", self.evaluate)
        for rep in self.extras.get("attacks", {}).values():
            rep["accuracy"] = {task: {"before": self.evals[rep["before"]][task]["accuracy"],
                                      "after": self.evals[rep["after"]][task]["accuracy"]}
                               for task in self.evals[rep["after"]]}
        self.stage("analyze", self.analyze)
        return {"seed": self.seed,
                "checkpoints": {role: {"file": f"seed_{self.seed}/{role}.mgf", "fingerprint": p.fingerprint(),
                                       "parents": p.meta.get("parents", "")}
                                for role, p in self.models.items()},
                "eval": self.evals, **self.extras}


def four_way_table(runs: list[dict], methods: list[str]) -> dict:
    """Mean T_def accuracy of {undefended, protected} x {standalone, merged} per merge method."""
    def mean(role):
        vals = [r["eval"][role]["T_def"]["accuracy"] for r in runs if role in r["eval"]]
        return float(np.mean(vals)) if vals else None
    return {m: {"theta_def": {"standalone": mean("theta_def"), "merged": mean(f"merge_{m}")},
                "theta_hat_def": {"standalone": mean("theta_hat_def"), "merged": mean(f"hat_merge_{m}")}}
            for m in methods}


def summarize(runs: list[dict]) -> dict:
    roles = sorted({role for r in runs for role in r["eval"]})
    out = {}
    for role in roles:
        out[role] = {}
        for task in ("T_def", "T_fr"):
            accs = [r["eval"][role][task]["accuracy"] for r in runs if role in r["eval"]]
            out[role][task] = {"mean_accuracy": float(np.mean(accs)), "std_accuracy": float(np.std(accs))}
    return out


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "seed", "model", "task", "accuracy", "loss", "entropy", "n"])
    for run in report["runs"]:
        for role in sorted(run["eval"]):
            for task in sorted(run["eval"][role]):
                e = run["eval"][role][task]
                w.writerow([report["config_hash"], run["seed"], role, task,
                            repr(e["accuracy"]), repr(e["loss"]), repr(e["entropy"]), e["n"]])
    return buf.getvalue()


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def run_pipeline(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Run every seed, persist checkpoints and ``report.json`` / ``report.csv``; return the report."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "config.json", dump_report(cfg.raw).encode())
    runs = []
    for s in cfg.seeds:
        try:
            runs.append(_Run(cfg, s, out / f"seed_{s}").execute())
        except StageError as exc:
            failure = {"config_hash": cfg.hash, "seed": s, "stage": exc.stage, "error": str(exc.__cause__),
                       "completed_seeds": [r["seed"] for r in runs]}
            atomic_write_bytes(out / "failed.json", dump_report(failure).encode())
            raise
    methods = [m.method for m in cfg.merges]
    report = {
        "config_hash": cfg.hash,
        "seeds": list(cfg.seeds),
        "defense_enabled": cfg.defense_enabled,
        "eval_split": cfg.eval_split,
        "runs": runs,
        "summary": summarize(runs),
        "four_way_table": four_way_table(runs, methods) if cfg.defense_enabled else None,
    }
    if cfg.defense_enabled and cfg.ablation:
        # per-coordinate drift that Stage 1 adds to the task vector, across seeds
        tau = [load_checkpoint(out / r["checkpoints"][k]["file"]) for r in runs
               for k in ("theta_def", "theta_hat_def_stage1")]
        report["stage1_noise"] = stage1_noise_stats(tau[1::2], tau[0::2])
    failed = out / "failed.json"
    if failed.exists():
        failed.unlink()
    atomic_write_bytes(out / "report.json", dump_report(report).encode())
    atomic_write_bytes(out / "report.csv", report_csv(report).encode())
    atomic_write_bytes(out / "analysis.csv", analysis_csv(report).encode())
    return report


def analysis_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "seed", "model", "metric", "value"])
    for run in report["runs"]:
        an = run.get("analysis", {})
        for kind in ("geometry", "density"):
            for role in sorted(an.get(kind, {})):
                for key, val in sorted(an[kind][role].items()):
                    if isinstance(val, (int, float)) and not isinstance(val, bool):
                        w.writerow([report["config_hash"], run["seed"], role, f"{kind}.{key}", repr(val)])
    return buf.getvalue()


def aggregate_reports(reports: list[dict]) -> dict:
    """Combine reports from separate runs of one config; refuse mixed config hashes."""
    if not reports:
        raise ValueError("no reports to aggregate")
    hashes = sorted({r["config_hash"] for r in reports})
    if len(hashes) > 1:
        raise ValueError(f"refusing to aggregate reports from different configs: {', '.join(hashes)}")
    runs = sorted((run for r in reports for run in r["runs"]), key=lambda run: run["seed"])
    seeds = [run["seed"] for run in runs]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds across reports: {seeds}")
    methods = sorted({k.split("merge_", 1)[1] for run in runs for k in run["eval"] if k.startswith("merge_")})
    defended = any("theta_hat_def" in run["eval"] for run in runs)
    return {"config_hash": hashes[0], "seeds": seeds, "runs": runs, "summary": summarize(runs),
            "four_way_table": four_way_table(runs, methods) if defended else None}
