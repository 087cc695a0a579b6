"""End-to-end run with every stage cached on disk under a key derived from its inputs.

Each stage directory holds a ``stamp.json`` naming the inputs that produced it;
a stage is rebuilt only when that key changes.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .builder import UnalignedDataset, build_dataset, load_dataset, save_dataset
from .config import RunConfig, TrainConfig, to_dict
from .csp import ScalePredictor
from .evaluation import (DEFAULT_VARIANTS, EvalItem, Method, MetricReport, Variant, ablation_suite,
                         build_eval_set, dumps, markdown_table, run_baselines, select_alpha_fix,
                         standard_methods, sweep_report)
from .model import ControlledDiffusion
from .oracle import Oracle, train_oracle_classifier
from .shapes import render_aligned_set
from .training import aligned_tensors, alpha_mask_means, pretrain_aligned, train_predictor, unaligned_tensors

log = logging.getLogger(__name__)

SWEEP_ITEMS = 24


class Pipeline:
    def __init__(self, root: Path, cfg: RunConfig = RunConfig()):
        self.root = Path(root)
        self.cfg = cfg
        self._memo: dict = {}

    # -- cache plumbing ---------------------------------------------------------

    def _fresh(self, name: str, key: dict) -> bool:
        stamp = self.root / name / "stamp.json"
        return stamp.exists() and json.loads(stamp.read_text()).get("key") == key

    def _stamp(self, name: str, key: dict, **info) -> None:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "stamp.json").write_text(dumps({"key": key, **info}))

    def _memoized(self, name, fn):
        if name not in self._memo:
            self._memo[name] = fn()
        return self._memo[name]

    # -- stages -----------------------------------------------------------------

    def base_key(self) -> dict:
        model = to_dict(self.cfg.model)
        model.pop("guidance")   # sampling-time only
        return {"model": model, "pretrain": to_dict(self.cfg.pretrain)}

    def base(self) -> tuple[ControlledDiffusion, str]:
        return self._memoized("base", self._base)

    def _base(self):
        key = self.base_key()
        path = self.root / "base" / "model.pt"
        if not self._fresh("base", key):
            pc = self.cfg.pretrain
            data = render_aligned_set(pc.n_renders, seed=pc.seed, size=self.cfg.model.image_size)
            model = pretrain_aligned(aligned_tensors(data, pc.kind), self.cfg.model, pc,
                                     metrics_log=self.root / "base" / "metrics.jsonl")
            checkpoint.save_model(path, model)
            self._stamp("base", key, checkpoint_hash=checkpoint.file_hash(path))
        return checkpoint.load_model(path, guidance=self.cfg.model.guidance), checkpoint.file_hash(path)

    def oracle(self) -> Oracle:
        return self._memoized("oracle", self._oracle)

    def _oracle(self):
        key = {"image_size": self.cfg.model.image_size, "seed": 0}
        path = self.root / "oracle" / "oracle.pt"
        if not self._fresh("oracle", key):
            oracle = train_oracle_classifier(seed=0, size=self.cfg.model.image_size)
            path.parent.mkdir(parents=True, exist_ok=True)
            oracle.save(path)
            self._stamp("oracle", key, accuracy=oracle.accuracy)
        return Oracle.load(path)

    def _dataset(self, name: str, n: int, seed: int) -> UnalignedDataset:
        model, base_hash = self.base()
        key = {"base": base_hash, "sweep": to_dict(self.cfg.sweep), "kind": self.cfg.pretrain.kind,
               "guidance": self.cfg.model.guidance, "n": n, "seed": seed}
        if not self._fresh(name, key):
            ds = build_dataset(model, self.oracle(), n, self.cfg.pretrain.kind, self.cfg.sweep, seed,
                               progress=lambda s: log.info("%s: %d/%d accepted, %d attempts",
                                                           name, s.accepted, n, s.attempts))
            save_dataset(ds, self.root / name)
            self._stamp(name, key, stats=ds.stats.to_dict(), status=ds.status)
        return load_dataset(self.root / name)

    def dataset(self) -> UnalignedDataset:
        d = self.cfg.data
        return self._memoized("dataset", lambda: self._dataset("dataset", d.n_build, d.build_seed))

    def heldout(self) -> UnalignedDataset:
        d = self.cfg.data
        return self._memoized("heldout", lambda: self._dataset("heldout", d.n_heldout, d.heldout_seed))

    def predictor(self, variant: Variant) -> ScalePredictor:
        return self._memoized(f"predictor:{variant.name}", lambda: self._predictor(variant))

    def train_config(self, variant: Variant) -> TrainConfig:
        tc = self.cfg.train
        return tc if variant.lambda_c is None else replace(tc, lambda_c=variant.lambda_c)

    def _predictor(self, variant: Variant) -> ScalePredictor:
        model, base_hash = self.base()
        tc = self.train_config(variant)
        name = f"predictors/{_slug(variant.name)}"
        data = self.dataset()
        key = {"base": base_hash, "dataset": json.loads((self.root / "dataset" / "stamp.json").read_text())["key"],
               "train": to_dict(tc), "variant": asdict(variant)}
        path = self.root / name / "predictor.pt"
        if not self._fresh(name, key):
            if len(data) < variant.n_samples:
                raise RuntimeError(f"variant {variant.name} needs {variant.n_samples} samples, have {len(data)}")
            work = copy.deepcopy(model) if tc.finetune_control else model
            train_predictor(work, unaligned_tensors(data.subset(variant.n_samples).samples), tc,
                            granularity=variant.granularity, metrics_log=self.root / name / "metrics.jsonl")
            checkpoint.save_predictor(path, work, base_hash, extra={"variant": asdict(variant)})
            work.detach_predictors()
            self._stamp(name, key, checkpoint_hash=checkpoint.file_hash(path))
        checkpoint.load_predictor(path, model, base_hash=base_hash)
        return model.detach_predictors()

    def main_variant(self) -> Variant:
        d = self.cfg.data
        return Variant(f"N={d.n_samples}", d.n_samples)

    def global_variant(self) -> Variant:
        return Variant("global", self.cfg.data.n_samples, granularity="global")

    # -- evaluation -------------------------------------------------------------

    def eval_items(self) -> list[EvalItem]:
        d, e = self.cfg.data, self.cfg.eval
        return self._memoized("eval_items", lambda: build_eval_set(
            e.n_items, self.cfg.pretrain.kind, d.eval_seed, e, size=self.cfg.model.image_size))

    def tune_items(self) -> list[EvalItem]:
        d, e = self.cfg.data, self.cfg.eval
        return self._memoized("tune_items", lambda: build_eval_set(
            e.n_tune, self.cfg.pretrain.kind, d.tune_seed, e, size=self.cfg.model.image_size))

    def alpha_fix(self) -> tuple[float, dict]:
        return self._memoized("alpha_fix", self._alpha_fix)

    def _alpha_fix(self):
        model, base_hash = self.base()
        key = {"base": base_hash, "sweep": to_dict(self.cfg.sweep), "eval": to_dict(self.cfg.eval),
               "guidance": self.cfg.model.guidance,
               "tune_seed": self.cfg.data.tune_seed}
        path = self.root / "alpha_fix" / "stamp.json"
        if not self._fresh("alpha_fix", key):
            best, rates = select_alpha_fix(model, self.tune_items(), self.oracle(), self.cfg.sweep, self.cfg.eval)
            self._stamp("alpha_fix", key, alpha_fix=best, tuning=rates)
        stamp = json.loads(path.read_text())
        return stamp["alpha_fix"], stamp["tuning"]

    def alpha_stats(self, predictor: ScalePredictor) -> dict:
        """Mean predicted alpha under m_conflict and m_bg on the held-out conflicted split."""
        model, _ = self.base()
        model.predictor = predictor
        try:
            data = unaligned_tensors(self.heldout().samples)
            ts = np.linspace(0, model.schedule.num_steps - 1, 8).round().astype(int)
            return {k: round(v, 6) for k, v in alpha_mask_means(model, data, ts, seed=0).items()}
        finally:
            model.predictor = None

    def baselines(self) -> dict[str, MetricReport]:
        return self._memoized("baselines", self._baselines)

    def _baselines(self):
        model, _ = self.base()
        alpha_fix, rates = self.alpha_fix()
        methods = standard_methods(alpha_fix, self.predictor(self.main_variant()),
                                   self.predictor(self.global_variant()))
        reports = run_baselines(model, self.eval_items(), methods, self.oracle(), self.cfg.eval)
        out = self.root / "reports" / "baselines"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps({
            "alpha_fix": alpha_fix, "tuning": rates,
            "methods": {k: v.to_dict() for k, v in reports.items()}}))
        (out / "report.md").write_text(f"alpha_fix = {alpha_fix}\n\n" + markdown_table(reports))
        return reports

    def sweep(self):
        return self._memoized("sweep", self._sweep)

    def _sweep(self):
        model, _ = self.base()
        out = self.root / "reports" / "sweep"
        out.mkdir(parents=True, exist_ok=True)
        items = [it for it in self.eval_items() if it.conflict_level != "none"][:SWEEP_ITEMS]
        rep = sweep_report(model, items, self.cfg.sweep.alpha_grid, self.cfg.eval.seeds[0], self.oracle(),
                           self.cfg.eval.sample_steps, grid_image=out / "grid.png")
        (out / "report.json").write_text(dumps(rep.to_dict()))
        return rep

    def ablations(self, variants=DEFAULT_VARIANTS) -> dict:
        return self._memoized("ablations", lambda: self._ablations(variants))

    def _ablations(self, variants):
        model, _ = self.base()
        result = ablation_suite(model, variants, self.predictor, self.eval_items(), self.oracle(),
                                self.cfg.eval, alpha_stats=self.alpha_stats)
        out = self.root / "reports" / "ablations"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps(result))
        ok = {k: MetricReport(**{f: v["report"][f] for f in MetricReport.__dataclass_fields__})
              for k, v in result.items() if v["status"] == "ok"}
        (out / "report.md").write_text(markdown_table(ok))
        return result

    def run_all(self) -> dict:
        self.base()
        self.oracle()
        self.dataset()
        self.heldout()
        return {"baselines": self.baselines(), "sweep": self.sweep(), "ablations": self.ablations()}


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_").lower()
