"""Metrics, scale baselines, the alpha sweep and the predictor ablation harness.

Class confidence comes from the oracle classifier and structure distance is
1 - IoU between the generated silhouette and the condition's object region.
Both are small-scale surrogates and reports say so.
"""

from __future__ import annotations

import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .builder import background_change, quantize_condition
from .config import EvalConfig, SweepConfig
from .csp import ScalePredictor
from .io import save_rgb_png, to_uint8
from .model import PREDICTOR, ControlledDiffusion, sample, to_unit
from .oracle import Oracle
from .shapes import (DEFAULT_HIERARCHY, ClassHierarchy, aligned_alternate, condition_support, conflict_ratio,
                     dilate, extract_condition, random_spec, render, sample_alternate_class, segment)

log = logging.getLogger(__name__)

LEVELS = ("significant", "mild", "none")
LEVEL_SHARES = {"significant": 0.7, "mild": 0.2, "none": 0.1}
SURROGATE_NOTE = ("class_confidence: oracle shape classifier probability; "
                  "structure_distance: 1 - silhouette IoU with the condition support")


class MissingCheckpoint(RuntimeError):
    pass


@dataclass
class EvalItem:
    item_id: int
    kind: str
    source_cls: int
    cls_alt: int
    conflict_level: str
    condition: np.ndarray      # uint8 [H, W]
    m_init: np.ndarray
    m_expected: np.ndarray     # alternate class rendered at the source pose
    source_image: np.ndarray   # [3, H, W] in [0, 1]
    seed: int

    @property
    def c_rough(self) -> np.ndarray:
        return self.condition / 255.0

    @property
    def multi_region(self) -> bool:
        _, count = ndimage.label(self.m_init ^ self.m_expected)
        return count >= 2


def level_quotas(n: int) -> dict[str, int]:
    sig = round(n * LEVEL_SHARES["significant"])
    mild = round(n * LEVEL_SHARES["mild"])
    return {"significant": sig, "mild": mild, "none": n - sig - mild}


def conflict_level(m_init: np.ndarray, m_expected: np.ndarray, same_class: bool, mild_threshold: float) -> str:
    if same_class:
        return "none"
    return "significant" if conflict_ratio(m_init, m_expected) >= mild_threshold else "mild"


def build_eval_set(n: int, kind: str, seed: int, cfg: EvalConfig = EvalConfig(), size: int = 32,
                   hierarchy: ClassHierarchy = DEFAULT_HIERARCHY, max_draws: int = 100_000) -> list[EvalItem]:
    """Items split 70/20/10 into significant, mild and no conflict.

    The level is the XOR/union ratio between the source silhouette and the
    alternate class drawn at the same pose.
    """
    rng = np.random.default_rng(seed)
    quotas = level_quotas(n)
    items: list[EvalItem] = []
    draws = 0
    while len(items) < n:
        draws += 1
        if draws > max_draws:
            raise RuntimeError(f"could not fill conflict quotas {quotas} in {max_draws} draws")
        open_levels = [lv for lv in LEVELS if quotas[lv] > 0]
        same = open_levels == ["none"] or ("none" in open_levels and rng.uniform() < 0.1)
        cls = int(rng.choice(hierarchy.classes))
        spec = random_spec(cls, rng, size=size)
        alt = cls if same else sample_alternate_class(cls, hierarchy, rng)
        item_seed = int(rng.integers(0, 2 ** 31 - 1))
        image, m = render(spec)
        expected = render(aligned_alternate(spec, alt))[1]
        level = conflict_level(m, expected, same, cfg.mild_threshold)
        if quotas[level] == 0:
            continue
        quotas[level] -= 1
        cond = quantize_condition(extract_condition(image, m, kind))
        items.append(EvalItem(len(items), kind, cls, alt, level, cond, m, expected, image, item_seed))
    return items


def class_confidence(oracle: Oracle, images, cls) -> float:
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("no images to score")
    return float(oracle.confidence(images, cls).mean())


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def structure_distance(generated: np.ndarray, c_rough: np.ndarray, kind: str) -> float:
    support = condition_support(c_rough, kind)
    if not support.any():
        raise ValueError("condition has empty object support")
    return 1.0 - iou(segment(generated), support)


# -- generation -----------------------------------------------------------------


@dataclass
class Method:
    """A named way of setting the control scale; ``predictor`` is required for ``scale="predictor"``."""
    name: str
    scale: object = 1.0
    predictor: ScalePredictor | None = None


def item_noise_seed(item: EvalItem, seed: int) -> int:
    return item.seed * 1000 + int(seed)


def generate(model: ControlledDiffusion, items: Sequence[EvalItem], method: Method, seed: int,
             steps: int, batch_size: int = 64, on_step: Callable | None = None) -> np.ndarray:
    """Images in [0, 1] for every item; the attached predictor is swapped in for the call only."""
    if method.scale == PREDICTOR and method.predictor is None:
        raise MissingCheckpoint(f"method {method.name!r} needs a trained predictor")
    saved = model.predictor
    model.predictor = method.predictor
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            cond = torch.as_tensor(np.stack([it.c_rough for it in chunk])[:, None], dtype=dtype)
            imgs = sample(model, [it.cls_alt for it in chunk], [item_noise_seed(it, seed) for it in chunk],
                          cond=cond, scale=method.scale, steps=steps, on_step=on_step)
            out.append(to_unit(imgs))
    finally:
        model.predictor = saved
    return np.concatenate(out) if out else np.zeros((0,))


def _summary(rows: list[dict]) -> dict:
    if not rows:
        return {"n": 0, "class_confidence": None, "structure_distance": None}
    return {"n": len(rows),
            "class_confidence": round(float(np.mean([r["class_confidence"] for r in rows])), 6),
            "structure_distance": round(float(np.mean([r["structure_distance"] for r in rows])), 6)}


@dataclass
class MetricReport:
    method: str
    class_confidence: float
    structure_distance: float
    by_level: dict
    multi_region: dict
    seeds: list
    rows: list = field(default_factory=list)
    note: str = SURROGATE_NOTE

    @classmethod
    def from_rows(cls, method: str, rows: list[dict], seeds) -> "MetricReport":
        overall = _summary(rows)
        by_level = {lv: _summary([r for r in rows if r["level"] == lv]) for lv in LEVELS}
        multi = _summary([r for r in rows if r["multi_region"] and r["level"] != "none"])
        return cls(method, overall["class_confidence"], overall["structure_distance"], by_level, multi,
                   list(seeds), rows)

    def to_dict(self) -> dict:
        return asdict(self)


def score_images(items: Sequence[EvalItem], images: np.ndarray, oracle: Oracle, seed: int) -> list[dict]:
    confs = oracle.confidence(images, [it.cls_alt for it in items])
    return [{"item": it.item_id, "seed": int(seed), "level": it.conflict_level,
             "multi_region": bool(it.multi_region),
             "class_confidence": round(float(c), 6),
             "structure_distance": round(structure_distance(img, it.c_rough, it.kind), 6)}
            for it, img, c in zip(items, images, confs)]


def evaluate_method(model: ControlledDiffusion, items: Sequence[EvalItem], method: Method, oracle: Oracle,
                    cfg: EvalConfig) -> MetricReport:
    rows = []
    for seed in cfg.seeds:
        images = generate(model, items, method, seed, cfg.sample_steps)
        rows += score_images(items, images, oracle, seed)
    return MetricReport.from_rows(method.name, rows, cfg.seeds)


def plausibility(items: Sequence[EvalItem], images: np.ndarray, oracle: Oracle, sweep: SweepConfig) -> np.ndarray:
    """Per image: would it pass the dataset filter (right class, background kept)."""
    confs = oracle.confidence(images, [it.cls_alt for it in items])
    return np.array([conf >= sweep.tau_cls and
                     background_change(img, it.source_image,
                                       dilate(it.m_init | segment(img), sweep.dilation_radius)) <= sweep.tau_bg
                     for it, img, conf in zip(items, images, confs)], dtype=bool)


def alpha_fix_from_passes(passes: dict[float, np.ndarray]) -> tuple[float, dict]:
    """The grid value that is the per-item optimum for the most items.

    An item's optimum is its highest passing alpha, as in the dataset builder.
    Items with no passing alpha do not vote; ties go to the larger alpha.
    """
    grid = sorted(passes, reverse=True)
    n = len(passes[grid[0]])
    votes = {a: 0 for a in grid}
    for i in range(n):
        best = next((a for a in grid if passes[a][i]), None)
        if best is not None:
            votes[best] += 1
    if not any(votes.values()):
        raise ValueError("no alpha passes the filter on any tuning item")
    stats = {float(a): {"pass_rate": round(float(np.mean(passes[a])), 6),
                        "optimal_share": round(votes[a] / n, 6)} for a in grid}
    return float(max(grid, key=lambda a: (votes[a], a))), stats


def select_alpha_fix(model: ControlledDiffusion, tune_items: Sequence[EvalItem], oracle: Oracle,
                     sweep: SweepConfig, cfg: EvalConfig) -> tuple[float, dict]:
    """Fixed scale tuned on a split disjoint from evaluation; see ``alpha_fix_from_passes``."""
    if not tune_items:
        raise ValueError("empty tuning split")
    passes = {}
    for a in sweep.alpha_grid:
        images = generate(model, tune_items, Method(f"alpha={a}", float(a)), cfg.seeds[0], cfg.sample_steps)
        passes[float(a)] = plausibility(tune_items, images, oracle, sweep)
    return alpha_fix_from_passes(passes)


def standard_methods(alpha_fix: float | None, local: ScalePredictor | None,
                     global_: ScalePredictor | None) -> list[Method]:
    missing = [name for name, v in (("alpha_fix", alpha_fix), ("local predictor", local),
                                    ("global predictor", global_)) if v is None]
    if missing:
        raise MissingCheckpoint(f"missing inputs for baselines: {', '.join(missing)}")
    return [Method("alpha=1.0", 1.0), Method(f"fixed alpha={alpha_fix}", float(alpha_fix)),
            Method("global", PREDICTOR, global_), Method("local", PREDICTOR, local)]


def run_baselines(model: ControlledDiffusion, items: Sequence[EvalItem], methods: Sequence[Method],
                  oracle: Oracle, cfg: EvalConfig) -> dict[str, MetricReport]:
    """One report per method over the same items and seeds."""
    return {m.name: evaluate_method(model, items, m, oracle, cfg) for m in methods}


# -- alpha sweep ----------------------------------------------------------------


@dataclass
class SweepReport:
    grid: list
    seed: int
    rows: list            # per alpha: mean class confidence and structure distance
    per_item: list
    panels: int

    def to_dict(self) -> dict:
        return asdict(self)

    def monotone(self, tolerance: float = 0.05) -> bool:
        """Structure distance never drops by more than ``tolerance`` as alpha decreases."""
        sd = [r["structure_distance"] for r in self.rows]
        return all(b >= a - tolerance for a, b in zip(sd, sd[1:]))


def sweep_report(model: ControlledDiffusion, items: Sequence[EvalItem], grid: Sequence[float], seed: int,
                 oracle: Oracle, steps: int, grid_image: Path | None = None) -> SweepReport:
    """Global scale swept over ``grid`` with one seed per item; optional image grid (rows=items)."""
    if not items:
        raise ValueError("no items to sweep")
    columns = []
    per_item = []
    rows = []
    for a in grid:
        images = generate(model, items, Method(f"alpha={a}", float(a)), seed, steps)
        columns.append(images)
        scored = score_images(items, images, oracle, seed)
        for r in scored:
            per_item.append({"alpha": float(a), **r})
        rows.append({"alpha": float(a), **_summary(scored)})
    if grid_image is not None:
        save_rgb_png(grid_image, to_uint8(tile_grid(columns, [it.source_image for it in items])))
    return SweepReport([float(a) for a in grid], int(seed), rows, per_item, len(grid))


def tile_grid(columns: list[np.ndarray], sources: list[np.ndarray] | None = None, pad: int = 2) -> np.ndarray:
    """Tile [n_cols][n_rows, 3, H, W] images into one [3, H', W'] canvas, sources first if given."""
    cols = ([np.stack(sources)] if sources is not None else []) + list(columns)
    n_rows, _, h, w = cols[0].shape
    canvas = np.ones((3, n_rows * (h + pad) + pad, len(cols) * (w + pad) + pad))
    for j, col in enumerate(cols):
        for i, img in enumerate(col):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[:, y:y + h, x:x + w] = img
    return canvas


# -- ablations ------------------------------------------------------------------


@dataclass
class Variant:
    name: str
    n_samples: int
    granularity: str = "local"
    lambda_c: float | None = None


DEFAULT_VARIANTS = (
    Variant("N=500", 500),
    Variant("N=1000", 1000),
    Variant("N=2000", 2000),
    Variant("global", 1000, granularity="global"),
    Variant("lambda_c=0", 1000, lambda_c=0.0),
)


def ablation_suite(model: ControlledDiffusion, variants: Sequence[Variant],
                   train: Callable[[Variant], ScalePredictor], items: Sequence[EvalItem], oracle: Oracle,
                   cfg: EvalConfig, alpha_stats: Callable[[ScalePredictor], dict] | None = None) -> dict:
    """Train (via ``train``) and evaluate every variant; a failing variant is recorded, not fatal."""
    out = {}
    for v in variants:
        try:
            pred = train(v)
            report = evaluate_method(model, items, Method(v.name, PREDICTOR, pred), oracle, cfg).to_dict()
            if alpha_stats is not None:
                report["alpha_masks"] = alpha_stats(pred)
            out[v.name] = {"status": "ok", "variant": asdict(v), "report": report}
        except Exception as exc:  # noqa: BLE001 - one broken variant must not sink the suite
            log.error("variant %s failed: %s", v.name, exc)
            out[v.name] = {"status": "failed", "variant": asdict(v),
                           "error": f"{type(exc).__name__}: {exc}",
                           "traceback": traceback.format_exc(limit=3)}
    return out


# -- report files ---------------------------------------------------------------


def dumps(obj) -> str:
    """Canonical JSON so identical results give identical bytes."""
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def markdown_table(reports: dict[str, MetricReport]) -> str:
    lines = ["| method | class conf | struct dist | significant conf | significant dist | "
             "mild conf | none dist | multi-region conf | multi-region dist |",
             "|---|---|---|---|---|---|---|---|---|"]

    def fmt(x):
        return "-" if x is None else f"{x:.4f}"

    for name, r in reports.items():
        lv = r.by_level
        lines.append(f"| {name} | {fmt(r.class_confidence)} | {fmt(r.structure_distance)} | "
                     f"{fmt(lv['significant']['class_confidence'])} | {fmt(lv['significant']['structure_distance'])} | "
                     f"{fmt(lv['mild']['class_confidence'])} | {fmt(lv['none']['structure_distance'])} | "
                     f"{fmt(r.multi_region['class_confidence'])} | {fmt(r.multi_region['structure_distance'])} |")
    return "\n".join(lines) + f"\n\nSurrogate metrics. {SURROGATE_NOTE}.\n"


def write_reports(reports: dict[str, MetricReport], out_dir: Path, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {"methods": {k: v.to_dict() for k, v in reports.items()}, **(extra or {})}
    (out_dir / "report.json").write_text(dumps(body))
    (out_dir / "report.md").write_text(markdown_table(reports))
    return out_dir / "report.json"
