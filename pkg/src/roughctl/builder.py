"""Unaligned dataset construction: scale sweep, automated filtering and persistence."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import SweepConfig
from .control import pyramid
from .io import load_gray_png, load_mask_png, load_rgb_png, save_gray_png, save_mask_png, save_rgb_png, to_uint8
from .model import ControlledDiffusion, sample, to_unit
from .oracle import Oracle
from .shapes import (DEFAULT_HIERARCHY, ClassHierarchy, MaskPair, ShapeSpec, compute_masks, dilate,
                     extract_condition, random_spec, render, sample_alternate_class, segment)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "roughctl.unaligned/1"


def quantize_condition(cond: np.ndarray) -> np.ndarray:
    """Condition maps are stored as 8-bit; quantise once so saved and in-memory copies agree."""
    return to_uint8(cond)


def sweep_alpha_map(m_init: np.ndarray, alpha: float, radius: int) -> np.ndarray:
    """Image-resolution scale map: ``alpha`` inside the dilated object, exactly 1.0 elsewhere."""
    region = dilate(m_init, radius)
    return np.where(region, alpha, 1.0)


@dataclass
class SweepRequest:
    condition: np.ndarray   # [H, W] float in [0, 1]
    cls_alt: int
    m_init: np.ndarray
    seed: int


def sweep_generate_batch(model: ControlledDiffusion, requests: Sequence[SweepRequest], cfg: SweepConfig
                         ) -> list[list[tuple[float, np.ndarray]]]:
    """Run the alpha grid for several requests in one batch; images come back in [0, 1]."""
    if len(cfg.alpha_grid) == 0:
        raise ValueError("empty alpha grid")
    if not requests:
        return []
    grid = list(cfg.alpha_grid)
    conds, classes, seeds, maps = [], [], [], []
    for req in requests:
        for a in grid:
            conds.append(req.condition)
            classes.append(req.cls_alt)
            seeds.append(req.seed)
            maps.append(sweep_alpha_map(req.m_init, a, cfg.dilation_radius))
    dtype = next(model.parameters()).dtype
    cond = torch.as_tensor(np.stack(conds)[:, None], dtype=dtype)
    alpha_img = torch.as_tensor(np.stack(maps)[:, None], dtype=dtype)
    images = to_unit(sample(model, classes, seeds, cond=cond, scale=pyramid(alpha_img, model.cfg),
                            steps=cfg.sample_steps))
    out, k = [], 0
    for _ in requests:
        out.append([(a, images[k + j]) for j, a in enumerate(grid)])
        k += len(grid)
    return out


def sweep_generate(model, c_rough, cls_alt, m_init, cfg: SweepConfig, seed: int):
    """One image per grid value, all from the same seed so differences come from alpha alone."""
    return sweep_generate_batch(model, [SweepRequest(c_rough, cls_alt, m_init, seed)], cfg)[0]


@dataclass
class FilterResult:
    alpha: float
    image: np.ndarray
    masks: MaskPair
    class_conf: float
    bg_change: float
    candidate_scores: list[dict] = field(default_factory=list)


def background_change(image: np.ndarray, source: np.ndarray, region: np.ndarray) -> float:
    """Mean absolute pixel change outside ``region``."""
    outside = ~region
    if not outside.any():
        return 0.0
    return float(np.abs(np.asarray(image) - np.asarray(source))[:, outside].mean())


def auto_filter(candidates, cls_alt: int, m_init: np.ndarray, source_image: np.ndarray,
                oracle: Oracle, cfg: SweepConfig) -> FilterResult | None:
    """Highest-alpha candidate whose class confidence and background stability both pass."""
    if not candidates:
        return None
    ordered = sorted(candidates, key=lambda c: -c[0])
    confs = oracle.confidence(np.stack([img for _, img in ordered]), cls_alt)
    scores = []
    chosen = None
    for (alpha, img), conf in zip(ordered, confs):
        m_alt = segment(img)
        region = dilate(m_init | m_alt, cfg.dilation_radius)
        change = background_change(img, source_image, region)
        ok = conf >= cfg.tau_cls and change <= cfg.tau_bg
        scores.append({"alpha": alpha, "class_conf": round(float(conf), 6),
                       "bg_change": round(change, 6), "pass": bool(ok)})
        if ok and chosen is None:
            chosen = FilterResult(alpha, img, compute_masks(m_init, m_alt), float(conf), change)
    if chosen is not None:
        chosen.candidate_scores = scores
    return chosen


@dataclass
class UnalignedSample:
    sample_id: int
    kind: str
    source_cls: int
    cls_alt: int
    chosen_alpha: float
    condition: np.ndarray   # uint8 [H, W]
    target: np.ndarray      # uint8 [3, H, W]
    m_init: np.ndarray
    m_alt: np.ndarray
    m_conflict: np.ndarray
    m_bg: np.ndarray
    seed: int
    source_spec: dict
    scores: dict = field(default_factory=dict)

    @property
    def c_rough(self) -> np.ndarray:
        return self.condition.astype(np.float64) / 255.0

    def same_as(self, other: "UnalignedSample") -> bool:
        arrays = ("condition", "target", "m_init", "m_alt", "m_conflict", "m_bg")
        scalars = ("sample_id", "kind", "source_cls", "cls_alt", "chosen_alpha", "seed", "source_spec", "scores")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) and
                   getattr(self, a).dtype == getattr(other, a).dtype for a in arrays) and \
            all(getattr(self, s) == getattr(other, s) for s in scalars)


@dataclass
class Attempt:
    spec: ShapeSpec
    source_image: np.ndarray
    m_init: np.ndarray
    condition: np.ndarray
    cls_alt: int
    seed: int


@dataclass
class BuildStats:
    attempts: int = 0
    accepted: int = 0
    rejected: int = 0
    alpha_histogram: dict = field(default_factory=dict)

    @property
    def pass_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    def to_dict(self) -> dict:
        return {"attempts": self.attempts, "accepted": self.accepted, "rejected": self.rejected,
                "pass_rate": round(self.pass_rate, 6),
                "alpha_histogram": {str(k): v for k, v in sorted(self.alpha_histogram.items(), reverse=True)}}


@dataclass
class UnalignedDataset:
    samples: list[UnalignedSample]
    stats: BuildStats
    kind: str
    seed: int
    status: str = "complete"
    sweep: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def subset(self, n: int) -> "UnalignedDataset":
        return UnalignedDataset(self.samples[:n], self.stats, self.kind, self.seed, self.status, self.sweep)


def _draw_attempt(rng: np.random.Generator, kind: str, hierarchy: ClassHierarchy, size: int,
                  same_class: bool) -> Attempt:
    cls = int(rng.choice(hierarchy.classes))
    spec = random_spec(cls, rng, size=size)
    image, m = render(spec)
    cond = quantize_condition(extract_condition(image, m, kind))
    alt = cls if same_class else sample_alternate_class(cls, hierarchy, rng)
    seed = int(rng.integers(0, 2 ** 31 - 1))
    return Attempt(spec, image, m, cond, alt, seed)


def build_dataset(model: ControlledDiffusion, oracle: Oracle, n_target: int, kind: str, cfg: SweepConfig,
                  seed: int, max_attempts: int | None = None, hierarchy: ClassHierarchy = DEFAULT_HIERARCHY,
                  same_class: bool = False, chunk: int = 8, progress=None) -> UnalignedDataset:
    """Sweep and filter random (condition, alternate class) pairs until ``n_target`` are accepted.

    Stops with ``status="partial"`` when ``max_attempts`` is exhausted.
    """
    rng = np.random.default_rng(seed)
    max_attempts = max_attempts if max_attempts is not None else max(10, 5 * n_target)
    stats = BuildStats()
    samples: list[UnalignedSample] = []
    size = model.cfg.image_size
    while len(samples) < n_target and stats.attempts < max_attempts:
        batch = [_draw_attempt(rng, kind, hierarchy, size, same_class)
                 for _ in range(min(chunk, max_attempts - stats.attempts))]
        reqs = [SweepRequest(a.condition / 255.0, a.cls_alt, a.m_init, a.seed) for a in batch]
        for att, cands in zip(batch, sweep_generate_batch(model, reqs, cfg)):
            if len(samples) >= n_target:
                break
            stats.attempts += 1
            res = auto_filter(cands, att.cls_alt, att.m_init, att.source_image, oracle, cfg)
            if res is None:
                stats.rejected += 1
                continue
            stats.accepted += 1
            stats.alpha_histogram[res.alpha] = stats.alpha_histogram.get(res.alpha, 0) + 1
            samples.append(UnalignedSample(
                sample_id=len(samples), kind=kind, source_cls=att.spec.class_id, cls_alt=att.cls_alt,
                chosen_alpha=float(res.alpha), condition=att.condition, target=to_uint8(res.image),
                m_init=res.masks.m_init, m_alt=res.masks.m_alt, m_conflict=res.masks.m_conflict,
                m_bg=res.masks.m_bg, seed=att.seed, source_spec=json.loads(json.dumps(att.spec.to_dict())),
                scores={"class_conf": round(res.class_conf, 6), "bg_change": round(res.bg_change, 6)},
            ))
        if progress is not None:
            progress(stats)
    status = "complete" if len(samples) >= n_target else "partial"
    if status == "partial":
        log.warning("dataset target %d unreachable: %d accepted after %d attempts",
                    n_target, len(samples), stats.attempts)
    return UnalignedDataset(samples, stats, kind, seed, status, _sweep_dict(cfg))


def _sweep_dict(cfg: SweepConfig) -> dict:
    return {"alpha_grid": list(cfg.alpha_grid), "dilation_radius": cfg.dilation_radius,
            "tau_cls": cfg.tau_cls, "tau_bg": cfg.tau_bg, "sample_steps": cfg.sample_steps}


FILES = ("condition", "target", "m_init", "m_alt", "m_conflict", "m_bg")


def save_dataset(ds: UnalignedDataset, out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        sub = out / "samples" / f"{s.sample_id:05d}"
        sub.mkdir(parents=True, exist_ok=True)
        save_gray_png(sub / "condition.png", s.condition)
        save_rgb_png(sub / "target.png", s.target)
        for name in FILES[2:]:
            save_mask_png(sub / f"{name}.png", getattr(s, name))
        entries.append({
            "id": s.sample_id, "kind": s.kind, "source_cls": s.source_cls, "cls_alt": s.cls_alt,
            "chosen_alpha": s.chosen_alpha, "seed": s.seed, "source_spec": s.source_spec,
            "scores": s.scores,
            "files": {name: f"samples/{s.sample_id:05d}/{name}.png" for name in FILES},
        })
    manifest = {"schema": MANIFEST_SCHEMA, "kind": ds.kind, "seed": ds.seed, "status": ds.status,
                "sweep": ds.sweep, "stats": ds.stats.to_dict(), "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(root: Path) -> UnalignedDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{root}: not an unaligned dataset manifest")
    samples = []
    for e in manifest["samples"]:
        f = {k: root / v for k, v in e["files"].items()}
        samples.append(UnalignedSample(
            sample_id=e["id"], kind=e["kind"], source_cls=e["source_cls"], cls_alt=e["cls_alt"],
            chosen_alpha=e["chosen_alpha"], condition=load_gray_png(f["condition"]),
            target=load_rgb_png(f["target"]), m_init=load_mask_png(f["m_init"]),
            m_alt=load_mask_png(f["m_alt"]), m_conflict=load_mask_png(f["m_conflict"]),
            m_bg=load_mask_png(f["m_bg"]), seed=e["seed"], source_spec=e["source_spec"],
            scores=e["scores"],
        ))
    st = manifest["stats"]
    stats = BuildStats(st["attempts"], st["accepted"], st["rejected"],
                       {float(k): v for k, v in st["alpha_histogram"].items()})
    return UnalignedDataset(samples, stats, manifest["kind"], manifest["seed"], manifest["status"],
                            manifest["sweep"])
