"""Two-stage retouch pipeline: gallery ranking, then placement adjustment.

Stage 1 samples candidate backgrounds from a gallery and ranks them by the
verifier's content-consistency probability with the foreground shown at a
neutral pose. Stage 2 runs multi-start gradient ascent on the spatial score
over each of the top-k candidates (in encoder coordinates, where scoring is
cheap) and keeps the best (background, placement) pair, composited at the
background's native resolution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjuster import AscentConfig, adjust_multistart, make_model_scorer
from .imaging import (
    ForegroundPatch,
    Image,
    ParsingMap,
    Placement,
    composite,
    load_image,
    load_parsing,
    prepare_encoder_input,
)
from .verifier import VerifierNet

__all__ = [
    "Gallery",
    "GalleryEntry",
    "RetouchConfig",
    "RetouchReport",
    "gallery_build",
    "load_gallery",
    "placement_to_native",
    "rank_backgrounds",
    "retouch",
    "save_gallery_index",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GalleryEntry:
    id: str
    bg_path: str
    parsing_path: str


@dataclass
class Gallery:
    """Candidate backgrounds with parsing maps, addressed by unique id."""

    entries: list[GalleryEntry]

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("gallery ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, entry_id: str) -> GalleryEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def load(self, entry_id: str) -> tuple[Image, ParsingMap]:
        e = self.entry(entry_id)
        return load_image(e.bg_path), load_parsing(e.parsing_path)


def gallery_build(root) -> tuple[Gallery, list[str]]:
    """Scan ``<root>/<id>/{bg.png,parsing.png}`` pairs into a gallery.

    Entries with a missing parsing map or mismatched extents are skipped and
    reported in the returned rejection list, one message per bad entry.
    """
    rootp = Path(root)
    entries: list[GalleryEntry] = []
    rejections: list[str] = []
    for d in sorted(p for p in rootp.iterdir() if p.is_dir()):
        bg_path = d / "bg.png"
        parsing_path = d / "parsing.png"
        if not bg_path.exists():
            continue
        if not parsing_path.exists():
            rejections.append(f"{d.name}: missing parsing.png")
            continue
        bg = load_image(bg_path)
        pm = load_parsing(parsing_path)
        if (pm.height, pm.width) != (bg.height, bg.width):
            rejections.append(
                f"{d.name}: parsing extent {pm.width}x{pm.height} != "
                f"background extent {bg.width}x{bg.height}"
            )
            continue
        entries.append(GalleryEntry(d.name, str(bg_path), str(parsing_path)))
    if not entries:
        log.warning("gallery at %s is empty", root)
    return Gallery(entries), rejections


def save_gallery_index(gallery: Gallery, path) -> None:
    with open(path, "w") as fh:
        for e in gallery.entries:
            fh.write(
                json.dumps(
                    {"id": e.id, "bg": e.bg_path, "parsing": e.parsing_path},
                    sort_keys=True,
                )
                + "\n"
            )


def load_gallery(path) -> Gallery:
    base = Path(path).parent
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)

        def resolve(p):
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        entries.append(GalleryEntry(rec["id"], resolve(rec["bg"]), resolve(rec["parsing"])))
    return Gallery(entries)


# ---------------------------------------------------------------------------
# Stage 1: ranking
# ---------------------------------------------------------------------------


def _neutral_pose(fg: ForegroundPatch, bg: Image) -> Placement:
    # Fixed stage-1 presentation: centered, sized to half the canvas height.
    return Placement(bg.width / 2.0, bg.height / 2.0, 0.5 * bg.height / fg.height)


def _score_candidates(
    fg: ForegroundPatch,
    gallery: Gallery,
    model: VerifierNet,
    sample_n: int,
    seed,
) -> list[tuple[str, float]]:
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if not 1 <= sample_n <= len(gallery):
        raise ValueError(f"sample_n {sample_n} outside [1, {len(gallery)}]")
    ordered = sorted(gallery.entries, key=lambda e: e.id)
    rng = np.random.default_rng([*_seed_key(seed), 13])
    chosen = sorted(rng.choice(len(ordered), size=sample_n, replace=False).tolist())
    scored = []
    for i in chosen:
        entry = ordered[i]
        bg, parsing = gallery.load(entry.id)
        out = model.verify(fg, _neutral_pose(fg, bg), bg, parsing)
        scored.append((entry.id, out.content_prob))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def _seed_key(seed) -> tuple:
    return (seed,) if isinstance(seed, int) else tuple(seed)


def rank_backgrounds(
    fg: ForegroundPatch,
    gallery: Gallery,
    model: VerifierNet,
    sample_n: int | None = None,
    k: int = 3,
    seed: int = 0,
) -> list[tuple[str, float]]:
    """Top-k (id, content score) pairs, highest first, ties broken by id."""
    if sample_n is None:
        sample_n = min(64, len(gallery))
    if k > sample_n:
        raise ValueError(f"k {k} exceeds sample_n {sample_n}")
    return _score_candidates(fg, gallery, model, sample_n, seed)[:k]


# ---------------------------------------------------------------------------
# Stage 2: adjustment and compositing
# ---------------------------------------------------------------------------


def placement_to_native(
    p: Placement, enc_size: int, native_w: int, native_h: int
) -> Placement:
    """Map an encoder-coordinate pose onto the native background grid."""
    fx = native_w / enc_size
    fy = native_h / enc_size
    return Placement(p.cx * fx, p.cy * fy, p.scale * math.sqrt(fx * fy))


# Ascent settings for learned score surfaces. Wider probes average out the
# encoder's pixel-level texture, and the scale search stays inside the
# perturbation range the verifier was trained on; outside it the model
# extrapolates and the surface is meaningless.
MODEL_SURFACE_ASCENT = AscentConfig(probe_xy=2.0, cap_xy=4.0, scale_bounds=(0.5, 2.0))


@dataclass(frozen=True)
class RetouchConfig:
    k: int = 3
    sample_n: int | None = None
    seed: int = 0
    ascent: AscentConfig = field(default_factory=lambda: MODEL_SURFACE_ASCENT)


@dataclass
class RetouchReport:
    """Everything the pipeline decided, for auditing and reproduction."""

    candidates: list[dict]
    top_k: list[str]
    adjusted: list[dict]
    chosen_id: str
    final_placement: Placement
    spatial_score: float
    seed: int
    composite_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "candidates": self.candidates,
            "top_k": self.top_k,
            "adjusted": self.adjusted,
            "chosen_id": self.chosen_id,
            "final_placement": {
                "cx": self.final_placement.cx,
                "cy": self.final_placement.cy,
                "scale": self.final_placement.scale,
            },
            "spatial_score": self.spatial_score,
            "seed": self.seed,
            "composite_path": self.composite_path,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def retouch(
    fg: ForegroundPatch,
    gallery: Gallery,
    model: VerifierNet,
    cfg: RetouchConfig = RetouchConfig(),
) -> tuple[Image, RetouchReport]:
    """Full pipeline: rank backgrounds, adjust on each finalist, composite.

    Adjustment runs on every top-k candidate and the (background, placement)
    pair with the highest spatial score wins, so a lower-ranked background
    can still be selected if the foreground settles better on it.
    """
    sample_n = cfg.sample_n if cfg.sample_n is not None else min(64, len(gallery))
    if cfg.k < 1 or cfg.k > sample_n:
        raise ValueError(f"k {cfg.k} outside [1, sample_n={sample_n}]")
    scored = _score_candidates(fg, gallery, model, sample_n, cfg.seed)
    top_ids = [sid for sid, _ in scored[: cfg.k]]

    size = model.cfg.image_size
    adjusted = []
    best = None
    for i, entry_id in enumerate(top_ids):
        bg, parsing = gallery.load(entry_id)
        scorer = make_model_scorer(model, fg, prepare_encoder_input(bg, size), parsing)
        p_enc, score, _ = adjust_multistart(
            scorer, size, size, cfg.ascent, seed=(cfg.seed, 17, i)
        )
        p_nat = placement_to_native(p_enc, size, bg.width, bg.height)
        adjusted.append(
            {
                "id": entry_id,
                "placement": {"cx": p_nat.cx, "cy": p_nat.cy, "scale": p_nat.scale},
                "spatial_score": score,
            }
        )
        if best is None or score > best[1]:
            best = (entry_id, score, p_nat, bg)

    chosen_id, best_score, final_placement, chosen_bg = best
    final = composite(chosen_bg, fg, final_placement)
    report = RetouchReport(
        candidates=[{"id": sid, "content_score": sc} for sid, sc in scored],
        top_k=top_ids,
        adjusted=adjusted,
        chosen_id=chosen_id,
        final_placement=final_placement,
        spatial_score=best_score,
        seed=cfg.seed,
    )
    return final, report
