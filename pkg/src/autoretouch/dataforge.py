"""Training-case manufacture: positives, content/spatial negatives, manifests.

A corpus is a set of scene triples (foreground, background, parsing map).
From it we derive three case families in a 1:2:2 ratio:

* positive        -- the original pose on the original background,
                     content label True, spatial target 1.
* spatial_negative -- the original pair with a randomly perturbed placement,
                     content label True, spatial target from the closed-form
                     rationality score.
* content_negative -- a foreground pasted onto another source's background
                     at its origin pose, content label False; the spatial
                     target stays 1 (the pose itself is unperturbed) and can
                     be masked out of the regression loss by config.

The module also ships a procedural desk-scale scene generator whose content
consistency is decidable from color statistics alone, so a small model can
learn it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import (
    ForegroundPatch,
    Image,
    ParsingMap,
    Placement,
    load_foreground,
    load_image,
    load_parsing,
    max_displacement,
    save_foreground,
    save_image,
    save_parsing,
)
from .scoring import SpatialScoreSpec, spatial_score

__all__ = [
    "CASE_CONTENT_NEGATIVE",
    "CASE_POSITIVE",
    "CASE_SPATIAL_NEGATIVE",
    "Manifest",
    "ManifestError",
    "Sample",
    "SceneTriple",
    "SynthParams",
    "build_dataset",
    "load_triple",
    "load_triples",
    "make_content_negative",
    "make_positive",
    "make_spatial_negative",
    "save_triple",
    "spatial_negative_from_placement",
    "synth_corpus",
    "synth_scene",
]

CASE_POSITIVE = "positive"
CASE_CONTENT_NEGATIVE = "content_negative"
CASE_SPATIAL_NEGATIVE = "spatial_negative"
_CASE_KINDS = (CASE_POSITIVE, CASE_SPATIAL_NEGATIVE, CASE_CONTENT_NEGATIVE)

MANIFEST_FORMAT = 1


class ManifestError(ValueError):
    """Dataset construction or serialization failure."""


@dataclass(frozen=True)
class SceneTriple:
    """One source scene: foreground patch, background and its parsing map."""

    id: str
    fg: ForegroundPatch
    bg: Image
    parsing: ParsingMap
    group: str | None = None

    def __post_init__(self) -> None:
        if (self.parsing.height, self.parsing.width) != (self.bg.height, self.bg.width):
            raise ValueError(
                f"{self.id}: parsing extent {self.parsing.height}x{self.parsing.width}"
                f" != background extent {self.bg.height}x{self.bg.width}"
            )
        ox, oy = self.fg.origin_center
        if not (0 <= ox <= self.bg.width and 0 <= oy <= self.bg.height):
            raise ValueError(f"{self.id}: origin center ({ox}, {oy}) outside background")


@dataclass(frozen=True)
class Sample:
    """One training case referencing triples by id."""

    fg_id: str
    bg_id: str
    placement: Placement
    content_label: bool
    spatial_target: float
    case_kind: str
    split: str = "train"

    def to_record(self) -> dict:
        return {
            "fg_id": self.fg_id,
            "bg_id": self.bg_id,
            "cx": self.placement.cx,
            "cy": self.placement.cy,
            "scale": self.placement.scale,
            "content_label": self.content_label,
            "spatial_target": self.spatial_target,
            "case_kind": self.case_kind,
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        return cls(
            fg_id=rec["fg_id"],
            bg_id=rec["bg_id"],
            placement=Placement(rec["cx"], rec["cy"], rec["scale"]),
            content_label=bool(rec["content_label"]),
            spatial_target=float(rec["spatial_target"]),
            case_kind=rec["case_kind"],
            split=rec["split"],
        )


@dataclass
class Manifest:
    """Ordered sample list plus the generation parameters that produced it."""

    samples: list[Sample]
    seed: int
    test_fraction: float
    score_spec: SpatialScoreSpec = field(default_factory=SpatialScoreSpec)
    images_root: str | None = None

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in _CASE_KINDS}
        for s in self.samples:
            out[s.case_kind] += 1
        return out

    def split_samples(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def triple_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.fg_id)
            seen.setdefault(s.bg_id)
        return sorted(seen)

    def to_jsonl(self) -> str:
        header = {
            "kind": "header",
            "format": MANIFEST_FORMAT,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "score_a": self.score_spec.a,
            "score_b": self.score_spec.b,
            "counts": self.counts(),
            "images_root": self.images_root,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines.extend(json.dumps(s.to_record(), sort_keys=True) for s in self.samples)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "Manifest":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise ManifestError(f"{path}: first record is not a header")
        if header.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"{path}: unsupported manifest format {header.get('format')}")
        samples = [Sample.from_record(json.loads(ln)) for ln in lines[1:]]
        return cls(
            samples=samples,
            seed=int(header["seed"]),
            test_fraction=float(header["test_fraction"]),
            score_spec=SpatialScoreSpec(a=header["score_a"], b=header["score_b"]),
            images_root=header.get("images_root"),
        )


# ---------------------------------------------------------------------------
# Case builders
# ---------------------------------------------------------------------------


def make_positive(t: SceneTriple) -> Sample:
    """The original pose on the original background: True / 1."""
    ox, oy = t.fg.origin_center
    return Sample(
        fg_id=t.id,
        bg_id=t.id,
        placement=Placement(ox, oy, 1.0),
        content_label=True,
        spatial_target=1.0,
        case_kind=CASE_POSITIVE,
    )


def _rescaled_origin_pose(fg_source: SceneTriple, bg_source: SceneTriple) -> Placement:
    fx = bg_source.bg.width / fg_source.bg.width
    fy = bg_source.bg.height / fg_source.bg.height
    ox, oy = fg_source.fg.origin_center
    return Placement(ox * fx, oy * fy, math.sqrt(fx * fy))


def make_content_negative(fg_source: SceneTriple, bg_source: SceneTriple) -> Sample:
    """A foreground on another source's background, at its origin pose."""
    if fg_source.id == bg_source.id:
        raise ManifestError(f"content negative requires distinct sources, got {fg_source.id}")
    return Sample(
        fg_id=fg_source.id,
        bg_id=bg_source.id,
        placement=_rescaled_origin_pose(fg_source, bg_source),
        content_label=False,
        spatial_target=1.0,
        case_kind=CASE_CONTENT_NEGATIVE,
    )


def spatial_negative_from_placement(
    t: SceneTriple, placement: Placement, spec: SpatialScoreSpec = SpatialScoreSpec()
) -> Sample:
    """Score an explicit perturbed pose with the closed-form formula."""
    ox, oy = t.fg.origin_center
    x = math.hypot(placement.cx - ox, placement.cy - oy)
    x_max = max_displacement((ox, oy), t.bg.width, t.bg.height)
    y = spatial_score(min(x, x_max), x_max, placement.scale, spec)
    return Sample(
        fg_id=t.id,
        bg_id=t.id,
        placement=placement,
        content_label=True,
        spatial_target=y,
        case_kind=CASE_SPATIAL_NEGATIVE,
    )


def make_spatial_negative(
    t: SceneTriple,
    rng: np.random.Generator,
    scale_bounds: tuple[float, float] = (0.5, 2.0),
    spec: SpatialScoreSpec = SpatialScoreSpec(),
) -> Sample:
    """Random pose: center uniform over the canvas, scale log-uniform."""
    lo, hi = scale_bounds
    cx = float(rng.uniform(0, t.bg.width))
    cy = float(rng.uniform(0, t.bg.height))
    s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return spatial_negative_from_placement(t, Placement(cx, cy, s), spec)


def _assign_splits(
    triples: list[SceneTriple], test_fraction: float, seed: int
) -> dict[str, str]:
    """Per-triple train/test tags, stratified by group to keep partners available."""
    buckets: dict[str, list[str]] = {}
    for t in triples:
        buckets.setdefault(t.group or "", []).append(t.id)
    split: dict[str, str] = {}
    for b_idx, key in enumerate(sorted(buckets)):
        ids = sorted(buckets[key])
        rng = np.random.default_rng([seed, 3, b_idx])
        order = rng.permutation(len(ids))
        # round half up so a tiny bucket still yields a test triple
        n_test = int(math.floor(test_fraction * len(ids) + 0.5))
        test_ids = {ids[i] for i in order[:n_test]}
        for tid in ids:
            split[tid] = "test" if tid in test_ids else "train"
    return split


def build_dataset(
    triples: list[SceneTriple],
    negatives_per_positive: int = 2,
    spatials_per_positive: int = 2,
    test_fraction: float = 0.2,
    seed: int = 0,
    scale_bounds: tuple[float, float] = (0.5, 2.0),
    spec: SpatialScoreSpec = SpatialScoreSpec(),
    images_root: str | None = None,
) -> Manifest:
    """Emit the full manifest: 1 positive, 2 spatial and 2 content negatives
    per triple by default, deterministic under ``seed``.

    The split is assigned per source triple (foregrounds never cross the
    train/test boundary) and content-negative partners are drawn uniformly
    among other triples of the same split; when triples carry a ``group``,
    partners additionally come from a different group, since same-group
    pairs are consistent by construction and would mislabel as negatives.
    """
    if len(triples) < 2:
        raise ManifestError("need at least 2 triples to form content negatives")
    ids = [t.id for t in triples]
    if len(set(ids)) != len(ids):
        raise ManifestError("triple ids must be unique")
    split = _assign_splits(triples, test_fraction, seed)

    samples: list[Sample] = []
    for idx, t in enumerate(triples):
        tag = split[t.id]
        samples.append(replace(make_positive(t), split=tag))
        for j in range(spatials_per_positive):
            rng = np.random.default_rng([seed, 1, idx, j])
            samples.append(replace(make_spatial_negative(t, rng, scale_bounds, spec), split=tag))
        pool = [
            p
            for p in triples
            if p.id != t.id
            and split[p.id] == tag
            and (t.group is None or p.group != t.group)
        ]
        if not pool:
            raise ManifestError(f"{t.id}: no eligible content-negative partners in split '{tag}'")
        pool.sort(key=lambda p: p.id)
        rng = np.random.default_rng([seed, 2, idx])
        for j in range(negatives_per_positive):
            partner = pool[int(rng.integers(len(pool)))]
            samples.append(replace(make_content_negative(partner, t), split=tag))
    return Manifest(
        samples=samples,
        seed=seed,
        test_fraction=test_fraction,
        score_spec=spec,
        images_root=images_root,
    )


# ---------------------------------------------------------------------------
# Procedural desk-scale corpus
# ---------------------------------------------------------------------------

# Two scene families with disjoint color themes. "warm" scenes satisfy
# mean(R) > mean(B) on both foreground and background, "cool" the reverse,
# so family membership is recoverable from first-order color statistics.
_FAMILIES = {
    "warm": {
        "sky": ((1.00, 0.86, 0.60), (1.00, 0.70, 0.42)),
        "ground": ((0.78, 0.52, 0.26), (0.55, 0.34, 0.16)),
        "accent": (1.00, 0.95, 0.78),
        "fg": ((0.92, 0.24, 0.14), (0.96, 0.56, 0.10), (0.85, 0.18, 0.34), (0.98, 0.76, 0.18)),
        "parsing": ((0.98, 0.88, 0.52), (0.58, 0.30, 0.10)),
    },
    "cool": {
        "sky": ((0.55, 0.75, 1.00), (0.38, 0.58, 0.95)),
        "ground": ((0.24, 0.44, 0.62), (0.14, 0.28, 0.44)),
        "accent": (0.84, 0.94, 1.00),
        "fg": ((0.14, 0.34, 0.92), (0.10, 0.68, 0.86), (0.34, 0.24, 0.86), (0.18, 0.55, 0.95)),
        "parsing": ((0.52, 0.88, 1.00), (0.10, 0.20, 0.50)),
    },
}


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the procedural scene generator."""

    canvas: int = 64
    families: tuple[str, ...] = ("warm", "cool")
    fg_height_frac: float = 0.34
    fg_width_frac: float = 0.24

    def __post_init__(self) -> None:
        if self.canvas < 16:
            raise ValueError("canvas too small for a scene")
        if len(self.families) < 2:
            raise ValueError("need at least 2 scene families")
        unknown = set(self.families) - set(_FAMILIES)
        if unknown:
            raise ValueError(f"unknown families {sorted(unknown)}")


def _vgrad(h: int, w: int, top, bottom) -> np.ndarray:
    t = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
    top = np.asarray(top, dtype=np.float32)
    bottom = np.asarray(bottom, dtype=np.float32)
    return (1 - t) * top + t * bottom + np.zeros((h, w, 3), dtype=np.float32)


def _ellipse_mask(h: int, w: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _paint(canvas: np.ndarray, mask: np.ndarray, color, opacity: float = 1.0) -> None:
    c = np.asarray(color, dtype=np.float32)
    canvas[mask] = (1 - opacity) * canvas[mask] + opacity * c


def _make_figure(
    rng: np.random.Generator, ph: int, pw: int, colors
) -> tuple[np.ndarray, np.ndarray]:
    """A simple standing figure: a body shape with a contrasting cap."""
    rgb = np.zeros((ph, pw, 3), dtype=np.float32)
    alpha = np.zeros((ph, pw), dtype=np.float32)
    c_body, c_cap = (np.asarray(colors[i], dtype=np.float32) for i in
                     rng.choice(len(colors), size=2, replace=False))
    ys, xs = np.mgrid[0:ph, 0:pw]
    kind = ("tower", "cone", "pillar")[int(rng.integers(3))]
    head_r = pw * float(rng.uniform(0.28, 0.38))
    head_cy = head_r + 0.5
    if kind == "tower":
        half = pw * float(rng.uniform(0.22, 0.34))
        body = (np.abs(xs - (pw - 1) / 2) <= half) & (ys >= head_cy)
    elif kind == "cone":
        top_y = head_cy
        spread = (ys - top_y) / max(ph - top_y, 1.0)
        body = (np.abs(xs - (pw - 1) / 2) <= spread * (pw / 2 - 0.5)) & (ys >= top_y)
    else:
        half = pw * float(rng.uniform(0.30, 0.42))
        body = (np.abs(xs - (pw - 1) / 2) <= half) & (ys >= head_cy)
        waist = int(ph * 0.55)
        body &= ~((ys > waist) & (ys < waist + 2) & (np.abs(xs - (pw - 1) / 2) > half * 0.5))
    head = _ellipse_mask(ph, pw, (pw - 1) / 2, head_cy, head_r, head_r)
    rgb[body] = c_body
    rgb[head] = c_cap
    alpha[body | head] = 1.0
    return rgb, alpha


def synth_scene(
    rng: np.random.Generator,
    params: SynthParams = SynthParams(),
    family: str | None = None,
    scene_id: str = "scene",
) -> SceneTriple:
    """Generate one scene triple of the given (or drawn) family.

    The background is a sky/ground split with family colors, a horizon and a
    dark pedestal marking where the figure stands; the parsing map labels the
    two regions through a family palette. The figure's origin pose puts its
    feet on the pedestal, so pose plausibility is visible in the pixels.
    """
    if family is None:
        family = params.families[int(rng.integers(len(params.families)))]
    pal = _FAMILIES[family]
    n = params.canvas
    horizon = int(n * rng.uniform(0.42, 0.66))

    jitter = rng.uniform(0.93, 1.07, size=3).astype(np.float32)
    sky = _vgrad(horizon, n, pal["sky"][0], pal["sky"][1]) * jitter
    ground = _vgrad(n - horizon, n, pal["ground"][0], pal["ground"][1]) * jitter
    canvas = np.clip(np.vstack([sky, ground]), 0.0, 1.0)

    for _ in range(int(rng.integers(0, 3))):
        bx = rng.uniform(0.1, 0.9) * n
        by = rng.uniform(0.1, 0.8) * horizon
        _paint(
            canvas,
            _ellipse_mask(n, n, bx, by, rng.uniform(0.08, 0.18) * n, rng.uniform(0.03, 0.06) * n),
            pal["accent"],
            opacity=0.5,
        )
    canvas[horizon:] = np.clip(
        canvas[horizon:] + rng.normal(0.0, 0.012, size=canvas[horizon:].shape), 0.0, 1.0
    ).astype(np.float32)

    ph = max(4, round(params.fg_height_frac * n))
    pw = max(3, round(params.fg_width_frac * n))
    foot_x = float(n * rng.uniform(0.44, 0.56))
    # Figures stand just below the horizon line; a tight depth band keeps the
    # designed pose inferable from the horizon plus the podium.
    foot_y = float(horizon + (n - horizon) * rng.uniform(0.22, 0.30))
    # The podium marking the standing spot needs real vertical extent, or it
    # washes out after the encoder strides and poses lose their y anchor.
    _paint(canvas, _ellipse_mask(n, n, foot_x, foot_y + 0.10 * ph, 0.85 * pw, 0.22 * ph),
           (0.05, 0.05, 0.05))
    _paint(canvas, _ellipse_mask(n, n, foot_x, foot_y + 0.06 * ph, 0.60 * pw, 0.12 * ph),
           pal["accent"], 0.85)
    _paint(canvas, _ellipse_mask(n, n, foot_x, foot_y, 0.38 * pw, 0.05 * ph), (0.05, 0.05, 0.05))

    labels = np.zeros((n, n), dtype=np.int32)
    labels[horizon:] = 1
    parsing = ParsingMap(labels, np.asarray(pal["parsing"], dtype=np.float32))

    rgb, alpha = _make_figure(rng, ph, pw, pal["fg"])
    origin = (foot_x, foot_y - ph / 2.0)
    fg = ForegroundPatch(Image(np.clip(rgb, 0.0, 1.0)), alpha, origin)
    return SceneTriple(id=scene_id, fg=fg, bg=Image(canvas.astype(np.float32)),
                       parsing=parsing, group=family)


def synth_corpus(n: int, params: SynthParams = SynthParams(), seed: int = 0) -> list[SceneTriple]:
    """``n`` scenes with families balanced round-robin, one rng per scene."""
    out = []
    for i in range(n):
        family = params.families[i % len(params.families)]
        rng = np.random.default_rng([seed, 7, i])
        out.append(synth_scene(rng, params, family=family, scene_id=f"{family}-{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# Corpus directory layout: <root>/<id>/{fg.png, bg.png, parsing.png, meta.json}
# ---------------------------------------------------------------------------


def save_triple(t: SceneTriple, root) -> Path:
    d = Path(root) / t.id
    d.mkdir(parents=True, exist_ok=True)
    save_image(t.bg, d / "bg.png")
    save_foreground(t.fg, d / "fg.png")
    save_parsing(t.parsing, d / "parsing.png")
    meta = {"origin_center": list(t.fg.origin_center), "group": t.group}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return d


def load_triple(root, triple_id: str) -> SceneTriple:
    d = Path(root) / triple_id
    meta_path = d / "meta.json"
    origin = None
    group = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("origin_center") is not None:
            origin = tuple(meta["origin_center"])
        group = meta.get("group")
    fg = load_foreground(d / "fg.png", origin_center=origin)
    return SceneTriple(
        id=triple_id,
        fg=fg,
        bg=load_image(d / "bg.png"),
        parsing=load_parsing(d / "parsing.png"),
        group=group,
    )


def load_triples(root, ids=None) -> dict[str, SceneTriple]:
    rootp = Path(root)
    if ids is None:
        ids = sorted(p.name for p in rootp.iterdir() if (p / "bg.png").exists())
    return {tid: load_triple(rootp, tid) for tid in ids}
