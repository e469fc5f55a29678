"""Foreground pose refinement by finite-difference gradient ascent.

A scorer maps a Placement to a scalar plausibility; the surface is probed
with central differences in (cx, cy, scale) and climbed with per-dimension
rate-times-gradient steps, capped so a single iteration never jumps more
than a few pixels (or a few percent of scale). The center is unconstrained,
so a foreground that fits nowhere may legitimately walk off the canvas;
scale is clamped to its bounds at every iterate. Because the surface
flattens near its peak, the returned pose is the best ever seen, not the
last one, and ascent restarts from several random initial poses with the
highest-scoring run winning.
"""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from .imaging import (
    ForegroundPatch,
    Image,
    ParsingMap,
    Placement,
    max_displacement,
    prepare_encoder_input,
    render_foreground_canvas,
)
from .scoring import SpatialScoreSpec, spatial_score
from .verifier import VerifierNet, images_to_tensor

__all__ = [
    "AscentConfig",
    "Trajectory",
    "adjust_multistart",
    "analytic_scorer",
    "ascend",
    "dump_trajectories",
    "make_model_scorer",
    "numerical_gradient",
    "score_at",
]


@dataclass(frozen=True)
class AscentConfig:
    """Probe steps, ascent rates, caps and budgets for one ascent run.

    The rates look large because the plausibility surface saturates: its
    gradient decays to ~1e-5/px near the optimum, and a rate of ~1e5 keeps
    the capped steps moving there instead of stalling tens of pixels out.
    The caps are what bound the actual per-iteration motion.
    """

    probe_xy: float = 0.5
    probe_scale: float = 0.02
    rate_xy: float = 1.0e5
    rate_scale: float = 1.0e3
    cap_xy: float = 8.0
    cap_scale: float = 0.03
    max_iters: int = 100
    tol: float = 1.0e-6
    tol_window: int = 5
    restarts: int = 8
    scale_bounds: tuple[float, float] = (0.25, 4.0)

    def __post_init__(self) -> None:
        if min(self.probe_xy, self.probe_scale, self.rate_xy, self.rate_scale,
               self.cap_xy, self.cap_scale) <= 0:
            raise ValueError("steps, rates and caps must all be positive")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        lo, hi = self.scale_bounds
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale bounds {self.scale_bounds}")


@dataclass(frozen=True)
class Trajectory:
    """Visited (placement, score) sequence plus the best pose seen."""

    points: tuple[tuple[Placement, float], ...]
    best_placement: Placement
    best_score: float


def _eval_many(scorer, placements: list[Placement]) -> list[float]:
    batch = getattr(scorer, "score_batch", None)
    if batch is not None:
        return [float(v) for v in batch(placements)]
    return [float(scorer(p)) for p in placements]


def _check_finite(value: float, p: Placement) -> float:
    if not math.isfinite(value):
        raise RuntimeError(
            f"scorer returned non-finite value {value!r} at "
            f"(cx={p.cx:.3f}, cy={p.cy:.3f}, scale={p.scale:.4f})"
        )
    return value


def numerical_gradient(
    scorer, p: Placement, cfg: AscentConfig = AscentConfig()
) -> tuple[float, float, float]:
    """Central-difference gradient of the score in (cx, cy, scale).

    The scale probes are clamped to the configured bounds, degrading to a
    one-sided difference at a boundary; the center probes never clamp.
    """
    lo, hi = cfg.scale_bounds
    s_hi = min(p.scale + cfg.probe_scale, hi)
    s_lo = max(p.scale - cfg.probe_scale, lo)
    probes = [
        p.shifted(dx=cfg.probe_xy),
        p.shifted(dx=-cfg.probe_xy),
        p.shifted(dy=cfg.probe_xy),
        p.shifted(dy=-cfg.probe_xy),
        Placement(p.cx, p.cy, s_hi),
        Placement(p.cx, p.cy, s_lo),
    ]
    vals = [_check_finite(v, q) for v, q in zip(_eval_many(scorer, probes), probes)]
    g_x = (vals[0] - vals[1]) / (2.0 * cfg.probe_xy)
    g_y = (vals[2] - vals[3]) / (2.0 * cfg.probe_xy)
    g_s = 0.0 if s_hi == s_lo else (vals[4] - vals[5]) / (s_hi - s_lo)
    return g_x, g_y, g_s


def _capped(step: float, cap: float) -> float:
    return max(-cap, min(cap, step))


def ascend(scorer, init: Placement, cfg: AscentConfig = AscentConfig()) -> Trajectory:
    """Climb the score surface from ``init`` until converged or out of budget.

    Converged means the best score seen improved by less than ``tol`` over
    the last ``tol_window`` iterations. The best-seen pose is returned, so
    the final score can never fall below the initial one.
    """
    lo, hi = cfg.scale_bounds
    p = Placement(init.cx, init.cy, min(max(init.scale, lo), hi))
    score = _check_finite(_eval_many(scorer, [p])[0], p)
    points = [(p, score)]
    best_p, best_s = p, score
    best_hist = [best_s]

    for _ in range(cfg.max_iters):
        g_x, g_y, g_s = numerical_gradient(scorer, p, cfg)
        p = Placement(
            p.cx + _capped(cfg.rate_xy * g_x, cfg.cap_xy),
            p.cy + _capped(cfg.rate_xy * g_y, cfg.cap_xy),
            min(max(p.scale + _capped(cfg.rate_scale * g_s, cfg.cap_scale), lo), hi),
        )
        score = _check_finite(_eval_many(scorer, [p])[0], p)
        points.append((p, score))
        if score > best_s:
            best_p, best_s = p, score
        best_hist.append(best_s)
        if len(best_hist) > cfg.tol_window:
            if best_hist[-1] - best_hist[-1 - cfg.tol_window] < cfg.tol:
                break
    return Trajectory(points=tuple(points), best_placement=best_p, best_score=best_s)


def adjust_multistart(
    scorer,
    canvas_w: int,
    canvas_h: int,
    cfg: AscentConfig = AscentConfig(),
    seed=0,
) -> tuple[Placement, float, list[Trajectory]]:
    """Run ``cfg.restarts`` ascents from random poses; keep the best result.

    Initial centers are uniform over the canvas and initial scales
    log-uniform within the bounds. Every restart derives its own rng from
    (seed, index), so results do not depend on execution order. ``seed``
    may be an int or a sequence of ints.
    """
    lo, hi = cfg.scale_bounds
    key = (seed,) if isinstance(seed, int) else tuple(seed)
    trajectories = []
    for k in range(cfg.restarts):
        rng = np.random.default_rng([*key, 11, k])
        init = Placement(
            float(rng.uniform(0, canvas_w)),
            float(rng.uniform(0, canvas_h)),
            float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
        )
        trajectories.append(ascend(scorer, init, cfg))
    best = max(range(len(trajectories)), key=lambda i: (trajectories[i].best_score, -i))
    winner = trajectories[best]
    return winner.best_placement, winner.best_score, trajectories


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------


def score_at(
    model: VerifierNet,
    fg: ForegroundPatch,
    bg: Image,
    parsing: ParsingMap,
    p: Placement,
) -> float:
    """Spatial-consistency score of one pose under a frozen model."""
    return model.verify(fg, p, bg, parsing).spatial_score


def analytic_scorer(
    origin: tuple[float, float],
    canvas_w: int,
    canvas_h: int,
    spec: SpatialScoreSpec = SpatialScoreSpec(),
):
    """Closed-form stand-in surface with a planted optimum at ``origin``.

    Useful for exercising the ascent machinery without a trained model;
    displacement beyond the farthest corner saturates at the corner value.
    """
    ox, oy = origin
    x_max = max_displacement(origin, canvas_w, canvas_h)

    def scorer(p: Placement) -> float:
        d = math.hypot(p.cx - ox, p.cy - oy)
        return spatial_score(min(d, x_max), x_max, p.scale, spec)

    return scorer


@contextmanager
def _inference(model: VerifierNet):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        model.train(was_training)


class _ModelScorer:
    """Model-backed scorer that re-encodes only the foreground stream.

    The background and parsing features are placement-independent, so they
    are encoded once; each probe renders the foreground canvas, encodes it,
    and reuses the cached features through fusion and the spatial head.
    """

    def __init__(self, model: VerifierNet, fg: ForegroundPatch, bg: Image, parsing: ParsingMap):
        self.model = model
        self.fg = fg
        self.canvas = (bg.width, bg.height)
        size = model.cfg.image_size
        self.size = size
        self._dtype = next(model.parameters()).dtype
        pair = images_to_tensor(
            [prepare_encoder_input(bg, size), prepare_encoder_input(parsing.to_rgb(), size)]
        ).to(self._dtype)
        with _inference(model):
            maps = model.encode(pair)
        self._h_b = maps[0:1].flatten(1)
        self._h_s = maps[1:2].flatten(1)

    def _render(self, p: Placement) -> np.ndarray:
        w, h = self.canvas
        return prepare_encoder_input(
            render_foreground_canvas(self.fg, p, w, h), self.size
        ).data

    def score_batch(self, placements: list[Placement]) -> np.ndarray:
        arr = np.stack([self._render(p) for p in placements])
        f = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(self._dtype)
        with _inference(self.model):
            h_f = self.model.encode(f).flatten(1)
            n = h_f.shape[0]
            u_c, u_s = self.model.fuse_flat(
                h_f, self._h_b.expand(n, -1), self._h_s.expand(n, -1)
            )
            _, y_spatial = self.model.heads(u_c, u_s)
        return y_spatial.detach().cpu().numpy().reshape(n)

    def __call__(self, p: Placement) -> float:
        return float(self.score_batch([p])[0])


def make_model_scorer(
    model: VerifierNet, fg: ForegroundPatch, bg: Image, parsing: ParsingMap
) -> _ModelScorer:
    """Batched scorer over the given background, in that background's coordinates."""
    return _ModelScorer(model, fg, bg, parsing)


def dump_trajectories(trajectories: list[Trajectory], path) -> None:
    """CSV dump: one row per visited point, tagged by restart index."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["restart", "iteration", "cx", "cy", "scale", "score"])
        for k, traj in enumerate(trajectories):
            for i, (p, s) in enumerate(traj.points):
                writer.writerow([k, i, f"{p.cx:.6f}", f"{p.cy:.6f}", f"{p.scale:.6f}", f"{s:.8f}"])
