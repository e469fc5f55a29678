"""Optimization loop, metrics and checkpoint lifecycle for the verifier.

Training is plain Adam over mini-batches of the combined loss. Everything
random (weight init, shuffling, dropout) is derived from the config seed, so
two runs with the same config produce identical parameters and metrics.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataforge import CASE_CONTENT_NEGATIVE, Manifest, ManifestError, load_triples
from .imaging import prepare_encoder_input, render_foreground_canvas
from .verifier import VerifierConfig, VerifierNet, combined_loss

__all__ = [
    "EvalResult",
    "MetricsReport",
    "TrainConfig",
    "TrainingDivergedError",
    "ablate_attention",
    "evaluate",
    "predict_split",
    "train",
]


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; training aborts with context."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 20
    lam: float = 0.5
    dropout: float = 0.3
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    use_attention: bool = True
    swap_fusion_streams: bool = False
    mask_spatial_for_content_negatives: bool = False
    image_size: int = 64
    d_flat: int = 512
    d_att: int = 30
    encoder: str = "conv"
    encoder_channels: tuple[int, ...] = (8, 16, 32, 32)
    coord_channels: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def verifier_config(self) -> VerifierConfig:
        return VerifierConfig(
            image_size=self.image_size,
            d_flat=self.d_flat,
            d_att=self.d_att,
            use_attention=self.use_attention,
            swap_fusion_streams=self.swap_fusion_streams,
            dropout=self.dropout,
            encoder=self.encoder,
            encoder_channels=tuple(self.encoder_channels),
            coord_channels=self.coord_channels,
        )


def ablate_attention(cfg: TrainConfig) -> TrainConfig:
    """The ablation switch: same run, bi-attention term removed."""
    return dataclasses.replace(cfg, use_attention=False)


@dataclass
class EvalResult:
    accuracy: float
    rmse: float
    loss: float
    count: int


@dataclass
class MetricsReport:
    """Final test metrics plus the per-epoch curves."""

    accuracy: float
    rmse: float
    first_batch_loss: float
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "train_loss", "test_loss", "accuracy", "rmse"]
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row[k]) for k in writer.fieldnames})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.8f}"
    return v


@dataclass
class _SplitTensors:
    f: torch.Tensor
    b: torch.Tensor
    s: torch.Tensor
    content_label: torch.Tensor
    spatial_target: torch.Tensor
    is_content_negative: torch.Tensor

    def __len__(self) -> int:
        return self.f.shape[0]


def _resolve_triples(manifest: Manifest) -> dict:
    if manifest.images_root is None:
        raise ManifestError("manifest carries no images_root; pass triples explicitly")
    return load_triples(manifest.images_root, manifest.triple_ids())


def load_split_tensors(
    manifest: Manifest, triples: dict, split: str, size: int
) -> _SplitTensors | None:
    """Render every sample of a split into stacked stream tensors.

    Backgrounds and parsing maps are cached per triple; the foreground canvas
    is rendered per sample because it depends on the placement.
    """
    samples = manifest.split_samples(split)
    if not samples:
        return None
    bg_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    f_arrs, b_arrs, s_arrs = [], [], []
    for smp in samples:
        host = triples[smp.bg_id]
        if smp.bg_id not in bg_cache:
            bg_cache[smp.bg_id] = (
                prepare_encoder_input(host.bg, size).data,
                prepare_encoder_input(host.parsing.to_rgb(), size).data,
            )
        b_arr, s_arr = bg_cache[smp.bg_id]
        canvas = render_foreground_canvas(
            triples[smp.fg_id].fg, smp.placement, host.bg.width, host.bg.height
        )
        f_arrs.append(prepare_encoder_input(canvas, size).data)
        b_arrs.append(b_arr)
        s_arrs.append(s_arr)

    def stack(arrs):
        return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()

    return _SplitTensors(
        f=stack(f_arrs),
        b=stack(b_arrs),
        s=stack(s_arrs),
        content_label=torch.tensor([s.content_label for s in samples]),
        spatial_target=torch.tensor([s.spatial_target for s in samples], dtype=torch.float32),
        is_content_negative=torch.tensor(
            [s.case_kind == CASE_CONTENT_NEGATIVE for s in samples]
        ),
    )


def _forward_eval(model: VerifierNet, data: _SplitTensors, batch_size: int = 64):
    """Deterministic predictions over a split (eval mode, fixed order)."""
    was_training = model.training
    model.eval()
    ycs, yss = [], []
    try:
        with torch.no_grad():
            for start in range(0, len(data), batch_size):
                end = start + batch_size
                yc, ys = model(data.f[start:end], data.b[start:end], data.s[start:end])
                ycs.append(yc)
                yss.append(ys)
    finally:
        model.train(was_training)
    return torch.cat(ycs), torch.cat(yss)


def _metrics(model: VerifierNet, data: _SplitTensors, lam: float, mask_flag: bool) -> EvalResult:
    yc, ys = _forward_eval(model, data)
    mask = data.is_content_negative if mask_flag else None
    total, _, _ = combined_loss(yc, ys, data.content_label, data.spatial_target, lam, mask)
    correct = (yc > 0.5) == data.content_label
    keep = ~mask if mask is not None else torch.ones_like(correct)
    sq = (ys - data.spatial_target)[keep].double() ** 2
    rmse = float(torch.sqrt(sq.mean())) if sq.numel() else float("nan")
    return EvalResult(
        accuracy=int(correct.sum()) / len(data),
        rmse=rmse,
        loss=float(total),
        count=len(data),
    )


def predict_split(
    model: VerifierNet, manifest: Manifest, split: str = "test", triples: dict | None = None
):
    """Per-sample predictions for a split, for dumping and recomputation.

    Returns (y_content, y_spatial, content_label, spatial_target,
    is_content_negative) as numpy arrays in manifest order.
    """
    triples = triples if triples is not None else _resolve_triples(manifest)
    data = load_split_tensors(manifest, triples, split, model.cfg.image_size)
    if data is None:
        raise ValueError(f"manifest has no '{split}' samples")
    yc, ys = _forward_eval(model, data)
    return (
        yc.numpy(),
        ys.numpy(),
        data.content_label.numpy(),
        data.spatial_target.numpy(),
        data.is_content_negative.numpy(),
    )


def evaluate(
    model: VerifierNet,
    manifest: Manifest,
    split: str = "test",
    triples: dict | None = None,
    lam: float = 0.5,
    mask_content_negatives: bool = False,
) -> EvalResult:
    """Accuracy of (y_c > 0.5) against the content label, plus spatial RMSE."""
    triples = triples if triples is not None else _resolve_triples(manifest)
    data = load_split_tensors(manifest, triples, split, model.cfg.image_size)
    if data is None:
        raise ValueError(f"manifest has no '{split}' samples")
    return _metrics(model, data, lam, mask_content_negatives)


def train(
    manifest: Manifest, cfg: TrainConfig, triples: dict | None = None
) -> tuple[VerifierNet, MetricsReport]:
    """Adam over the combined loss; returns the model and its metrics.

    Early stopping watches the test loss with the configured patience and
    the best-scoring parameters are restored at the end. Raises
    TrainingDivergedError the moment the loss goes non-finite.
    """
    triples = triples if triples is not None else _resolve_triples(manifest)
    train_data = load_split_tensors(manifest, triples, "train", cfg.image_size)
    if train_data is None:
        raise ValueError("manifest has an empty train split")
    test_data = load_split_tensors(manifest, triples, "test", cfg.image_size)
    mask_flag = cfg.mask_spatial_for_content_negatives

    torch.manual_seed(cfg.seed)
    model = VerifierNet(cfg.verifier_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng([cfg.seed, 5])

    n = len(train_data)
    first_batch_loss: float | None = None
    rows: list[dict] = []
    best_state = None
    best_test = math.inf
    stale = 0

    for epoch in range(cfg.epochs):
        model.train()
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for b_idx, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            yc, ys = model(train_data.f[idx], train_data.b[idx], train_data.s[idx])
            total, _, _ = combined_loss(
                yc,
                ys,
                train_data.content_label[idx],
                train_data.spatial_target[idx],
                cfg.lam,
                train_data.is_content_negative[idx] if mask_flag else None,
            )
            value = float(total.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value!r} at epoch {epoch}, batch {b_idx}"
                )
            if first_batch_loss is None:
                first_batch_loss = value
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            batch_losses.append(value)

        train_loss = float(np.mean(batch_losses))
        if test_data is not None:
            ev = _metrics(model, test_data, cfg.lam, mask_flag)
            rows.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "test_loss": ev.loss,
                    "accuracy": ev.accuracy,
                    "rmse": ev.rmse,
                }
            )
            if ev.loss < best_test - 1e-12:
                best_test = ev.loss
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        else:
            rows.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "test_loss": float("nan"),
                    "accuracy": float("nan"),
                    "rmse": float("nan"),
                }
            )

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    if test_data is not None:
        final = _metrics(model, test_data, cfg.lam, mask_flag)
        accuracy, rmse = final.accuracy, final.rmse
    else:
        accuracy, rmse = float("nan"), float("nan")
    report = MetricsReport(
        accuracy=accuracy,
        rmse=rmse,
        first_batch_loss=float(first_batch_loss),
        rows=rows,
    )
    return model, report
