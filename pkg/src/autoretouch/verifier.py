"""Multitask consistency verifier.

Three input streams (rendered foreground canvas, background, palette-rendered
parsing map) pass through one shared encoder. The per-stream feature maps are
merged by an elementwise max into a sharing matrix, flattened, and optionally
combined through a bi-attention term (a gated product of projected stream
pairs with the sharing vector). Two fully connected heads read the fused
vectors: a 2-way softmax for content consistency and a sigmoid scalar for
spatial consistency. The combined loss is a convex mix of binary cross
entropy and squared error.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .imaging import (
    ForegroundPatch,
    Image,
    ParsingMap,
    Placement,
    prepare_encoder_input,
    render_foreground_canvas,
)
from .scoring import GELU_CUBIC

__all__ = [
    "CHECKPOINT_VERSION",
    "CheckpointMismatchError",
    "FeatureBundle",
    "FusedPair",
    "ShapeError",
    "VerifierConfig",
    "VerifierNet",
    "VerifierOutput",
    "combined_loss",
    "gelu_t",
    "images_to_tensor",
    "load_checkpoint",
    "loss",
    "render_streams",
    "save_checkpoint",
]

CHECKPOINT_VERSION = 1
LOSS_EPS = 1e-7
_GELU_ROOT = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Input tensor does not match the configured geometry."""


class CheckpointMismatchError(RuntimeError):
    """Checkpoint config conflicts with what the caller requires."""


def gelu_t(x: torch.Tensor) -> torch.Tensor:
    """Tensor version of the package's tanh GELU (cubic coefficient 0.0447)."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_ROOT * (x + GELU_CUBIC * x * x * x)))


@dataclass(frozen=True)
class VerifierConfig:
    """Architecture knobs; the flattened per-stream width is explicit."""

    image_size: int = 64
    d_flat: int = 512
    d_att: int = 30
    use_attention: bool = True
    swap_fusion_streams: bool = False
    dropout: float = 0.3
    encoder: str = "conv"
    encoder_channels: tuple[int, ...] = (8, 16, 32, 32)
    coord_channels: bool = True

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.d_flat < 1 or self.d_att < 1:
            raise ValueError("d_flat and d_att must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.encoder not in ("conv", "resnet50"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.encoder == "resnet50" and self.coord_channels:
            raise ValueError("coord_channels is only supported by the conv encoder")

    @property
    def fused_length(self) -> int:
        return 3 * self.d_flat + (self.d_att if self.use_attention else 0)


def _pool_target(c_out: int, d_flat: int) -> tuple[int, int]:
    """Spatial size (h, w) such that c_out*h*w == d_flat."""
    if d_flat % c_out:
        raise ValueError(f"d_flat {d_flat} not divisible by final channels {c_out}")
    cells = d_flat // c_out
    h = int(math.isqrt(cells))
    while h > 1 and cells % h:
        h -= 1
    return h, cells // h


# Fan-in init gain for conv layers feeding the tanh GELU: its small-signal
# slope is 1/2, so plain ReLU-calibrated inits shrink activations roughly 2x
# per block and starve the heads of gradient at low learning rates.
GELU_INIT_GAIN = 1.8


class ConvEncoder(nn.Module):
    """Stack of stride-2 3x3 conv blocks, pooled so the flat width is exact.

    Inputs are centered from [0, 1] to [-1, 1]; with ``coord_channels`` two
    normalized coordinate planes are appended, which lets downstream layers
    reason about absolute position.
    """

    def __init__(self, cfg: VerifierConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.coord_channels = cfg.coord_channels
        in_ch = 3 + (2 if cfg.coord_channels else 0)
        blocks = []
        for out_ch in cfg.encoder_channels:
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            with torch.no_grad():
                conv.weight.mul_(GELU_INIT_GAIN)
                conv.bias.zero_()
            blocks.append(conv)
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)

        spatial = cfg.image_size
        for _ in cfg.encoder_channels:
            spatial = (spatial + 1) // 2
        target = _pool_target(cfg.encoder_channels[-1], cfg.d_flat)
        self.pool = nn.Identity() if target == (spatial, spatial) else nn.AdaptiveAvgPool2d(target)

        if cfg.coord_channels:
            axis = torch.linspace(-1.0, 1.0, cfg.image_size)
            gy, gx = torch.meshgrid(axis, axis, indexing="ij")
            self.register_buffer("coords", torch.stack([gx, gy])[None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(
                f"expected {self.image_size}x{self.image_size} input, got "
                f"{tuple(x.shape[-2:])}"
            )
        x = 2.0 * x - 1.0
        if self.coord_channels:
            x = torch.cat([x, self.coords.expand(x.shape[0], -1, -1, -1)], dim=1)
        for block in self.blocks:
            x = gelu_t(block(x))
        return self.pool(x)


class ResNet50Encoder(nn.Module):
    """Torchvision ResNet-50 trunk pooled down to the configured flat width."""

    def __init__(self, cfg: VerifierConfig):
        super().__init__()
        from torchvision.models import resnet50

        trunk = resnet50(weights=None)
        self.image_size = cfg.image_size
        self.trunk = nn.Sequential(*list(trunk.children())[:-2])
        self.pool = nn.AdaptiveAvgPool2d(_pool_target(2048, cfg.d_flat))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(
                f"expected {self.image_size}x{self.image_size} input, got "
                f"{tuple(x.shape[-2:])}"
            )
        return self.pool(self.trunk(x))


def _build_encoder(cfg: VerifierConfig) -> nn.Module:
    if cfg.encoder == "resnet50":
        return ResNet50Encoder(cfg)
    return ConvEncoder(cfg)


@dataclass(frozen=True)
class FeatureBundle:
    """Equal-shape per-stream feature maps (foreground, background, parsing)."""

    h_f: torch.Tensor
    h_b: torch.Tensor
    h_s: torch.Tensor

    def __post_init__(self) -> None:
        if not (self.h_f.shape == self.h_b.shape == self.h_s.shape):
            raise ShapeError(
                f"stream shapes differ: {tuple(self.h_f.shape)}, "
                f"{tuple(self.h_b.shape)}, {tuple(self.h_s.shape)}"
            )

    def shared(self) -> torch.Tensor:
        """Elementwise three-way max; the sharing feature matrix."""
        return torch.maximum(torch.maximum(self.h_f, self.h_b), self.h_s)


@dataclass(frozen=True)
class FusedPair:
    """Fused vectors feeding the content and spatial heads."""

    u_content: torch.Tensor
    u_spatial: torch.Tensor


@dataclass(frozen=True)
class VerifierOutput:
    content_prob: float
    spatial_score: float


class VerifierNet(nn.Module):
    """Shared encoder, max-share fusion with optional bi-attention, two heads."""

    def __init__(self, cfg: VerifierConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _build_encoder(cfg)
        d, da = cfg.d_flat, cfg.d_att
        if cfg.use_attention:
            self.att_content_pair = nn.Linear(2 * d, da, bias=False)
            self.att_content_shared = nn.Linear(d, da, bias=False)
            self.att_spatial_pair = nn.Linear(2 * d, da, bias=False)
            self.att_spatial_shared = nn.Linear(d, da, bias=False)
        self.content_head = nn.Linear(cfg.fused_length, 2)
        self.spatial_head = nn.Linear(cfg.fused_length, 1)
        self.fused_dropout = nn.Dropout(cfg.dropout)

    # -- pieces ------------------------------------------------------------

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Feature map for one stream; same weights serve all three streams."""
        batched = x.dim() == 4
        out = self.encoder(x if batched else x[None])
        return out if batched else out[0]

    def fuse_flat(self, h_f: torch.Tensor, h_b: torch.Tensor, h_s: torch.Tensor):
        """Fusion on already-flattened (B, d_flat) stream vectors."""
        h_shared = torch.maximum(torch.maximum(h_f, h_b), h_s)
        if self.cfg.use_attention:
            att_c = gelu_t(
                self.att_content_pair(torch.cat([h_f, h_b], dim=-1))
                * self.att_content_shared(h_shared)
            )
            att_s = gelu_t(
                self.att_spatial_pair(torch.cat([h_f, h_s], dim=-1))
                * self.att_spatial_shared(h_shared)
            )
            if self.cfg.swap_fusion_streams:
                u_c = torch.cat([h_f, h_b, att_c, h_shared], dim=-1)
                u_s = torch.cat([h_f, h_s, att_s, h_shared], dim=-1)
            else:
                u_c = torch.cat([h_f, h_s, att_c, h_shared], dim=-1)
                u_s = torch.cat([h_f, h_b, att_s, h_shared], dim=-1)
        else:
            if self.cfg.swap_fusion_streams:
                u_c = torch.cat([h_f, h_b, h_shared], dim=-1)
                u_s = torch.cat([h_f, h_s, h_shared], dim=-1)
            else:
                u_c = torch.cat([h_f, h_s, h_shared], dim=-1)
                u_s = torch.cat([h_f, h_b, h_shared], dim=-1)
        return u_c, u_s

    def fuse(self, h_f: torch.Tensor, h_b: torch.Tensor, h_s: torch.Tensor) -> FusedPair:
        """Fuse one sample's stream feature maps into head inputs."""
        bundle = FeatureBundle(h_f, h_b, h_s)
        flat = [t.flatten() for t in (bundle.h_f, bundle.h_b, bundle.h_s)]
        if flat[0].numel() != self.cfg.d_flat:
            raise ShapeError(
                f"flattened stream length {flat[0].numel()} != d_flat {self.cfg.d_flat}"
            )
        u_c, u_s = self.fuse_flat(*(t[None] for t in flat))
        return FusedPair(u_c[0], u_s[0])

    def heads(self, u_c: torch.Tensor, u_s: torch.Tensor):
        """Head outputs on (B, fused) vectors; dropout active in train mode."""
        u_c = self.fused_dropout(u_c)
        u_s = self.fused_dropout(u_s)
        y_content = torch.softmax(self.content_head(u_c), dim=-1)[..., 1]
        y_spatial = torch.sigmoid(self.spatial_head(u_s)).squeeze(-1)
        return y_content, y_spatial

    def predict(self, fused: FusedPair) -> VerifierOutput:
        """Scalar outputs for one fused sample."""
        y_content, y_spatial = self.heads(fused.u_content[None], fused.u_spatial[None])
        return VerifierOutput(float(y_content.detach()[0]), float(y_spatial.detach()[0]))

    # -- full passes ---------------------------------------------------------

    def forward(self, f: torch.Tensor, b: torch.Tensor, s: torch.Tensor):
        """Batched pass over stream tensors (B, 3, H, W); returns (y_c, y_s)."""
        # One encoder call for all three streams: same math, fewer dispatches.
        h_f, h_b, h_s = self.encode(torch.cat([f, b, s], dim=0)).flatten(1).chunk(3, dim=0)
        u_c, u_s = self.fuse_flat(h_f, h_b, h_s)
        return self.heads(u_c, u_s)

    def verify(
        self,
        fg: ForegroundPatch,
        placement: Placement,
        bg: Image,
        parsing: ParsingMap,
    ) -> VerifierOutput:
        """Score one (foreground @ placement, background, parsing) tuple.

        Rendering, resizing and the forward pass run in inference mode, so
        the result is deterministic for frozen weights.
        """
        f, b, s = render_streams(fg, placement, bg, parsing, self.cfg.image_size)
        t = images_to_tensor([f, b, s]).to(next(self.parameters()).dtype)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                y_content, y_spatial = self.forward(t[0:1], t[1:2], t[2:3])
        finally:
            self.train(was_training)
        return VerifierOutput(float(y_content[0]), float(y_spatial[0]))


# ---------------------------------------------------------------------------
# Stream rendering
# ---------------------------------------------------------------------------


def render_streams(
    fg: ForegroundPatch,
    placement: Placement,
    bg: Image,
    parsing: ParsingMap,
    size: int,
) -> tuple[Image, Image, Image]:
    """The three encoder inputs: F rendered at its placement, B, palette-RGB S."""
    f = prepare_encoder_input(
        render_foreground_canvas(fg, placement, bg.width, bg.height), size
    )
    b = prepare_encoder_input(bg, size)
    s = prepare_encoder_input(parsing.to_rgb(), size)
    return f, b, s


def images_to_tensor(imgs) -> torch.Tensor:
    """Stack Images into a (B, 3, H, W) float tensor."""
    arr = np.stack([im.data for im in imgs])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def combined_loss(
    y_content: torch.Tensor,
    y_spatial: torch.Tensor,
    content_label: torch.Tensor,
    spatial_target: torch.Tensor,
    lam: float,
    spatial_mask: torch.Tensor | None = None,
    eps: float = LOSS_EPS,
):
    """Batched combined loss; returns (L, L_content, L_spatial) means.

    ``spatial_mask`` marks samples whose regression term contributes zero.
    The masked samples still count in the content term.
    """
    yc = y_content.clamp(eps, 1.0 - eps)
    delta = content_label.to(yc.dtype)
    l_c = -(delta * torch.log(yc) + (1.0 - delta) * torch.log(1.0 - yc))
    l_s = (y_spatial - spatial_target) ** 2
    if spatial_mask is not None:
        l_s = l_s * (~spatial_mask).to(l_s.dtype)
    total = lam * l_c + (1.0 - lam) * l_s
    return total.mean(), l_c.mean(), l_s.mean()


def loss(
    out: VerifierOutput,
    content_label: bool,
    spatial_target: float,
    lam: float,
    mask_spatial: bool = False,
) -> tuple[float, float, float]:
    """Per-sample loss (L, L_content, L_spatial).

    The content term is binary cross entropy on the consistency probability
    (clamped away from {0, 1}); the spatial term is the squared residual,
    taken with a positive sign so the combined objective is minimized. A
    masked sample reports a zero spatial term.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    yc = min(max(out.content_prob, LOSS_EPS), 1.0 - LOSS_EPS)
    l_c = -(math.log(yc) if content_label else math.log(1.0 - yc))
    l_s = 0.0 if mask_spatial else (out.spatial_score - spatial_target) ** 2
    return lam * l_c + (1.0 - lam) * l_s, l_c, l_s


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: VerifierNet, path, seed: int | None = None) -> None:
    cfg = dataclasses.asdict(model.cfg)
    cfg["encoder_channels"] = list(cfg["encoder_channels"])
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg,
            "train_seed": seed,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path, expect: dict | None = None) -> tuple[VerifierNet, dict]:
    """Rebuild a model from disk; fail loudly on any config mismatch.

    ``expect`` maps config field names to required values; a conflict raises
    CheckpointMismatchError instead of silently reinterpreting weights.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {version!r}")
    cfg_dict = dict(payload["config"])
    cfg_dict["encoder_channels"] = tuple(cfg_dict["encoder_channels"])
    cfg = VerifierConfig(**cfg_dict)
    if expect:
        for key, value in expect.items():
            actual = getattr(cfg, key)
            if actual != value:
                raise CheckpointMismatchError(
                    f"checkpoint has {key}={actual!r}, caller requires {value!r}"
                )
    model = VerifierNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
