"""SCANet assembly: MobileNetV2-style backbone, stage-1 decoder, SCAM decoders."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    BlockSpec,
    ParamStore,
    conv_bn,
    init_conv,
    init_conv_bn,
    init_inverted_residual,
    inverted_residual,
    param_count,
    upsample_block,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "ScanetConfig",
    "StageOutputs",
    "LITE",
    "BASE",
    "config_for",
    "build_backbone",
    "backbone_forward",
    "build_model",
    "stage1_decoder",
    "scam_forward",
    "scanet_forward",
    "param_count",
]


@dataclass(frozen=True)
class ScanetConfig:
    """Architecture description.

    ``tap_widths`` are the backbone channels at strides 1/2, 1/4, 1/8, 1/16;
    ``decoder_channels`` the widths of o_1..o_4; ``scam_channels`` the inner
    width of the SCAM decoders at stages 2..4 (must be even).
    """

    variant: str = "lite"
    tap_widths: tuple[int, int, int, int] = (8, 16, 24, 32)
    decoder_channels: tuple[int, int, int, int] = (24, 16, 12, 8)
    scam_channels: tuple[int, int, int] = (48, 24, 8)
    stage_units: tuple[int, int, int, int] = (2, 2, 2, 2)
    expansion: int = 2
    stem_channels: int = 8
    input_size: int = 320

    def __post_init__(self):
        if len(self.tap_widths) != 4 or len(self.decoder_channels) != 4:
            raise ValueError("tap_widths and decoder_channels need four entries")
        if len(self.scam_channels) != 3 or len(self.stage_units) != 4:
            raise ValueError("scam_channels needs three entries, stage_units four")
        if min(self.tap_widths + self.decoder_channels + self.scam_channels) < 1:
            raise ValueError("channel widths must be positive")
        if any(k % 2 for k in self.scam_channels):
            raise ValueError(f"scam_channels must be even, got {self.scam_channels}")
        if min(self.stage_units) < 1 or self.expansion < 1 or self.stem_channels < 1:
            raise ValueError("stage_units, expansion and stem_channels must be positive")
        if self.input_size < 16 or self.input_size % 16:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")

    def with_size(self, size: int) -> "ScanetConfig":
        return dataclasses.replace(self, input_size=size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScanetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


LITE = ScanetConfig()
BASE = ScanetConfig(
    variant="base",
    tap_widths=(16, 24, 32, 96),
    decoder_channels=(64, 32, 24, 16),
    scam_channels=(64, 32, 16),
    stage_units=(1, 2, 3, 7),
    expansion=6,
    stem_channels=32,
)


def config_for(variant: str, size: int | None = None) -> ScanetConfig:
    table = {"lite": LITE, "base": BASE}
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(table)}")
    cfg = table[variant]
    return cfg.with_size(size) if size is not None else cfg


@dataclass
class StageOutputs:
    """Stage predictions s_1..s_4, features o_1..o_4, background masks m_2..m_4."""

    preds: list[Tensor]
    features: list[Tensor]
    masks: list[Tensor]
    trace: dict = field(default_factory=dict)

    @property
    def final(self) -> Tensor:
        return self.preds[-1]


# ---------------------------------------------------------------------------
# backbone


def _backbone_plan(cfg: ScanetConfig) -> list[list[BlockSpec]]:
    plan = []
    prev = cfg.stem_channels
    for k, (width, units) in enumerate(zip(cfg.tap_widths, cfg.stage_units)):
        stride = 1 if k == 0 else 2
        blocks = [BlockSpec(prev, width, stride, cfg.expansion)]
        blocks += [BlockSpec(width, width, 1, cfg.expansion) for _ in range(units - 1)]
        plan.append(blocks)
        prev = width
    return plan


def build_backbone(cfg: ScanetConfig, seed: int, params: ParamStore | None = None):
    """Initialize backbone parameters; returns ``(params, forward)``.

    ``forward(x, training)`` yields the four taps at strides 1/2..1/16.
    """
    params = ParamStore() if params is None else params
    rng = np.random.default_rng(seed)
    bb = params.scope("backbone")
    init_conv_bn(bb, "stem", cfg.stem_channels, 3, 3, rng)
    for s, blocks in enumerate(_backbone_plan(cfg)):
        for b, spec in enumerate(blocks):
            init_inverted_residual(bb.scope(f"stage{s + 1}.{b}"), spec, rng)

    def forward(x: Tensor, training: bool) -> list[Tensor]:
        return backbone_forward(cfg, params, x, training)

    return params, forward


def backbone_forward(cfg: ScanetConfig, params: ParamStore, x: Tensor, training: bool) -> list[Tensor]:
    n, c, h, w = x.shape
    if c != 3:
        raise ShapeError(f"backbone expects 3-channel images, got {x.shape}")
    if h % 16 or w % 16:
        raise ShapeError(f"image size {h}x{w} must be divisible by 16")
    bb = params.scope("backbone")
    y = T.relu6(conv_bn(x, bb, "stem", training, stride=2))
    taps = []
    for s, blocks in enumerate(_backbone_plan(cfg)):
        for b, spec in enumerate(blocks):
            y = inverted_residual(spec, y, bb.scope(f"stage{s + 1}.{b}"), training)
        taps.append(y)
    return taps


# ---------------------------------------------------------------------------
# decoders


def _decoder_specs(cfg: ScanetConfig):
    w, d, k = cfg.tap_widths, cfg.decoder_channels, cfg.scam_channels
    stage1 = BlockSpec(w[3], d[0], 1, cfg.expansion)
    scams = []
    for i in range(3):  # SCAM stages 2..4
        c_in = w[2 - i] + d[i]
        scams.append((c_in, k[i], d[i + 1]))
    return stage1, scams


def init_decoders(cfg: ScanetConfig, params: ParamStore, rng) -> None:
    stage1, scams = _decoder_specs(cfg)
    dec = params.scope("decoder1")
    init_inverted_residual(dec.scope("up"), stage1, rng)
    init_conv(dec, "head", 1, stage1.out_channels, 1, rng, bias=True)
    for i, (c_in, inner, out_c) in enumerate(scams):
        init_scam(params.scope(f"scam{i + 2}"), c_in, inner, out_c, cfg.expansion, rng)


def init_scam(params: ParamStore, c_in: int, inner: int, out_c: int, expansion: int, rng) -> None:
    half = inner // 2
    init_conv(params, "fg_plain", half, c_in, 1, rng, bias=True)
    init_conv(params, "fg_weighted", half, c_in, 1, rng, bias=True)
    init_conv(params, "bg", inner, c_in, 1, rng, bias=True)
    spec = BlockSpec(inner, inner, 1, expansion)
    init_inverted_residual(params.scope("invres_b"), spec, rng)
    init_inverted_residual(params.scope("invres_f"), spec, rng)
    init_conv(params, "out", out_c, inner, 3, rng, bias=True)
    init_conv(params, "head", 1, out_c, 1, rng, bias=True)


def _conv(x: Tensor, params: ParamStore, name: str) -> Tensor:
    w = params[f"{name}.weight"]
    k = w.shape[-1]
    return T.conv2d(x, w, params[f"{name}.bias"], padding=k // 2)


def stage1_decoder(t4: Tensor, params: ParamStore, training: bool) -> tuple[Tensor, Tensor]:
    """Upsample block on the deepest tap, then a 1x1 sigmoid head."""
    dec = params.scope("decoder1")
    w = dec["up.expand.conv.weight"]
    hid = w.shape[0]
    spec = BlockSpec(w.shape[1], dec["up.project.conv.weight"].shape[0], 1, hid // w.shape[1])
    o1 = upsample_block(spec, t4, dec.scope("up"), training)
    s1 = T.sigmoid(_conv(o1, dec, "head"))
    return o1, s1


def scam_forward(
    c_prev: Tensor,
    s_prev: Tensor,
    params: ParamStore,
    training: bool,
    trace: dict | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Segregate c_prev by the previous prediction, then re-aggregate.

    f = Cat(Conv(c), Conv(c * s)); m = Sigmoid(Conv(c * (1 - s)));
    b = f * m; o = Conv(Up(InvRes(b) + InvRes(f))); s_out = Sigmoid(Conv(o)).
    Returns ``(o, s_out, m)``. When ``trace`` is a dict the weighted conv
    inputs (``fg_input`` = c*s, ``bg_input`` = c*(1-s)) and ``f``/``b`` are
    stored in it.
    """
    n, c, h, w = c_prev.shape
    if s_prev.shape != (n, 1, h, w):
        raise ShapeError(f"s_prev {s_prev.shape} must be single-channel and match c_prev {c_prev.shape}")
    fg_in = T.mul(c_prev, s_prev)
    bg_in = T.mul(c_prev, T.one_minus(s_prev))
    f = T.concat_channels(_conv(c_prev, params, "fg_plain"), _conv(fg_in, params, "fg_weighted"))
    m = T.sigmoid(_conv(bg_in, params, "bg"))
    b = T.mul(f, m)
    inner = f.shape[1]
    exp = params["invres_b.expand.conv.weight"].shape[0] // inner
    spec = BlockSpec(inner, inner, 1, exp)
    agg = T.add(
        inverted_residual(spec, b, params.scope("invres_b"), training),
        inverted_residual(spec, f, params.scope("invres_f"), training),
    )
    o = _conv(T.bilinear_upsample(agg, 2), params, "out")
    s = T.sigmoid(_conv(o, params, "head"))
    if trace is not None:
        trace.update(fg_input=fg_in, bg_input=bg_in, f=f, b=b)
    return o, s, m


def build_model(cfg: ScanetConfig, seed: int) -> ParamStore:
    """Backbone then decoders, initialized from one seeded stream."""
    params, _ = build_backbone(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    init_decoders(cfg, params, rng)
    return params


def scanet_forward(
    cfg: ScanetConfig,
    image: Tensor,
    params: ParamStore,
    training: bool,
    keep_trace: bool = False,
) -> StageOutputs:
    """Full forward: taps -> stage-1 decoder -> SCAM stages 2..4."""
    taps = backbone_forward(cfg, params, image, training)
    o, s = stage1_decoder(taps[3], params, training)
    out = StageOutputs([s], [o], [])
    for i in (2, 3, 4):
        c = T.concat_channels(taps[4 - i], o)
        trace = {} if keep_trace else None
        o, s, m = scam_forward(c, s, params.scope(f"scam{i}"), training, trace)
        out.preds.append(s)
        out.features.append(o)
        out.masks.append(m)
        if keep_trace:
            out.trace[i] = trace
    return out
