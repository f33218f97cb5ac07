"""SoH forecasting model: dilated temporal blocks, chunked attention, dual head.

The network consumes a normalized window of per-cycle features shaped
``[batch, window, features]`` and emits one SoH fraction per requested
horizon.  Structure: a linear input projection to ``channels``, then
``dtb_count`` residual blocks of weight-normalized dilated causal
convolutions with an attention block interleaved after every
``cab_every`` conv blocks, then a dual prediction head whose
convolutional and linear branches are fused by a learnable sigmoid gate.

Parameters live in an insertion-ordered name -> Tensor mapping; that
order is the serialization manifest order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import InputError
from .nn import Tensor, functional as F
from .nn.rng import dropout_rng, init_rng

# Evaluation-mode clamp range for SoH fractions; mirrors the label ceiling.
SOH_CLAMP = (0.0, 1.05)

# Dropout stream ids: conv units take 0..n_units-1, attention sites are
# offset far above any plausible unit count so ids never collide.
_ATTN_LAYER_BASE = 1000


def _default_horizons() -> tuple:
    return tuple(range(1, 51))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``pad_mode`` selects the causal-alignment convention for the conv
    units: "left" pads left only; "both" pads symmetrically and chomps
    the trailing overhang (provably equivalent, kept for parity).
    """

    window: int = 100
    features: int = 8
    channels: int = 32
    kernel: int = 3
    dtb_count: int = 6
    units_per_dtb: int = 2
    cab_every: int = 2
    heads: int = 8
    chunk: int = 16
    conv_dropout: float = 0.2
    attn_dropout: float = 0.1
    horizons: tuple = field(default_factory=_default_horizons)
    conv_head_window: int = 5
    alpha_init: float = 0.5
    pad_mode: str = "left"

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        self.validate()

    def validate(self) -> None:
        if self.window < 1 or self.features < 1 or self.channels < 1:
            raise InputError("window, features and channels must be >= 1")
        if self.kernel < 1 or self.dtb_count < 1 or self.units_per_dtb < 1:
            raise InputError("kernel, dtb_count and units_per_dtb must be >= 1")
        if self.cab_every < 1:
            raise InputError("cab_every must be >= 1")
        if self.dtb_count % self.cab_every != 0:
            raise InputError(
                f"dtb_count ({self.dtb_count}) must be divisible by "
                f"cab_every ({self.cab_every})")
        if self.heads < 1 or self.channels % self.heads != 0:
            raise InputError(
                f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.chunk < 1:
            raise InputError("chunk must be >= 1")
        if not 0.0 <= self.conv_dropout < 1.0 or not 0.0 <= self.attn_dropout < 1.0:
            raise InputError("dropout rates must be in [0, 1)")
        if not self.horizons:
            raise InputError("horizons must be non-empty")
        if any(h < 1 for h in self.horizons) or \
                any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise InputError("horizons must be positive and strictly increasing")
        if not 1 <= self.conv_head_window <= self.window:
            raise InputError("conv_head_window must be in [1, window]")
        if not 0.0 < self.alpha_init < 1.0:
            raise InputError("alpha_init must be in (0, 1)")
        if self.pad_mode not in ("left", "both"):
            raise InputError(f"pad_mode must be 'left' or 'both', got {self.pad_mode!r}")

    @property
    def n_cabs(self) -> int:
        return self.dtb_count // self.cab_every

    @property
    def n_horizons(self) -> int:
        return len(self.horizons)

    def dilation(self, block: int) -> int:
        return 2 ** block

    def to_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            value = getattr(self, f_.name)
            out[f_.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f_.name for f_ in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "horizons" in kwargs:
            kwargs["horizons"] = tuple(kwargs["horizons"])
        return cls(**kwargs)


def variant_config(config: ModelConfig, variant: str) -> ModelConfig:
    """Ablation variants differing from ``config`` in exactly one axis."""
    if variant == "no_physics":
        return replace(config, features=4)
    if variant == "single_head":
        return replace(config, heads=1)
    if variant == "full_attention":
        return replace(config, chunk=config.window)
    raise InputError(
        f"unknown variant {variant!r}; expected no_physics, single_head "
        f"or full_attention")


class PaceModel:
    """Built network: config plus named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict, seed: int):
        self.config = config
        self.params = params
        self.seed = int(seed)

    def parameters(self) -> list:
        return list(self.params.values())

    def param_names(self) -> list:
        return list(self.params.keys())

    @property
    def alpha(self) -> float:
        logit = float(self.params["dhb.alpha_logit"].data.reshape(()))
        return 1.0 / (1.0 + math.exp(-logit))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ---- forward -----------------------------------------------------

    def encode(self, x: Tensor, training: bool = False, seed: int = 0,
               step: int = 0, include_cabs: bool = True,
               probs_sink: list | None = None) -> Tensor:
        """Temporal encoder: ``[B, W, F]`` -> ``[B, C, W]``."""
        cfg = self.config
        h = F.linear(x, self.params["input_proj.w"], self.params["input_proj.b"])
        h = F.transpose(h, (0, 2, 1))
        for b in range(cfg.dtb_count):
            h = self.dtb_forward(h, b, training, seed, step)
            if include_cabs and (b + 1) % cfg.cab_every == 0:
                h = self.cab_forward(h, b // cfg.cab_every, training, seed,
                                     step, probs_sink)
        return h

    def dtb_forward(self, x: Tensor, block: int, training: bool = False,
                    seed: int = 0, step: int = 0) -> Tensor:
        """Residual pair of dilated conv units at dilation ``2**block``."""
        cfg = self.config
        if x.data.ndim != 3 or x.data.shape[1] != cfg.channels:
            raise InputError(
                f"dtb{block} expects [batch, {cfg.channels}, length], got {x.shape}")
        dilation = cfg.dilation(block)
        pad = (cfg.kernel - 1) * dilation
        h = x
        for unit in range(cfg.units_per_dtb):
            tag = f"dtb{block}.unit{unit}.conv"
            w = F.weight_norm(self.params[tag + ".v"], self.params[tag + ".g"])
            h = F.causal_dilated_conv1d(h, w, self.params[tag + ".b"],
                                        dilation, cfg.pad_mode)
            if cfg.pad_mode == "both" and pad:
                h = F.chomp(h, pad)
            h = F.relu(h)
            rng = None
            if training and cfg.conv_dropout > 0.0:
                layer_id = block * cfg.units_per_dtb + unit
                rng = dropout_rng(seed, layer_id, step)
            h = F.dropout(h, cfg.conv_dropout, training, rng)
        return F.add(h, x)

    def cab_forward(self, x: Tensor, index: int, training: bool = False,
                    seed: int = 0, step: int = 0,
                    probs_sink: list | None = None) -> Tensor:
        """Chunked attention with residual and layer norm, channel-last inside."""
        cfg = self.config
        if x.data.ndim != 3 or x.data.shape[1] != cfg.channels:
            raise InputError(
                f"cab{index} expects [batch, {cfg.channels}, length], got {x.shape}")
        tag = f"cab{index}"
        xt = F.transpose(x, (0, 2, 1))
        rng = None
        if training and cfg.attn_dropout > 0.0:
            rng = dropout_rng(seed, _ATTN_LAYER_BASE + index, step)
        att = F.chunked_self_attention(
            xt,
            self.params[tag + ".wq"], self.params[tag + ".bq"],
            self.params[tag + ".wk"], self.params[tag + ".bk"],
            self.params[tag + ".wv"], self.params[tag + ".bv"],
            self.params[tag + ".wo"], self.params[tag + ".bo"],
            heads=cfg.heads, chunk=cfg.chunk, dropout_p=cfg.attn_dropout,
            training=training, rng=rng, probs_sink=probs_sink)
        y = F.layer_norm(F.add(xt, att), self.params[tag + ".ln.gain"],
                         self.params[tag + ".ln.shift"])
        return F.transpose(y, (0, 2, 1))

    def dhb_forward(self, h: Tensor) -> Tensor:
        """Fuse conv-head and linear-head predictions: ``[B, C, L]`` -> ``[B, H]``."""
        cfg = self.config
        length = h.data.shape[-1]
        if length < cfg.conv_head_window:
            raise InputError(
                f"dual head needs >= {cfg.conv_head_window} timesteps, got {length}")

        # Conv branch: k-wide filter over the trailing k steps; the last
        # output position is the only fully-supported one.
        tail = F.slice_axis(h, 2, length - cfg.conv_head_window, length)
        conv = F.causal_dilated_conv1d(tail, self.params["dhb.conv.w"],
                                       self.params["dhb.conv.b"], 1, "left")
        conv = F.slice_axis(conv, 2, cfg.conv_head_window - 1, cfg.conv_head_window)
        conv = F.reshape(conv, (h.data.shape[0], cfg.channels))
        y_conv = F.linear(conv, self.params["dhb.conv_out.w"],
                          self.params["dhb.conv_out.b"])

        last = F.reshape(F.slice_axis(h, 2, length - 1, length),
                         (h.data.shape[0], cfg.channels))
        y_linear = F.linear(last, self.params["dhb.linear.w"],
                            self.params["dhb.linear.b"])

        alpha = F.sigmoid(self.params["dhb.alpha_logit"])
        one_minus = F.add(F.mul(alpha, -1.0), 1.0)
        return F.add(F.mul(y_conv, alpha), F.mul(y_linear, one_minus))

    def forward(self, x, training: bool = False, seed: int = 0, step: int = 0,
                clamp: bool | None = None, probs_sink: list | None = None) -> Tensor:
        """Predict ``[B, H]`` SoH fractions from ``[B, W, F]`` windows.

        ``clamp`` defaults to evaluation-mode behaviour: outputs clipped
        into the physical SoH range only when ``training`` is false.
        """
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 3 or x.data.shape[1:] != (cfg.window, cfg.features):
            raise InputError(
                f"expected input [batch, {cfg.window}, {cfg.features}], got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise InputError("model input contains non-finite values")
        h = self.encode(x, training, seed, step, probs_sink=probs_sink)
        y = self.dhb_forward(h)
        if clamp is None:
            clamp = not training
        if clamp:
            y = Tensor(np.clip(y.data, SOH_CLAMP[0], SOH_CLAMP[1]))
        return y


def build_model(config: ModelConfig, seed: int) -> PaceModel:
    """Deterministically initialize a model from ``(config, seed)``.

    Linear and conv weights draw from U(-1/sqrt(fan_in), +1/sqrt(fan_in));
    conv magnitudes start at the direction norms so the reparameterised
    weight initially equals its direction tensor; layer-norm gains start
    at one, shifts at zero; the gate logit at logit(alpha_init).
    """
    config.validate()
    cfg = config
    params: dict[str, Tensor] = {}
    counter = 0

    def draw(shape, fan_in):
        nonlocal counter
        bound = 1.0 / math.sqrt(fan_in)
        rng = init_rng(seed, counter)
        counter += 1
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def param(name, data):
        params[name] = Tensor(data, requires_grad=True)

    param("input_proj.w", draw((cfg.features, cfg.channels), cfg.features))
    param("input_proj.b", draw((cfg.channels,), cfg.features))

    conv_fan = cfg.channels * cfg.kernel
    for b in range(cfg.dtb_count):
        for u in range(cfg.units_per_dtb):
            tag = f"dtb{b}.unit{u}.conv"
            v = draw((cfg.channels, cfg.channels, cfg.kernel), conv_fan)
            g = np.sqrt((v.astype(np.float64) ** 2).sum(axis=(1, 2)))
            param(tag + ".v", v)
            param(tag + ".g", g.astype(np.float32))
            param(tag + ".b", draw((cfg.channels,), conv_fan))

    for i in range(cfg.n_cabs):
        tag = f"cab{i}"
        for proj in ("q", "k", "v", "o"):
            param(f"{tag}.w{proj}",
                  draw((cfg.channels, cfg.channels), cfg.channels))
            param(f"{tag}.b{proj}", draw((cfg.channels,), cfg.channels))
        param(tag + ".ln.gain", np.ones(cfg.channels, dtype=np.float32))
        param(tag + ".ln.shift", np.zeros(cfg.channels, dtype=np.float32))

    head_fan = cfg.channels * cfg.conv_head_window
    param("dhb.conv.w",
          draw((cfg.channels, cfg.channels, cfg.conv_head_window), head_fan))
    param("dhb.conv.b", draw((cfg.channels,), head_fan))
    param("dhb.conv_out.w", draw((cfg.channels, cfg.n_horizons), cfg.channels))
    param("dhb.conv_out.b", draw((cfg.n_horizons,), cfg.channels))
    param("dhb.linear.w", draw((cfg.channels, cfg.n_horizons), cfg.channels))
    param("dhb.linear.b", draw((cfg.n_horizons,), cfg.channels))
    logit = math.log(cfg.alpha_init / (1.0 - cfg.alpha_init))
    param("dhb.alpha_logit", np.float32(logit))

    return PaceModel(cfg, params, seed)


# ---------------------------------------------------------------------------
# accounting


def params_breakdown(config: ModelConfig) -> dict:
    """Closed-form parameter counts per component."""
    c, k, f_, h = config.channels, config.kernel, config.features, config.n_horizons
    dtb_unit = c * c * k + c + c  # direction + magnitude + bias
    cab = 4 * (c * c + c) + 2 * c
    dhb = (c * c * config.conv_head_window + c) + 2 * (c * h + h) + 1
    return {
        "input_proj": f_ * c + c,
        "dtb": config.dtb_count * config.units_per_dtb * dtb_unit,
        "cab": config.n_cabs * cab,
        "dhb": dhb,
    }


def flops_breakdown(config: ModelConfig) -> dict:
    """Forward multiply-accumulate counts for one window (batch 1).

    Conventions, per component:
      - input projection: W * F * C
      - conv units: W * C * C * k each (causal output length W)
      - attention: Q/K/V/O projections on the padded length Lp
        (4 * Lp * C * C) plus score and value GEMMs
        (2 * blocks * heads * chunk^2 * head_dim, Lp = blocks * chunk)
      - dual head: one conv output step (C * C * conv_head_window) plus
        the two horizon projections (2 * C * H)
    Bias adds, activations, normalisation and the scalar gate are
    elementwise terms, orders of magnitude below the GEMMs, and are not
    counted.
    """
    cfg = config
    c, w = cfg.channels, cfg.window
    blocks = -(-w // cfg.chunk)
    padded = blocks * cfg.chunk
    head_dim = c // cfg.heads
    scores = 2 * blocks * cfg.heads * cfg.chunk * cfg.chunk * head_dim
    return {
        "input_proj": w * cfg.features * c,
        "conv": cfg.dtb_count * cfg.units_per_dtb * w * c * c * cfg.kernel,
        "attention": cfg.n_cabs * (4 * padded * c * c + scores),
        "head": c * c * cfg.conv_head_window + 2 * c * cfg.n_horizons,
    }


def count_params_flops(model: PaceModel) -> tuple:
    """(exact enumerated parameter count, closed-form forward MACs)."""
    enumerated = sum(p.data.size for p in model.params.values())
    return enumerated, sum(flops_breakdown(model.config).values())


def receptive_field(config: ModelConfig) -> int:
    """Timesteps visible to one output of the conv stack."""
    span = sum((config.kernel - 1) * config.dilation(b) * config.units_per_dtb
               for b in range(config.dtb_count))
    return 1 + span


def width_sweep(config: ModelConfig, widths=(32, 64, 128)) -> list:
    """Param/FLOP table across channel widths (heads scaled to divide)."""
    rows = []
    for width in widths:
        heads = config.heads if width % config.heads == 0 else 1
        cfg = replace(config, channels=width, heads=heads)
        rows.append({
            "channels": width,
            "params": sum(params_breakdown(cfg).values()),
            "flops": sum(flops_breakdown(cfg).values()),
        })
    return rows
