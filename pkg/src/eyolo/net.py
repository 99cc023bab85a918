"""The RGB-D detector graph.

Darknet-style backbone (stem conv, then five stride-2 stages each followed by
residual blocks of 1x1 reduce / 3x3 expand), a head that upsamples the
stride-32 features, concatenates them with the stride-16 features, runs three
1x1/3x3 pairs and projects to ``S * 10`` channels. Those channels are then
reindexed into an S x S x S grid of 10-value cells.

Topology is driven entirely by :class:`NetConfig`; weights live in a flat
name -> ndarray mapping so they can be optimized and checkpointed directly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import GridSpec, split_to_depth
from .tensor import (
    LEAKY_SLOPE,
    ConvParams,
    DimensionError,
    Tensor,
    as_tensor,
    conv2d,
    leaky_relu,
    merge,
    upsample_nearest_2x,
)

INPUT_CHANNELS = ("R", "G", "B", "depth")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    preset: str = "tiny"
    input_size: int = 128
    grid_S: int = 8
    in_channels: int = 4
    stem_width: int = 8
    backbone_widths: Tuple[int, ...] = (8, 16, 32, 64, 128)
    residual_blocks_per_stage: Tuple[int, ...] = (1, 1, 1, 1, 1)
    head_pairs: int = 3
    num_classes: int = 2
    batch_norm: bool = False  # reserved; no normalization layers are built

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        object.__setattr__(self, "residual_blocks_per_stage", tuple(int(b) for b in self.residual_blocks_per_stage))

    def validate(self) -> "NetConfig":
        problems = []
        if self.in_channels != 4:
            problems.append(f"in_channels must be 4 (R,G,B,depth), got {self.in_channels}")
        if self.input_size % 32:
            problems.append(f"input_size {self.input_size} must be divisible by 32")
        if self.input_size // 16 != self.grid_S:
            problems.append(f"input_size / 16 must equal grid_S ({self.input_size}/16 != {self.grid_S})")
        if len(self.backbone_widths) != 5 or len(self.residual_blocks_per_stage) != 5:
            problems.append("backbone needs exactly 5 stages (strides 2..32) of widths and block counts")
        if any(w < 2 or w % 2 for w in self.backbone_widths) or self.stem_width < 1:
            problems.append("stage widths must be even and >= 2")
        if any(b < 0 for b in self.residual_blocks_per_stage):
            problems.append("residual block counts must be >= 0")
        if self.head_pairs < 1:
            problems.append("head_pairs must be >= 1")
        if self.num_classes != 2:
            problems.append(f"num_classes must be 2 so cells carry 10 channels, got {self.num_classes}")
        if self.batch_norm:
            problems.append("batch_norm is reserved and not implemented; set it to false")
        if problems:
            raise ConfigError("invalid network config: " + "; ".join(problems))
        return self

    @property
    def grid(self) -> GridSpec:
        return GridSpec(S=self.grid_S, K=self.num_classes)

    @property
    def projection_channels(self) -> int:
        return self.grid_S * self.grid.channels_per_cell

    # -- key/value file format ---------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = str(kinds[key])
            if "Tuple" in kind:
                values[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif kind == "bool":
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                values[key] = int(value)
            else:
                values[key] = value
        base = PRESETS.get(values.get("preset", "tiny"), NetConfig())
        return replace(base, **values).validate()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NetConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"network config not found: {path}")
        return cls.from_text(path.read_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


PRESETS: Dict[str, NetConfig] = {
    "tiny": NetConfig(),
    "full": NetConfig(
        preset="full",
        input_size=416,
        grid_S=26,
        stem_width=32,
        backbone_widths=(64, 128, 256, 512, 1024),
        residual_blocks_per_stage=(1, 2, 8, 8, 4),
    ),
}


def preset(name: str) -> NetConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    activate: bool = True


def _layer_plan(cfg: NetConfig) -> Dict[str, List[ConvSpec]]:
    plan: Dict[str, List[ConvSpec]] = {"stem": [ConvSpec("stem", cfg.in_channels, cfg.stem_width, 3)]}
    prev = cfg.stem_width
    for s, (width, blocks) in enumerate(zip(cfg.backbone_widths, cfg.residual_blocks_per_stage), 1):
        convs = [ConvSpec(f"stage{s}.down", prev, width, 3, stride=2)]
        for r in range(blocks):
            convs.append(ConvSpec(f"stage{s}.res{r}.reduce", width, width // 2, 1))
            convs.append(ConvSpec(f"stage{s}.res{r}.expand", width // 2, width, 3))
        plan[f"stage{s}"] = convs
        prev = width
    mid = cfg.backbone_widths[3]
    head = [ConvSpec("head.reduce", cfg.backbone_widths[4], mid // 2, 1)]
    ch = mid // 2 + mid
    for n in range(cfg.head_pairs):
        head.append(ConvSpec(f"head.pair{n}.conv1x1", ch, mid // 2, 1))
        head.append(ConvSpec(f"head.pair{n}.conv3x3", mid // 2, mid, 3))
        ch = mid
    head.append(ConvSpec("head.project", ch, cfg.projection_channels, 1, activate=False))
    plan["head"] = head
    return plan


class Network:
    """Weights plus the forward graph for one :class:`NetConfig`."""

    def __init__(self, cfg: NetConfig, params: Dict[str, np.ndarray]):
        self.cfg = cfg.validate()
        self.plan = _layer_plan(cfg)
        self.convs = {c.name: c for group in self.plan.values() for c in group}
        self.params = params
        expected = {f"{n}.{p}" for n in self.convs for p in ("weight", "bias")}
        if set(params) != expected:
            missing = sorted(expected - set(params))[:3]
            extra = sorted(set(params) - expected)[:3]
            raise ConfigError(f"weights do not match config (missing {missing}, unexpected {extra})")

    @property
    def grid(self) -> GridSpec:
        return self.cfg.grid

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def tensors(self, requires_grad: bool = True) -> Dict[str, Tensor]:
        """Fresh leaf tensors over the current weights, one per parameter."""
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def clone(self) -> "Network":
        return Network(self.cfg, {k: v.copy() for k, v in self.params.items()})

    # -- forward --------------------------------------------------------------

    def _conv(self, x: Tensor, name: str, w: Dict[str, Tensor]) -> Tensor:
        spec = self.convs[name]
        y = conv2d(x, ConvParams(w[f"{name}.weight"], w[f"{name}.bias"], stride=spec.stride))
        return leaky_relu(y) if spec.activate else y

    def _stage(self, x: Tensor, group: str, w: Dict[str, Tensor]) -> Tensor:
        convs = self.plan[group]
        x = self._conv(x, convs[0].name, w)
        for reduce, expand in zip(convs[1::2], convs[2::2]):
            x = merge(x, self._conv(self._conv(x, reduce.name, w), expand.name, w), "add")
        return x

    def head_features(self, x: Tensor, weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Projection logits of shape (batch, S*10, S, S) before the depth split."""
        x = as_tensor(x)
        n = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected 4 channels: R,G,B,depth; got input of shape {x.shape}")
        if x.shape[2:] != (n, n):
            raise DimensionError(f"expected {n}x{n} input for preset {self.cfg.preset!r}, got {x.shape[2:]}")
        w = weights if weights is not None else self.tensors(requires_grad=False)

        x = self._conv(x, "stem", w)
        for s in range(1, 5):
            x = self._stage(x, f"stage{s}", w)
        stride16 = x
        stride32 = self._stage(stride16, "stage5", w)

        head = self.plan["head"]
        y = upsample_nearest_2x(self._conv(stride32, head[0].name, w))
        y = merge(y, stride16, "concat_channels")
        for spec in head[1:]:
            y = self._conv(y, spec.name, w)
        return y

    def forward(self, x: Tensor, weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Raw logit grid of shape (batch, S, S, S, 10)."""
        return split_to_depth(self.head_features(x, weights), self.grid)

    __call__ = forward

    # -- persistence ------------------------------------------------------------

    def save(self, path: Union[str, Path], extra: Optional[Dict[str, np.ndarray]] = None) -> Path:
        arrays = dict(self.params)
        if extra:
            arrays.update(extra)
        return save_checkpoint(path, arrays, self.cfg.config_hash())

    @classmethod
    def load(cls, path: Union[str, Path], cfg: NetConfig) -> Tuple["Network", Dict[str, np.ndarray]]:
        """Load weights for ``cfg``; returns the network and any non-weight arrays."""
        arrays, _ = load_checkpoint(path, expected_hash=cfg.config_hash())
        plan = _layer_plan(cfg.validate())
        names = {f"{c.name}.{p}" for g in plan.values() for c in g for p in ("weight", "bias")}
        params = {k: v for k, v in arrays.items() if k in names}
        extra = {k: v for k, v in arrays.items() if k not in names}
        return cls(cfg, params), extra


def build_network(cfg: NetConfig, seed: int = 0) -> Network:
    """Fresh network with He-normal weights drawn deterministically from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    params: Dict[str, np.ndarray] = {}
    for group in _layer_plan(cfg).values():
        for c in group:
            fan_in = c.in_ch * c.k * c.k
            std = gain / np.sqrt(fan_in)
            if c.name.endswith(".expand"):
                # keep residual sums from doubling the activation scale per block
                std *= 0.5
            if not c.activate:
                std = 0.01
            params[f"{c.name}.weight"] = rng.normal(0.0, std, size=(c.out_ch, c.in_ch, c.k, c.k))
            params[f"{c.name}.bias"] = np.zeros(c.out_ch)
    return Network(cfg, params)
