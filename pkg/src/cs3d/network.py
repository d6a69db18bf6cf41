"""Declarative model configs and the CS3D / C3D builders."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import serialize
from .attention import JointAttention
from .conv import Activation, Conv3d, FactorizedBlock, MaxPool3d, MultiPool, _triple, init_uniform
from .module import Module, ProfileRow, elems, n_params
from .ssn import SsnParams
from .tensor import ShapeError, Tensor, linear, reshape

KINDS = ("factorized_block", "dense_conv", "multi_pool", "maxpool", "attention", "flatten", "linear")

_REQUIRED = {
    "factorized_block": ("out_channels",),
    "dense_conv": ("out_channels",),
    "multi_pool": ("window",),
    "maxpool": ("window",),
    "attention": (),
    "flatten": (),
    "linear": (),
}


class ConfigError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


@dataclass
class AttentionConfig:
    reduction: int = 2
    temporal_kernel: int = 3
    spatial_kernel: tuple[int, int, int] = (1, 7, 7)
    activation: str = "relu"


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int, int] = (2, 16, 112, 112)
    class_count: int = 4
    blocks: list[LayerSpec] = field(default_factory=list)
    ssn_defaults: SsnParams = field(default_factory=SsnParams)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0
    name: str = "model"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "seed": self.seed,
            "ssn_defaults": {"theta": self.ssn_defaults.theta, "beta": self.ssn_defaults.beta},
            "attention": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.attention).items()},
            "blocks": [_plain(b.to_dict()) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        att = dict(d.get("attention", {}))
        if "spatial_kernel" in att:
            att["spatial_kernel"] = tuple(att["spatial_kernel"])
        return cls(
            input_shape=tuple(d["input_shape"]),
            class_count=int(d["class_count"]),
            blocks=[LayerSpec.from_dict(b) for b in d.get("blocks", [])],
            ssn_defaults=SsnParams(**d.get("ssn_defaults", {})),
            attention=AttentionConfig(**att),
            seed=int(d.get("seed", 0)),
            name=d.get("name", "model"),
        )

    def replace(self, **changes) -> "ModelConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(o) for o in obj]
    if isinstance(obj, list):
        return [_plain(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def load_config(path) -> ModelConfig:
    return ModelConfig.from_dict(yaml.safe_load(Path(path).read_text()))


# ---------------------------------------------------------------------------
# layers that only exist at the network level


class Flatten(Module):
    def forward(self, x):
        return reshape(x, (x.shape[0], -1))

    def profile(self, in_shape, name):
        out = (in_shape[0], elems(in_shape[1:]))
        return [ProfileRow(name, "flatten", out, 0, 0, 0)], out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            self.weight = Tensor(np.zeros((in_features, out_features)), requires_grad=True)
        else:
            # narrower than the conv init so the first logits stay near the uniform softmax
            self.weight = init_uniform(rng, (in_features, out_features), in_features, scale=1.0)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def profile(self, in_shape, name):
        if len(in_shape) != 2 or in_shape[1] != self.in_features:
            raise ShapeError(f"{name}: expects (N, {self.in_features}), got {in_shape}")
        n = in_shape[0]
        out = (n, self.out_features)
        macs = n * self.in_features * self.out_features
        return [ProfileRow(name, "linear", out, n_params(self.weight, self.bias), macs, macs + n * self.out_features)], out


class DenseConvStage(Module):
    """3x3x3 dense conv with bias followed by an activation (one C3D stage)."""

    def __init__(self, in_channels, out_channels, kernel, padding, activation, ssn, rng):
        self.conv = Conv3d("dense", in_channels, out_channels, kernel, padding=padding, bias=True, rng=rng)
        self.act = Activation(activation, ssn)

    def forward(self, x):
        return self.act(self.conv(x))

    def profile(self, in_shape, name):
        r1, s = self.conv.profile(in_shape, f"{name}.conv")
        r2, s = self.act.profile(s, f"{name}.act")
        return r1 + r2, s


class DenseHead(Module):
    """Linear layer with an optional activation."""

    def __init__(self, fc: Linear, act: Activation | None):
        self.fc = fc
        self.act = act

    def forward(self, x):
        y = self.fc(x)
        return self.act(y) if self.act is not None else y

    def profile(self, in_shape, name):
        rows, s = self.fc.profile(in_shape, f"{name}.fc")
        if self.act is not None:
            r, s = self.act.profile(s, f"{name}.act")
            rows += r
        return rows, s


class Model(Module):
    def __init__(self, cfg: ModelConfig, layers: list[tuple[str, Module]]):
        self.cfg = cfg
        self.names = [n for n, _ in layers]
        self.layers = [m for _, m in layers]

    def children(self):
        return iter(zip(self.names, self.layers))

    def named_layers(self):
        return list(zip(self.names, self.layers))

    def forward(self, x: Tensor) -> Tensor:
        expect = tuple(self.cfg.input_shape)
        if x.ndim != 5 or tuple(x.shape[1:]) != expect:
            raise ShapeError(f"input: expected (B, {', '.join(map(str, expect))}), got {x.shape}")
        for name, layer in zip(self.names, self.layers):
            try:
                x = layer(x)
            except ShapeError as e:
                raise ShapeError(f"layer {name!r}: {e}") from e
        return x

    def profile(self, in_shape, name=""):
        rows, shape = [], tuple(in_shape)
        for lname, layer in zip(self.names, self.layers):
            try:
                r, shape = layer.profile(shape, f"{name}{lname}")
            except ShapeError as e:
                raise ShapeError(f"layer {lname!r}: {e}") from e
            rows += r
        return rows, shape

    def registry(self) -> dict[str, Tensor]:
        reg = {}
        for name, t in self.named_parameters():
            if name in reg:
                raise RuntimeError(f"duplicate parameter path {name}")
            reg[name] = t
        return reg

    def state(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        params = {k: t.data.copy() for k, t in self.named_parameters()}
        buffers = {k: a.copy() for k, a in self.named_buffers()}
        return params, buffers

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None) -> None:
        reg = self.registry()
        missing = set(reg) - set(params)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, t in reg.items():
            if params[k].shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {params[k].shape} != model shape {t.shape}")
            t.data[...] = params[k]
        if buffers:
            for k, a in self.named_buffers():
                if k in buffers:
                    a[...] = buffers[k]

    def save(self, path) -> None:
        params, buffers = self.state()
        serialize.save_checkpoint(path, params, buffers)

    def load(self, path) -> None:
        self.load_state(*serialize.load_checkpoint(path))


# ---------------------------------------------------------------------------
# building


def _ssn_for(spec: LayerSpec, cfg: ModelConfig) -> SsnParams:
    if "ssn" in spec.params:
        return SsnParams(**spec.params["ssn"])
    return cfg.ssn_defaults


def validate_config(cfg: ModelConfig) -> None:
    """Raise ConfigError naming the first violated constraint."""
    if len(cfg.input_shape) != 4 or min(cfg.input_shape) < 1:
        raise ConfigError(f"input_shape must be 4 positive extents (C, T, H, W), got {cfg.input_shape}")
    if cfg.class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {cfg.class_count}")
    if not cfg.blocks:
        raise ConfigError("blocks must not be empty")
    for i, spec in enumerate(cfg.blocks):
        if spec.kind not in KINDS:
            raise ConfigError(f"blocks[{i}]: unknown kind {spec.kind!r}")
        for key in _REQUIRED[spec.kind]:
            if key not in spec.params:
                raise ConfigError(f"blocks[{i}] ({spec.kind}): missing {key!r}")
    if cfg.blocks[-1].kind != "linear":
        raise ConfigError("the last block must be a linear classifier")


def build_model(cfg: ModelConfig) -> Model:
    validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    shape = (1, *cfg.input_shape)
    layers: list[tuple[str, Module]] = []
    counts: dict[str, int] = {}
    last = len(cfg.blocks) - 1
    for i, spec in enumerate(cfg.blocks):
        p = spec.params
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        name = f"{spec.kind}{counts[spec.kind]}"
        if spec.kind == "factorized_block":
            m = FactorizedBlock(shape[1], int(p["out_channels"]), p.get("activation", "ssn"), _ssn_for(spec, cfg),
                                p.get("use_bn", True), rng)
        elif spec.kind == "dense_conv":
            kernel = _triple(p.get("kernel", 3))
            m = DenseConvStage(shape[1], int(p["out_channels"]), kernel, _triple(p.get("padding", [k // 2 for k in kernel])),
                               p.get("activation", "relu"), _ssn_for(spec, cfg), rng)
        elif spec.kind == "maxpool":
            m = MaxPool3d(p["window"], p.get("stride"))
        elif spec.kind == "multi_pool":
            m = MultiPool(p["window"], p.get("stride"), p.get("mode", "maxavg"))
        elif spec.kind == "attention":
            a = cfg.attention
            m = JointAttention(shape[1], p.get("temporal", True), p.get("spatial", True), a.reduction,
                               a.temporal_kernel, a.spatial_kernel, a.activation, rng)
        elif spec.kind == "flatten":
            m = Flatten()
        else:
            if len(shape) != 2:
                raise ConfigError(f"blocks[{i}] (linear): needs a flatten before it, input would be {shape}")
            out = int(p.get("out_features", cfg.class_count)) if i != last else cfg.class_count
            fc = Linear(shape[1], out, rng, zero_init=bool(p.get("zero_init", False)))
            act = p.get("activation")
            m = DenseHead(fc, Activation(act, _ssn_for(spec, cfg)) if act else None)
        try:
            _, shape = m.profile(shape, name)
        except ShapeError as e:
            raise ConfigError(f"blocks[{i}] ({spec.kind}): {e}") from e
        layers.append((name, m))
    if shape != (1, cfg.class_count):
        raise ConfigError(f"model emits {shape[1:]}, expected ({cfg.class_count},)")
    return Model(cfg, layers)


def build_cs3d(cfg: ModelConfig) -> Model:
    return build_model(cfg)


def build_c3d(cfg: ModelConfig) -> Model:
    return build_model(cfg)


# ---------------------------------------------------------------------------
# defaults and ablations

CS3D_WIDTHS = (16, 32, 64, 64)
CS3D_POOLS = ((1, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2))
C3D_WIDTHS = (16, 32, 64, 64, 64)
C3D_HIDDEN = 256


def cs3d_config(input_shape=(2, 16, 112, 112), class_count: int = 4, seed: int = 0, *, ssn: bool = True,
                factorized: bool = True, temporal_attn: bool = True, spatial_attn: bool = True,
                ssn_params: SsnParams = SsnParams(), widths=CS3D_WIDTHS, multi_pool_window=(1, 2, 2)) -> ModelConfig:
    act = "ssn" if ssn else "relu"
    blocks = []
    for w, pool in zip(widths, CS3D_POOLS):
        if factorized:
            blocks.append(LayerSpec("factorized_block", {"out_channels": w, "activation": act}))
        else:
            blocks.append(LayerSpec("dense_conv", {"out_channels": w, "kernel": [3, 3, 3], "activation": act}))
        blocks.append(LayerSpec("maxpool", {"window": list(pool)}))
    blocks.append(LayerSpec("multi_pool", {"window": list(multi_pool_window), "mode": "maxavg"}))
    if temporal_attn or spatial_attn:
        blocks.append(LayerSpec("attention", {"temporal": temporal_attn, "spatial": spatial_attn}))
    blocks += [LayerSpec("flatten"), LayerSpec("linear")]
    return ModelConfig(tuple(input_shape), class_count, blocks, ssn_params, AttentionConfig(), seed, "cs3d")


def c3d_config(input_shape=(2, 16, 112, 112), class_count: int = 4, seed: int = 0, *, ssn: bool = False,
               temporal_attn: bool = False, spatial_attn: bool = False, ssn_params: SsnParams = SsnParams(),
               widths=C3D_WIDTHS, hidden: int = C3D_HIDDEN) -> ModelConfig:
    """Five 3x3x3 conv stages and two fully connected layers."""
    act = "ssn" if ssn else "relu"
    conv = lambda w: LayerSpec("dense_conv", {"out_channels": w, "kernel": [3, 3, 3], "activation": act})
    pool = lambda win: LayerSpec("maxpool", {"window": list(win)})
    blocks = [
        conv(widths[0]), pool((1, 2, 2)),
        conv(widths[1]), pool((2, 2, 2)),
        conv(widths[2]), conv(widths[3]), pool((2, 2, 2)),
        conv(widths[4]), pool((2, 2, 2)),
    ]
    if temporal_attn or spatial_attn:
        blocks.append(LayerSpec("attention", {"temporal": temporal_attn, "spatial": spatial_attn}))
    blocks += [LayerSpec("flatten"), LayerSpec("linear", {"out_features": hidden, "activation": act}), LayerSpec("linear")]
    return ModelConfig(tuple(input_shape), class_count, blocks, ssn_params, AttentionConfig(), seed, "c3d")


VARIANTS = ("c3d", "c3d+ssn", "c3d+factorized", "c3d+attention", "cs3d")


def variant_config(name: str, input_shape=(2, 16, 112, 112), class_count: int = 4, seed: int = 0) -> ModelConfig:
    """The five ablation rows: baseline, each component added alone, and the full model."""
    if name == "c3d":
        cfg = c3d_config(input_shape, class_count, seed)
    elif name == "c3d+ssn":
        cfg = c3d_config(input_shape, class_count, seed, ssn=True)
    elif name == "c3d+factorized":
        cfg = cs3d_config(input_shape, class_count, seed, ssn=False, temporal_attn=False, spatial_attn=False)
    elif name == "c3d+attention":
        cfg = c3d_config(input_shape, class_count, seed, temporal_attn=True, spatial_attn=True)
    elif name == "cs3d":
        cfg = cs3d_config(input_shape, class_count, seed)
    else:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    cfg.name = name
    return cfg


def apply_ablation(cfg: ModelConfig, *, no_ssn=False, no_factorized=False, no_temporal_attn=False,
                   no_spatial_attn=False) -> ModelConfig:
    """Return a copy of ``cfg`` with components switched off."""
    cfg = copy.deepcopy(cfg)
    blocks = []
    for spec in cfg.blocks:
        p = dict(spec.params)
        if no_ssn and p.get("activation") == "ssn":
            p["activation"] = "relu"
        if spec.kind == "factorized_block" and no_factorized:
            blocks.append(LayerSpec("dense_conv", {"out_channels": p["out_channels"], "kernel": [3, 3, 3],
                                                   "activation": p.get("activation", "ssn")}))
            continue
        if spec.kind == "attention":
            p["temporal"] = p.get("temporal", True) and not no_temporal_attn
            p["spatial"] = p.get("spatial", True) and not no_spatial_attn
            if not (p["temporal"] or p["spatial"]):
                continue
        blocks.append(LayerSpec(spec.kind, p))
    cfg.blocks = blocks
    return cfg
