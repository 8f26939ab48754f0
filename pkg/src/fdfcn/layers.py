"""Unit layers, dense blocks and the arithmetic around them.

Layers are stateless descriptions: ``forward(x, params, train)`` returns
``(y, cache)`` and ``backward(dy, cache, params, grads)`` accumulates
parameter gradients into ``grads`` and returns the input gradient.
Parameters live in a flat ``{name: ndarray}`` mapping owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import EmptyGroup, ShapeMismatch
from .tensor import ConvSpec, dilated_kernel_size


@dataclass(frozen=True)
class HDLayerConfig:
    growth: int = 12
    kernel: int = 3
    rates: tuple = (1, 2, 3)

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("hybrid dilated layers need an odd kernel to stay size-preserving")
        if not self.rates:
            raise EmptyGroup("dilation group is empty")
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        report = validate_dilation_group(self.rates, self.kernel)
        if not report:
            raise ValueError(f"dilation rates {self.rates}: " + "; ".join(report.violations))

    @property
    def paddings(self) -> tuple:
        return tuple(r * (self.kernel - 1) // 2 for r in self.rates)

    @property
    def dilated_sizes(self) -> tuple:
        return tuple(dilated_kernel_size(self.kernel, r) for r in self.rates)


@dataclass(frozen=True)
class FCLayerConfig:
    growth: int = 25
    kernel: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel != 1 or self.padding != 0:
            raise ValueError("FC layers are pointwise: kernel 1, padding 0")


@dataclass(frozen=True)
class CTDLayerConfig:
    kernel: int = 3
    stride: int = 2
    padding: int = 0
    channel_increase: int = 12


@dataclass(frozen=True)
class DenseBlockConfig:
    unit: str = "HD"
    layers: int = 4
    growth: int = 12
    include_input: bool = False
    kernel: int = 3
    rates: tuple = (1, 2, 3)

    def __post_init__(self):
        if self.unit not in ("HD", "FC"):
            raise ValueError(f"unknown unit layer type {self.unit!r}")
        if self.layers < 1:
            raise ValueError("a dense block needs at least one unit layer")
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))

    def unit_config(self):
        if self.unit == "HD":
            return HDLayerConfig(self.growth, self.kernel, self.rates)
        return FCLayerConfig(self.growth)

    def out_channels(self, c_in: int) -> int:
        return self.layers * self.growth + (c_in if self.include_input else 0)

    def layer_inputs(self, c_in: int) -> list:
        """Input channel count seen by each unit layer."""
        counts = [c_in]
        for j in range(1, self.layers):
            counts.append((c_in if self.include_input else 0) + j * self.growth)
        return counts


@dataclass
class DilationReport:
    valid: bool
    violations: list = field(default_factory=list)
    common_factor_pairs: list = field(default_factory=list)
    m2: int | None = None

    def __bool__(self):
        return self.valid


def validate_dilation_group(rates: Sequence[int], kernel: int) -> DilationReport:
    """Check a dilation-rate group for gridding-free coverage.

    (a) no two rates share a factor greater than one;
    (b) for groups of three or more, M_2 = max(r3 - 2 r2, 2 r2 - r3, r2)
        must not exceed the kernel edge (indices 1-based).
    """
    rates = [int(r) for r in rates]
    if not rates:
        raise EmptyGroup("dilation group is empty")
    if any(r < 1 for r in rates):
        raise ValueError(f"dilation rates must be positive, got {rates}")
    report = DilationReport(valid=True)
    for i in range(len(rates)):
        for j in range(i + 1, len(rates)):
            g = gcd(rates[i], rates[j])
            if g > 1:
                report.common_factor_pairs.append((i, j, g))
                report.violations.append(
                    f"common factor {g} between rates[{i}]={rates[i]} and rates[{j}]={rates[j]}"
                )
    if len(rates) >= 3:
        r2, r3 = rates[1], rates[2]
        report.m2 = max(r3 - 2 * r2, 2 * r2 - r3, r2)
        if report.m2 > kernel:
            report.violations.append(
                f"M_2 = max({r3}-2*{r2}, 2*{r2}-{r3}, {r2}) = {report.m2} exceeds kernel {kernel} "
                f"(rates[1], rates[2])"
            )
    report.valid = not report.violations
    return report


def receptive_field(layers: Sequence) -> int:
    """Edge of the input region that influences one output voxel."""
    if not layers:
        raise ValueError("receptive_field needs at least one layer")
    rf, jump = 1, 1
    for cfg in layers:
        if isinstance(cfg, HDLayerConfig):
            kd, s = max(cfg.dilated_sizes), 1
        elif isinstance(cfg, FCLayerConfig):
            kd, s = 1, 1
        elif isinstance(cfg, CTDLayerConfig):
            kd, s = cfg.kernel, cfg.stride
        elif isinstance(cfg, ConvSpec):
            kd, s = cfg.kd, cfg.s
        elif isinstance(cfg, DenseBlockConfig):
            unit = cfg.unit_config()
            for _ in range(cfg.layers):
                kd = max(unit.dilated_sizes) if cfg.unit == "HD" else 1
                rf += (kd - 1) * jump
            continue
        else:
            raise TypeError(f"unsupported layer config {cfg!r}")
        rf += (kd - 1) * jump
        jump *= s
    return rf


def _conv_params(prefix, spec):
    return {
        f"{prefix}.weight": (spec.c_out, spec.c_in, spec.k, spec.k, spec.k),
        f"{prefix}.bias": (spec.c_out,),
    }


class Layer:
    name: str

    def param_shapes(self) -> dict:
        raise NotImplementedError

    def buffers(self) -> set:
        return set()

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> dict:
        params = {}
        for key, shape in self.param_shapes().items():
            leaf = key.rsplit(".", 1)[-1]
            if leaf == "weight" and len(shape) == 5:
                fan_in = int(np.prod(shape[1:]))
                params[key] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            elif leaf in ("bias", "shift", "running_mean"):
                params[key] = np.zeros(shape, dtype)
            elif leaf in ("scale", "running_var"):
                params[key] = np.ones(shape, dtype)
            elif leaf == "slope":
                params[key] = np.full(shape, T.PRELU_INIT, dtype)
            else:
                raise KeyError(key)
        return params

    def learnable_count(self) -> int:
        buf = self.buffers()
        return sum(int(np.prod(s)) for k, s in self.param_shapes().items() if k not in buf)


class Conv(Layer):
    """A bare convolution (no normalization or activation)."""

    def __init__(self, name: str, spec: ConvSpec):
        self.name = name
        self.spec = spec
        self.c_in, self.c_out = spec.c_in, spec.c_out

    def param_shapes(self):
        return _conv_params(self.name, self.spec)

    def forward(self, x, params, train=False):
        return T.conv3d(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"], self.spec)

    def backward(self, dy, cache, params, grads, input_grad=True):
        dx, dw, db = T.conv3d_backward(dy, cache, input_grad)
        _acc(grads, f"{self.name}.weight", dw)
        _acc(grads, f"{self.name}.bias", db)
        return dx


class PreActUnit(Layer):
    """BN -> PReLU -> parallel convolutions whose outputs are summed.

    The branches are evaluated jointly by ``conv3d_sum``.
    """

    def __init__(self, name: str, c_in: int, c_out: int, specs: Sequence[ConvSpec]):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.specs = list(specs)

    def param_shapes(self):
        c = self.c_in
        shapes = {
            f"{self.name}.bn.scale": (c,),
            f"{self.name}.bn.shift": (c,),
            f"{self.name}.bn.running_mean": (c,),
            f"{self.name}.bn.running_var": (c,),
            f"{self.name}.prelu.slope": (c,),
        }
        for i, spec in enumerate(self.specs):
            shapes.update(_conv_params(f"{self.name}.conv{i}", spec))
        return shapes

    def buffers(self):
        return {f"{self.name}.bn.running_mean", f"{self.name}.bn.running_var"}

    def forward(self, x, params, train=False):
        if x.shape[1] != self.c_in:
            raise ShapeMismatch(f"{self.name}: expected {self.c_in} channels, got {x.shape[1]}")
        n = self.name
        h, bn_cache = T.batch_norm(x, params[f"{n}.bn.scale"], params[f"{n}.bn.shift"],
                                   params[f"{n}.bn.running_mean"], params[f"{n}.bn.running_var"],
                                   train)
        a, act_cache = T.prelu(h, params[f"{n}.prelu.slope"])
        ws = [params[f"{n}.conv{i}.weight"] for i in range(len(self.specs))]
        bs = [params[f"{n}.conv{i}.bias"] for i in range(len(self.specs))]
        y, conv_cache = T.conv3d_sum(a, ws, bs, self.specs)
        return y, (bn_cache, act_cache, conv_cache)

    def backward(self, dy, cache, params, grads, input_grad=True):
        bn_cache, act_cache, conv_cache = cache
        n = self.name
        da, dws, dbs = T.conv3d_sum_backward(dy, conv_cache)
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            _acc(grads, f"{n}.conv{i}.weight", dw)
            _acc(grads, f"{n}.conv{i}.bias", db)
        dh, dslope = T.prelu_backward(da, act_cache)
        _acc(grads, f"{n}.prelu.slope", dslope)
        dx, dscale, dshift = T.batch_norm_backward(dh, bn_cache)
        _acc(grads, f"{n}.bn.scale", dscale)
        _acc(grads, f"{n}.bn.shift", dshift)
        return dx


def HDLayer(name: str, c_in: int, cfg: HDLayerConfig) -> PreActUnit:
    specs = [ConvSpec(cfg.kernel, c_in, cfg.growth, 1, p, r)
             for r, p in zip(cfg.rates, cfg.paddings)]
    return PreActUnit(name, c_in, cfg.growth, specs)


def FCLayer(name: str, c_in: int, cfg: FCLayerConfig) -> PreActUnit:
    return PreActUnit(name, c_in, cfg.growth, [ConvSpec(1, c_in, cfg.growth)])


def CTDLayer(name: str, c_in: int, cfg: CTDLayerConfig) -> PreActUnit:
    c_out = c_in + cfg.channel_increase
    return PreActUnit(name, c_in, c_out,
                      [ConvSpec(cfg.kernel, c_in, c_out, cfg.stride, cfg.padding)])


class DenseBlock(Layer):
    def __init__(self, name: str, c_in: int, cfg: DenseBlockConfig):
        self.name = name
        self.cfg = cfg
        self.c_in = c_in
        self.c_out = cfg.out_channels(c_in)
        make = HDLayer if cfg.unit == "HD" else FCLayer
        unit = cfg.unit_config()
        self.units = [make(f"{name}.unit{j}", cin, unit)
                      for j, cin in enumerate(cfg.layer_inputs(c_in))]

    def param_shapes(self):
        shapes = {}
        for u in self.units:
            shapes.update(u.param_shapes())
        return shapes

    def buffers(self):
        return set().union(*(u.buffers() for u in self.units))

    def forward(self, x, params, train=False):
        feats = []
        caches = []
        for j, unit in enumerate(self.units):
            if j == 0:
                inp, cat = x, None
            else:
                parts = ([x] if self.cfg.include_input else []) + feats
                inp, cat = T.concat_channels(parts)
            y, c = unit.forward(inp, params, train)
            feats.append(y)
            caches.append((c, cat))
        parts = ([x] if self.cfg.include_input else []) + feats
        out, sizes = T.concat_channels(parts)
        return out, (caches, sizes)

    def backward(self, dy, cache, params, grads, input_grad=True):
        caches, sizes = cache
        pieces = T.concat_channels_backward(dy, sizes)
        inc = self.cfg.include_input
        dx = pieces[0].copy() if inc else None
        dfeats = [p.copy() for p in pieces[1 if inc else 0:]]
        for j in range(len(self.units) - 1, -1, -1):
            unit_cache, cat = caches[j]
            dinp = self.units[j].backward(dfeats[j], unit_cache, params, grads)
            if j == 0:
                dx = dinp if dx is None else dx + dinp
                continue
            parts = T.concat_channels_backward(dinp, cat)
            if inc:
                dx = parts[0] if dx is None else dx + parts[0]
                parts = parts[1:]
            for i, g in enumerate(parts):
                dfeats[i] += g
        return dx


def _acc(grads, key, value):
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


def unit_param_count(c_in: int, c_out: int, kernel: int, branches: int = 1) -> int:
    """Learnable scalars in a BN -> PReLU -> conv unit, from the config alone."""
    return 3 * c_in + branches * (c_out * c_in * kernel**3 + c_out)


def dense_block_param_count(c_in: int, cfg: DenseBlockConfig) -> int:
    kernel = cfg.kernel if cfg.unit == "HD" else 1
    branches = len(cfg.rates) if cfg.unit == "HD" else 1
    return sum(unit_param_count(cin, cfg.growth, kernel, branches)
               for cin in cfg.layer_inputs(c_in))


def _run(layer, x, params, train):
    y, _ = layer.forward(x, params, train)
    return y


def hd_layer(x, config: HDLayerConfig, params, train=True, name="hd"):
    return _run(HDLayer(name, x.shape[1], config), x, params, train)


def fc_layer(x, config: FCLayerConfig, params, train=True, name="fc"):
    return _run(FCLayer(name, x.shape[1], config), x, params, train)


def ctd_layer(x, config: CTDLayerConfig, params, train=True, name="ctd"):
    return _run(CTDLayer(name, x.shape[1], config), x, params, train)


def dense_block(x, config: DenseBlockConfig, params, train=True, name="block"):
    return _run(DenseBlock(name, x.shape[1], config), x, params, train)
