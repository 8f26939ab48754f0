"""Assembly of the full fully-dense downsampling network.

Topology::

    ConvI -> FE1 -> TD1 -> FE2 -> TD2 -> FE3 -> TD3 -> FE4
          -> [center-crop tapped FE outputs, concat coordinates]
          -> FC dense block -> 1x1x1 classifier (raw logits)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import AuditFailure, KernelExceedsInput, ShapeMismatch
from .layers import (
    Conv,
    CTDLayer,
    CTDLayerConfig,
    DenseBlock,
    DenseBlockConfig,
    Layer,
    dense_block_param_count,
    unit_param_count,
)
from .tensor import ConvSpec, conv_out_size


@dataclass(frozen=True)
class NetworkConfig:
    conv1_kernel: int = 7
    conv1_padding: int = 3
    conv1_stride: int = 1
    conv1_channels: int = 24
    fe_blocks: int = 4
    fe_layers: int = 4
    fe_growth: int = 12
    fe_include_input: bool = False
    hd_kernel: int = 3
    rates: tuple = (1, 2, 3)
    td_kernel: int = 3
    td_strides: tuple = (2, 1, 1)
    td_paddings: tuple = (0, 0, 0)
    td_increase: int = 12
    taps: tuple = (2, 3, 4)
    coord_channels: int = 6
    fc_layers: int = 2
    fc_growth: int = 25
    fc_include_input: bool = True
    classes: int = 12
    input_edge: int = 27
    output_edge: int = 9

    def __post_init__(self):
        for name in ("rates", "td_strides", "td_paddings", "taps"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.td_strides) != self.fe_blocks - 1 or len(self.td_paddings) != self.fe_blocks - 1:
            raise ValueError("need one transition-down stride/padding per gap between FE blocks")
        if not self.taps or list(self.taps) != sorted(set(self.taps)):
            raise ValueError("multiscale taps must be non-empty, unique and ordered")
        if self.taps[0] < 1 or self.taps[-1] > self.fe_blocks:
            raise ValueError(f"taps {self.taps} outside FE blocks 1..{self.fe_blocks}")

    def fe_config(self) -> DenseBlockConfig:
        return DenseBlockConfig("HD", self.fe_layers, self.fe_growth, self.fe_include_input,
                                self.hd_kernel, self.rates)

    def td_config(self, i: int) -> CTDLayerConfig:
        return CTDLayerConfig(self.td_kernel, self.td_strides[i], self.td_paddings[i],
                              self.td_increase)

    def fc_config(self) -> DenseBlockConfig:
        return DenseBlockConfig("FC", self.fc_layers, self.fc_growth, self.fc_include_input)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class StageRow(NamedTuple):
    name: str
    edge: int
    channels: int


def shape_audit(config: NetworkConfig) -> list:
    """Per-stage (spatial edge, channels) table; raises AuditFailure on inconsistency."""
    rows = []

    def conv_edge(stage, edge, spec):
        try:
            return conv_out_size(edge, spec)
        except KernelExceedsInput as exc:
            raise AuditFailure(f"stage {stage}: {exc}", rows, edge) from None

    edge = config.input_edge
    spec1 = ConvSpec(config.conv1_kernel, 1, config.conv1_channels, config.conv1_stride,
                     config.conv1_padding)
    edge = conv_edge("conv1", edge, spec1)
    ch = config.conv1_channels
    rows.append(StageRow("conv1", edge, ch))
    fe = config.fe_config()
    fe_rows = []
    for i in range(config.fe_blocks):
        for r, p in zip(fe.unit_config().rates, fe.unit_config().paddings):
            conv_edge(f"fe{i + 1}", edge, ConvSpec(fe.kernel, 1, 1, 1, p, r))
        ch = fe.out_channels(ch)
        rows.append(StageRow(f"fe{i + 1}", edge, ch))
        fe_rows.append(rows[-1])
        if i < config.fe_blocks - 1:
            td = config.td_config(i)
            edge = conv_edge(f"td{i + 1}", edge, ConvSpec(td.kernel, 1, 1, td.stride, td.padding))
            ch += td.channel_increase
            rows.append(StageRow(f"td{i + 1}", edge, ch))
    if edge != config.output_edge:
        raise AuditFailure(
            f"final feature edge {edge} does not match output_edge {config.output_edge}",
            rows, edge)
    fused = config.coord_channels
    for t in config.taps:
        row = fe_rows[t - 1]
        if row.edge < config.output_edge or (row.edge - config.output_edge) % 2:
            raise AuditFailure(
                f"stage {row.name}: edge {row.edge} has no centered crop to {config.output_edge}",
                rows, edge)
        fused += row.channels
    rows.append(StageRow("fusion", edge, fused))
    fc = config.fc_config()
    rows.append(StageRow("fc", edge, fc.out_channels(fused)))
    rows.append(StageRow("classifier", edge, config.classes))
    return rows


class Network:
    """Layer objects for one NetworkConfig; parameters are held separately."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.table = shape_audit(config)
        c = config
        self.conv1 = Conv("conv1", ConvSpec(c.conv1_kernel, 1, c.conv1_channels, c.conv1_stride,
                                            c.conv1_padding))
        ch = c.conv1_channels
        self.fe, self.td = [], []
        for i in range(c.fe_blocks):
            block = DenseBlock(f"fe{i + 1}", ch, c.fe_config())
            self.fe.append(block)
            ch = block.c_out
            if i < c.fe_blocks - 1:
                td = CTDLayer(f"td{i + 1}", ch, c.td_config(i))
                self.td.append(td)
                ch = td.c_out
        fused = c.coord_channels + sum(self.fe[t - 1].c_out for t in c.taps)
        self.fc = DenseBlock("fc", fused, c.fc_config())
        self.classifier = Conv("classifier", ConvSpec(1, self.fc.c_out, c.classes))

    @property
    def layers(self) -> list:
        seq = [self.conv1]
        for i, block in enumerate(self.fe):
            seq.append(block)
            if i < len(self.td):
                seq.append(self.td[i])
        return seq + [self.fc, self.classifier]

    def param_shapes(self) -> dict:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def buffers(self) -> set:
        return set().union(*(layer.buffers() for layer in self.layers))

    def learnable_names(self) -> list:
        buf = self.buffers()
        return [k for k in self.param_shapes() if k not in buf]

    def init_params(self, seed: int, dtype=np.float32) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        for layer in self.layers:
            params.update(layer.init_params(rng, dtype))
        return params

    def check_params(self, params: dict) -> None:
        shapes = self.param_shapes()
        missing = [k for k in shapes if k not in params]
        if missing:
            raise ShapeMismatch(f"missing parameter {missing[0]}")
        for k, shape in shapes.items():
            if tuple(params[k].shape) != tuple(shape):
                raise ShapeMismatch(
                    f"parameter {k} has shape {tuple(params[k].shape)}, config requires {shape}")
        extra = [k for k in params if k not in shapes]
        if extra:
            raise ShapeMismatch(f"unexpected parameter {extra[0]}")

    def forward(self, x, coords, params, train=False):
        """Returns (logits, cache)."""
        c = self.config
        if x.ndim != 5 or x.shape[1:] != (1,) + (c.input_edge,) * 3:
            raise ShapeMismatch(f"input must be (n, 1, {c.input_edge}^3), got {x.shape}")
        oe = c.output_edge
        if coords.shape != (x.shape[0], c.coord_channels, oe, oe, oe):
            raise ShapeMismatch(
                f"coords must be (n, {c.coord_channels}, {oe}^3), got {coords.shape}")
        coords = coords.astype(x.dtype, copy=False)
        caches = {}
        h, caches["conv1"] = self.conv1.forward(x, params, train)
        fe_out = []
        for i, block in enumerate(self.fe):
            f, caches[block.name] = block.forward(h, params, train)
            fe_out.append(f)
            if i < len(self.td):
                h, caches[self.td[i].name] = self.td[i].forward(f, params, train)
        parts, crop_caches = [], []
        for t in c.taps:
            cropped, cc = T.center_crop(fe_out[t - 1], oe)
            parts.append(cropped)
            crop_caches.append(cc)
        parts.append(coords)
        fused, sizes = T.concat_channels(parts)
        caches["fusion"] = (crop_caches, sizes)
        g, caches["fc"] = self.fc.forward(fused, params, train)
        logits, caches["classifier"] = self.classifier.forward(g, params, train)
        return logits, caches

    def backward(self, dlogits, caches, params) -> dict:
        """Gradients of every learnable parameter given d(loss)/d(logits)."""
        c = self.config
        grads = {}
        dg = self.classifier.backward(dlogits, caches["classifier"], params, grads)
        dfused = self.fc.backward(dg, caches["fc"], params, grads)
        crop_caches, sizes = caches["fusion"]
        pieces = T.concat_channels_backward(dfused, sizes)
        dfe = [None] * len(self.fe)
        for t, piece, cc in zip(c.taps, pieces, crop_caches):
            dfe[t - 1] = T.center_crop_backward(piece, cc)
        dh = None
        for i in range(len(self.fe) - 1, -1, -1):
            df = dfe[i]
            if dh is not None:
                df = dh if df is None else df + dh
            if df is None:
                # block feeds nothing that reaches the loss
                dh = None
                continue
            dh = self.fe[i].backward(df, caches[self.fe[i].name], params, grads)
            if i > 0:
                dh = self.td[i - 1].backward(dh, caches[self.td[i - 1].name], params, grads)
        if dh is not None:
            self.conv1.backward(dh, caches["conv1"], params, grads, input_grad=False)
        for k in self.learnable_names():
            if k not in grads:
                grads[k] = np.zeros_like(params[k])
        return grads


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32):
    """Audit the config, create the network and initialize its parameters."""
    net = Network(config)
    return net, net.init_params(seed, dtype)


def param_count(config) -> tuple:
    """Learnable scalar count from config arithmetic alone.

    Accepts a NetworkConfig, or a list of Layer objects for ad-hoc stacks.
    Returns ``(total, {stage: count})``.
    """
    if isinstance(config, (list, tuple)):
        breakdown = {layer.name: layer.learnable_count() for layer in config
                     if isinstance(layer, Layer)}
        return sum(breakdown.values()), breakdown
    c = config
    breakdown = {"conv1": c.conv1_channels * c.conv1_kernel**3 + c.conv1_channels}
    ch = c.conv1_channels
    fe = c.fe_config()
    fe_channels = []
    for i in range(c.fe_blocks):
        breakdown[f"fe{i + 1}"] = dense_block_param_count(ch, fe)
        ch = fe.out_channels(ch)
        fe_channels.append(ch)
        if i < c.fe_blocks - 1:
            td = c.td_config(i)
            breakdown[f"td{i + 1}"] = unit_param_count(ch, ch + td.channel_increase, td.kernel)
            ch += td.channel_increase
    fused = c.coord_channels + sum(fe_channels[t - 1] for t in c.taps)
    fc = c.fc_config()
    breakdown["fc"] = dense_block_param_count(fused, fc)
    cls_in = fc.out_channels(fused)
    breakdown["classifier"] = c.classes * cls_in + c.classes
    return sum(breakdown.values()), breakdown


def enumerate_param_count(net: Network, params: dict) -> int:
    """Learnable scalar count by summing the sizes of the built arrays."""
    return sum(int(params[k].size) for k in net.learnable_names())
