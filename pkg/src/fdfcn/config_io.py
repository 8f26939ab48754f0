"""Run configuration files.

One ``key = value`` pair per line, values written as JSON literals, ``#``
starts a comment. A single file carries network, training, sampler and data
settings::

    # reduced network
    fe_layers = 2
    classes = 5
    lr = 0.002
    doubled = []
    data_dir = "data/ibsr"
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .network import NetworkConfig
from .patches import SamplerConfig
from .trainer import TrainConfig

# sampler keys are prefixed where they would clash with training keys
SAMPLER_KEYS = {"cap": "cap", "doubled": "doubled", "sampler_seed": "seed"}
DATA_KEYS = {"data_dir": None, "subjects": None, "train_subjects": None, "val_subjects": None,
             "remap": None, "spectral_downsample": 1, "split_seed": 0}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: dict = field(default_factory=lambda: dict(DATA_KEYS))


def parse_config(text: str) -> dict:
    """Flat mapping from a config document; duplicate or malformed lines raise ValueError."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"line {n}: expected 'key = value'")
        if key in out:
            raise ValueError(f"line {n}: duplicate key {key!r}")
        out[key] = _value(value.strip(), key, n)
    return out


def _value(text: str, key: str, n: int):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        # allow a trailing comment after the value
        if "#" in text:
            return _value(text.rsplit("#", 1)[0].strip(), key, n)
        raise ValueError(f"line {n}: bad value for {key!r}: {exc.msg}") from None


def build_run_config(values: dict) -> RunConfig:
    net_names = {f.name for f in fields(NetworkConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    net, train, sampler, data = {}, {}, {}, dict(DATA_KEYS)
    for key, value in values.items():
        if key in net_names:
            net[key] = value
        elif key in train_names:
            train[key] = value
        elif key in SAMPLER_KEYS:
            sampler[SAMPLER_KEYS[key]] = value
        elif key in DATA_KEYS:
            data[key] = value
        else:
            raise ValueError(f"unknown configuration key {key!r}")
    network = NetworkConfig(**net)
    sampler.setdefault("classes", network.classes)
    return RunConfig(network, TrainConfig(**train), SamplerConfig(**sampler), data)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return build_run_config(parse_config(fh.read()))


def dump_config(run: RunConfig) -> str:
    lines = [f"{k} = {json.dumps(v)}" for k, v in run.network.to_dict().items()]
    lines += [f"{f.name} = {json.dumps(getattr(run.train, f.name))}" for f in fields(TrainConfig)]
    lines += [f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}"
              for k, v in ((k, getattr(run.sampler, a)) for k, a in SAMPLER_KEYS.items())]
    lines += [f"{k} = {json.dumps(v)}" for k, v in run.data.items()]
    return "\n".join(lines) + "\n"
