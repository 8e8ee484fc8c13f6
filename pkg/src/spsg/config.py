"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

DEFAULT_ARCH = "conv:8:5,relu,maxpool:2,conv:16:5,relu,maxpool:2,dense:10"
DEFAULT_DATASET = "idx:data/mnist15k-images-idx3-ubyte.gz,data/mnist15k-labels-idx1-ubyte.gz"


@dataclass
class ExperimentConfig:
    dataset: str = DEFAULT_DATASET
    victim_split: str = "0:12000"
    attack_split: str = "12000:13000"
    test_split: str = "13000:15000"
    seed: int = 0

    victim_arch: str = DEFAULT_ARCH
    victim_checkpoint: str = ""
    victim_epochs: int = 15
    victim_learning_rate: float = 0.1
    victim_momentum: float = 0.5
    victim_batch_size: int = 64

    query_mode: str = "probability"
    query_set: str = ""
    segmentation: str = "quickshift"
    segmentation_params: str = "kernel_size=1;max_dist=1.5"
    epsilon: float = 1e-5
    flip_policy: str = "surrogate"
    gradient_fraction: float = 1.0
    round_decimals: int = 4

    proxy_arch: str = DEFAULT_ARCH
    beta: float = 0.5
    steal_epochs: int = 60
    steal_batch_size: int = 64
    steal_learning_rate: float = 0.01
    steal_momentum: float = 0.5
    steal_decay_factor: float = 0.1
    steal_decay_period: int = 18
    grad1_superpixel_sample: int = 2
    prob_loss_variant: str = "standard_kd"
    grad2_mode: str = "exact"
    proxy_gradient_view: str = "masked"
    baseline: bool = True

    attacks: str = "fgsm,bim,pgd"
    attack_epsilon: float = 10 / 255
    attack_alpha: float = 2 / 255
    attack_steps: int = 10
    attack_random_start: bool = True

    prada: bool = True
    prada_delta: float = 0.9
    prada_warmup: int = 100
    prada_threshold_factor: float = 0.1

    sgmap_count: int = 4
    sgmap_pool: int = 2

    def split(self, name: str) -> tuple[int, int]:
        start, _, stop = getattr(self, f"{name}_split").partition(":")
        return int(start), int(stop)

    def seg_params(self) -> dict:
        out = {}
        for item in filter(None, self.segmentation_params.split(";")):
            key, _, value = item.partition("=")
            value = value.strip()
            try:
                out[key.strip()] = int(value)
            except ValueError:
                out[key.strip()] = float(value)
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value.strip()


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(value.strip(), types[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {key}: {exc}") from exc
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
