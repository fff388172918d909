"""Model, data and run configuration.

Configs are plain dataclasses.  ``from_dict`` rejects unknown keys so a
typo in a config file fails loudly instead of silently using a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError

TASKS = ("trad", "cc", "ctcc", "vi", "t2i", "li")


def _from_dict(cls, data: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ContractError(f"unknown {where} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None and isinstance(value, dict):
            value = _from_dict(sub, value, f"{where}.{key}")
        elif isinstance(value, list) and isinstance(names[key].default, tuple):
            value = tuple(value)
        kwargs[key] = value
    obj = cls(**kwargs)
    obj.validate()
    return obj


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    heads: int = 4
    layers: int = 2
    encoder_blocks: int = 2
    fusion_blocks: int = 2
    mlp_ratio: int = 4
    vocab_size: int = 1024
    max_text_len: int = 32
    instruction_image_size: int = 16
    instruction_encoder_frozen: bool = True
    num_identities: int = 20

    def validate(self):
        p = self.patch_size
        if self.image_height % p or self.image_width % p:
            raise ContractError(f"image {self.image_height}x{self.image_width} not divisible by patch {p}")
        if self.instruction_image_size % p:
            raise ContractError("instruction image size not divisible by patch size")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ContractError("need at least one editing layer")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def instruction_patches(self) -> int:
        return (self.instruction_image_size // self.patch_size) ** 2

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return _from_dict(cls, data, "model")


@dataclass
class DataConfig:
    seed: int = 0
    train_identities: int = 20
    samples_per_identity: int = 8
    test_identities: int = 10
    queries_per_identity: int = 2
    gallery_per_identity: int = 4
    cameras: int = 2
    wardrobe_size: int = 3
    image_height: int = 64
    image_width: int = 32
    channels: int = 3
    ir_every: int = 4
    noise_std: float = 0.8
    background_amp: float = 1.0
    ir_noise_std: float = 0.1
    tasks: tuple = TASKS
    inline: bool = False

    def validate(self):
        if self.train_identities < 2 or self.samples_per_identity < 2:
            raise ContractError("need at least 2 identities with at least 2 samples each")
        if self.test_identities < 1:
            raise ContractError("need at least one test identity")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ContractError(f"unknown tasks {bad}")
        if self.wardrobe_size < 2 and set(self.tasks) & {"cc", "ctcc", "li"}:
            raise ContractError("clothes-changing splits need wardrobe_size >= 2")
        if self.wardrobe_size < 1 or self.cameras < 1:
            raise ContractError("wardrobe_size and cameras must be positive")
        if self.queries_per_identity != 2 or self.gallery_per_identity != 4:
            raise ContractError("test split layout is fixed at 2 queries + 4 gallery per identity")
        if self.image_height % 8 or self.image_width % 8:
            raise ContractError("synthetic images must be multiples of 8 pixels")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        return _from_dict(cls, data, "data")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tasks: tuple = ("trad",)
    margin: float = 0.3
    temperature: float = 0.07
    triplet: str = "adaptive"
    mining: str = "all"
    lr: float = 1e-5
    warmup_start_lr: float = 1e-7
    warmup_steps: int = 1000
    weight_decay: float = 5e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    P: int = 32
    K: int = 4
    steps: int = 500
    augment: tuple = ("crop", "flip", "erase")
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 100
    data_dir: str = "data"
    out_dir: str = "runs"

    def validate(self):
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be >= 0")
        if self.triplet not in ("adaptive", "fixed"):
            raise ContractError(f"triplet must be 'adaptive' or 'fixed', got {self.triplet!r}")
        if self.mining not in ("all", "hard"):
            raise ContractError(f"mining must be 'all' or 'hard', got {self.mining!r}")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad or not self.tasks:
            raise ContractError(f"invalid task list {list(self.tasks)}")
        if self.P < 1 or self.K < 1:
            raise ContractError("P and K must be positive")
        if self.margin < 0 or self.temperature <= 0:
            raise ContractError("margin must be >= 0 and temperature > 0")
        self.model.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "run")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


_NESTED = {(RunConfig, "model"): ModelConfig, (RunConfig, "data"): DataConfig}


def desk_config(**overrides) -> RunConfig:
    """Desk-scale preset: small sampler and a learning rate suited to
    training from scratch rather than fine-tuning a pretrained backbone."""
    base = RunConfig(P=4, K=4, lr=1e-3, warmup_start_lr=1e-5, warmup_steps=50)
    return base.replace(**overrides) if overrides else base.validate()
