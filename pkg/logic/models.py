import json
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from logic.errors import ConfigError


class Base(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, validate_assignment=True)


class LossMode(str, Enum):
    quadruplet = "quadruplet"
    triplet = "triplet"
    contrastive = "contrastive"


class SgdConfig(Base):
    initial_lr: float = Field(0.05, gt=0)
    milestones: List[Tuple[int, float]] = Field(default_factory=list)
    weight_decay: float = Field(1e-5, ge=0)
    # EMA factor for the running loss reported in epoch logs
    momentum_stat: float = Field(0.9, ge=0, lt=1)

    @field_validator("milestones")
    @classmethod
    def _check_milestones(cls, v: List[Tuple[int, float]]) -> List[Tuple[int, float]]:
        last = None
        for epoch, mult in v:
            if last is not None and epoch <= last:
                raise ValueError("milestone epochs must be strictly increasing")
            if not 0 < mult <= 1:
                raise ValueError(f"milestone multiplier must be in (0, 1], got {mult}")
            last = epoch
        return v


class Margins(Base):
    alpha1: float = 1.0
    alpha2: float = 0.5

    @field_validator("alpha1", "alpha2")
    @classmethod
    def _finite(cls, v: float) -> float:
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("margins must be finite")
        return v


class SmoothingKernel(Base):
    kind: Literal["delta", "uniform", "gaussian"] = "gaussian"
    bandwidth: float = Field(1.0, gt=0)


class BankConfig(Base):
    b_max: int = Field(3, ge=1)
    b_schedule: Optional[Dict[int, int]] = None
    lam: float = Field(0.1, ge=0, alias="lambda")
    ridge: float = Field(1e-6, gt=0)
    ema_momentum: float = Field(0.9, ge=0, le=1)
    kernel: SmoothingKernel = Field(default_factory=SmoothingKernel)
    anchor_sign: Literal[1, -1] = 1

    @model_validator(mode="after")
    def _check_schedule(self) -> "BankConfig":
        for session, depth in (self.b_schedule or {}).items():
            if session < 1:
                raise ValueError(f"b_schedule session index must be >= 1, got {session}")
            if not 1 <= depth <= self.b_max:
                raise ValueError(f"b_schedule depth for session {session} must be in [1, {self.b_max}], got {depth}")
        return self

    def depth_for(self, session: int) -> int:
        if self.b_schedule and session in self.b_schedule:
            return self.b_schedule[session]
        return max(1, self.b_max - (session - 1))


class EpisodeConfig(Base):
    n_classes: Optional[int] = Field(None, ge=1)
    n_support: int = Field(3, ge=1)
    n_query: int = Field(2, ge=0)
    p_bank_negative: float = Field(0.5, ge=0, le=1)


def _base_sgd() -> SgdConfig:
    return SgdConfig(initial_lr=0.1, milestones=[(30, 0.2), (40, 0.2)], weight_decay=1e-5)


def _incremental_sgd() -> SgdConfig:
    return SgdConfig(initial_lr=0.05, milestones=[(25, 0.2), (35, 0.2), (45, 0.2), (55, 0.2)], weight_decay=1e-5)


class TrainPlan(Base):
    base_epochs: int = Field(50, ge=0)
    incremental_epochs: int = Field(60, ge=0)
    episodes_per_epoch: int = Field(10, ge=1)
    batch_size: int = Field(1024, ge=1)
    base_sgd: SgdConfig = Field(default_factory=_base_sgd)
    sgd: SgdConfig = Field(default_factory=_incremental_sgd)
    margins: Margins = Field(default_factory=Margins)
    loss_mode: LossMode = LossMode.quadruplet
    hinge: bool = True
    trainable_fraction: float = Field(0.1, gt=0, le=1)
    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)
    bank: BankConfig = Field(default_factory=BankConfig)
    calibrate_per_query: bool = False
    baseline: Literal["none", "finetune"] = "none"
    seed: int = 0


class StreamConfig(Base):
    base_classes: int = Field(12, ge=1)
    sessions: int = Field(4, ge=0)
    n_way: int = Field(3, ge=1)
    k_shot: int = Field(5, ge=1)
    input_dim: int = Field(16, ge=1)
    separation: float = Field(4.0, gt=0)
    variance: float = Field(1.0, gt=0)
    base_train_per_class: int = Field(60, ge=1)
    test_per_class: int = Field(20, ge=1)
    total_classes: Optional[int] = None

    @model_validator(mode="after")
    def _check_partition(self) -> "StreamConfig":
        needed = self.base_classes + self.sessions * self.n_way
        if self.total_classes is not None and needed > self.total_classes:
            raise ValueError(
                f"base_classes + sessions * n_way = {needed} exceeds total_classes = {self.total_classes}"
            )
        return self

    @property
    def class_count(self) -> int:
        return self.base_classes + self.sessions * self.n_way


class NetworkConfig(Base):
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    embedding_dim: int = Field(32, ge=1)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v: List[int]) -> List[int]:
        if any(h < 1 for h in v):
            raise ValueError("hidden layer widths must be positive")
        return v


class EvalConfig(Base):
    classify_avg_copies: bool = False
    threads: Optional[int] = Field(None, ge=1)


class RunConfig(Base):
    stream: StreamConfig = Field(default_factory=StreamConfig)
    data: Optional[str] = None
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    plan: TrainPlan = Field(default_factory=TrainPlan)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    out_dir: str = "runs/latest"

    def echo(self) -> Dict[str, Any]:
        # out_dir stays out of reports so identical runs in different folders compare equal
        return self.model_dump(mode="json", by_alias=True, exclude={"out_dir"})


class MemoryReport(Base):
    prototype_vectors: int
    stat_means: int
    stat_matrices: int
    stored_vectors: int


class RunReport(Base):
    method: str
    seed: int
    sessions: int
    accuracy: List[List[Optional[float]]]
    cumulative: List[float]
    bwt: Optional[float]
    memory: MemoryReport
    config: Dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        try:
            return cls.model_validate(json.loads(text))
        except (ValidationError, ValueError) as e:
            raise ConfigError(f"invalid report: {e}")


def load_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e))


def _leaf_paths(model: type, prefix: Tuple[str, ...] = ()) -> Dict[Tuple[str, ...], Any]:
    out: Dict[Tuple[str, ...], Any] = {}
    for name, field in model.model_fields.items():
        key = field.alias or name
        ann = field.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out.update(_leaf_paths(ann, prefix + (key,)))
        else:
            out[prefix + (key,)] = ann
    return out


LEAF_PATHS = _leaf_paths(RunConfig)


def resolve_override_key(key: str) -> Tuple[str, ...]:
    """Maps a flag name (`lambda`, `b-max`, `sgd.initial-lr`) to a unique path in the config tree."""
    parts = tuple(p.replace("-", "_") for p in key.strip().lstrip("-").split("."))
    matches = [p for p in LEAF_PATHS if p[-len(parts):] == parts]
    if not matches:
        raise ConfigError(f"unknown config key: {key}")
    if len(matches) > 1:
        options = ", ".join(".".join(m) for m in sorted(matches))
        raise ConfigError(f"ambiguous config key {key!r}; use one of: {options}")
    return matches[0]


def _parse_value(raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        return json.loads(s)
    except ValueError:
        if s[:1] in ("[", "{"):
            raise ConfigError(f"cannot parse value {raw!r} as JSON")
        return s


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = json.loads(json.dumps(data))
    for key, raw in overrides.items():
        path = resolve_override_key(key)
        node = merged
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_value(raw)
    return merged
