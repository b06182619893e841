from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

NUM_STAGES = 4  # Four (conv, conv, pool, attention) stages
POOL_FACTOR = 2**NUM_STAGES  # Input must survive four 2x poolings


class BackboneConfig(BaseModel):
    """Architecture of the attention CNN that turns a frame into a feature vector"""

    input_height: int = Field(64, gt=0)
    input_width: int = Field(64, gt=0)
    input_channels: Literal[3] = 3
    stage_kernel_counts: List[int] = [16, 32, 32, 64]  # Two convs per stage
    kernel_size: Literal[3] = 3
    attention_hidden: int = Field(128, gt=0)  # Width of the shared MLP
    attention_bias: bool = False
    use_channel_attention: bool = True
    use_spatial_attention: bool = True

    @field_validator("stage_kernel_counts")
    @classmethod
    def _four_positive_stages(cls, counts: List[int]) -> List[int]:
        if len(counts) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stages, got {len(counts)}")
        if any(c <= 0 for c in counts):
            raise ValueError("kernel counts must be positive")
        return counts

    @model_validator(mode="after")
    def _divisible_input(self) -> "BackboneConfig":
        for name in ("input_height", "input_width"):
            value = getattr(self, name)
            if value % POOL_FACTOR:
                raise ValueError(f"{name}={value} is not divisible by {POOL_FACTOR}")
        return self

    @property
    def feature_size(self) -> int:
        return self.stage_kernel_counts[-1]

    @property
    def uses_attention(self) -> bool:
        return self.use_channel_attention or self.use_spatial_attention


class RecurrentConfig(BaseModel):
    """Stacked GRU sequence model and classifier head"""

    input_size: int = Field(64, gt=0)  # Backbone feature length
    hidden_size: int = Field(32, gt=0)
    num_layers: int = Field(3, gt=0)
    bidirectional: bool = True
    use_bias: bool = False
    sequence_length: int = Field(16, gt=0)
    num_classes: int = Field(2, ge=2)

    @property
    def representation_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)


class ModelConfig(BaseModel):
    """Complete architecture description stored alongside the weights"""

    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    recurrent: RecurrentConfig = Field(default_factory=RecurrentConfig)

    @model_validator(mode="after")
    def _feature_sizes_agree(self) -> "ModelConfig":
        if self.recurrent.input_size != self.backbone.feature_size:
            raise ValueError(
                f"recurrent input_size {self.recurrent.input_size} does not match "
                f"backbone feature size {self.backbone.feature_size}"
            )
        return self


class TrainConfig(BaseModel):
    """Optimisation hyperparameters"""

    learning_rate: float = Field(1e-4, gt=0)  # Static, no schedule
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(300, ge=1)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    adam_epsilon: float = Field(1e-8, gt=0)
    seed: int = 0
    sequence_length: int = Field(16, ge=1)
    dtype: Literal["float32", "float64"] = "float32"


class TrainRecord(BaseModel):
    """One completed epoch"""

    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


class SynthSpec(BaseModel):
    """Shape of the synthetic motion dataset"""

    num_classes: int = Field(3, ge=2, le=5)
    clips_per_class: int = Field(20, ge=2)
    frames: int = Field(16, ge=1)
    size: int = Field(32, ge=8)


class ManifestRow(BaseModel):
    """One clip entry of a dataset manifest"""

    path: str
    label: str
    split: Optional[Literal["train", "val", "test"]] = None  # None until assigned

    @field_validator("label")
    @classmethod
    def _label_not_blank(cls, label: str) -> str:
        if not label.strip():
            raise ValueError("label must not be empty")
        return label.strip()


class BenchReport(BaseModel):
    """Runtime of the per-frame recognition pipeline"""

    spf: float  # Seconds per frame
    fps: float  # Frames per second
    warmup_frames: int
    timed_frames: int
    threads: int
    input_height: int
    input_width: int
    methodology: str = (
        "wall clock over backbone passes on synthetic frames plus the per-frame "
        "share (1/sequence_length) of one recurrent pass; I/O and preprocessing "
        "excluded"
    )
    reference: str = "published CPU reference: 0.0049 SPF / 250 FPS (hardware-bound)"

    def to_record(self) -> str:
        """Single-line machine-readable form"""
        return (
            f"spf={self.spf!r} fps={self.fps!r} warmup={self.warmup_frames} "
            f"timed={self.timed_frames} threads={self.threads}"
        )

    def to_text(self) -> str:
        """Human-readable summary"""
        return (
            f"Input {self.input_height}x{self.input_width}, "
            f"{self.threads} thread(s)\n"
            f"  Seconds per frame : {self.spf:.6f}\n"
            f"  Frames per second : {self.fps:.2f}\n"
            f"  Warmup / timed    : {self.warmup_frames} / {self.timed_frames}\n"
            f"  Method            : {self.methodology}\n"
            f"  Context           : {self.reference}"
        )
