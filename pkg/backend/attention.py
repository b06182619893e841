from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from autodiff import (
    ShapeMismatchError,
    Tensor,
    activation,
    channel_pool,
    concat_channels,
    conv2d,
    dense,
    elementwise,
    fan_scaled_uniform,
    global_pool,
    reshape,
)

SPATIAL_KERNEL_SIZE = 3


@dataclass
class AttentionBlockParams:
    """Learnable weights of one dual attention block"""

    fc1_weights: Optional[Tensor]  # C x hidden, None without channel attention
    fc2_weights: Optional[Tensor]  # hidden x C
    spatial_kernel: Optional[Tensor]  # 3 x 3 x 2 x 1, None without spatial attention
    fc1_bias: Optional[Tensor] = None
    fc2_bias: Optional[Tensor] = None
    channels: int = 0

    def __post_init__(self):
        if self.fc1_weights is not None:
            c, hidden = self.fc1_weights.shape
            if self.fc2_weights is None or self.fc2_weights.shape != (hidden, c):
                raise ShapeMismatchError(
                    f"fc2 must be {hidden}x{c} to gate {c} channels"
                )
            self.channels = c
        if self.spatial_kernel is not None and self.spatial_kernel.shape != (
            SPATIAL_KERNEL_SIZE,
            SPATIAL_KERNEL_SIZE,
            2,
            1,
        ):
            raise ShapeMismatchError(
                f"spatial kernel must be 3x3x2x1, got {self.spatial_kernel.shape}"
            )

    @classmethod
    def create(
        cls,
        channels: int,
        hidden: int,
        rng: Optional[np.random.Generator],
        dtype=np.float32,
        use_channel: bool = True,
        use_spatial: bool = True,
        bias: bool = False,
    ) -> "AttentionBlockParams":
        """Allocate a block; `rng=None` gives all-zero weights"""

        def weight(shape):
            if rng is None:
                return Tensor.parameter(np.zeros(shape), dtype=dtype)
            return Tensor.parameter(fan_scaled_uniform(rng, shape, dtype))

        def zeros(n):
            return Tensor.parameter(np.zeros(n), dtype=dtype) if bias else None

        fc1 = fc2 = kernel = None
        if use_channel:
            fc1 = weight((channels, hidden))
            fc2 = weight((hidden, channels))
        if use_spatial:
            kernel = weight((SPATIAL_KERNEL_SIZE, SPATIAL_KERNEL_SIZE, 2, 1))
        return cls(
            fc1_weights=fc1,
            fc2_weights=fc2,
            spatial_kernel=kernel,
            fc1_bias=zeros(hidden) if use_channel else None,
            fc2_bias=zeros(channels) if use_channel else None,
            channels=channels,
        )

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        named = [
            ("fc1_weights", self.fc1_weights),
            ("fc1_bias", self.fc1_bias),
            ("fc2_weights", self.fc2_weights),
            ("fc2_bias", self.fc2_bias),
            ("spatial_kernel", self.spatial_kernel),
        ]
        return [(prefix + name, t) for name, t in named if t is not None]


@dataclass
class AttentionTrace:
    """Intermediate maps of one dual attention pass (None for disabled branches)"""

    v_c_max: Optional[Tensor]
    v_c_avg: Optional[Tensor]
    a_c: Optional[Tensor]
    att_c: Tensor
    att_c_max: Optional[Tensor]
    att_c_avg: Optional[Tensor]
    a_s: Optional[Tensor]
    att_s: Tensor
    f_rm: Tensor


def _shared_mlp(pooled: Tensor, params: AttentionBlockParams) -> Tensor:
    # Same fc1/fc2 weights serve both pooling branches
    rows = reshape(pooled, (-1, params.channels))
    hidden = activation(dense(rows, params.fc1_weights, params.fc1_bias), "relu")
    return reshape(dense(hidden, params.fc2_weights, params.fc2_bias), pooled.shape)


def _channel_gate(f_m: Tensor, params: AttentionBlockParams):
    if params.fc1_weights is None:
        raise ValueError("block has no channel attention weights")
    if f_m.shape[-1] != params.channels:
        raise ShapeMismatchError(
            f"feature map has {f_m.shape[-1]} channels, block expects {params.channels}"
        )
    v_c_max = _shared_mlp(global_pool(f_m, "max"), params)
    v_c_avg = _shared_mlp(global_pool(f_m, "avg"), params)
    a_c = activation(elementwise(v_c_max, v_c_avg, "add"), "sigmoid")
    att_c = elementwise(a_c, f_m, "mul")
    return v_c_max, v_c_avg, a_c, att_c


def _spatial_gate(att_c: Tensor, params: AttentionBlockParams):
    if params.spatial_kernel is None:
        raise ValueError("block has no spatial attention kernel")
    att_c_max = channel_pool(att_c, "max")
    att_c_avg = channel_pool(att_c, "avg")
    pooled = concat_channels(att_c_max, att_c_avg)
    a_s = activation(conv2d(pooled, params.spatial_kernel), "sigmoid")
    att_s = elementwise(a_s, att_c, "mul")
    return att_c_max, att_c_avg, a_s, att_s


def channel_attention(
    f_m: Tensor, params: AttentionBlockParams
) -> Tuple[Tensor, Tensor]:
    """
    Gate each channel of `f_m` by importance.

    The globally max- and average-pooled descriptors go through the shared
    MLP, are summed and squashed into a 1x1xC gate `a_c`; returns
    (a_c, a_c * f_m).
    """
    _, _, a_c, att_c = _channel_gate(f_m, params)
    return a_c, att_c


def spatial_attention(
    att_c: Tensor, params: AttentionBlockParams
) -> Tuple[Tensor, Tensor]:
    """
    Gate each spatial position of `att_c`.

    Channel-wise max and mean maps are stacked, convolved with the 3x3
    kernel and squashed into an HxWx1 gate `a_s`; returns (a_s, a_s * att_c).
    """
    _, _, a_s, att_s = _spatial_gate(att_c, params)
    return a_s, att_s


def dual_attention(
    f_m: Tensor,
    params: AttentionBlockParams,
    use_channel: bool = True,
    use_spatial: bool = True,
) -> Tuple[Tensor, AttentionTrace]:
    """Channel then spatial attention, added back onto the block input"""
    v_c_max = v_c_avg = a_c = None
    att_c = f_m
    if use_channel:
        v_c_max, v_c_avg, a_c, att_c = _channel_gate(f_m, params)

    att_c_max = att_c_avg = a_s = None
    att_s = att_c
    if use_spatial:
        att_c_max, att_c_avg, a_s, att_s = _spatial_gate(att_c, params)

    f_rm = elementwise(att_s, f_m, "add")
    trace = AttentionTrace(
        v_c_max=v_c_max,
        v_c_avg=v_c_avg,
        a_c=a_c,
        att_c=att_c,
        att_c_max=att_c_max,
        att_c_avg=att_c_avg,
        a_s=a_s,
        att_s=att_s,
        f_rm=f_rm,
    )
    return f_rm, trace
