from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from attention import AttentionBlockParams, AttentionTrace, dual_attention
from autodiff import (
    ShapeMismatchError,
    Tensor,
    activation,
    conv2d,
    fan_scaled_uniform,
    global_pool,
    maxpool2d,
    reshape,
)
from models import BackboneConfig


@dataclass
class BackboneParams:
    """Conv kernels and attention blocks of the four-stage CNN"""

    config: BackboneConfig
    conv_kernels: List[Tensor]  # 8 tensors, 3 x 3 x Cin x Cout
    attention_blocks: List[AttentionBlockParams]  # One per stage, empty if disabled

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [(f"backbone.conv{i + 1}", k) for i, k in enumerate(self.conv_kernels)]
        for i, block in enumerate(self.attention_blocks):
            named.extend(block.named_parameters(f"backbone.attention{i + 1}."))
        return named


def conv_channel_chain(config: BackboneConfig) -> List[Tuple[int, int]]:
    """(Cin, Cout) of each conv; inputs follow the previous layer's outputs"""
    chain = []
    c_in = config.input_channels
    for count in config.stage_kernel_counts:
        chain.append((c_in, count))
        chain.append((count, count))
        c_in = count
    return chain


def build_backbone(
    config: BackboneConfig, seed: int, dtype=np.float32, init: str = "uniform"
) -> BackboneParams:
    """
    Allocate backbone weights.

    `init="uniform"` draws fan-scaled uniform values from a generator seeded
    with `seed`, in declaration order; `init="zeros"` gives the all-zero
    model used for analytic checks.
    """
    if init not in ("uniform", "zeros"):
        raise ValueError(f"unknown init '{init}'")
    rng = np.random.default_rng(seed) if init == "uniform" else None
    size = config.kernel_size

    kernels = []
    for c_in, c_out in conv_channel_chain(config):
        shape = (size, size, c_in, c_out)
        data = np.zeros(shape) if rng is None else fan_scaled_uniform(rng, shape, dtype)
        kernels.append(Tensor.parameter(data, dtype=dtype))

    blocks = []
    if config.uses_attention:
        for channels in config.stage_kernel_counts:
            blocks.append(
                AttentionBlockParams.create(
                    channels,
                    config.attention_hidden,
                    rng,
                    dtype=dtype,
                    use_channel=config.use_channel_attention,
                    use_spatial=config.use_spatial_attention,
                    bias=config.attention_bias,
                )
            )
    return BackboneParams(config=config, conv_kernels=kernels, attention_blocks=blocks)


def extract_features(
    frames: Tensor, params: BackboneParams
) -> Tuple[Tensor, List[AttentionTrace]]:
    """
    Run a batch of frames (N x H x W x 3, values in [0, 1]) through the CNN.

    Returns the N x F feature matrix and, per stage, the attention trace
    (empty when attention is disabled).
    """
    config = params.config
    expected = (config.input_height, config.input_width, config.input_channels)
    if frames.ndim != 4 or frames.shape[1:] != expected:
        raise ShapeMismatchError(
            f"frames must be N x {expected[0]} x {expected[1]} x {expected[2]}, "
            f"got {frames.shape}"
        )

    x = frames
    traces = []
    for stage in range(len(config.stage_kernel_counts)):
        x = activation(conv2d(x, params.conv_kernels[2 * stage]), "relu")
        x = activation(conv2d(x, params.conv_kernels[2 * stage + 1]), "relu")
        x = maxpool2d(x)
        if params.attention_blocks:
            x, trace = dual_attention(
                x,
                params.attention_blocks[stage],
                use_channel=config.use_channel_attention,
                use_spatial=config.use_spatial_attention,
            )
            traces.append(trace)

    pooled = global_pool(x, "avg")
    return reshape(pooled, (frames.shape[0], config.feature_size)), traces


def backbone_forward(frame: Tensor, params: BackboneParams) -> Tensor:
    """Per-frame feature vector (length F = last stage kernel count)"""
    if frame.ndim != 3:
        raise ShapeMismatchError(f"frame must be H x W x C, got {frame.shape}")
    features, _ = extract_features(reshape(frame, (1,) + frame.shape), params)
    return reshape(features, (params.config.feature_size,))


def saliency_maps(
    frame: Tensor, params: BackboneParams, traces: Optional[List[AttentionTrace]] = None
) -> List[np.ndarray]:
    """
    Spatial attention gates of the four blocks for one frame.

    Map s has shape (H / 2^(s+1)) x (W / 2^(s+1)) x 1, values in (0, 1).
    """
    if not params.config.use_spatial_attention:
        raise ValueError("model was built without spatial attention; no saliency")
    if traces is None:
        if frame.ndim != 3:
            raise ShapeMismatchError(f"frame must be H x W x C, got {frame.shape}")
        _, traces = extract_features(reshape(frame, (1,) + frame.shape), params)
    return [trace.a_s.data[0] for trace in traces]


def parameter_count(params: BackboneParams) -> int:
    return sum(t.size for _, t in params.named_parameters())
