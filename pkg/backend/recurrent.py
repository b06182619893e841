from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from autodiff import (
    ShapeMismatchError,
    Tensor,
    activation,
    concat_channels,
    dense,
    fan_scaled_uniform,
    take,
)
from models import RecurrentConfig


class SequenceLengthError(ValueError):
    """Raised when a feature sequence does not have the configured length"""


@dataclass
class GruCellParams:
    """Weights of one GRU direction in one layer (input->hidden w, hidden->hidden u)"""

    w_r: Tensor
    u_r: Tensor
    w_mu: Tensor
    u_mu: Tensor
    w: Tensor
    u: Tensor
    b_r: Optional[Tensor] = None
    b_mu: Optional[Tensor] = None
    b: Optional[Tensor] = None

    def __post_init__(self):
        n_in, n_hidden = self.w_r.shape
        for name in ("w_mu", "w"):
            if getattr(self, name).shape != (n_in, n_hidden):
                raise ShapeMismatchError(f"{name} must be {n_in}x{n_hidden}")
        for name in ("u_r", "u_mu", "u"):
            if getattr(self, name).shape != (n_hidden, n_hidden):
                raise ShapeMismatchError(f"{name} must be {n_hidden}x{n_hidden}")

    @property
    def input_size(self) -> int:
        return self.w_r.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_r.shape[1]

    @classmethod
    def create(
        cls,
        input_size: int,
        hidden_size: int,
        rng: Optional[np.random.Generator],
        dtype=np.float32,
        bias: bool = False,
    ) -> "GruCellParams":
        """Allocate a cell; `rng=None` gives all-zero weights"""

        def weight(shape):
            if rng is None:
                return Tensor.parameter(np.zeros(shape), dtype=dtype)
            return Tensor.parameter(fan_scaled_uniform(rng, shape, dtype))

        def zeros():
            return Tensor.parameter(np.zeros(hidden_size), dtype=dtype) if bias else None

        square = (hidden_size, hidden_size)
        rect = (input_size, hidden_size)
        return cls(
            w_r=weight(rect),
            u_r=weight(square),
            w_mu=weight(rect),
            u_mu=weight(square),
            w=weight(rect),
            u=weight(square),
            b_r=zeros(),
            b_mu=zeros(),
            b=zeros(),
        )

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        names = ("w_r", "u_r", "b_r", "w_mu", "u_mu", "b_mu", "w", "u", "b")
        return [
            (prefix + name, getattr(self, name))
            for name in names
            if getattr(self, name) is not None
        ]


@dataclass
class GruStepTrace:
    """Gate values of one GRU time step"""

    r_t: Tensor
    mu_t: Tensor
    h_tilde_t: Tensor
    h_t: Tensor


@dataclass
class BiGruStackParams:
    """Stacked (bi)directional GRU layers plus the output weights w_o"""

    config: RecurrentConfig
    layers: List[Tuple[GruCellParams, Optional[GruCellParams]]]  # (forward, backward)
    classifier_weights: Tensor  # representation_size x num_classes

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for i, (fwd, bwd) in enumerate(self.layers):
            named.extend(fwd.named_parameters(f"gru{i + 1}.forward."))
            if bwd is not None:
                named.extend(bwd.named_parameters(f"gru{i + 1}.backward."))
        named.append(("classifier.w_o", self.classifier_weights))
        return named


def build_stack(
    config: RecurrentConfig, seed: int, dtype=np.float32, init: str = "uniform"
) -> BiGruStackParams:
    """Allocate all GRU layers and the classifier, deterministic given `seed`"""
    if init not in ("uniform", "zeros"):
        raise ValueError(f"unknown init '{init}'")
    rng = np.random.default_rng(seed) if init == "uniform" else None

    layers = []
    input_size = config.input_size
    for _ in range(config.num_layers):
        fwd = GruCellParams.create(
            input_size, config.hidden_size, rng, dtype, config.use_bias
        )
        bwd = None
        if config.bidirectional:
            bwd = GruCellParams.create(
                input_size, config.hidden_size, rng, dtype, config.use_bias
            )
        layers.append((fwd, bwd))
        input_size = config.representation_size

    shape = (config.representation_size, config.num_classes)
    w_o = np.zeros(shape) if rng is None else fan_scaled_uniform(rng, shape, dtype)
    return BiGruStackParams(
        config=config,
        layers=layers,
        classifier_weights=Tensor.parameter(w_o, dtype=dtype),
    )


def gru_step(x_t: Tensor, h_prev: Tensor, params: GruCellParams) -> GruStepTrace:
    """
    One GRU update.

        r   = sigmoid(w_r x + u_r h)
        mu  = sigmoid(w_mu x + u_mu h)
        h~  = tanh(w x + r * (u h))
        h_t = (1 - mu) * h + mu * h~
    """
    if x_t.shape[-1] != params.input_size:
        raise ShapeMismatchError(
            f"input width {x_t.shape[-1]} does not match cell input {params.input_size}"
        )
    if h_prev.shape[-1] != params.hidden_size:
        raise ShapeMismatchError(
            f"state width {h_prev.shape[-1]} does not match hidden {params.hidden_size}"
        )

    r_t = activation(
        dense(x_t, params.w_r, params.b_r) + dense(h_prev, params.u_r), "sigmoid"
    )
    mu_t = activation(
        dense(x_t, params.w_mu, params.b_mu) + dense(h_prev, params.u_mu), "sigmoid"
    )
    h_tilde_t = activation(
        dense(x_t, params.w, params.b) + r_t * dense(h_prev, params.u), "tanh"
    )
    # (1 - mu) * h + mu * h~ written as h + mu * (h~ - h)
    h_t = h_prev + mu_t * (h_tilde_t - h_prev)
    return GruStepTrace(r_t=r_t, mu_t=mu_t, h_tilde_t=h_tilde_t, h_t=h_t)


def _zero_state(like: Tensor, hidden_size: int) -> Tensor:
    return Tensor(np.zeros(like.shape[:-1] + (hidden_size,), dtype=like.dtype))


def _run_direction(
    sequence: Sequence[Tensor], params: GruCellParams, reverse: bool
) -> List[Tensor]:
    """Hidden states indexed by original position"""
    order = range(len(sequence) - 1, -1, -1) if reverse else range(len(sequence))
    states: List[Optional[Tensor]] = [None] * len(sequence)
    h = _zero_state(sequence[0], params.hidden_size)
    for t in order:
        h = gru_step(sequence[t], h, params).h_t
        states[t] = h
    return states


def _layer_states(
    sequence: Sequence[Tensor], fwd: GruCellParams, bwd: Optional[GruCellParams]
) -> Tuple[List[Tensor], Optional[List[Tensor]]]:
    if not sequence:
        raise ValueError("sequence must contain at least one step")
    forward_states = _run_direction(sequence, fwd, reverse=False)
    backward_states = None
    if bwd is not None:
        backward_states = _run_direction(sequence, bwd, reverse=True)
    return forward_states, backward_states


def bigru_layer(
    sequence: Sequence[Tensor], fwd: GruCellParams, bwd: Optional[GruCellParams]
) -> List[Tensor]:
    """
    Bidirectional GRU layer.

    output_t = concat(h_fwd_t, h_bwd_t) where the forward cell reads t = 1..n
    and the backward cell reads t = n..1; both start from zero states. With
    `bwd=None` the layer is unidirectional and output_t = h_fwd_t.
    """
    forward_states, backward_states = _layer_states(sequence, fwd, bwd)
    if backward_states is None:
        return forward_states
    return [concat_channels(f, b) for f, b in zip(forward_states, backward_states)]


def _split_steps(features: Union[Tensor, Sequence[Tensor]]) -> List[Tensor]:
    if isinstance(features, Tensor):
        # T x F, or B x T x F with time on axis 1
        axis = 0 if features.ndim == 2 else 1
        return [take(features, t, axis) for t in range(features.shape[axis])]
    return list(features)


def stack_forward(
    features: Union[Tensor, Sequence[Tensor]], params: BiGruStackParams
) -> Tensor:
    """
    Run the stacked layers and reduce the sequence to one representation.

    The representation is concat(last forward state, first-position
    backward state) of the top layer, or the last forward state when the
    stack is unidirectional.
    """
    steps = _split_steps(features)
    expected = params.config.sequence_length
    if len(steps) != expected:
        raise SequenceLengthError(f"expected {expected} time steps, got {len(steps)}")

    sequence = steps
    forward_states: List[Tensor] = []
    backward_states: Optional[List[Tensor]] = None
    for fwd, bwd in params.layers:
        forward_states, backward_states = _layer_states(sequence, fwd, bwd)
        if backward_states is None:
            sequence = forward_states
        else:
            sequence = [
                concat_channels(f, b) for f, b in zip(forward_states, backward_states)
            ]

    if backward_states is None:
        return forward_states[-1]
    return concat_channels(forward_states[-1], backward_states[0])


def class_logits(representation: Tensor, w_o: Tensor) -> Tensor:
    return dense(representation, w_o)


def classify(representation: Tensor, w_o: Tensor, num_classes: int) -> Tensor:
    """softmax(w_o . representation): a probability per class"""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if w_o.ndim != 2 or w_o.shape[1] != num_classes:
        raise ShapeMismatchError(
            f"classifier weights {w_o.shape} do not produce {num_classes} classes"
        )
    return activation(class_logits(representation, w_o), "softmax")


def parameter_count(params: BiGruStackParams) -> int:
    return sum(t.size for _, t in params.named_parameters())
