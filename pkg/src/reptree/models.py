"""Dense-network parameters and the numeric ops federated training needs.

Parameters live in named, flat float64 vectors so that distances, averaging,
and serialization never care about array rank.  The forward/backward pair
implements a plain fully connected network with interleaved weight/bias
layers; no ML framework is involved, only numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")
HEADS = ("classification", "regression")
LOSSES = ("cross_entropy", "l1")


@dataclass
class LayerTensor:
    """One named parameter tensor stored as a flat row-major vector."""

    name: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        expected = int(np.prod(self.shape)) if self.shape else 1
        if self.values.size != expected:
            raise ValueError(
                f"layer {self.name!r}: {self.values.size} values do not fill shape {self.shape}"
            )

    def matrix(self) -> np.ndarray:
        """Values viewed in their declared shape."""
        return self.values.reshape(self.shape)

    def copy(self) -> LayerTensor:
        return LayerTensor(self.name, self.shape, self.values.copy())


@dataclass
class ModelParams:
    """Full parameter set of one dense model.

    ``layers`` alternates weight and bias tensors, one pair per dense layer,
    input side first.  ``common_mask[k]`` says whether ``layers[k]`` is shared
    with the federation; unshared layers are personalized and never leave the
    client.  ``activations`` names one activation per dense layer; the last
    entry belongs to the head and is normally ``linear`` so classification
    models emit unnormalized scores.
    """

    layers: list[LayerTensor]
    common_mask: list[bool]
    activations: tuple[str, ...]
    head: str

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if len(self.layers) != 2 * len(self.activations):
            raise ValueError(
                f"{len(self.layers)} layers do not form weight/bias pairs for "
                f"{len(self.activations)} activations"
            )
        if len(self.common_mask) != len(self.layers):
            raise ValueError("common_mask must align with layers")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}, expected one of {ACTIVATIONS}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.common_mask = [bool(flag) for flag in self.common_mask]
        self.activations = tuple(self.activations)

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].shape[-1]

    @property
    def n_parameters(self) -> int:
        return sum(layer.values.size for layer in self.layers)

    def common_layers(self) -> list[LayerTensor]:
        return [layer for layer, flag in zip(self.layers, self.common_mask) if flag]

    def dense_pairs(self) -> list[tuple[LayerTensor, LayerTensor, str]]:
        """(weight, bias, activation) triples in forward order."""
        return [
            (self.layers[2 * k], self.layers[2 * k + 1], self.activations[k])
            for k in range(len(self.activations))
        ]

    def copy(self) -> ModelParams:
        return ModelParams(
            [layer.copy() for layer in self.layers],
            list(self.common_mask),
            self.activations,
            self.head,
        )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description used to draw fresh parameters."""

    n_inputs: int
    hidden: tuple[int, ...]
    n_outputs: int
    head: str = "classification"
    activation: str = "relu"
    personalized_head: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_inputs < 1:
            raise ValueError(f"n_inputs must be positive, got {self.n_inputs}")
        if self.n_outputs < 1:
            raise ValueError(f"n_outputs must be positive, got {self.n_outputs}")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Draw fresh parameters for ``spec``.

    Weights are zero-mean normal scaled by fan-in (std sqrt(2 / fan_in));
    biases start at zero.  The same (spec, seed) pair always produces
    bitwise-identical values.  With ``spec.personalized_head`` set, the final
    weight/bias pair is excluded from the common mask.
    """
    rng = np.random.default_rng(seed)
    sizes = (spec.n_inputs, *spec.hidden, spec.n_outputs)
    n_dense = len(sizes) - 1
    layers: list[LayerTensor] = []
    common: list[bool] = []
    for k in range(n_dense):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        shared = not (spec.personalized_head and k == n_dense - 1)
        layers.append(LayerTensor(f"dense{k}.weight", (fan_in, fan_out), weights.ravel()))
        layers.append(LayerTensor(f"dense{k}.bias", (fan_out,), np.zeros(fan_out)))
        common.extend((shared, shared))
    activations = tuple([spec.activation] * len(spec.hidden) + ["linear"])
    return ModelParams(layers, common, activations, spec.head)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be 2-d (samples, features), got shape {x.shape}")
    fan_in = params.layers[0].shape[0]
    if x.shape[1] != fan_in:
        raise ValueError(f"batch width {x.shape[1]} does not match model input size {fan_in}")
    return x


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Run the network on a (samples, features) batch; returns output scores."""
    a = _check_batch(params, batch)
    for weight, bias, act in params.dense_pairs():
        a = _activate(a @ weight.matrix() + bias.matrix(), act)
    return a


def _loss_and_output_grad(
    scores: np.ndarray, targets: np.ndarray, loss_kind: str, head: str
) -> tuple[float, np.ndarray]:
    n = scores.shape[0]
    if loss_kind == "cross_entropy":
        if head != "classification":
            raise ValueError(f"cross_entropy loss requires a classification head, got {head!r}")
        labels = np.asarray(targets)
        if labels.shape != (n,):
            raise ValueError(f"expected {n} integer labels, got shape {labels.shape}")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= scores.shape[1]:
            raise ValueError(
                f"labels must lie in [0, {scores.shape[1]}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        # log-sum-exp keeps the loss finite for large scores
        shift = scores.max(axis=1, keepdims=True)
        log_norm = shift[:, 0] + np.log(np.exp(scores - shift).sum(axis=1))
        loss = float(np.mean(log_norm - scores[np.arange(n), labels]))
        probs = np.exp(scores - log_norm[:, None])
        grad = probs
        grad[np.arange(n), labels] -= 1.0
        return loss, grad / n
    if loss_kind == "l1":
        if head != "regression":
            raise ValueError(f"l1 loss requires a regression head, got {head!r}")
        expected = np.asarray(targets, dtype=np.float64)
        if expected.ndim == 1:
            expected = expected[:, None]
        if expected.shape != scores.shape:
            raise ValueError(
                f"target shape {expected.shape} does not match output shape {scores.shape}"
            )
        residual = scores - expected
        loss = float(np.mean(np.abs(residual)))
        return loss, np.sign(residual) / residual.size
    raise ValueError(f"unknown loss {loss_kind!r}, expected one of {LOSSES}")


def backward_and_loss(
    params: ModelParams, batch: np.ndarray, targets: np.ndarray, loss_kind: str
) -> tuple[float, ModelParams]:
    """Mean loss over the batch plus its gradient in ModelParams shape."""
    x = _check_batch(params, batch)
    pairs = params.dense_pairs()
    inputs = [x]
    pre_acts = []
    a = x
    for weight, bias, act in pairs:
        z = a @ weight.matrix() + bias.matrix()
        pre_acts.append(z)
        a = _activate(z, act)
        inputs.append(a)

    loss, d_a = _loss_and_output_grad(a, targets, loss_kind, params.head)

    grad_layers: list[LayerTensor | None] = [None] * len(params.layers)
    for k in reversed(range(len(pairs))):
        weight, bias, act = pairs[k]
        d_z = d_a * _activation_grad(pre_acts[k], act)
        grad_layers[2 * k] = LayerTensor(
            weight.name, weight.shape, (inputs[k].T @ d_z).ravel()
        )
        grad_layers[2 * k + 1] = LayerTensor(bias.name, bias.shape, d_z.sum(axis=0))
        if k > 0:
            d_a = d_z @ weight.matrix().T
    grads = ModelParams(
        grad_layers, list(params.common_mask), params.activations, params.head
    )
    return loss, grads


def _check_aligned(params: ModelParams, grads: ModelParams) -> None:
    if len(params.layers) != len(grads.layers):
        raise ValueError("gradient layer count does not match parameters")
    for p, g in zip(params.layers, grads.layers):
        if p.name != g.name or p.shape != g.shape:
            raise ValueError(
                f"gradient layer {g.name!r} {g.shape} does not match parameter "
                f"{p.name!r} {p.shape}"
            )


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """One plain gradient-descent step; returns new parameters."""
    _check_aligned(params, grads)
    stepped = params.copy()
    for layer, grad in zip(stepped.layers, grads.layers):
        layer.values -= lr * grad.values
    return stepped


@dataclass
class AdamState:
    """Per-layer first/second moment estimates plus the step counter."""

    step: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]

    @classmethod
    def fresh(cls, params: ModelParams) -> AdamState:
        return cls(
            step=0,
            first_moment=[np.zeros_like(layer.values) for layer in params.layers],
            second_moment=[np.zeros_like(layer.values) for layer in params.layers],
        )


def adam_step(
    state: AdamState,
    params: ModelParams,
    grads: ModelParams,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam step; returns (new params, new state)."""
    _check_aligned(params, grads)
    t = state.step + 1
    stepped = params.copy()
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for layer, grad, m, v in zip(
        stepped.layers, grads.layers, state.first_moment, state.second_moment
    ):
        g = grad.values
        m_next = beta1 * m + (1.0 - beta1) * g
        v_next = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m_next / (1.0 - beta1**t)
        v_hat = v_next / (1.0 - beta2**t)
        layer.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m.append(m_next)
        new_v.append(v_next)
    return stepped, AdamState(t, new_m, new_v)


def layer_l2_distance(a: LayerTensor, b: LayerTensor) -> float:
    """Euclidean distance between two same-shaped layers."""
    if a.shape != b.shape:
        raise ValueError(f"layer shapes differ: {a.name!r} {a.shape} vs {b.name!r} {b.shape}")
    diff = a.values - b.values
    return float(np.sqrt(np.sum(diff * diff)))


def aligned_common_layers(
    a: ModelParams, b: ModelParams
) -> list[tuple[LayerTensor, LayerTensor]]:
    """Pair up the common layers of two models, checking name/shape agreement."""
    ours, theirs = a.common_layers(), b.common_layers()
    if not ours or not theirs:
        raise ValueError("models share no common layers")
    if len(ours) != len(theirs):
        raise ValueError(f"common layer counts differ: {len(ours)} vs {len(theirs)}")
    for lhs, rhs in zip(ours, theirs):
        if lhs.name != rhs.name or lhs.shape != rhs.shape:
            raise ValueError(
                f"common layers misaligned: {lhs.name!r} {lhs.shape} vs "
                f"{rhs.name!r} {rhs.shape}"
            )
    return list(zip(ours, theirs))


def model_divergence(a: ModelParams, b: ModelParams) -> float:
    """Mean L2 distance over the common layers of two models."""
    pairs = aligned_common_layers(a, b)
    return float(np.mean([layer_l2_distance(lhs, rhs) for lhs, rhs in pairs]))
