"""Minimal feed-forward network machinery with manual backpropagation.

Each layer is linear -> (batch norm) -> activation -> (dropout); dropout is
inverted (scaled at train time) so eval needs no compensation. Training uses
Adam with bias correction. Parameters serialize to JSON with exact float
round-trip for checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, StaleCacheError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch

CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """Configuration of one fully connected layer."""

    in_dim: int
    out_dim: int
    activation: str = "relu"
    batch_norm: bool = False
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for one training run."""

    batch_size: int = 64
    epochs: int = 200
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")


def _init_layer(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
    layer = {
        "W": rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)),
        "b": np.zeros(spec.out_dim),
    }
    if spec.batch_norm:
        layer["gamma"] = np.ones(spec.out_dim)
        layer["beta"] = np.zeros(spec.out_dim)
        layer["run_mean"] = np.zeros(spec.out_dim)
        layer["run_var"] = np.ones(spec.out_dim)
    return layer


TRAINABLE_KEYS = ("W", "b", "gamma", "beta")


@dataclass
class Mlp:
    """A stack of fully connected layers with explicit parameters."""

    specs: list[LayerSpec]
    layers: list[dict[str, np.ndarray]]

    @classmethod
    def build(cls, specs: list[LayerSpec], rng: np.random.Generator) -> "Mlp":
        for prev, nxt in zip(specs, specs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeMismatchError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        return cls(specs=list(specs), layers=[_init_layer(s, rng) for s in specs])

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def forward(
        self,
        x: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, list[dict]]:
        """Run the stack on a batch (N, in_dim) or vector (in_dim,).

        Returns (output, cache). Train mode uses batch statistics, updates
        running stats, and draws dropout masks from `rng`; eval mode is
        deterministic and uses running statistics.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                f"input dim {x.shape[1]} != first layer in_dim {self.in_dim}"
            )
        train = mode == "train"
        if train and rng is None and any(
            s.dropout_p > 0 for s in self.specs
        ):
            raise ValueError("train mode with dropout requires an rng")

        cache: list[dict] = []
        for spec, layer in zip(self.specs, self.layers):
            c: dict = {"x": x}
            z = x @ layer["W"] + layer["b"]
            if spec.batch_norm:
                if train:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    layer["run_mean"][:] = (
                        BN_MOMENTUM * layer["run_mean"] + (1 - BN_MOMENTUM) * mean
                    )
                    layer["run_var"][:] = (
                        BN_MOMENTUM * layer["run_var"] + (1 - BN_MOMENTUM) * var
                    )
                else:
                    mean = layer["run_mean"]
                    var = layer["run_var"]
                std = np.sqrt(var + BN_EPS)
                zhat = (z - mean) / std
                h = layer["gamma"] * zhat + layer["beta"]
                c.update(zhat=zhat, std=std, bn_train=train)
            else:
                h = z
            if spec.activation == "relu":
                a = np.maximum(h, 0.0)
                c["h"] = h
            else:
                a = h
            if train and spec.dropout_p > 0:
                mask = rng.random(a.shape) >= spec.dropout_p
                a = a * mask / (1.0 - spec.dropout_p)
                c["mask"] = mask
            cache.append(c)
            x = a
        return (x[0] if squeeze else x), cache

    def backward(
        self, cache: list[dict], output_grad: np.ndarray
    ) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
        """Reverse-mode gradients for a train-mode forward pass.

        `output_grad` is dLoss/doutput with the same shape as the forward
        output. Returns (per-layer parameter grads, input grad).
        """
        g = np.asarray(output_grad, dtype=float)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        if len(cache) != len(self.specs):
            raise StaleCacheError("cache depth does not match layer stack")
        if g.shape[1] != self.out_dim:
            raise StaleCacheError(
                f"output grad dim {g.shape[1]} != out_dim {self.out_dim}"
            )
        grads: list[dict[str, np.ndarray]] = [{} for _ in self.specs]
        for i in range(len(self.specs) - 1, -1, -1):
            spec, layer, c = self.specs[i], self.layers[i], cache[i]
            if "mask" in c:
                g = g * c["mask"] / (1.0 - spec.dropout_p)
            if spec.activation == "relu":
                g = g * (c["h"] > 0)
            if spec.batch_norm:
                if not c.get("bn_train"):
                    raise StaleCacheError(
                        "backward needs a cache from a train-mode forward"
                    )
                zhat, std = c["zhat"], c["std"]
                grads[i]["gamma"] = np.sum(g * zhat, axis=0)
                grads[i]["beta"] = np.sum(g, axis=0)
                g = (layer["gamma"] / std) * (
                    g - g.mean(axis=0) - zhat * (g * zhat).mean(axis=0)
                )
            x = c["x"]
            if x.shape[0] != g.shape[0]:
                raise StaleCacheError("batch size of cache and grads disagree")
            grads[i]["W"] = x.T @ g
            grads[i]["b"] = g.sum(axis=0)
            g = g @ layer["W"].T
        return grads, (g[0] if squeeze else g)

    def trainable(self) -> list[np.ndarray]:
        """References to trainable parameter arrays in a fixed order."""
        out = []
        for layer in self.layers:
            for key in TRAINABLE_KEYS:
                if key in layer:
                    out.append(layer[key])
        return out

    def grads_in_order(self, grads: list[dict[str, np.ndarray]]) -> list[np.ndarray]:
        """Gradient arrays matching the trainable() order."""
        out = []
        for layer, g in zip(self.layers, grads):
            for key in TRAINABLE_KEYS:
                if key in layer:
                    out.append(g[key])
        return out

    def zero_grads(self) -> list[dict[str, np.ndarray]]:
        """Zero-filled gradient structure matching the layer stack."""
        return [
            {k: np.zeros_like(layer[k]) for k in TRAINABLE_KEYS if k in layer}
            for layer in self.layers
        ]

    def to_dict(self) -> dict:
        return {
            "specs": [vars(s) for s in self.specs],
            "layers": [
                {k: v.tolist() for k, v in layer.items()} for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        specs = [LayerSpec(**s) for s in d["specs"]]
        layers = []
        for spec, layer in zip(specs, d["layers"]):
            arrays = {k: np.asarray(v, dtype=float) for k, v in layer.items()}
            if arrays["W"].shape != (spec.in_dim, spec.out_dim):
                raise ShapeMismatchError("checkpoint weight shape mismatch")
            layers.append(arrays)
        return cls(specs=specs, layers=layers)


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per trainable array."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray]) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    config: TrainConfig,
    t: int,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with bias correction; mutates params/state in place.

    `t` is the 1-based step index.
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def block_dropout(
    child_outputs: list[np.ndarray],
    p_block: float,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Concatenate child outputs, zeroing whole blocks at train time.

    Each child's entire output is dropped independently per sample with
    probability `p_block`; survivors are scaled by 1/(1-p_block). Returns
    (concatenated (N, sum dims), keep mask (N, n_children) or None in eval).
    """
    if not child_outputs:
        raise ValueError("need at least one child output")
    if not 0.0 <= p_block < 1.0:
        raise ValueError("p_block must be in [0, 1)")
    squeeze = all(np.asarray(o).ndim == 1 for o in child_outputs)
    outs = [np.atleast_2d(np.asarray(o, dtype=float)) for o in child_outputs]
    n = outs[0].shape[0]
    if any(o.shape[0] != n for o in outs):
        raise ShapeMismatchError("child outputs must share the batch dimension")
    if mode == "train" and p_block > 0:
        if rng is None:
            raise ValueError("train-mode block dropout requires an rng")
        keep = rng.random((n, len(outs))) >= p_block
        scale = 1.0 / (1.0 - p_block)
        out = np.concatenate(
            [o * keep[:, j : j + 1] * scale for j, o in enumerate(outs)], axis=1
        )
        return (out[0] if squeeze else out), keep
    out = np.concatenate(outs, axis=1)
    return (out[0] if squeeze else out), None
