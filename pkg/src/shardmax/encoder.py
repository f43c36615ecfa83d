"""Feed-forward encoder with batch normalization and an MLP projection head.

Layout: per hidden width one [linear -> batchnorm -> activation] block, then
a two-layer projection head (linear -> batchnorm -> activation -> linear)
onto the embedding space. Forward/backward are written out by hand; the
gradient of every trainable tensor is checked against finite differences in
the test suite.

Three batch-norm modes:
    TRAIN          batch statistics, running stats updated, weights trainable
    EVAL           running statistics, nothing mutated
    PRIOR_EXTRACT  batch statistics and running-stat updates, but the caller
                   never steps the weights (feature-extraction passes)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError
from .ltf import load_tensor_dir, save_tensor_dir
from .util import ensure_finite, rng_from


class BNMode(Enum):
    TRAIN = "train"
    EVAL = "eval"
    PRIOR_EXTRACT = "prior_extract"


_BATCH_STAT_MODES = (BNMode.TRAIN, BNMode.PRIOR_EXTRACT)
_ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    embed_dim: int = 128
    head_hidden: int | None = None   # default: the head's input width
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.embed_dim, *self.hidden_dims)
        if any(d < 1 for d in dims):
            raise ValueError("all dimensions must be >= 1")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ValueError("head_hidden must be >= 1")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be > 0")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def head_input(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def head_width(self) -> int:
        return self.head_hidden if self.head_hidden is not None else self.head_input

    def layer_plan(self):
        """Sequence of (kind, name, in_dim, out_dim); acts carry no params.

        Linear layers feeding a BN are bias-free (the mean subtraction would
        cancel the bias anyway); only the final projection keeps one.
        """
        plan = []
        prev = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            plan.append(("linear", f"blocks.{i}", prev, h))
            plan.append(("bn", f"blocks.{i}", h, h))
            plan.append(("act", f"blocks.{i}", h, h))
            prev = h
        plan.append(("linear", "head0", prev, self.head_width))
        plan.append(("bn", "head", self.head_width, self.head_width))
        plan.append(("act", "head", self.head_width, self.head_width))
        plan.append(("linear", "head1", self.head_width, self.embed_dim))
        return plan

    @staticmethod
    def linear_has_bias(name: str) -> bool:
        return name == "head1"


class EncoderCache:
    """Everything backward() needs, plus per-BN normalized activations for
    inspection (keyed by bn name)."""

    def __init__(self, mode: BNMode):
        self.mode = mode
        self.layers = []
        self.bn_normalized = {}
        self.backbone_out = None
        self.consumed = False


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict, running_mean: dict,
                 running_var: dict, bn_updates: dict, dtype=np.float32):
        self.config = config
        self.params = params
        self.running_mean = running_mean
        self.running_var = running_var
        self.bn_updates = bn_updates
        self.dtype = np.dtype(dtype)

    # -- construction ------------------------------------------------------

    @classmethod
    def init_random(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "Encoder":
        """Seeded init: scaled-normal linear weights, zero biases, identity BN."""
        rng = rng_from(seed, 0)
        dtype = np.dtype(dtype)
        params, r_mean, r_var, updates = {}, {}, {}, {}
        gain = 2.0 if config.activation == "relu" else 1.0
        for kind, name, d_in, d_out in config.layer_plan():
            if kind == "linear":
                std = np.sqrt(gain / d_in)
                params[f"{name}.w"] = (std * rng.standard_normal((d_in, d_out))).astype(dtype)
                if config.linear_has_bias(name):
                    params[f"{name}.b"] = np.zeros(d_out, dtype=dtype)
            elif kind == "bn":
                params[f"{name}.gamma"] = np.ones(d_out, dtype=dtype)
                params[f"{name}.beta"] = np.zeros(d_out, dtype=dtype)
                r_mean[name] = np.zeros(d_out, dtype=dtype)
                r_var[name] = np.ones(d_out, dtype=dtype)
                updates[name] = 0
        return cls(config, params, r_mean, r_var, updates, dtype)

    def copy(self) -> "Encoder":
        return Encoder(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.running_mean.items()},
            {k: v.copy() for k, v in self.running_var.items()},
            dict(self.bn_updates),
            self.dtype,
        )

    def param_names(self):
        return sorted(self.params)

    # -- forward -----------------------------------------------------------

    def forward(self, batch: np.ndarray, mode: BNMode):
        """(embeddings, cache). Batch statistics need at least two rows."""
        x = np.ascontiguousarray(batch, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"batch must be (B, {self.config.input_dim}), got {x.shape}")
        if mode in _BATCH_STAT_MODES and x.shape[0] < 2:
            raise ValueError("batch statistics are undefined for a single-row batch")
        cache = EncoderCache(mode)
        plan = self.config.layer_plan()
        head_start = len(plan) - 4
        for li, (kind, name, _d_in, _d_out) in enumerate(plan):
            if li == head_start:
                # what the projection head sees
                cache.backbone_out = x
            if kind == "linear":
                w = self.params[f"{name}.w"]
                cache.layers.append(("linear", name, x))
                x = x @ w
                if f"{name}.b" in self.params:
                    x = x + self.params[f"{name}.b"]
            elif kind == "bn":
                x = self._bn_forward(x, name, mode, cache)
            else:
                x = self._act_forward(x, cache, name)
        ensure_finite(x, "encoder embeddings")
        return x, cache

    def _bn_forward(self, x, name, mode, cache):
        gamma, beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
        eps = self.config.bn_epsilon
        if mode in _BATCH_STAT_MODES:
            b = x.shape[0]
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            istd = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean) * istd
            m = self.config.bn_momentum
            unbiased = var * (b / (b - 1))
            self.running_mean[name] = ((1 - m) * self.running_mean[name] + m * mean).astype(self.dtype)
            self.running_var[name] = ((1 - m) * self.running_var[name] + m * unbiased).astype(self.dtype)
            self.bn_updates[name] += 1
        else:
            istd = 1.0 / np.sqrt(self.running_var[name] + eps)
            xhat = (x - self.running_mean[name]) * istd
        cache.layers.append(("bn", name, (xhat, istd)))
        cache.bn_normalized[name] = xhat
        return gamma * xhat + beta

    def _act_forward(self, x, cache, name):
        kind = self.config.activation
        if kind == "relu":
            out = np.maximum(x, 0)
            cache.layers.append(("act", name, x))
        elif kind == "tanh":
            out = np.tanh(x)
            cache.layers.append(("act", name, out))
        else:
            out = x
            cache.layers.append(("act", name, None))
        return out

    def backbone_output(self, batch: np.ndarray) -> np.ndarray:
        """EVAL-mode activations entering the projection head."""
        _, cache = self.forward(batch, BNMode.EVAL)
        return cache.backbone_out

    # -- backward ----------------------------------------------------------

    def backward(self, cache: EncoderCache, grad_embeddings: np.ndarray):
        """(parameter gradients keyed like params, input gradients).

        Only TRAIN-mode caches are differentiable: EVAL/PRIOR_EXTRACT passes
        are inference-only by contract.
        """
        if cache.mode is not BNMode.TRAIN:
            raise ValueError(f"backward needs a TRAIN-mode cache, got {cache.mode.name}")
        if cache.consumed:
            raise ValueError("cache already consumed by a previous backward")
        cache.consumed = True
        grads = {}
        dx = np.ascontiguousarray(grad_embeddings, dtype=self.dtype)
        for kind, name, saved in reversed(cache.layers):
            if kind == "linear":
                x = saved
                grads[f"{name}.w"] = x.T @ dx
                if f"{name}.b" in self.params:
                    grads[f"{name}.b"] = dx.sum(axis=0)
                dx = dx @ self.params[f"{name}.w"].T
            elif kind == "bn":
                xhat, istd = saved
                gamma = self.params[f"{name}.gamma"]
                grads[f"{name}.gamma"] = (dx * xhat).sum(axis=0)
                grads[f"{name}.beta"] = dx.sum(axis=0)
                dxhat = dx * gamma
                dx = istd * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            else:
                act = self.config.activation
                if act == "relu":
                    dx = dx * (saved > 0)
                elif act == "tanh":
                    dx = dx * (1.0 - saved * saved)
        return grads, dx

    # -- persistence -------------------------------------------------------

    def save(self, dirpath):
        tensors = dict(self.params)
        for name in self.running_mean:
            tensors[f"{name}.running_mean"] = self.running_mean[name]
            tensors[f"{name}.running_var"] = self.running_var[name]
        extra = {
            "encoder_config": {
                "input_dim": self.config.input_dim,
                "hidden_dims": list(self.config.hidden_dims),
                "embed_dim": self.config.embed_dim,
                "head_hidden": self.config.head_hidden,
                "bn_momentum": self.config.bn_momentum,
                "bn_epsilon": self.config.bn_epsilon,
                "activation": self.config.activation,
            },
            "bn_updates": self.bn_updates,
            "dtype": str(self.dtype),
        }
        save_tensor_dir(dirpath, tensors, extra)

    @classmethod
    def load(cls, dirpath) -> "Encoder":
        tensors, manifest = load_tensor_dir(dirpath)
        if "encoder_config" not in manifest:
            raise DataError(f"{dirpath}: not an encoder checkpoint")
        cfg_raw = dict(manifest["encoder_config"])
        cfg_raw["hidden_dims"] = tuple(cfg_raw["hidden_dims"])
        config = EncoderConfig(**cfg_raw)
        dtype = np.dtype(manifest.get("dtype", "float32"))
        params, r_mean, r_var = {}, {}, {}
        for key, arr in tensors.items():
            if key.endswith(".running_mean"):
                r_mean[key[: -len(".running_mean")]] = arr.astype(dtype)
            elif key.endswith(".running_var"):
                r_var[key[: -len(".running_var")]] = arr.astype(dtype)
            else:
                params[key] = arr.astype(dtype)
        updates = {k: int(v) for k, v in manifest.get("bn_updates", {}).items()}
        return cls(config, params, r_mean, r_var, updates, dtype)
