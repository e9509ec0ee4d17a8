"""Toy teacher/student networks that expose logits and penultimate features.

``mlp`` is a token-wise MLP over image patches with a learned position
embedding; its penultimate output is already a B x N x D token map.
``tinyconv`` is two 3x3 convolutions around a 2x2 average pool; its
penultimate output is a B x C x h x w feature map.
Both heads mean-pool the penultimate features and apply one linear layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, conv2d, matmul, mean, relu, reshape
from .tokens import patch_feature_map, patchify

ARCHS = ("mlp", "tinyconv")


@dataclass(frozen=True)
class NetSpec:
    arch: str = "mlp"
    widths: tuple[int, ...] = (4, 64, 64)
    num_classes: int = 10
    in_channels: int = 1
    image_size: int = 8
    patch: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.arch == "mlp":
            if len(self.widths) < 2:
                raise ConfigError("mlp needs at least an input and one hidden width")
            if self.image_size % self.patch:
                raise ConfigError(f"patch {self.patch} does not divide image size {self.image_size}")
            expected = self.patch * self.patch * self.in_channels
            if self.widths[0] != expected:
                raise ConfigError(
                    f"mlp input width must equal patch*patch*channels = {expected}, got {self.widths[0]}"
                )
        else:
            if len(self.widths) != 2:
                raise ConfigError("tinyconv takes exactly two channel widths")
            if self.image_size % 2:
                raise ConfigError("tinyconv needs an even image size")


def _uniform(rng, bound, shape, name):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class ToyNet:
    def __init__(self, spec: NetSpec):
        spec.validate()
        self.spec = spec
        self.arch = spec.arch
        self._params: dict[str, Tensor] = {}
        rng = np.random.default_rng(spec.seed)
        if spec.arch == "mlp":
            n_tok = (spec.image_size // spec.patch) ** 2
            w = spec.widths
            for i, (a, b) in enumerate(zip(w[:-1], w[1:])):
                self._add(_uniform(rng, math.sqrt(6.0 / a), (a, b), f"fc{i}.weight"))
                self._add(Tensor(np.zeros(b), requires_grad=True, name=f"fc{i}.bias"))
                if i == 0:
                    self._add(_uniform(rng, 0.1, (n_tok, b), "pos_embed"))
            feat = w[-1]
        else:
            c = spec.in_channels
            c1, c2 = spec.widths
            self._add(_uniform(rng, math.sqrt(6.0 / (c * 9)), (c1, c, 3, 3), "conv0.weight"))
            self._add(Tensor(np.zeros((1, c1, 1, 1)), requires_grad=True, name="conv0.bias"))
            self._add(_uniform(rng, math.sqrt(6.0 / (c1 * 9)), (c2, c1, 3, 3), "conv1.weight"))
            self._add(Tensor(np.zeros((1, c2, 1, 1)), requires_grad=True, name="conv1.bias"))
            feat = c2
        self._add(_uniform(rng, 1.0 / math.sqrt(feat), (feat, spec.num_classes), "head.weight"))
        self._add(Tensor(np.zeros(spec.num_classes), requires_grad=True, name="head.bias"))
        self.feature_dim = feat

    def _add(self, t: Tensor) -> None:
        self._params[t.name] = t

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def freeze(self) -> "ToyNet":
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise DimensionError(f"state is missing parameters {sorted(missing)}")
        for k, p in self._params.items():
            p.assign(arrays[k])

    # -- forward ----------------------------------------------------------

    @property
    def native_tokens(self) -> int:
        """Token count of the penultimate feature map before any re-patching."""
        s = self.spec
        if self.arch == "mlp":
            return (s.image_size // s.patch) ** 2
        return (s.image_size // 2) ** 2

    def forward(self, images) -> tuple[Tensor, Tensor]:
        """Return (penultimate features, logits) for a B x C x H x W batch."""
        x = as_tensor(images)
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.image_size, s.image_size):
            raise DimensionError(
                f"expected B x {s.in_channels} x {s.image_size} x {s.image_size} images, got {x.shape}"
            )
        p = self._params
        if self.arch == "mlp":
            h = patchify(x, s.patch)
            n_layers = len(s.widths) - 1
            for i in range(n_layers):
                h = matmul(h, p[f"fc{i}.weight"]) + p[f"fc{i}.bias"]
                if i == 0:
                    h = h + p["pos_embed"]
                h = relu(h)
            feats = h
        else:
            h = relu(conv2d(x, p["conv0.weight"], padding=1) + p["conv0.bias"])
            b, c, hh, ww = h.shape
            h = mean(reshape(h, (b, c, hh // 2, 2, ww // 2, 2)), axis=(3, 5))
            feats = relu(conv2d(h, p["conv1.weight"], padding=1) + p["conv1.bias"])
        logits = matmul(self.embed(feats), p["head.weight"]) + p["head.bias"]
        return feats, logits

    __call__ = forward

    def embed(self, feats: Tensor) -> Tensor:
        """Pooled penultimate vector (the classifier's input), B x D."""
        if self.arch == "mlp":
            return mean(feats, axis=1)
        return mean(feats, axis=(2, 3))

    def tokens(self, feats: Tensor, target_m: int | None = None) -> Tensor:
        """B x M x D tokens from penultimate features."""
        target_m = self.native_tokens if target_m is None else target_m
        if self.arch == "mlp":
            if feats.shape[1] != target_m:
                raise ConfigError(
                    f"mlp features carry {feats.shape[1]} tokens and cannot be re-patched to {target_m}"
                )
            return feats
        return patch_feature_map(feats, target_m)

    def token_dim(self, target_m: int | None = None) -> int:
        target_m = self.native_tokens if target_m is None else target_m
        if self.arch == "mlp":
            return self.feature_dim
        hw = self.spec.image_size // 2
        return self.feature_dim * (hw * hw // target_m)


def build_net(spec: NetSpec, teacher: NetSpec | None = None) -> ToyNet:
    """Instantiate a seeded net; with ``teacher`` given, require a strictly smaller student."""
    net = ToyNet(spec)
    if teacher is not None:
        t = ToyNet(teacher)
        if net.num_parameters() >= t.num_parameters():
            raise ConfigError(
                f"student has {net.num_parameters()} parameters, teacher {t.num_parameters()}; "
                "the student must be strictly smaller"
            )
    return net

