"""Residual CNN family: encoder, velocity performer, context classifier."""

import math
from dataclasses import dataclass, field
from itertools import product
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .separation import N_FRAMES, N_MFCC

N_CONTEXTS = 6
K0_CHOICES = (3, 5)
K2_ENCODER_CHOICES = (1, 2, 3)
K2_PERFORMER_CHOICES = (1, 2, 4)
K1_BLOCKS = 4
CLASSIFIER_K1 = 5


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameter point of the architecture grid."""

    k0_encoder: int
    k0_performer: int
    k2_encoder: int
    k2_performer: int
    k1: int = K1_BLOCKS

    def __post_init__(self):
        if self.k0_encoder not in K0_CHOICES:
            raise ValueError(f"k0_encoder {self.k0_encoder} not in {K0_CHOICES}")
        if self.k0_performer not in K0_CHOICES:
            raise ValueError(f"k0_performer {self.k0_performer} not in {K0_CHOICES}")
        if self.k2_encoder not in K2_ENCODER_CHOICES:
            raise ValueError(f"k2_encoder {self.k2_encoder} not in {K2_ENCODER_CHOICES}")
        if self.k2_performer not in K2_PERFORMER_CHOICES:
            raise ValueError(
                f"k2_performer {self.k2_performer} not in {K2_PERFORMER_CHOICES}")
        if self.k1 != K1_BLOCKS:
            raise ValueError(f"k1 is fixed at {K1_BLOCKS}")

    @property
    def label(self) -> str:
        return (f"e{self.k0_encoder}x{self.k2_encoder}"
                f"-p{self.k0_performer}x{self.k2_performer}")


def enumerate_grid() -> List[ModelConfig]:
    """All 36 hyper-parameter points in lexicographic order."""
    return [ModelConfig(*combo) for combo in
            product(K0_CHOICES, K0_CHOICES,
                    K2_ENCODER_CHOICES, K2_PERFORMER_CHOICES)]


def _conv(dims: int):
    return nn.Conv1d if dims == 1 else nn.Conv2d


def _bn(dims: int):
    return nn.BatchNorm1d if dims == 1 else nn.BatchNorm2d


def reduced_size(size: Sequence[int], kernel: int) -> Tuple[int, ...]:
    """Spatial size after a stride-2 unpadded convolution."""
    return tuple((d - kernel) // 2 + 1 for d in size)


class ResidualBlock(nn.Module):
    """Grouped-conv residual block, optionally a stride-2 reducer."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 reducer: bool, dims: int = 2):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        conv, bn = _conv(dims), _bn(dims)
        groups = math.gcd(in_channels, out_channels)
        self.reducer = reducer
        stride = 2 if reducer else 1
        padding = 0 if reducer else kernel // 2
        self.conv1 = conv(in_channels, out_channels, kernel, stride=stride,
                          padding=padding, groups=groups, bias=False)
        self.bn1 = bn(out_channels)
        self.conv2 = conv(out_channels, out_channels, 1, bias=False)
        self.bn2 = bn(out_channels)
        self.relu = nn.ReLU()
        skip_kernel = kernel if reducer else 1
        self.skip = conv(in_channels, out_channels, skip_kernel, stride=stride,
                         groups=groups, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        main = self.relu(self.bn1(self.conv1(x)))
        main = self.relu(self.bn2(self.conv2(main)))
        return main + self.skip(x)


class Stack(nn.Sequential):
    """k1 residual blocks; the first changes channels, only the last reduces."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 k1: int, dims: int = 2):
        if k1 < 1:
            raise ValueError("a stack needs at least one block")
        blocks = []
        for i in range(k1):
            blocks.append(ResidualBlock(
                in_channels if i == 0 else out_channels, out_channels,
                kernel, reducer=(i == k1 - 1), dims=dims))
        super().__init__(*blocks)


class Head(nn.Module):
    """Spatial collapse to 1, then a grouped 1-kernel conv and activation."""

    def __init__(self, in_channels: int, out_channels: int,
                 spatial: Sequence[int], activation: str, dims: int = 2):
        super().__init__()
        conv, bn = _conv(dims), _bn(dims)
        kernel = tuple(spatial) if dims == 2 else spatial[0]
        self.collapse = conv(in_channels, out_channels, kernel, bias=False)
        self.bn = bn(out_channels)
        self.relu = nn.ReLU()
        self.mix = conv(out_channels, out_channels, 1, groups=out_channels,
                        bias=True)
        if activation == "relu":
            self.activation = nn.ReLU()
        elif activation == "sigmoid":
            self.activation = nn.Sigmoid()
        elif activation == "softmax":
            self.activation = nn.Softmax(dim=1)
        else:
            raise ValueError(f"unknown activation {activation!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.relu(self.bn(self.collapse(x)))
        y = self.activation(self.mix(y))
        return y.flatten(1)


class PartNetwork(nn.Module):
    """Residual stacks plus head, sized from the input spatial shape.

    Stacks are appended while the minimum spatial dimension is still at
    least the kernel size; stack s outputs round_half_up(8*k2*(s+1))
    channels. The head then collapses whatever spatial extent remains.
    """

    def __init__(self, in_channels: int, spatial: Sequence[int], k0: int,
                 k1: int, k2: float, out_channels: Optional[int],
                 activation: str):
        super().__init__()
        spatial = tuple(int(d) for d in spatial)
        dims = len(spatial)
        if dims not in (1, 2):
            raise ValueError("only 1-D and 2-D parts are supported")
        if min(spatial) < k0:
            raise ValueError(
                f"input spatial size {spatial} smaller than kernel {k0}")
        stacks = []
        channels = in_channels
        s = 0
        while min(spatial) >= k0:
            c = round_half_up(8 * k2 * (s + 1))
            stacks.append(Stack(channels, c, k0, k1, dims=dims))
            channels = c
            spatial = reduced_size(spatial, k0)
            s += 1
        self.stacks = nn.Sequential(*stacks)
        if out_channels is None:
            out_channels = channels
        self.head = Head(channels, out_channels, spatial, activation, dims=dims)
        self.out_channels = out_channels
        self.n_stacks = s

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.stacks(x))


def build_encoder(config: ModelConfig) -> PartNetwork:
    """Feature-map encoder: 1x13x30 input to a non-negative latent."""
    return PartNetwork(1, (N_MFCC, N_FRAMES), config.k0_encoder, config.k1,
                       config.k2_encoder, None, "relu")


def latent_length(config: ModelConfig) -> int:
    """Length of the encoder output vector for a given configuration."""
    spatial = (N_MFCC, N_FRAMES)
    channels, s = 1, 0
    while min(spatial) >= config.k0_encoder:
        channels = round_half_up(8 * config.k2_encoder * (s + 1))
        spatial = reduced_size(spatial, config.k0_encoder)
        s += 1
    return channels


def build_performer(config: ModelConfig, latent_len: int) -> PartNetwork:
    """Velocity head over the latent treated as a 1-channel sequence."""
    return PartNetwork(1, (latent_len,), config.k0_performer, config.k1,
                       config.k2_performer, 1, "sigmoid")


def build_classifier(config: ModelConfig, latent_len: int) -> PartNetwork:
    """Acoustic-context classifier over the latent; 6-way softmax."""
    k2 = round_half_up(1.25 * config.k2_performer)
    return PartNetwork(1, (latent_len,), config.k0_performer, CLASSIFIER_K1,
                       k2, N_CONTEXTS, "softmax")


class VelocityModel(nn.Module):
    """Encoder plus one or six performers and an optional classifier."""

    def __init__(self, config: ModelConfig, n_performers: int = 1,
                 with_classifier: bool = False):
        super().__init__()
        if n_performers not in (1, N_CONTEXTS):
            raise ValueError(f"n_performers must be 1 or {N_CONTEXTS}")
        self.config = config
        self.encoder = build_encoder(config)
        self.latent_len = latent_length(config)
        self.performers = nn.ModuleList(
            build_performer(config, self.latent_len)
            for _ in range(n_performers))
        self.classifier = (build_classifier(config, self.latent_len)
                           if with_classifier else None)

    @property
    def n_performers(self) -> int:
        return len(self.performers)

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        """(B, 1, 13, 30) feature maps to (B, L) latents."""
        if features.ndim != 4 or features.shape[1] != 1 \
                or features.shape[2:] != (N_MFCC, N_FRAMES):
            raise ValueError(
                f"expected (B, 1, {N_MFCC}, {N_FRAMES}), got {tuple(features.shape)}")
        return self.encoder(features)

    def estimate(self, latent: torch.Tensor,
                 context_ids: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Velocity estimates in (0, 1) from (B, L) latents."""
        seq = latent.unsqueeze(1)
        if len(self.performers) == 1:
            return self.performers[0](seq).squeeze(1)
        if context_ids is None:
            raise ValueError("per-context performers require context_ids")
        out = latent.new_zeros(latent.shape[0])
        for ctx in torch.unique(context_ids):
            mask = context_ids == ctx
            out[mask] = self.performers[int(ctx)](seq[mask]).squeeze(1)
        return out

    def classify(self, latent: torch.Tensor) -> torch.Tensor:
        """Context probabilities (B, 6) from (B, L) latents."""
        if self.classifier is None:
            raise ValueError("model was built without a classifier")
        return self.classifier(latent.unsqueeze(1))

    def forward(self, features: torch.Tensor,
                context_ids: Optional[torch.Tensor] = None):
        """Full pass: velocities and, when present, context probabilities."""
        latent = self.encode(features)
        velocity = self.estimate(latent, context_ids)
        probs = self.classify(latent) if self.classifier is not None else None
        return velocity, probs
