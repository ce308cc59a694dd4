"""Variational encoder: conv backbone -> (mu, log_var) heads -> reparameterized z."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ContractError, NumericError

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


def small_cnn(width: int = 64, blocks: int = 3, in_channels: int = 3) -> tuple[nn.Sequential, int]:
    """``blocks`` stride-2 conv/BN/ReLU stages ending in global average pooling.

    Channel widths double per stage and end at ``width``.
    """
    layers: list[nn.Module] = []
    c_in = in_channels
    for i in range(blocks):
        c_out = max(width >> (blocks - 1 - i), 4)
        layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                   nn.BatchNorm2d(c_out), nn.ReLU()]
        c_in = c_out
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), c_in


def resnet18_backbone() -> tuple[nn.Module, int]:
    from torchvision import models

    net = models.resnet18(weights=None)
    net.fc = nn.Identity()
    return net, 512


class VariationalEncoder(nn.Module):
    def __init__(self, latent_dim: int, backbone: str = "small-cnn", width: int = 64,
                 blocks: int = 3, in_channels: int = 3):
        super().__init__()
        if backbone == "small-cnn":
            self.backbone, feat = small_cnn(width, blocks, in_channels)
        elif backbone == "resnet18":
            self.backbone, feat = resnet18_backbone()
        else:
            raise ContractError(f"unknown encoder backbone {backbone!r}")
        self.latent_dim = latent_dim
        self.feature_width = feat
        # both heads read the same pooled feature vector
        self.head_mu = nn.Linear(feat, latent_dim)
        self.head_logvar = nn.Linear(feat, latent_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if isinstance(self.backbone, nn.Sequential):
            for name, layer in self.backbone.named_children():
                x = layer(x)
                _check_finite(x, f"backbone.{name}")
            return x
        x = self.backbone(x)
        _check_finite(x, "backbone")
        return x

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x)
        mu = self.head_mu(h)
        _check_finite(mu, "head_mu")
        log_var = self.head_logvar(h)
        _check_finite(log_var, "head_logvar")
        return mu, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)


def _check_finite(t: torch.Tensor, layer: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(layer)


def encode(encoder: VariationalEncoder, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return encoder(x)


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, generator: torch.Generator | None = None,
                   deterministic: bool = False) -> torch.Tensor:
    """``z = mu + exp(log_var / 2) * eps``; returns ``mu`` itself when deterministic."""
    if mu.shape != log_var.shape:
        raise ContractError(f"mu {tuple(mu.shape)} and log_var {tuple(log_var.shape)} differ")
    if deterministic:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * log_var) * eps
