"""Task decoder: latent -> projection -> stride-2 transposed-conv blocks -> tanh."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError


class TaskDecoder(nn.Module):
    """Maps a (masked) latent batch to images in [-1, 1].

    ``base * 2**num_blocks`` must equal ``out_resolution``; this is checked
    here, at construction, rather than on the first forward pass.
    """

    def __init__(self, latent_dim: int, out_resolution: int, base: int = 14, num_blocks: int | None = None,
                 proj_channels: int = 3, channels: int = 64, out_channels: int = 3):
        super().__init__()
        if num_blocks is None:
            ratio = out_resolution // base
            num_blocks = ratio.bit_length() - 1 if ratio >= 1 else 0
        if num_blocks < 1 or base * 2**num_blocks != out_resolution:
            raise ConfigError("decoder_base", f"{base} * 2**{num_blocks} != target resolution {out_resolution}")
        self.latent_dim = latent_dim
        self.base = base
        self.proj_channels = proj_channels
        self.out_resolution = out_resolution
        self.projection = nn.Linear(latent_dim, proj_channels * base * base)

        blocks: list[nn.Module] = []
        c_in = proj_channels
        for i in range(num_blocks):
            c_out = max(channels >> i, 8)
            blocks.append(nn.Sequential(
                nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
            ))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        # every block ends in ReLU, so a linear 3x3 conv maps to signed values before tanh
        self.to_image = nn.Conv2d(c_in, out_channels, kernel_size=3, padding=1)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, z_m: torch.Tensor) -> torch.Tensor:
        if z_m.dim() != 2 or z_m.shape[1] != self.latent_dim:
            raise ContractError(f"decoder expects B x {self.latent_dim} latents, got {tuple(z_m.shape)}")
        h = self.projection(z_m).view(-1, self.proj_channels, self.base, self.base)
        return torch.tanh(self.to_image(self.blocks(h)))

    def describe(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "base": self.base,
            "proj_channels": self.proj_channels,
            "block_channels": [b[0].out_channels for b in self.blocks],
            "out_resolution": self.out_resolution,
        }


def decode(decoder: TaskDecoder, z_m: torch.Tensor) -> torch.Tensor:
    return decoder(z_m)


def renormalize_for_target(x_dec: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """[-1, 1] decoder output -> [0, 1] pixels -> ``(u - mean) / std`` per channel."""
    u = (x_dec + 1.0) * 0.5
    m = torch.as_tensor(mean, dtype=x_dec.dtype, device=x_dec.device).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=x_dec.dtype, device=x_dec.device).view(1, -1, 1, 1)
    return (u - m) / s
