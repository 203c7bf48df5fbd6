"""Network architectures: 3D Unet for field prediction, 3D VAE blocks,
and the slice-wise 2D Unet used for segmentation."""

import math

import torch
import torch.nn.functional as F
from torch import nn


def _gn(groups, channels):
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def conv3d_k3(x, weight, bias, stride: int = 1):
    """3x3x3 convolution with padding 1, computed as three batched 2D convs.

    Identical math to F.conv3d; the 2D path dispatches to oneDNN, which
    is an order of magnitude faster than torch's single-core conv3d.
    """
    b, c, d, h, w = x.shape
    xp = F.pad(x, (0, 0, 0, 0, 1, 1))
    d_out = (d - 1) // stride + 1
    base = torch.arange(0, d_out * stride, stride, device=x.device)
    out = None
    for dz in range(3):
        xs = xp[:, :, base + dz]
        xs = xs.movedim(1, 2).reshape(b * d_out, c, h, w)
        y = F.conv2d(xs, weight[:, :, dz], None, stride=stride, padding=1)
        out = y if out is None else out + y
    out = out.reshape(b, d_out, *out.shape[1:]).movedim(2, 1)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1, 1)
    return out


class Conv3dK3(nn.Conv3d):
    """Drop-in nn.Conv3d (kernel 3, padding 1) routed through conv3d_k3."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__(in_channels, out_channels, 3, stride=stride, padding=1)

    def forward(self, x):
        return conv3d_k3(x, self.weight, self.bias, self.stride[0])


class Unet3D(nn.Module):
    """Encoder-decoder over (B, C, D, H, W) with skip connections.

    Four stride-2 downsamplings, nearest upsampling back to each skip's
    size (so arbitrary input dims work), LeakyReLU(0.2) activations, and
    a zero-initialized 3x3x3 output head so the initial prediction is
    exactly zero (identity transform / zero offset).
    """

    LEAK = 0.2

    def __init__(self, in_channels, out_channels, enc_channels=(16, 32, 32, 32),
                 dec_channels=(32, 32, 32, 32, 16, 16)):
        super().__init__()
        if len(enc_channels) != 4 or len(dec_channels) != 6:
            raise ValueError("expected 4 encoder and 6 decoder channel counts")
        self.downs = nn.ModuleList()
        prev = in_channels
        for c in enc_channels:
            self.downs.append(Conv3dK3(prev, c, stride=2))
            prev = c
        skips = (enc_channels[2], enc_channels[1], enc_channels[0], in_channels)
        self.ups = nn.ModuleList()
        self.ups.append(Conv3dK3(prev, dec_channels[0]))
        prev = dec_channels[0]
        for c, skip in zip(dec_channels[1:5], skips):
            self.ups.append(Conv3dK3(prev + skip, c))
            prev = c
        self.final = Conv3dK3(prev, dec_channels[5])
        self.head = Conv3dK3(dec_channels[5], out_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        skips = [x]
        for down in self.downs[:-1]:
            x = F.leaky_relu(down(x), self.LEAK)
            skips.append(x)
        x = F.leaky_relu(self.downs[-1](x), self.LEAK)
        x = F.leaky_relu(self.ups[0](x), self.LEAK)
        for up, skip in zip(self.ups[1:], reversed(skips)):
            x = F.interpolate(x, size=skip.shape[2:], mode="nearest")
            x = F.leaky_relu(up(torch.cat([x, skip], dim=1)), self.LEAK)
        x = F.leaky_relu(self.final(x), self.LEAK)
        return self.head(x)


class VaeEncoder3D(nn.Module):
    """Stride-2 conv stack with group norm and LeakyReLU, then mu/logvar heads."""

    def __init__(self, field_shape, in_channels, channels, latent_dim, groups):
        super().__init__()
        self.blocks = nn.ModuleList()
        sizes = [tuple(field_shape)]
        prev = in_channels
        for c in channels:
            self.blocks.append(
                nn.Sequential(Conv3dK3(prev, c, stride=2), _gn(groups, c))
            )
            sizes.append(tuple((s + 1) // 2 for s in sizes[-1]))
            prev = c
        self.sizes = sizes  # spatial size at each level, [0] = input
        flat = channels[-1] * sizes[-1][0] * sizes[-1][1] * sizes[-1][2]
        self.mu_head = nn.Linear(flat, latent_dim)
        self.logvar_head = nn.Linear(flat, latent_dim)

    def forward(self, x):
        for block in self.blocks:
            x = F.leaky_relu(block(x), 0.2)
        x = x.flatten(start_dim=1)
        return self.mu_head(x), self.logvar_head(x)


class VaeDecoder3D(nn.Module):
    """Mirror of the encoder: linear, then upsample+conv with ReLU."""

    def __init__(self, sizes, out_channels, channels, latent_dim, groups):
        super().__init__()
        self.sizes = sizes
        self.bottom_channels = channels[-1]
        flat = channels[-1] * sizes[-1][0] * sizes[-1][1] * sizes[-1][2]
        self.fc = nn.Linear(latent_dim, flat)
        self.blocks = nn.ModuleList()
        chain = list(reversed(channels))
        for cin, cout in zip(chain, chain[1:] + [chain[-1]]):
            self.blocks.append(
                nn.Sequential(Conv3dK3(cin, cout), _gn(groups, cout))
            )
        self.head = Conv3dK3(chain[-1], out_channels)

    def forward(self, z):
        x = F.relu(self.fc(z))
        x = x.view(z.shape[0], self.bottom_channels, *self.sizes[-1])
        for block, size in zip(self.blocks, reversed(self.sizes[:-1])):
            x = F.interpolate(x, size=size, mode="nearest")
            x = F.relu(block(x))
        return self.head(x)


class Unet2D(nn.Module):
    """Five-level 2D Unet: 3x3 convs + LeakyReLU, 2x2 max-pooling down,
    x2 upsampling with skip concatenation, 1x1 head to K classes."""

    LEAK = 0.2

    def __init__(self, in_channels, num_classes, enc_channels, dec_channels):
        super().__init__()
        if len(enc_channels) != 5 or len(dec_channels) != 5:
            raise ValueError("expected 5 encoder and 5 decoder channel counts")
        self.enc = nn.ModuleList()
        prev = in_channels
        for c in enc_channels:
            self.enc.append(nn.Conv2d(prev, c, 3, padding=1))
            prev = c
        self.dec = nn.ModuleList()
        for c, skip in zip(dec_channels[:4], reversed(enc_channels[:4])):
            self.dec.append(nn.Conv2d(prev + skip, c, 3, padding=1))
            prev = c
        self.dec.append(nn.Conv2d(prev, dec_channels[4], 3, padding=1))
        self.head = nn.Conv2d(dec_channels[4], num_classes, 1)

    def forward(self, x):
        skips = []
        for i, conv in enumerate(self.enc):
            if i > 0:
                skips.append(x)
                x = F.max_pool2d(x, 2)
            x = F.leaky_relu(conv(x), self.LEAK)
        for conv, skip in zip(self.dec[:4], reversed(skips)):
            x = F.interpolate(x, size=skip.shape[2:], mode="nearest")
            x = F.leaky_relu(conv(torch.cat([x, skip], dim=1)), self.LEAK)
        x = F.leaky_relu(self.dec[4](x), self.LEAK)
        return self.head(x)
