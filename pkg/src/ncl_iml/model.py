"""DeepLabV3+-style encoder-decoder with a block-1 feature tap and auxiliary heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pivot import PivotNet

VARIANTS = ("tiny", "resnet101")
INPUT_MEAN, INPUT_STD = 0.5, 0.25
DETAIL_CHANNELS = 16


@dataclass
class BackboneConfig:
    variant: str = "tiny"
    block1_channels: int = 32
    block1_stride: int = 4
    output_stride: int = 8
    aspp_rates: tuple[int, ...] = (1, 12, 24, 36)
    aspp_channels: int = 64
    decoder_channels: int = 64
    lowlevel_channels: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}; choose from {VARIANTS}")
        if self.block1_stride != 4 or self.output_stride != 8:
            raise ValueError("only block1_stride=4 with output_stride=8 is supported")
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        if self.variant == "resnet101" and self.block1_channels != 256:
            raise ValueError("resnet101 block-1 emits 256 channels")

    @classmethod
    def tiny(cls, **kw) -> "BackboneConfig":
        return cls(**{"variant": "tiny", "block1_channels": 32, "aspp_rates": (1, 2, 4, 6), **kw})

    @classmethod
    def resnet101(cls, **kw) -> "BackboneConfig":
        base = dict(variant="resnet101", block1_channels=256, aspp_channels=256,
                    decoder_channels=256, lowlevel_channels=48)
        return cls(**{**base, **kw})


@dataclass
class ForwardBundle:
    block1: torch.Tensor  # (B, C, H/4, W/4)
    stage_logits: list[torch.Tensor] = field(default_factory=list)  # each (B, h, w)

    @property
    def stage_probs(self) -> list[torch.Tensor]:
        return [torch.sigmoid(s) for s in self.stage_logits]

    @property
    def final(self) -> torch.Tensor:
        return torch.sigmoid(self.stage_logits[-1])


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    """ResNet basic block; ``dilation`` > 1 keeps resolution while widening the field of view."""

    def __init__(self, cin: int, cout: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, dilation, dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, dilation, dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + identity)


class TinyEncoder(nn.Module):
    """Stem (/2) then four residual stages: /4 (block-1 tap), /8, and two dilated at /8."""

    def __init__(self, c1: int):
        super().__init__()
        self.stem = conv_bn_relu(3, c1 // 2, stride=2)
        self.block1 = BasicBlock(c1 // 2, c1, stride=2)
        self.block2 = BasicBlock(c1, 2 * c1, stride=2)
        self.block3 = BasicBlock(2 * c1, 2 * c1, dilation=2)
        self.block4 = BasicBlock(2 * c1, 2 * c1, dilation=4)
        self.stem_channels = c1 // 2
        self.out_channels = 2 * c1

    def forward(self, x):
        stem = self.stem(x)
        low = self.block1(stem)
        return stem, low, self.block4(self.block3(self.block2(low)))


class ResNet101Encoder(nn.Module):
    """Randomly initialised ResNet-101 with dilated layer3/layer4 (output stride 8)."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet101

        net = resnet101(weights=None, replace_stride_with_dilation=[False, True, True])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.block1 = net.layer1
        self.rest = nn.Sequential(net.layer2, net.layer3, net.layer4)
        self.stem_channels = 64
        self.out_channels = 2048

    def forward(self, x):
        stem = self.stem(x)
        low = self.block1(self.pool(stem))
        return stem, low, self.rest(low)


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            conv_bn_relu(cin, cout, k=1) if r == 1 else conv_bn_relu(cin, cout, dilation=r) for r in rates
        )
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )
        self.project = conv_bn_relu(cout * (len(self.branches) + 1), cout, k=1)

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        # BatchNorm on a 1x1 pooled map needs >1 sample in training; skip its norm then
        pooled = self.pool[1](self.pool[0](x))
        if self.training and pooled.shape[0] == 1:
            pooled = F.relu(pooled)
        else:
            pooled = self.pool[3](self.pool[2](pooled))
        feats.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(feats, dim=1))


class Segmenter(nn.Module):
    """Encoder -> ASPP -> x4 upsample fused with block-1 and stem features -> x2 upsample.

    A 1-channel head after each decoder stage gives the auxiliary predictions
    at H/2 and H; the last one is the final map. The full-resolution stage also
    sees a shallow conv of the input so boundaries can be placed to the pixel.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.variant == "tiny":
            self.encoder = TinyEncoder(config.block1_channels)
        else:
            self.encoder = ResNet101Encoder()
        dc, lc = config.decoder_channels, config.lowlevel_channels
        self.aspp = ASPP(self.encoder.out_channels, config.aspp_channels, config.aspp_rates)
        self.low_proj = conv_bn_relu(config.block1_channels, lc, k=1)
        self.stem_proj = conv_bn_relu(self.encoder.stem_channels, lc, k=1)
        self.fuse = nn.Sequential(
            conv_bn_relu(config.aspp_channels + 2 * lc, dc),
            conv_bn_relu(dc, dc),
        )
        self.head_mid = nn.Conv2d(dc, 1, 1)
        self.detail = conv_bn_relu(3, DETAIL_CHANNELS)
        self.refine = conv_bn_relu(dc + DETAIL_CHANNELS, dc // 2)
        self.head_final = nn.Conv2d(dc // 2, 1, 1)

    def forward(self, x: torch.Tensor) -> ForwardBundle:
        h, w = x.shape[-2:]
        os_ = self.config.output_stride
        if h % os_ or w % os_:
            raise ValueError(f"input {h}x{w} is not divisible by output stride {os_}")
        x = (x - INPUT_MEAN) / INPUT_STD
        stem, low, enc = self.encoder(x)
        enc = self.aspp(enc)
        mid_size = (h // 2, w // 2)
        up = F.interpolate(enc, size=mid_size, mode="bilinear", align_corners=False)
        low_up = F.interpolate(self.low_proj(low), size=mid_size, mode="bilinear", align_corners=False)
        mid = self.fuse(torch.cat([up, low_up, self.stem_proj(stem)], dim=1))
        full = F.interpolate(mid, size=(h, w), mode="bilinear", align_corners=False)
        full = self.refine(torch.cat([full, self.detail(x)], dim=1))
        logits = [self.head_mid(mid)[:, 0], self.head_final(full)[:, 0]]
        return ForwardBundle(block1=low, stage_logits=logits)


class NCLNet(nn.Module):
    """Segmenter plus the pivot network that reads its block-1 features."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig.tiny()
        self.segmenter = Segmenter(self.config)
        self.pivot = PivotNet(self.config.block1_channels)

    def forward(self, x: torch.Tensor) -> ForwardBundle:
        return self.segmenter(x)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 (0..255) or float (0..1) array -> (1, 3, H, W) float tensor."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


@torch.no_grad()
def predict(model: nn.Module, image: np.ndarray) -> np.ndarray:
    """Probability map at the image's own resolution.

    The image is zero-padded bottom/right to a multiple of the output stride,
    run in eval mode, and the padding is cropped from the result.
    """
    x = image_to_tensor(image)
    h, w = x.shape[-2:]
    os_ = model.config.output_stride
    ph, pw = (-h) % os_, (-w) % os_
    x = F.pad(x, (0, pw, 0, ph))
    was_training = model.training
    model.eval()
    try:
        out = model(x).final[0]
    finally:
        model.train(was_training)
    return out[:h, :w].numpy().astype(np.float64)
