import torch
import torch.nn as nn
import torch.nn.functional as F

from ...data import NUM_CATEGORIES
from ...exceptions import ShapeException

STRIDE = 16


def _bn_relu(in_ch, out_ch, kernel_size=3, stride=1, dilation=1):

    return nn.Sequential(
        nn.Conv2d(
            in_ch, out_ch, kernel_size=kernel_size, stride=stride,
            padding=dilation * (kernel_size // 2), dilation=dilation, bias=False,
        ),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1):

        super().__init__()
        self.body = nn.Sequential(
            _bn_relu(in_ch, out_ch, stride=stride, dilation=dilation),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):

        return F.relu(self.body(x) + self.shortcut(x))


class ASPP(nn.Module):
    """Atrous pyramid: 1x1, three dilated 3x3 branches and image pooling"""

    def __init__(self, in_channels, out_channels, rates=(2, 4, 6)):

        super().__init__()
        self.branches = nn.ModuleList(
            [_bn_relu(in_channels, out_channels, kernel_size=1)]
            + [_bn_relu(in_channels, out_channels, dilation=r) for r in rates]
        )
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.project = _bn_relu(out_channels * (len(rates) + 2), out_channels, kernel_size=1)

    def forward(self, x):

        pooled = F.interpolate(self.pool(x), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.project(torch.cat([b(x) for b in self.branches] + [pooled], dim=1))


def decoder_width(channel_scale):
    """Channels of the 1/4-resolution feature map handed to extraction"""

    return max(8, int(128 * channel_scale))


class SegNetModel(nn.Module):
    """Prior-guided multi-label stroke-category segmentation

    Input is (target, prior composite). The encoder reaches output stride 16
    with residual blocks and continues with dilated blocks and an atrous
    pyramid; the decoder fuses it with the 1/4 low-level features, exposes
    that map as `feature64` and predicts one independent logit per category.
    """

    def __init__(self, channel_scale=1.0, num_categories=NUM_CATEGORIES):

        super().__init__()
        w = [max(8, int(c * channel_scale)) for c in (32, 64, 128, 256)]
        low = max(8, int(48 * channel_scale))
        dec = decoder_width(channel_scale)

        self.stem = _bn_relu(2, w[0], stride=2)
        self.layer1 = ResidualBlock(w[0], w[1], stride=2)
        self.layer2 = ResidualBlock(w[1], w[2], stride=2)
        self.layer3 = ResidualBlock(w[2], w[3], stride=2)
        self.layer4 = nn.Sequential(
            ResidualBlock(w[3], w[3], dilation=2),
            ResidualBlock(w[3], w[3], dilation=4),
        )
        self.aspp = ASPP(w[3], w[3])

        self.low_level = _bn_relu(w[1], low, kernel_size=1)
        self.decoder = nn.Sequential(
            _bn_relu(w[3] + low, dec),
            _bn_relu(dec, dec),
        )
        self.head = nn.Conv2d(dec, num_categories, kernel_size=1)
        self.feature_channels = dec

    def forward(self, target, composite):
        """Category logits at input size and the 1/4 decoder features

        Raises:
        -------
        ShapeException
            differing input sizes or sides not divisible by 16
        """
        if target.shape != composite.shape or target.dim() != 4 or target.shape[1] != 1:
            raise ShapeException(
                f"target {tuple(target.shape)} and prior {tuple(composite.shape)} "
                "must both be (B, 1, H, W) of equal size"
            )
        if target.shape[-1] % STRIDE or target.shape[-2] % STRIDE:
            raise ShapeException(
                f"segmentation input sides must be multiples of {STRIDE}, "
                f"got {tuple(target.shape[-2:])}"
            )

        x = self.stem(torch.cat((target, composite), dim=1))
        low = self.layer1(x)
        x = self.aspp(self.layer4(self.layer3(self.layer2(low))))
        x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
        features = self.decoder(torch.cat((x, self.low_level(low)), dim=1))

        logits = F.interpolate(
            self.head(features), size=target.shape[-2:], mode="bilinear", align_corners=False
        )
        return logits, features
