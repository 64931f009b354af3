import torch
import torch.nn as nn
import torch.nn.functional as F

from ...exceptions import ShapeException

# stack layout: target, prior stroke, segment, reference segment, features...
TARGET, PRIOR, SEGMENT, REF_SEGMENT = range(4)
BASE_CHANNELS = 4
REFERENCE_CHANNELS = (PRIOR, REF_SEGMENT)


def _conv(in_ch, out_ch, stride=1, dilation=1):

    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _compress(in_ch, out_ch):
    """Two stride-2 convolutions: input to 1/4 resolution"""

    return nn.Sequential(_conv(in_ch, out_ch, stride=2), _conv(out_ch, out_ch, stride=2))


class AffineAlign(nn.Module):
    """STN block registering reference-derived features to target features

    The localisation head starts at the identity affine (zero weights,
    identity bias), so untrained it passes the reference features through.
    """

    def __init__(self, width):

        super().__init__()
        self.localization = nn.Sequential(
            _conv(2 * width, width, stride=2),
            _conv(width, width, stride=2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(width, 32),
            nn.ReLU(inplace=True),
        )
        self.theta = nn.Linear(32, 6)
        nn.init.zeros_(self.theta.weight)
        with torch.no_grad():
            self.theta.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))

    def forward(self, target_features, reference_features):

        theta = self.theta(
            self.localization(torch.cat((target_features, reference_features), dim=1))
        ).view(-1, 2, 3)
        grid = F.affine_grid(theta, reference_features.shape, align_corners=False)
        aligned = F.grid_sample(
            reference_features, grid, mode="bilinear", padding_mode="zeros", align_corners=False
        )
        return aligned, theta


class ExtractNetModel(nn.Module):
    """Single-stroke extractor over the cropped input stack

    Target-derived channels (target, segment, features) and reference-derived
    channels (prior stroke, reference segment) are compressed separately to
    1/4. The STN block warps the compressed reference-branch features, not
    the raw reference channels, onto the target branch; a dilated trunk fuses
    them and the result is upsampled x4 and refined with the raw target and
    segment channels into one logit map.
    """

    def __init__(self, feature_channels, channel_scale=1.0):

        super().__init__()
        self.in_channels = BASE_CHANNELS + feature_channels
        width = max(8, int(64 * channel_scale))

        self.target_branch = _compress(self.in_channels - len(REFERENCE_CHANNELS), width)
        self.reference_branch = _compress(len(REFERENCE_CHANNELS), width)
        self.align = AffineAlign(width)
        self.trunk = nn.Sequential(
            _conv(2 * width, 2 * width),
            _conv(2 * width, 2 * width, dilation=2),
            _conv(2 * width, 2 * width, dilation=4),
            _conv(2 * width, width),
        )
        self.refine = nn.Sequential(
            _conv(width + 2, max(4, width // 2)),
            nn.Conv2d(max(4, width // 2), 1, kernel_size=3, padding=1),
        )

        target_channels = [c for c in range(self.in_channels) if c not in REFERENCE_CHANNELS]
        self.register_buffer("target_index", torch.tensor(target_channels), persistent=False)
        self.register_buffer("reference_index", torch.tensor(REFERENCE_CHANNELS), persistent=False)

    def forward(self, stack):
        """(B, 4 + C, S, S) stacks to (B, 1, S, S) logits

        Raises:
        -------
        ShapeException
            wrong channel count or side not divisible by 4
        """
        if stack.dim() != 4 or stack.shape[1] != self.in_channels:
            raise ShapeException(
                f"extraction stack must be (B, {self.in_channels}, S, S), got {tuple(stack.shape)}"
            )
        if stack.shape[-1] % 4 or stack.shape[-2] % 4:
            raise ShapeException(f"extraction crop side must be a multiple of 4, got {stack.shape[-1]}")

        target = self.target_branch(stack.index_select(1, self.target_index))
        reference = self.reference_branch(stack.index_select(1, self.reference_index))
        aligned, _ = self.align(target, reference)

        x = self.trunk(torch.cat((target, aligned), dim=1))
        x = F.interpolate(x, size=stack.shape[-2:], mode="bilinear", align_corners=False)
        return self.refine(torch.cat((x, stack[:, [TARGET, SEGMENT]]), dim=1))

    @torch.no_grad()
    def predict(self, stack):

        return torch.sigmoid(self(stack))
