import torch
import torch.nn as nn
import torch.nn.functional as F

from ...exceptions import ShapeException
from ...fields import compose_fields
from ..recognition.model import RecognitionNet, feature_widths

# total downsampling of the encoder
STRIDE = 32


def _conv(in_ch, out_ch, stride=1):

    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.LeakyReLU(0.2),
    )


def _widths(channel_scale):

    return [max(4, int(w * channel_scale)) for w in (16, 32, 64, 128, 256, 256)]


class SDNetModel(nn.Module):
    """Structure-deformable registration network

    A U-shaped encoder-decoder over the (target, labeled reference) pair.
    Encoder stage k runs at 1/2^k of the input; stages 2 to 5 concatenate the
    frozen recogniser's features of the target at the same resolution. The
    decoder returns to full resolution and emits the main field; a side
    branch taps the decoder at 1/8, upsamples x4, convolves and upsamples
    x2 to emit the refinement field. Both field heads start at zero, so an
    untrained model is the identity warp.
    """

    def __init__(
        self,
        num_classes,
        channel_scale=1.0,
        refine_weight=0.5,
        single_field=False,
    ):

        super().__init__()
        self.refine_weight = refine_weight
        self.single_field = single_field

        self.recognizer = RecognitionNet(num_classes, channel_scale)
        rec_widths = feature_widths(channel_scale)
        enc = _widths(channel_scale)

        self.encoder = nn.ModuleList()
        for k, width in enumerate(enc):
            in_ch = 2 if k == 0 else enc[k - 1]
            stride = 1 if k == 0 else 2
            self.encoder.append(_conv(in_ch, width, stride))

        self.fuse = nn.ModuleList(
            [_conv(enc[k] + rec_widths[k - 2], enc[k]) for k in range(2, 6)]
        )

        # decoder level k works at 1/2^k, k = 4 .. 0
        self.decoder = nn.ModuleDict()
        in_ch = enc[5]
        for k in range(4, -1, -1):
            self.decoder[str(k)] = nn.Sequential(
                _conv(in_ch + enc[k], enc[k]), _conv(enc[k], enc[k])
            )
            in_ch = enc[k]

        self.flow = nn.Conv2d(enc[0], 2, kernel_size=3, padding=1)
        self.refine = nn.Conv2d(enc[3], 2, kernel_size=3, padding=1)
        for head in (self.flow, self.refine):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def train(self, mode=True):

        super().train(mode)
        self.recognizer.eval()
        return self

    def forward(self, target, labeled):
        """Registration fields for target -> reference alignment

        Parameters:
        -----------
        target : torch.Tensor (B, 1, H, W)
            target characters
        labeled : torch.Tensor (B, 1, H, W)
            labeled reference characters

        Raises:
        -------
        ShapeException
            differing sizes, or sides not divisible by 32

        Returns:
        --------
        tuple(torch.Tensor, torch.Tensor, torch.Tensor)
            (phi_d, phi_e, phi_s), each (B, 2, H, W)
        """
        if target.shape != labeled.shape or target.dim() != 4 or target.shape[1] != 1:
            raise ShapeException(
                f"target {tuple(target.shape)} and reference {tuple(labeled.shape)} "
                "must both be (B, 1, H, W) of equal size"
            )
        if target.shape[-1] % STRIDE or target.shape[-2] % STRIDE:
            raise ShapeException(
                f"registration input sides must be multiples of {STRIDE}, "
                f"got {tuple(target.shape[-2:])}"
            )

        with torch.no_grad():
            rec = self.recognizer.features(target)

        skips, x = [], torch.cat((target, labeled), dim=1)
        for k, stage in enumerate(self.encoder):
            x = stage(x)
            if k >= 2:
                x = self.fuse[k - 2](torch.cat((x, rec[k - 2]), dim=1))
            skips.append(x)

        x, level3 = skips[5], None
        for k in range(4, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.decoder[str(k)](torch.cat((x, skips[k]), dim=1))
            if k == 3:
                level3 = x

        phi_d = self.flow(x)
        if self.single_field:
            phi_e = torch.zeros_like(phi_d)
        else:
            phi_e = F.interpolate(level3, scale_factor=4, mode="bilinear", align_corners=False)
            phi_e = F.interpolate(self.refine(phi_e), size=phi_d.shape[-2:], mode="bilinear", align_corners=False)

        return phi_d, phi_e, compose_fields(phi_d, phi_e, self.refine_weight)
