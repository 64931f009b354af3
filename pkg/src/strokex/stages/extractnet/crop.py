"""Adaptive per-stroke crops.

A crop is a square box of `side` pixels in canvas space, resampled to
`size` x `size`. Boxes are clamped inside the canvas, so no padding is ever
needed. Crops read the canvas with roi_align (pixel-aligned, adaptive
sampling); uncrops resize bilinearly back to `side` and paste into an empty
canvas.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import roi_align

from ...data import CANVAS

CROP_FACTOR = 1.4
MIN_SIDE = 48


@dataclass(frozen=True)
class CropRecord:
    x: int
    y: int
    side: int
    size: int = 128
    canvas: int = CANVAS

    @property
    def scale(self):

        return self.size / self.side

    def box(self):

        return self.x, self.y, self.x + self.side, self.y + self.side

    def to_dict(self):

        return asdict(self)


def adaptive_crop(mask, size=128, canvas=CANVAS):
    """Square box around a stroke prior

    The box is centred on the mask's bounding-box centre with side
    clamp(round(1.4 * max(w, h)), 48, canvas) and shifted inside the canvas.
    An empty mask gives the full canvas.
    """
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    ys, xs = np.nonzero(np.asarray(mask).reshape(canvas, canvas))
    if len(xs) == 0:
        return CropRecord(0, 0, canvas, size, canvas)

    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    side = int(np.clip(round(CROP_FACTOR * max(x1 - x0, y1 - y0)), MIN_SIDE, canvas))

    x = int(np.clip(round((x0 + x1) / 2 - side / 2), 0, canvas - side))
    y = int(np.clip(round((y0 + y1) / 2 - side / 2), 0, canvas - side))
    return CropRecord(x, y, side, size, canvas)


def crop_channels(image, crop):
    """Resample the crop box of a (C, h, w) map to (C, size, size)

    Maps coarser than the canvas (for instance 1/4-resolution features) are
    read through the matching spatial scale.
    """
    spatial_scale = image.shape[-1] / crop.canvas
    boxes = torch.tensor([[0.0, *crop.box()]], dtype=image.dtype, device=image.device)
    return roi_align(
        image[None],
        boxes,
        output_size=crop.size,
        spatial_scale=spatial_scale,
        sampling_ratio=-1,
        aligned=True,
    )[0]


def uncrop(patch, crop):
    """Place a (C, size, size) crop-space map back onto an empty canvas"""

    resized = F.interpolate(
        patch[None], size=(crop.side, crop.side), mode="bilinear", align_corners=False
    )[0]
    canvas = torch.zeros(
        (patch.shape[0], crop.canvas, crop.canvas), dtype=patch.dtype, device=patch.device
    )
    canvas[:, crop.y:crop.y + crop.side, crop.x:crop.x + crop.side] = resized
    return canvas
