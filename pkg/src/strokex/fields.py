"""Dense displacement-field mathematics.

Fields are tensors shaped (..., 2, H, W) holding (dx, dy) displacements in
pixels, addressed with x to the right and y downwards. Warping is backward
sampling:

    warp(image, field)(p) = image(p + field(p))

with bilinear interpolation and zeros outside the canvas. Every operation
here is differentiable with respect to field values and leaves its inputs
untouched.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import EstimationException, ShapeException

SINGULAR_EPS = 1e-6


def identity_grid(height, width, dtype=None, device=None):
    """Pixel coordinates as a (2, H, W) tensor, channel 0 = x, channel 1 = y"""

    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xs, ys))


@dataclass
class AffineStrokeTransform:
    """Forward map T(p) = p + c + G (p - P)

    `G` is (..., 2, 2) with G[..., i, j] the mean derivative of displacement
    component i along axis j; `c` and `P` are (..., 2). `singular` marks a
    transform produced by the translation-only inversion fallback.
    """

    G: torch.Tensor
    c: torch.Tensor
    P: torch.Tensor
    singular: torch.Tensor = None

    def __post_init__(self):

        if self.singular is None:
            self.singular = torch.zeros(
                self.c.shape[:-1], dtype=torch.bool, device=self.c.device
            )

    @classmethod
    def identity(cls, batch=(), dtype=None, device=None):

        zeros = torch.zeros((*batch, 2), dtype=dtype, device=device)
        return cls(
            G=torch.zeros((*batch, 2, 2), dtype=dtype, device=device),
            c=zeros,
            P=zeros.clone(),
        )

    @classmethod
    def stack(cls, transforms):

        return cls(
            G=torch.stack([t.G for t in transforms]),
            c=torch.stack([t.c for t in transforms]),
            P=torch.stack([t.P for t in transforms]),
            singular=torch.stack([torch.as_tensor(t.singular) for t in transforms]),
        )

    def __getitem__(self, index):

        return AffineStrokeTransform(
            G=self.G[index], c=self.c[index], P=self.P[index], singular=self.singular[index]
        )

    def __len__(self):

        return self.c.shape[0]

    def apply(self, points):
        """Map (..., N, 2) points through T"""

        rel = points - self.P.unsqueeze(-2)
        return points + self.c.unsqueeze(-2) + torch.einsum("...ij,...nj->...ni", self.G, rel)

    def determinant(self):

        eye = torch.eye(2, dtype=self.G.dtype, device=self.G.device)
        return torch.linalg.det(eye + self.G)

    def to(self, device=None, dtype=None):

        return AffineStrokeTransform(
            G=self.G.to(device=device, dtype=dtype),
            c=self.c.to(device=device, dtype=dtype),
            P=self.P.to(device=device, dtype=dtype),
            singular=self.singular.to(device=device),
        )

    def detach(self):

        return AffineStrokeTransform(
            G=self.G.detach(), c=self.c.detach(), P=self.P.detach(), singular=self.singular
        )

    def to_dict(self):

        return {
            "G": self.G.detach().cpu().tolist(),
            "c": self.c.detach().cpu().tolist(),
            "P": self.P.detach().cpu().tolist(),
            "singular": self.singular.cpu().tolist(),
        }

    @classmethod
    def from_dict(cls, data, dtype=None):

        return cls(
            G=torch.tensor(data["G"], dtype=dtype),
            c=torch.tensor(data["c"], dtype=dtype),
            P=torch.tensor(data["P"], dtype=dtype),
            singular=torch.tensor(data["singular"], dtype=torch.bool),
        )


def _check_field(field):

    if field.dim() < 3 or field.shape[-3] != 2:
        raise ShapeException(
            f"registration field must be shaped (..., 2, H, W), got {tuple(field.shape)}"
        )


def warp(image, field):
    """Backward-warp `image` by `field`

    Parameters:
    -----------
    image : torch.Tensor (B, C, H, W) or (C, H, W)
        image to sample
    field : torch.Tensor (B, 2, H, W) or (2, H, W)
        displacement in pixels; a batch of one broadcasts over the images

    Raises:
    -------
    ShapeException
        spatial size or batch size mismatch

    Returns:
    --------
    torch.Tensor
        warped image, same shape as `image`
    """
    _check_field(field)
    unbatched = image.dim() == 3
    if unbatched:
        image = image.unsqueeze(0)
    if field.dim() == 3:
        field = field.unsqueeze(0)

    if image.dim() != 4 or image.shape[-2:] != field.shape[-2:]:
        raise ShapeException(
            f"image {tuple(image.shape)} and field {tuple(field.shape)} differ in size"
        )
    if field.shape[0] != image.shape[0]:
        if field.shape[0] != 1:
            raise ShapeException(
                f"batch size mismatch: image {image.shape[0]}, field {field.shape[0]}"
            )
        field = field.expand(image.shape[0], -1, -1, -1)

    height, width = image.shape[-2:]
    loc = identity_grid(height, width, dtype=field.dtype, device=field.device) + field
    grid = torch.stack(
        (
            2 * loc[:, 0] / max(width - 1, 1) - 1,
            2 * loc[:, 1] / max(height - 1, 1) - 1,
        ),
        dim=-1,
    )
    out = F.grid_sample(
        image,
        grid.to(image.dtype),
        mode="bilinear",
        padding_mode="zeros",
        align_corners=True,
    )
    return out.squeeze(0) if unbatched else out


def spatial_gradient(field):
    """(d field / dX, d field / dY): central differences, one-sided at borders"""

    if field.dim() < 2 or field.shape[-1] < 2 or field.shape[-2] < 2:
        raise ShapeException(
            f"spatial gradient needs at least a 2x2 grid, got {tuple(field.shape)}"
        )

    (d_dx,) = torch.gradient(field, dim=-1, edge_order=1)
    (d_dy,) = torch.gradient(field, dim=-2, edge_order=1)
    return d_dx, d_dy


def linear_estimate(field, mask):
    """Local linear estimate of `field` over `mask`

    c is the masked mean displacement, the columns of G are the masked means
    of the spatial gradients and P is the mask centroid; the induced
    displacement c + G (p - P) is exact when `field` is affine. Gradients are
    taken over the whole field before the masked mean.

    Parameters:
    -----------
    field : torch.Tensor (..., 2, H, W)
        registration field
    mask : torch.Tensor (..., H, W) or (..., 1, H, W)
        region selector, nonempty

    Raises:
    -------
    EstimationException
        an empty mask

    Returns:
    --------
    AffineStrokeTransform
        transform with batch shape field.shape[:-3]
    """
    _check_field(field)
    mask = mask.to(field.dtype)
    if mask.dim() == field.dim():
        mask = mask.squeeze(-3)

    total = mask.sum(dim=(-2, -1))
    if bool((total <= 0).any()):
        raise EstimationException("linear estimation over an empty mask")

    weight = (mask / total[..., None, None]).unsqueeze(-3)
    d_dx, d_dy = spatial_gradient(field)
    grid = identity_grid(*field.shape[-2:], dtype=field.dtype, device=field.device)

    c = (field * weight).sum(dim=(-2, -1))
    G = torch.stack(
        ((d_dx * weight).sum(dim=(-2, -1)), (d_dy * weight).sum(dim=(-2, -1))),
        dim=-1,
    )
    P = (grid * weight).sum(dim=(-2, -1))
    return AffineStrokeTransform(G=G, c=c, P=P)


def linear_field(transform, size):
    """Dense displacement c + G (p - P) of `transform` on an (H, W) grid"""

    height, width = size
    grid = identity_grid(height, width, dtype=transform.c.dtype, device=transform.c.device)
    rel = grid - transform.P[..., :, None, None]
    return transform.c[..., :, None, None] + torch.einsum("...ij,...jhw->...ihw", transform.G, rel)


def invert(transform, eps=SINGULAR_EPS):
    """Inverse of T anchored at T(P)

    For A = I + G the inverse is T^-1(q) = q - c + (A^-1 - I)(q - P - c).
    Where |det A| <= eps the translation-only inverse q - c is returned and
    the result is flagged singular.
    """
    eye = torch.eye(2, dtype=transform.G.dtype, device=transform.G.device)
    matrix = eye + transform.G
    singular = torch.linalg.det(matrix).abs() <= eps

    safe = torch.where(singular[..., None, None], eye.expand_as(matrix), matrix)
    G_inv = torch.where(
        singular[..., None, None],
        torch.zeros_like(matrix),
        torch.linalg.inv(safe) - eye,
    )
    return AffineStrokeTransform(
        G=G_inv,
        c=-transform.c,
        P=transform.P + transform.c,
        singular=singular | transform.singular.to(singular.device),
    )


def compose_fields(phi_d, phi_e, weight=0.5):
    """phi_s = phi_d + weight * phi_e"""

    _check_field(phi_d)
    if phi_d.shape != phi_e.shape:
        raise ShapeException(
            f"cannot compose fields {tuple(phi_d.shape)} and {tuple(phi_e.shape)}"
        )
    return phi_d + weight * phi_e


def smoothness(field):
    """mean over pixels of |d field/dX|^2 + |d field/dY|^2"""

    _check_field(field)
    d_dx, d_dy = spatial_gradient(field)
    return (d_dx.pow(2) + d_dy.pow(2)).sum(dim=-3).mean()


def render_affine(image, transform):
    """Move image content forward under `transform`

    Samples `image` at T^-1(q) for every output pixel q.

    Returns:
    --------
    tuple(torch.Tensor, torch.Tensor)
        rendered image and the inversion fallback flag
    """
    inverse = invert(transform)
    field = linear_field(inverse, image.shape[-2:]).to(image.dtype)
    return warp(image, field), inverse.singular


def jacobian_determinant(field):
    """det(I + grad field) per pixel, shaped (..., H, W)"""

    _check_field(field)
    d_dx, d_dy = spatial_gradient(field)
    return (1 + d_dx[..., 0, :, :]) * (1 + d_dy[..., 1, :, :]) - d_dy[..., 0, :, :] * d_dx[..., 1, :, :]


def folding_ratio(field):
    """Fraction of pixels where the field folds (non-positive Jacobian)"""

    return (jacobian_determinant(field) <= 0).to(field.dtype).mean()
