import torch
import torch.nn as nn

from ...exceptions import ShapeException

# downsampling factor of the encoder
STRIDE = 16


def _widths(channel_scale, embedding_dim):

    return [max(4, int(w * channel_scale)) for w in (32, 64, 128)] + [embedding_dim]


class ContentNet(nn.Module):
    """Stroke-image autoencoder

    The encoder is four stride-2 convolution stages followed by global average
    pooling, so any input whose sides are multiples of 16 maps to a vector of
    `embedding_dim`. The decoder mirrors it from a (size / 32)^2 seed and is
    only used for training.
    """

    def __init__(self, input_size=256, embedding_dim=128, channel_scale=1.0):

        super().__init__()
        self.input_size = input_size
        self.embedding_dim = embedding_dim

        widths = _widths(channel_scale, embedding_dim)
        layers, in_ch = [], 1
        for width in widths:
            layers += [
                nn.Conv2d(in_ch, width, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, kernel_size=3, padding=1),
                nn.LeakyReLU(0.2),
            ]
            in_ch = width
        self.encoder = nn.Sequential(*layers)

        self.seed_size = max(1, input_size // 32)
        self.seed_channels = widths[-2]
        self.project = nn.Linear(embedding_dim, self.seed_channels * self.seed_size**2)

        layers, in_ch = [], self.seed_channels
        for width in (*reversed(widths[:-1]), widths[0] // 2 or 4):
            layers += [
                nn.ConvTranspose2d(in_ch, width, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            ]
            in_ch = width
        layers += [
            nn.ConvTranspose2d(in_ch, in_ch, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(in_ch, 1, kernel_size=3, padding=1),
        ]
        self.decoder = nn.Sequential(*layers)

    def encode(self, image):
        """(N, 1, H, W) images to (N, D) embeddings"""

        if image.dim() != 4 or image.shape[1] != 1:
            raise ShapeException(
                f"content encoder expects (N, 1, H, W) images, got {tuple(image.shape)}"
            )
        if image.shape[-1] % STRIDE or image.shape[-2] % STRIDE:
            raise ShapeException(
                f"content encoder input sides must be multiples of {STRIDE}, "
                f"got {tuple(image.shape[-2:])}"
            )
        return self.encoder(image).mean(dim=(-2, -1))

    def decode(self, embedding):
        """Reconstruction logits at the training resolution"""

        seed = self.project(embedding).view(
            -1, self.seed_channels, self.seed_size, self.seed_size
        )
        return self.decoder(seed)

    def forward(self, image):

        return self.decode(self.encode(image))

    @torch.no_grad()
    def reconstruct(self, image):

        return torch.sigmoid(self(image))
