import torch.nn as nn


def _block(in_ch, out_ch, convs=2):

    layers = []
    for _ in range(convs):
        layers += [
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        ]
        in_ch = out_ch
    layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def feature_widths(channel_scale):
    """Channels of the 1/4, 1/8, 1/16 and 1/32 feature maps"""

    return [max(4, int(w * channel_scale)) for w in (32, 64, 128, 128)]


class RecognitionNet(nn.Module):
    """VGG-style character classifier

    Five conv blocks each end in a 2x2 max-pool; the outputs of blocks two to
    five (1/4, 1/8, 1/16 and 1/32 of the input size) are exposed as features.
    """

    def __init__(self, num_classes, channel_scale=1.0):

        super().__init__()
        self.num_classes = num_classes

        stem = max(4, int(16 * channel_scale))
        widths = feature_widths(channel_scale)
        self.blocks = nn.ModuleList(
            [_block(1, stem, convs=1)]
            + [
                _block(in_ch, out_ch)
                for in_ch, out_ch in zip([stem] + widths[:-1], widths)
            ]
        )
        self.classifier = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Dropout(0.2),
            nn.Linear(widths[-1], num_classes),
        )

    def features(self, image):

        feats, x = [], image
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index >= 1:
                feats.append(x)
        return feats

    def forward(self, image):

        return self.classifier(self.features(image)[-1])
