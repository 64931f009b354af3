"""Torch datasets over a dataset manifest.

Characters have a variable number of strokes, so batches keep per-character
tensors stacked along the batch axis and per-stroke tensors concatenated
along a flat stroke axis, with `owner` giving the batch index of each stroke.
"""

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from . import NUM_CATEGORIES
from .raster import ReferenceBank
from .storage import load_sample, load_stroke_mask


def _image(array):

    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))


class CharacterDataset(Dataset):
    """One item per character: target, reference and ordered strokes"""

    def __init__(self, manifest, entries, bank=None):

        self.manifest = manifest
        self.entries = list(entries)
        self.bank = bank or ReferenceBank(manifest.layouts.values())

    def __len__(self):

        return len(self.entries)

    def sample(self, index):

        return load_sample(self.manifest, self.entries[index])

    def __getitem__(self, index):

        sample = self.sample(index)
        reference = self.bank.render(sample.layout_id, sample.style)
        layout = self.bank.layout(sample.layout_id)

        strokes = _image(sample.stroke_masks)
        categories = torch.tensor(sample.categories, dtype=torch.long)
        category_masks = torch.zeros((NUM_CATEGORIES, *strokes.shape[-2:]))
        for mask, category in zip(strokes, categories):
            category_masks[category] = torch.maximum(category_masks[category], mask)

        return {
            "sample_id": sample.sample_id,
            "target": _image(sample.image)[None],
            "reference": _image(reference.image / 255.0)[None],
            "labeled": _image(reference.labeled)[None],
            "strokes": strokes[:, None],
            "ref_strokes": _image(reference.masks)[:, None],
            "categories": categories,
            "category_masks": category_masks,
            "char_class": layout.char_class,
            "layout_id": sample.layout_id,
            "style": sample.style,
            "affines": sample.affines,
        }


def collate_characters(items):
    """Stack per-character tensors, concatenate per-stroke tensors"""

    counts = [len(item["categories"]) for item in items]
    return {
        "sample_id": [item["sample_id"] for item in items],
        "target": torch.stack([item["target"] for item in items]),
        "reference": torch.stack([item["reference"] for item in items]),
        "labeled": torch.stack([item["labeled"] for item in items]),
        "category_masks": torch.stack([item["category_masks"] for item in items]),
        "strokes": torch.cat([item["strokes"] for item in items]),
        "ref_strokes": torch.cat([item["ref_strokes"] for item in items]),
        "categories": torch.cat([item["categories"] for item in items]),
        "owner": torch.repeat_interleave(
            torch.arange(len(items)), torch.tensor(counts)
        ),
        "char_class": torch.tensor([item["char_class"] for item in items]),
        "layout_id": [item["layout_id"] for item in items],
        "style": [item["style"] for item in items],
        "affines": [item["affines"] for item in items],
        "counts": counts,
    }


class StrokeImageDataset(Dataset):
    """Single-stroke binary images: target strokes followed by reference strokes"""

    def __init__(self, manifest, entries, bank=None):

        self.manifest = manifest
        self.entries = list(entries)
        self.bank = bank or ReferenceBank(manifest.layouts.values())
        self.index = [
            (i, k)
            for i, entry in enumerate(self.entries)
            for k in range(len(entry.stroke_paths))
        ]

    def __len__(self):

        return 2 * len(self.index)

    def __getitem__(self, index):

        reference, index = divmod(index, len(self.index))
        i, k = self.index[index]
        entry = self.entries[i]
        if reference:
            mask = self.bank.render(entry.layout_id, entry.style).masks[k]
        else:
            mask = load_stroke_mask(self.manifest, entry, k)
        return _image(mask)[None]


def make_loader(dataset, batch_size, shuffle, seed, workers=0, collate_fn=None, sampler=None):
    """DataLoader with a seeded shuffling generator"""

    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle if sampler is None else False,
        sampler=sampler,
        num_workers=workers,
        collate_fn=collate_fn,
        generator=generator,
        drop_last=False,
    )
