"""Zero-shot train/valid/test splits built from presentation records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastore import PresentationRecord


@dataclass
class SplitManifest:
    train: list
    valid: list
    small_test: list
    large_test: list
    category_index: dict = field(default_factory=dict)

    def records(self):
        return self.train + self.valid + self.small_test + self.large_test

    def image_ids(self, part):
        return sorted({r.image_id for r in getattr(self, part)})

    def check(self):
        """Raise if any zero-shot invariant is violated."""
        fit_imgs = {r.image_id for r in self.train + self.valid}
        small = {r.image_id for r in self.small_test}
        large = {r.image_id for r in self.large_test}
        if fit_imgs & small or fit_imgs & large or small & large:
            raise AssertionError("image ids shared across split parts")
        fit_cats = {r.category_id for r in self.train + self.valid}
        small_cats = {r.category_id for r in self.small_test}
        if fit_cats & small_cats:
            raise AssertionError("small-test categories leak into train/valid")
        if not {r.category_id for r in self.large_test} <= small_cats:
            raise AssertionError("large-test images outside the removed categories")
        train_imgs = {r.image_id for r in self.train}
        if train_imgs & {r.image_id for r in self.valid}:
            raise AssertionError("image straddles train and valid")


def _group_by_image(records):
    groups = {}
    for r in records:
        groups.setdefault(r.image_id, []).append(r)
    return groups


def _shuffled_images(image_ids, seed):
    order = sorted(image_ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(order))
    return [order[i] for i in perm]


def sample_validation(train_records, fraction, seed):
    """Image-level split of training records into (train, valid)."""
    if not 0 < fraction < 1:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    groups = _group_by_image(train_records)
    images = _shuffled_images(groups, seed)
    n_valid = int(round(fraction * len(images)))
    valid_imgs = set(images[:n_valid])
    train = [r for r in train_records if r.image_id not in valid_imgs]
    valid = [r for r in train_records if r.image_id in valid_imgs]
    return train, valid


def build_adapted_split(records, original_test_ids, valid_fraction=0.2, seed=0) -> SplitManifest:
    """Remove test categories from training; build small/large test sets from them.

    ``records`` is the full pool of presentations. ``original_test_ids`` names the
    images of the original (repeated) test set; their categories are excluded
    from train/valid. The remaining images of those categories form the large test set.
    """
    test_ids = set(original_test_ids)
    present = {r.image_id for r in records}
    unknown = sorted(test_ids - present)
    if unknown:
        raise ValueError(f"unknown test image ids: {unknown[:5]}")
    category_index = {}
    for r in records:
        category_index.setdefault(r.category_id, set()).add(r.image_id)
    category_index = {k: sorted(v) for k, v in sorted(category_index.items())}
    removed_cats = {r.category_id for r in records if r.image_id in test_ids}

    small, large, fit = [], [], []
    for r in records:
        if r.image_id in test_ids:
            small.append(r.with_split("small_test"))
        elif r.category_id in removed_cats:
            large.append(r.with_split("large_test"))
        elif r.split_tag == "unseen_pool":
            continue
        else:
            fit.append(r)
    if not fit:
        raise ValueError("adapted training set is empty")
    train, valid = sample_validation(fit, valid_fraction, seed)
    manifest = SplitManifest(
        [r.with_split("train") for r in train],
        [r.with_split("valid") for r in valid],
        small,
        large,
        category_index,
    )
    manifest.check()
    return manifest


def build_hpsearch_split(records, seed, fractions=(0.6, 0.2, 0.2)):
    """Image-grouped three-way split used by the grid search."""
    groups = _group_by_image(records)
    n = len(groups)
    if n < 3:
        raise ValueError("need at least 3 distinct images for a three-way split")
    images = _shuffled_images(groups, seed)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_valid = min(max(n_valid, 1), n - n_train - 1)
    parts = (images[:n_train], images[n_train : n_train + n_valid], images[n_train + n_valid :])
    out = []
    for part in parts:
        keep = set(part)
        out.append([r for r in records if r.image_id in keep])
    return tuple(out)


def records_for(records, split_tag):
    return [r for r in records if r.split_tag == split_tag]


__all__ = [
    "PresentationRecord",
    "SplitManifest",
    "build_adapted_split",
    "build_hpsearch_split",
    "sample_validation",
]
