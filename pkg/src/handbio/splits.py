"""Train/test split generators for the gender and identification protocols."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import GENDERS, Dataset, HandRecord, exclude_accessories

ID_SUBJECT_COUNTS = (80, 100, 120)


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class GenderSplit:
    side: str
    train: tuple[HandRecord, ...]
    test: tuple[HandRecord, ...]
    seed: int
    repeat_index: int = 0

    def labels(self, part: str) -> np.ndarray:
        recs = self.train if part == "train" else self.test
        return np.array([GENDERS.index(r.gender) for r in recs])


@dataclass(frozen=True)
class IdSplit:
    side: str
    n_subjects: int
    train: tuple[HandRecord, ...]
    test: tuple[HandRecord, ...]
    seed: int
    repeat_index: int = 0

    @property
    def subjects(self) -> list[int]:
        return sorted({r.subject_id for r in self.train})


def _pick(rng, records, n):
    idx = np.sort(rng.choice(len(records), size=n, replace=False))
    return [records[i] for i in idx]


def make_gender_split(dataset: Dataset, side: str, seed: int, n_train: int = 1000,
                      n_test: int = 500, repeat_index: int = 0) -> GenderSplit:
    """Subject-disjoint split with exactly ``n_train``/``n_test`` images per gender.

    Subjects of each gender are shuffled; test subjects are taken in that
    order until their images cover ``n_test``, the rest supply training
    images.  Images with accessories never enter the training set.
    """
    rng = np.random.default_rng(seed)
    pool = dataset.with_side(side).by_subject()
    train, test = [], []
    for gender in GENDERS:
        subjects = sorted(s for s, recs in pool.items() if recs[0].gender == gender)
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        test_subj, count = [], 0
        while count < n_test and len(test_subj) < len(order):
            s = order[len(test_subj)]
            test_subj.append(s)
            count += len(pool[s])
        train_subj = order[len(test_subj):]
        test_pool = sorted((r for s in test_subj for r in pool[s]), key=lambda r: r.image_path)
        train_pool = sorted((r for s in train_subj for r in pool[s] if not r.accessories),
                            key=lambda r: r.image_path)
        if len(test_pool) < n_test or len(train_pool) < n_train:
            raise CapacityError(
                f"{side}/{gender}: need {n_train} train + {n_test} test images from disjoint "
                f"subjects, have {len(train_pool)} accessory-free train and {len(test_pool)} "
                f"test images ({len(subjects)} subjects)")
        train += _pick(rng, train_pool, n_train)
        test += _pick(rng, test_pool, n_test)
    return GenderSplit(side, tuple(train), tuple(test), seed, repeat_index)


def make_id_split(dataset: Dataset, side: str, n_subjects: int, seed: int, n_train: int = 10,
                  n_test: int = 4, force: bool = False, repeat_index: int = 0) -> IdSplit:
    """Random subjects, each contributing ``n_train`` training and ``n_test`` test images."""
    if n_subjects not in ID_SUBJECT_COUNTS and not force:
        raise ValueError(f"n_subjects must be one of {ID_SUBJECT_COUNTS} (use force to override)")
    rng = np.random.default_rng(seed)
    pool = exclude_accessories(dataset.with_side(side)).by_subject()
    need = n_train + n_test
    eligible = sorted(s for s, recs in pool.items() if len(recs) >= need)
    if len(eligible) < n_subjects:
        raise CapacityError(f"{side}: need {n_subjects} subjects with >= {need} accessory-free "
                            f"images, only {len(eligible)} qualify")
    chosen = sorted(eligible[i] for i in rng.choice(len(eligible), n_subjects, replace=False))
    train, test = [], []
    for s in chosen:
        recs = pool[s]
        order = rng.permutation(len(recs))[:need]
        train += sorted((recs[i] for i in order[:n_train]), key=lambda r: r.image_path)
        test += sorted((recs[i] for i in order[n_train:]), key=lambda r: r.image_path)
    return IdSplit(side, n_subjects, tuple(train), tuple(test), seed, repeat_index)
