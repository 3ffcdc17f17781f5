import numpy as np
import pytest

from handbio.dataset import Dataset, HandRecord
from handbio.splits import CapacityError, make_gender_split, make_id_split


def _records_only(n_subjects=240, seed=0, accessory_rate=0.1):
    """Metadata-only corpus with uneven image counts and some accessory images."""
    rng = np.random.default_rng(seed)
    recs = []
    for s in range(n_subjects):
        gender = ("male", "female")[s % 2]
        for side in ("dorsal", "palmar"):
            for k in range(int(rng.integers(12, 35))):
                recs.append(HandRecord(f"s{s:03d}_{side}_{k:02d}.jpg", s, gender, side,
                                       ("left", "right")[k % 2],
                                       accessories=bool(rng.random() < accessory_rate)))
    return Dataset(tuple(recs))


@pytest.fixture(scope="module")
def corpus():
    return _records_only()


def test_gender_split_protocol_over_100_seeds(corpus):
    seen = set()
    for seed in range(100):
        side = ("dorsal", "palmar")[seed % 2]
        split = make_gender_split(corpus, side, seed)
        for gender in ("male", "female"):
            assert sum(r.gender == gender for r in split.train) == 1000
            assert sum(r.gender == gender for r in split.test) == 500
        assert not {r.subject_id for r in split.train} & {r.subject_id for r in split.test}
        assert not any(r.accessories for r in split.train)
        assert all(r.side == side for r in split.train + split.test)
        assert len({r.image_path for r in split.train + split.test}) == 3000
        seen.add(tuple(r.image_path for r in split.test))
    assert len(seen) == 100


def test_id_split_protocol_over_100_seeds(corpus):
    for seed in range(100):
        n = (80, 100, 120)[seed % 3]
        split = make_id_split(corpus, "palmar", n, seed)
        assert len(split.subjects) == n
        for s in split.subjects:
            train = [r for r in split.train if r.subject_id == s]
            test = [r for r in split.test if r.subject_id == s]
            assert len(train) == 10 and len(test) == 4
            assert not {r.image_path for r in train} & {r.image_path for r in test}
        assert {r.subject_id for r in split.test} == set(split.subjects)
        assert not any(r.accessories for r in split.train)


def test_splits_deterministic(corpus):
    assert make_gender_split(corpus, "dorsal", 7) == make_gender_split(corpus, "dorsal", 7)
    assert make_id_split(corpus, "dorsal", 80, 7) == make_id_split(corpus, "dorsal", 80, 7)
    assert make_gender_split(corpus, "dorsal", 7) != make_gender_split(corpus, "dorsal", 8)


def test_record_order_does_not_matter(corpus):
    shuffled = Dataset(tuple(reversed(corpus.records)))
    assert make_gender_split(shuffled, "palmar", 3) == make_gender_split(corpus, "palmar", 3)


def test_id_subject_counts_need_force(corpus):
    with pytest.raises(ValueError):
        make_id_split(corpus, "dorsal", 20, 0)
    split = make_id_split(corpus, "dorsal", 20, 0, force=True)
    assert len(split.subjects) == 20


def test_capacity_errors():
    small = _records_only(20)
    with pytest.raises(CapacityError, match="need 1000"):
        make_gender_split(small, "dorsal", 0)
    with pytest.raises(CapacityError, match="only"):
        make_id_split(small, "dorsal", 80, 0)
