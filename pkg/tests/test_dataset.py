import numpy as np
import pytest

from handbio.dataset import (Dataset, HandRecord, LoadError, exclude_accessories, load_metadata,
                             parse_aspect, synth_dataset, write_corpus)
from handbio.features import lbp_histogram
from handbio.imgproc import GuidedFilterParams, detail_luma
from handbio.splits import make_id_split
from handbio.svm import train_one_vs_all

HEADER = "id,age,gender,skinColor,accessories,nailPolish,aspectOfHand,imageName,irregularities\n"


def _csv(tmp_path, rows, header=HEADER):
    path = tmp_path / "meta.csv"
    path.write_text(header + "".join(rows))
    return path


def test_load_three_rows(tmp_path):
    path = _csv(tmp_path, ["0,23,male,fair,0,0,dorsal right,Hand_0.jpg,0\n",
                           "0,23,male,fair,1,0,palmar left,Hand_1.jpg,0\n",
                           "1,30,female,dark,0,1,Dorsal Left,Hand_2.jpg,1\n"])
    ds = load_metadata(path)
    assert len(ds) == 3 and ds.subjects() == [0, 1]
    r = ds.records[1]
    assert (r.side, r.hand, r.accessories) == ("palmar", "left", True)
    assert ds.records[2].nail_polish and ds.records[2].irregularities
    assert ds.image_root == tmp_path


def test_compound_aspect_values():
    assert parse_aspect("Palmar left") == ("palmar", "left")
    assert parse_aspect("right DORSAL") == ("dorsal", "right")
    for bad in ("palmar", "palmar dorsal", "left palmar extra"):
        with pytest.raises(LoadError):
            parse_aspect(bad)


def test_unknown_enum_names_row(tmp_path):
    path = _csv(tmp_path, ["0,23,male,fair,0,0,dorsal right,a.jpg,0\n",
                           "1,23,robot,fair,0,0,dorsal right,b.jpg,0\n"])
    with pytest.raises(LoadError, match="row 3"):
        load_metadata(path)


def test_duplicate_path_rejected(tmp_path):
    path = _csv(tmp_path, ["0,23,male,fair,0,0,dorsal right,a.jpg,0\n",
                           "1,23,male,fair,0,0,dorsal left,a.jpg,0\n"])
    with pytest.raises(LoadError, match="duplicate"):
        load_metadata(path)


def test_missing_file_and_column(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        load_metadata(tmp_path / "nope.csv")
    path = _csv(tmp_path, ["0,male\n"], header="id,gender\n")
    with pytest.raises(LoadError, match="missing column"):
        load_metadata(path)


def test_separate_side_and_hand_columns(tmp_path):
    path = _csv(tmp_path, ["7,female,palmar,right,x.png\n"], header="sid,sex,side,hand,file\n")
    cmap = {"subject_id": "sid", "gender": "sex", "side": "side", "hand": "hand",
            "image_path": "file"}
    ds = load_metadata(path, column_map=cmap)
    assert ds.records[0] == HandRecord("x.png", 7, "female", "palmar", "right")


def test_exclude_accessories_counts():
    recs = [HandRecord(f"{i}.png", i, "male", "dorsal", "left", accessories=i % 3 == 0)
            for i in range(10)]
    ds = Dataset(tuple(recs))
    assert len(exclude_accessories(ds)) == 10 - 4
    clean = ds.filter(lambda r: not r.accessories)
    assert exclude_accessories(clean) == clean
    assert len(exclude_accessories(ds.filter(lambda r: r.accessories))) == 0
    assert len(ds) == 10


def test_synth_deterministic_and_valid():
    a = synth_dataset(4, 3, seed=5, accessory_rate=0.3)
    b = synth_dataset(4, 3, seed=5, accessory_rate=0.3)
    assert a.records == b.records
    assert all(np.array_equal(a.images[p], b.images[p]) for p in a.images)
    assert all(a.images[p].shape == (64, 64, 3) for p in a.images)
    assert all(0 <= a.images[p].min() and a.images[p].max() <= 1 for p in a.images)
    c = synth_dataset(4, 3, seed=6)
    assert not np.array_equal(a.images["Hand_0000_000.png"], c.images["Hand_0000_000.png"])


def test_synth_parameter_errors():
    with pytest.raises(ValueError):
        synth_dataset(gender_signal=1.5)
    with pytest.raises(ValueError):
        synth_dataset(image_size=8)


def test_corpus_roundtrip(tmp_path):
    ds = synth_dataset(2, 2, image_size=16, accessory_rate=0.5, seed=1)
    csv_path = write_corpus(ds, tmp_path / "corpus")
    back = load_metadata(csv_path)
    assert back.records == ds.records
    img = back.load_image(back.records[0])
    assert np.max(np.abs(img - ds.images[back.records[0].image_path])) <= 0.5 / 255 + 1e-12


def test_lbp_only_identification_on_texture():
    ds = synth_dataset(10, 14, subject_signal=1.0, seed=2)
    split = make_id_split(ds, "dorsal", 10, seed=0, force=True)
    gf = GuidedFilterParams(2, 0.01)

    def feats(recs):
        return np.stack([lbp_histogram(detail_luma(ds.images[r.image_path], gf)[1]).values
                         for r in recs])
    bank = train_one_vs_all(feats(split.train), [r.subject_id for r in split.train])
    pred = bank.predict(feats(split.test))
    assert np.mean(pred == np.array([r.subject_id for r in split.test])) >= 0.8
