"""Hand-image records, metadata loading and a synthetic corpus generator."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

GENDERS = ("male", "female")
SIDES = ("dorsal", "palmar")
HANDS = ("left", "right")


class LoadError(ValueError):
    pass


@dataclass(frozen=True)
class HandRecord:
    image_path: str
    subject_id: int
    gender: str
    side: str
    hand: str
    age: int = 0
    skin_color: str = ""
    accessories: bool = False
    nail_polish: bool = False
    irregularities: bool = False

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.hand not in HANDS:
            raise ValueError(f"hand must be one of {HANDS}, got {self.hand!r}")


@dataclass(frozen=True)
class Dataset:
    """Immutable record collection sorted by image path.

    ``images`` optionally holds decoded arrays keyed by image path (synthetic
    corpora); otherwise images are read lazily from ``image_root``.
    """

    records: tuple[HandRecord, ...]
    image_root: Path | None = None
    images: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: r.image_path))
        paths = [r.image_path for r in recs]
        if len(set(paths)) != len(paths):
            dup = next(p for p in paths if paths.count(p) > 1)
            raise LoadError(f"duplicate image path {dup!r}")
        object.__setattr__(self, "records", recs)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subjects(self) -> list[int]:
        return sorted({r.subject_id for r in self.records})

    def by_subject(self) -> dict[int, list[HandRecord]]:
        out: dict[int, list[HandRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def filter(self, pred) -> "Dataset":
        return Dataset(tuple(r for r in self.records if pred(r)), self.image_root, self.images)

    def with_side(self, side: str) -> "Dataset":
        return self.filter(lambda r: r.side == side)

    def load_image(self, record: HandRecord) -> np.ndarray:
        if record.image_path in self.images:
            return self.images[record.image_path]
        from .imgproc import load_image
        root = self.image_root or Path(".")
        return load_image(root / record.image_path)


def exclude_accessories(dataset: Dataset) -> Dataset:
    return dataset.filter(lambda r: not r.accessories)


def default_column_map() -> dict[str, str]:
    return json.loads(resources.files("handbio").joinpath("data/column_map.json").read_text())


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


def _flag(value: str, row: int, col: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise LoadError(f"row {row}: column {col!r} has non-boolean value {value!r}")


def parse_aspect(value: str, row: int = 0) -> tuple[str, str]:
    """Split a compound value such as ``"Palmar left"`` into ``(side, hand)``.

    Word order and case do not matter; exactly one side word (dorsal/palmar)
    and one hand word (left/right) must be present.
    """
    words = value.strip().lower().replace("_", " ").replace("-", " ").split()
    sides = [w for w in words if w in SIDES]
    hands = [w for w in words if w in HANDS]
    if len(sides) != 1 or len(hands) != 1 or len(words) != 2:
        raise LoadError(f"row {row}: cannot parse hand aspect {value!r}")
    return sides[0], hands[0]


def load_metadata(csv_path, image_root=None, column_map: dict | None = None) -> Dataset:
    """Read a per-image metadata table.

    ``column_map`` maps record fields to CSV column names; either ``aspect``
    (compound side + hand) or both ``side`` and ``hand`` must be mapped.
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise LoadError(f"metadata file not found: {csv_path}")
    cmap = default_column_map() if column_map is None else dict(column_map)
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = ["subject_id", "gender", "image_path"]
        required += ["aspect"] if "aspect" in cmap else ["side", "hand"]
        missing = [f"{k} ({cmap.get(k, k)!r})" for k in required if cmap.get(k, k) not in header]
        if missing:
            raise LoadError(f"{csv_path}: missing column(s) {', '.join(missing)}")
        records = []
        for rownum, row in enumerate(reader, start=2):
            def get(key, default=""):
                col = cmap.get(key)
                return row.get(col, default) if col else default
            try:
                if "aspect" in cmap:
                    side, hand = parse_aspect(get("aspect"), rownum)
                else:
                    side, hand = get("side").strip().lower(), get("hand").strip().lower()
                gender = get("gender").strip().lower()
                age = get("age", "0").strip()
                rec = HandRecord(
                    image_path=get("image_path").strip(),
                    subject_id=int(get("subject_id")),
                    gender=gender, side=side, hand=hand,
                    age=int(float(age)) if age else 0,
                    skin_color=get("skin_color").strip(),
                    accessories=_flag(get("accessories"), rownum, "accessories"),
                    nail_polish=_flag(get("nail_polish"), rownum, "nail_polish"),
                    irregularities=_flag(get("irregularities"), rownum, "irregularities"))
            except LoadError:
                raise
            except ValueError as exc:
                raise LoadError(f"{csv_path}: row {rownum}: {exc}") from None
            records.append(rec)
    return Dataset(tuple(records), Path(image_root) if image_root else csv_path.parent)


def write_metadata(path, dataset: Dataset, column_map: dict | None = None) -> None:
    cmap = default_column_map() if column_map is None else column_map
    cols = ["subject_id", "age", "gender", "skin_color", "accessories", "nail_polish",
            "aspect", "image_path", "irregularities"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([cmap[c] for c in cols])
        for r in dataset.records:
            wr.writerow([r.subject_id, r.age, r.gender, r.skin_color, int(r.accessories),
                         int(r.nail_polish), f"{r.side} {r.hand}", r.image_path,
                         int(r.irregularities)])


# -- synthetic corpus ---------------------------------------------------------

def _texture(rng: np.random.Generator):
    """Per-subject grating parameters: (orientation, frequency, weight) triples."""
    n = 3
    theta = rng.uniform(0, np.pi, n)
    freq = rng.uniform(0.12, 0.45, n)
    weight = rng.dirichlet(np.ones(n))
    return theta, freq, weight


def _render(size, rng, aspect, height, tone, tex, contrast, shift, accessory):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + shift[0]
    cx = size / 2 + shift[1]
    ry = height * size / 2
    rx = ry * aspect
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    mask = 1.0 / (1.0 + np.exp((d - 1.0) * 12.0))
    theta, freq, weight = tex
    field = np.zeros((size, size))
    for th, fr, w in zip(theta, freq, weight):
        phase = rng.uniform(0, 2 * np.pi)
        field += w * np.sin(2 * np.pi * fr * (xx * np.cos(th) + yy * np.sin(th)) + phase)
    shade = 1.0 + contrast * field
    hand = tone[None, None, :] * shade[:, :, None]
    bg = np.full((size, size, 3), 0.12)
    img = mask[:, :, None] * hand + (1 - mask[:, :, None]) * bg
    if accessory:
        y0 = int(cy + ry * 0.2)
        img[y0:y0 + max(1, size // 32), int(cx - rx * 0.6):int(cx + rx * 0.6)] = 0.95
    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(n_subjects: int = 20, images_per_subject: int = 20, gender_signal: float = 0.8,
                  subject_signal: float = 0.8, image_size: int = 64, seed: int = 0,
                  side: str = "dorsal", accessory_rate: float = 0.0) -> Dataset:
    """Procedural stand-in for a hand corpus.

    Each image is an elliptical blob on a dark background.  The blob's width
    relative to its height separates the genders (scaled by ``gender_signal``);
    a subject-specific mix of oriented gratings modulates the skin, with
    contrast scaled by ``subject_signal``.  Subjects alternate male/female.
    """
    if not (0 <= gender_signal <= 1 and 0 <= subject_signal <= 1):
        raise ValueError("signal strengths must lie in [0, 1]")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    if n_subjects < 1 or images_per_subject < 1:
        raise ValueError("need at least one subject and one image per subject")
    records, images = [], {}
    for s in range(n_subjects):
        srng = np.random.default_rng([seed, s])
        gender = GENDERS[s % 2]
        sign = 1.0 if gender == "male" else -1.0
        aspect0 = 0.62 + sign * 0.12 * gender_signal + srng.normal(0, 0.03)
        height0 = 0.72 + srng.normal(0, 0.03)
        tone = np.array([srng.uniform(0.55, 0.85), srng.uniform(0.40, 0.65),
                         srng.uniform(0.30, 0.50)])
        tex = _texture(srng)
        contrast = 0.25 * subject_signal
        age = int(srng.integers(18, 75))
        for k in range(images_per_subject):
            irng = np.random.default_rng([seed, s, k])
            acc = bool(irng.random() < accessory_rate)
            img = _render(image_size, irng, aspect0 + irng.normal(0, 0.02),
                          height0 + irng.normal(0, 0.02), tone, tex, contrast,
                          irng.uniform(-0.05, 0.05, 2) * image_size, acc)
            path = f"Hand_{s:04d}_{k:03d}.png"
            records.append(HandRecord(path, s, gender, side, HANDS[k % 2], age,
                                      f"tone{int(tone[0] * 100)}", acc))
            images[path] = img
    return Dataset(tuple(records), None, images)


def write_corpus(dataset: Dataset, out_dir) -> Path:
    """Write images as PNG plus ``metadata.csv``; returns the CSV path."""
    from .imgproc import save_image
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in dataset.records:
        save_image(out / r.image_path, dataset.load_image(r))
    csv_path = out / "metadata.csv"
    write_metadata(csv_path, dataset)
    return csv_path
