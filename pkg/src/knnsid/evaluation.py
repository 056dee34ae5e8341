"""Dataset manifests, train/val/test splits, confusion matrices and macro metrics."""

from __future__ import annotations

import csv
import json
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetError

SPLITS = ("train", "val", "test")


@dataclass
class SongRecord:
    song_id: str
    path: str
    singer_id: str
    split: str = "train"
    album_id: str | None = None

    def to_json(self) -> str:
        d = {"song_id": self.song_id, "path": self.path, "singer_id": self.singer_id}
        if self.album_id is not None:
            d["album_id"] = self.album_id
        d["split"] = self.split
        return json.dumps(d)


@dataclass
class DatasetManifest:
    records: list[SongRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.song_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("song ids in a manifest must be unique")
        for r in self.records:
            if r.split not in SPLITS:
                raise DatasetError(f"song {r.song_id}: unknown split {r.split!r}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[SongRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def singers(self) -> list[str]:
        return sorted({r.singer_id for r in self.records})

    def resolve(self, record: SongRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def validate_for_training(self) -> None:
        """Every singer must appear in train, and val must be nonempty."""
        singers = self.singers
        if len(singers) < 2:
            raise DatasetError(f"classification needs at least 2 singers, manifest has {len(singers)}")
        train_singers = {r.singer_id for r in self.split("train")}
        missing = [s for s in singers if s not in train_singers]
        if missing:
            raise DatasetError(f"singers absent from the train split: {missing}")
        if not self.split("val"):
            raise DatasetError("manifest has no validation split")

    def save(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(SongRecord(
                    song_id=str(d["song_id"]), path=str(d["path"]), singer_id=str(d["singer_id"]),
                    split=d.get("split", "train"), album_id=d.get("album_id"),
                ))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DatasetError(f"{path}:{n}: bad manifest record ({exc})") from exc
        return cls(records, root=path.parent)


def _by_singer(songs):
    groups = defaultdict(list)
    for s in songs:
        groups[s.singer_id].append(s)
    return {k: sorted(v, key=lambda r: r.song_id) for k, v in sorted(groups.items())}


def _rng_for(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def split_random(songs, ratio=(8, 1, 1), seed: int = 0) -> DatasetManifest:
    """Per-singer stratified train/val/test split.

    Val and test each get ``round(n * share)`` songs (at least one); train
    absorbs the remainder. Input order does not matter.
    """
    if len(ratio) != 3 or min(ratio) <= 0:
        raise ContractError(f"ratio must be three positive numbers, got {ratio}")
    total = float(sum(ratio))
    out = []
    for singer, group in _by_singer(songs).items():
        n = len(group)
        if n < 3:
            raise DatasetError(f"singer {singer} has {n} songs; a 3-way split needs at least 3")
        n_val = max(1, int(round(n * ratio[1] / total)))
        n_test = max(1, int(round(n * ratio[2] / total)))
        if n - n_val - n_test < 1:
            raise DatasetError(f"singer {singer}: {n} songs leave no training data")
        order = _rng_for(seed, singer).permutation(n)
        for rank, i in enumerate(order):
            split = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
            r = group[i]
            out.append(SongRecord(r.song_id, r.path, r.singer_id, split, r.album_id))
    out.sort(key=lambda r: r.song_id)
    return DatasetManifest(out, root=getattr(songs, "root", Path()))


def split_by_album(songs, train_albums: int = 4, seed: int = 0) -> DatasetManifest:
    """Album-level split: per singer, ``train_albums`` albums train, one val, one test.

    The held-out pair is drawn by a seeded shuffle of the sorted album ids;
    the lexicographically smaller of the two goes to validation. Albums
    beyond ``train_albums + 2`` also go to train.
    """
    out = []
    for singer, group in _by_singer(songs).items():
        albums = sorted({r.album_id for r in group if r.album_id is not None})
        if any(r.album_id is None for r in group):
            raise DatasetError(f"singer {singer}: every song needs an album_id for an album split")
        if len(albums) < train_albums + 2:
            raise DatasetError(f"singer {singer} has {len(albums)} albums; need {train_albums + 2}")
        perm = _rng_for(seed, singer).permutation(len(albums))
        held = sorted(albums[i] for i in perm[:2])
        assign = {a: "train" for a in albums}
        assign[held[0]], assign[held[1]] = "val", "test"
        out.extend(SongRecord(r.song_id, r.path, r.singer_id, assign[r.album_id], r.album_id) for r in group)
    out.sort(key=lambda r: r.song_id)
    return DatasetManifest(out, root=getattr(songs, "root", Path()))


# --- metrics -----------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = true, cols = predicted
    labels: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if list(self.labels) != list(other.labels):
            raise ContractError("cannot merge confusion matrices over different label sets")
        return ConfusionMatrix(self.counts + other.counts, list(self.labels))

    def to_csv(self, path, names=None) -> None:
        names = [str(n) for n in (names or self.labels)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *names])
            for name, row in zip(names, self.counts):
                w.writerow([name, *row.tolist()])


def confusion(pairs, labels) -> ConfusionMatrix:
    """Count (true, predicted) pairs; ``labels`` fixes row/column order."""
    labels = list(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in pairs:
        if t not in index or p not in index:
            raise ContractError(f"label pair ({t!r}, {p!r}) outside the label set")
        cm[index[t], index[p]] += 1
    return ConfusionMatrix(cm, labels)


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    correct: int
    total: int
    labels: list = field(default_factory=list)
    # classes whose precision (never predicted) or recall (never present) had a zero denominator
    undefined_precision: list = field(default_factory=list)
    undefined_recall: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def to_text(self, names=None) -> str:
        names = [str(n) for n in (names or self.labels)]
        width = max([len(n) for n in names] + [len("macro")])
        lines = [
            f"accuracy {self.accuracy:.4f} ({self.correct}/{self.total})",
            f"{'class':<{width}}  precision  recall     f1",
        ]
        for n, p, r, f in zip(names, self.precision, self.recall, self.f1):
            lines.append(f"{n:<{width}}  {p:9.4f}  {r:6.4f}  {f:6.4f}")
        lines.append(f"{'macro':<{width}}  {self.macro_precision:9.4f}  {self.macro_recall:6.4f}  {self.macro_f1:6.4f}")
        return "\n".join(lines) + "\n"


def metrics(cm: ConfusionMatrix) -> MetricReport:
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total < 1:
        raise ContractError("metrics need at least one evaluated item")
    diag = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
    labels = list(cm.labels) or list(range(len(diag)))
    return MetricReport(
        accuracy=int(np.trace(counts)) / total,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        correct=int(np.trace(counts)),
        total=total,
        labels=labels,
        undefined_precision=[labels[i] for i in np.flatnonzero(col == 0)],
        undefined_recall=[labels[i] for i in np.flatnonzero(row == 0)],
    )
