"""Sample manifest: CSV index of sequences, subjects and labels."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace
from pathlib import Path

DATASETS = ("SAMM", "SMIC", "CASME2", "CASME3", "SYNTH")
FIELDS = (
    "sample_id",
    "subject_id",
    "dataset",
    "frames_dir",
    "onset",
    "apex",
    "offset",
    "raw_label",
    "class",
    "landmarks_path",
)

NEGATIVE, POSITIVE, SURPRISE = 0, 1, 2

EMOTION_CLASSES = {
    "happiness": POSITIVE,
    "positive": POSITIVE,
    "surprise": SURPRISE,
    "negative": NEGATIVE,
    "sadness": NEGATIVE,
    "disgust": NEGATIVE,
    "contempt": NEGATIVE,
    "fear": NEGATIVE,
    "anger": NEGATIVE,
    "repression": NEGATIVE,
}


class ManifestError(ValueError):
    pass


def map_emotion(raw_label: str) -> int:
    """Three-way class of a dataset emotion label."""
    key = raw_label.strip().lower()
    if key not in EMOTION_CLASSES:
        raise ManifestError(f"emotion {raw_label!r} has no negative/positive/surprise class")
    return EMOTION_CLASSES[key]


@dataclass(frozen=True)
class Sample:
    sample_id: str
    subject_id: str
    dataset: str
    frames_dir: str
    onset: int
    apex: int | None
    offset: int
    raw_label: str
    label: int
    landmarks_path: str

    @property
    def subject_key(self) -> str:
        """Subject id namespaced by dataset, so ids never collide across corpora."""
        return f"{self.dataset}/{self.subject_id}"


@dataclass
class SampleManifest:
    entries: list[Sample]
    # directory that relative frames_dir / landmarks_path values resolve against
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for s in self.entries:
            if s.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subjects(self) -> list[str]:
        return sorted({s.subject_key for s in self.entries})

    def by_id(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.entries}

    def with_entries(self, entries: list[Sample]) -> SampleManifest:
        return SampleManifest(entries, self.root)

    def rebased(self, new_root: str | Path) -> SampleManifest:
        """Same entries with relative paths rewritten to resolve from ``new_root``."""
        new_root = Path(new_root)

        def move(rel: str) -> str:
            if Path(rel).is_absolute():
                return rel
            return Path(os.path.relpath(self.resolve(rel).absolute(), new_root.absolute())).as_posix()

        entries = [
            replace(s, frames_dir=move(s.frames_dir), landmarks_path=move(s.landmarks_path))
            for s in self.entries
        ]
        return SampleManifest(entries, new_root)


def _parse_row(row: dict, line: int) -> Sample:
    try:
        dataset = row["dataset"].strip().upper()
        if dataset not in DATASETS:
            raise ManifestError(f"unknown dataset tag {row['dataset']!r}")
        raw = row["raw_label"].strip()
        label = int(row["class"]) if row.get("class", "").strip() else map_emotion(raw)
        if label not in (NEGATIVE, POSITIVE, SURPRISE):
            raise ManifestError(f"class {label} outside 0..2")
        if raw and raw.lower() in EMOTION_CLASSES and EMOTION_CLASSES[raw.lower()] != label:
            raise ManifestError(f"class {label} contradicts emotion {raw!r}")
        apex = row["apex"].strip()
        sample = Sample(
            sample_id=row["sample_id"].strip(),
            subject_id=row["subject_id"].strip(),
            dataset=dataset,
            frames_dir=row["frames_dir"].strip(),
            onset=int(row["onset"]),
            apex=int(apex) if apex else None,
            offset=int(row["offset"]),
            raw_label=raw,
            label=label,
            landmarks_path=row["landmarks_path"].strip(),
        )
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"manifest line {line}: {exc}") from exc
    if not sample.onset <= (sample.apex if sample.apex is not None else sample.onset) <= sample.offset:
        raise ManifestError(f"manifest line {line}: need onset <= apex <= offset")
    if sample.onset > sample.offset:
        raise ManifestError(f"manifest line {line}: onset after offset")
    return sample


def read_manifest(path: str | Path) -> SampleManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        entries = [_parse_row(row, i + 2) for i, row in enumerate(reader)]
    return SampleManifest(entries, root=path.parent)


def manifest_text(manifest: SampleManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for s in manifest.entries:
        writer.writerow(
            [
                s.sample_id,
                s.subject_id,
                s.dataset,
                s.frames_dir,
                s.onset,
                "" if s.apex is None else s.apex,
                s.offset,
                s.raw_label,
                s.label,
                s.landmarks_path,
            ]
        )
    return buf.getvalue()


def write_manifest(manifest: SampleManifest, path: str | Path) -> None:
    Path(path).write_text(manifest_text(manifest))


def with_apex(sample: Sample, apex: int) -> Sample:
    return replace(sample, apex=apex)
