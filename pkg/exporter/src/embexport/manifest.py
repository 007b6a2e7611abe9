"""Export manifest: one (post_id, image path, caption) entry per row."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import ManifestError


@dataclass(frozen=True)
class ManifestEntry:
    post_id: str
    image_path: Path
    caption: str


@dataclass
class ExportManifest:
    entries: list[ManifestEntry]
    d_origin: int
    model: str

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.post_id in seen:
                raise ManifestError(f"duplicate post_id {e.post_id!r}")
            seen.add(e.post_id)
        if self.d_origin < 1:
            raise ManifestError(f"d_origin must be positive, got {self.d_origin}")


def read_manifest(path, d_origin: int, model: str) -> ExportManifest:
    """Tab-separated rows: post_id, image path, caption. Paths are resolved
    relative to the manifest file."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ManifestError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(row)}")
            post_id, img, caption = (c.strip() for c in row)
            if not post_id:
                raise ManifestError(f"{path}:{lineno}: empty post_id")
            img_path = Path(img)
            if not img_path.is_absolute():
                img_path = base / img_path
            entries.append(ManifestEntry(post_id, img_path, caption))
    return ExportManifest(entries, d_origin, model)
