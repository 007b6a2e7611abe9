"""Run a frozen encoder over a manifest and write the embedding files.

Output layout (all in one directory):
  images.dsne / texts.dsne  binary embedding files, one row per exported
                            manifest entry, in manifest order
  mapping.tsv               header lines recording the encoder identity and
                            dimension, then post_id -> row index
  errors.tsv                one row per skipped manifest entry
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ExportError
from .manifest import ExportManifest

log = logging.getLogger("embexport")

# binary embedding file layout: magic, version, row count, dim, dtype code
EMBED_MAGIC = b"DSNE"
EMBED_VERSION = 1
EMBED_DTYPE_F32 = 1
_EMBED_HEADER = struct.Struct("<4sIQIB")


def write_embedding_file(path, rows: np.ndarray):
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ExportError(f"embedding rows must be 2-D, got shape {rows.shape}")
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, EMBED_VERSION,
                                    rows.shape[0], rows.shape[1], EMBED_DTYPE_F32))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def export_embeddings(manifest: ExportManifest, out_dir, encoder,
                      batch_size: int = 64) -> dict:
    """Encode every readable manifest entry and write the four artifacts.

    Returns a summary dict (rows written, entries skipped, output paths).
    Unreadable images are skipped and recorded in errors.tsv; an encoder
    whose width disagrees with the manifest's d_origin is fatal.
    """
    if encoder.dim != manifest.d_origin:
        raise ExportError(
            f"encoder width {encoder.dim} != manifest d_origin {manifest.d_origin}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    kept, skipped, images = [], [], []
    for entry in manifest.entries:
        try:
            with Image.open(entry.image_path) as im:
                im.load()
                images.append(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            skipped.append((entry.post_id, f"{type(exc).__name__}: {exc}"))
            continue
        kept.append(entry)

    img_rows = np.zeros((len(kept), encoder.dim), dtype=np.float32)
    txt_rows = np.zeros((len(kept), encoder.dim), dtype=np.float32)
    for lo in range(0, len(kept), batch_size):
        chunk = kept[lo:lo + batch_size]
        img_rows[lo:lo + len(chunk)] = encoder.encode_images(
            images[lo:lo + len(chunk)])
        captions = [e.caption for e in chunk]
        encoded = encoder.encode_texts(captions)
        for j, caption in enumerate(captions):
            if not caption:
                # the paper setup has no caption-free posts; keep the row
                # aligned but make the absence explicit
                log.warning("post %s has an empty caption; writing a zero row",
                            chunk[j].post_id)
                encoded[j] = 0.0
        txt_rows[lo:lo + len(chunk)] = encoded

    write_embedding_file(out_dir / "images.dsne", img_rows)
    write_embedding_file(out_dir / "texts.dsne", txt_rows)
    with open(out_dir / "mapping.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# model\t{encoder.name}\n")
        fh.write(f"# dim\t{encoder.dim}\n")
        for row, entry in enumerate(kept):
            fh.write(f"{entry.post_id}\t{row}\n")
    with open(out_dir / "errors.tsv", "w", encoding="utf-8") as fh:
        for post_id, reason in skipped:
            fh.write(f"{post_id}\t{reason}\n")
    if skipped:
        log.warning("skipped %d unreadable images; see %s",
                    len(skipped), out_dir / "errors.tsv")
    return {
        "rows": len(kept),
        "skipped": len(skipped),
        "images": out_dir / "images.dsne",
        "texts": out_dir / "texts.dsne",
        "mapping": out_dir / "mapping.tsv",
        "errors": out_dir / "errors.tsv",
    }
