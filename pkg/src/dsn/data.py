"""Dataset schema, popularity normalization, window construction,
chronological splitting, normalization statistics, and file formats."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, FormatError

POST_FIELDS = [
    "post_id", "uid", "postdate", "cat1", "cat2", "cat3",
    "ispublic", "ispro", "latitude", "longitude", "geoaccuracy",
    "followers", "following", "views", "tags", "faves", "ingroups",
    "r", "d", "img_row", "txt_row",
]

NUMERIC_FIELDS = [
    "ispublic", "ispro", "latitude", "longitude", "geoaccuracy",
    "followers", "following", "views", "tags", "faves", "ingroups",
]

PAD_INDEX = -1


@dataclass
class PostRecord:
    post_id: str
    uid: str
    postdate: int
    cat1: int
    cat2: int
    cat3: int
    ispublic: Optional[float]
    ispro: Optional[float]
    latitude: Optional[float]
    longitude: Optional[float]
    geoaccuracy: Optional[float]
    followers: Optional[float]
    following: Optional[float]
    views: Optional[float]
    tags: Optional[float]
    faves: Optional[float]
    ingroups: Optional[float]
    r: int
    d: float
    img_row: int
    txt_row: int

    def __post_init__(self):
        if self.d <= 0:
            raise DataError(f"post {self.post_id}: days d must be > 0, got {self.d}")
        if self.r < 0:
            raise DataError(f"post {self.post_id}: viewing count r must be >= 0, got {self.r}")


@dataclass
class CategoryTree:
    cardinalities: tuple = (11, 77, 668)
    parent2: list = field(default_factory=list)  # level-2 id -> level-1 id
    parent3: list = field(default_factory=list)  # level-3 id -> level-2 id

    def validate(self):
        n1, n2, n3 = self.cardinalities
        if len(self.parent2) != n2 or len(self.parent3) != n3:
            raise DataError("category tree parent arrays disagree with cardinalities")
        if any(not 0 <= p < n1 for p in self.parent2):
            raise DataError("level-2 parent out of range")
        if any(not 0 <= p < n2 for p in self.parent3):
            raise DataError("level-3 parent out of range")

    def path_for_leaf(self, leaf: int) -> tuple[int, int, int]:
        c2 = self.parent3[leaf]
        return self.parent2[c2], c2, leaf

    def check_post(self, post: PostRecord):
        n1, n2, n3 = self.cardinalities
        if not (0 <= post.cat1 < n1 and 0 <= post.cat2 < n2 and 0 <= post.cat3 < n3):
            raise DataError(f"post {post.post_id}: category id out of range")
        if self.parent3[post.cat3] != post.cat2 or self.parent2[post.cat2] != post.cat1:
            raise DataError(f"post {post.post_id}: category path inconsistent with tree")

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"cardinalities": list(self.cardinalities),
                       "parent2": self.parent2, "parent3": self.parent3}, fh)

    @classmethod
    def load(cls, path) -> "CategoryTree":
        with open(path) as fh:
            obj = json.load(fh)
        tree = cls(tuple(obj["cardinalities"]), obj["parent2"], obj["parent3"])
        tree.validate()
        return tree


# --- popularity normalization ---------------------------------------------

def normalize_popularity(r: float, d: float) -> float:
    """s = log2(r/d) + 1; r = 0 falls back to log2((r+1)/d) + 1."""
    if d <= 0:
        raise DataError(f"days d must be > 0, got {d}")
    if r < 0:
        raise DataError(f"viewing count r must be >= 0, got {r}")
    if r == 0:
        r = 1
    return math.log2(r / d) + 1.0


# --- windows and splits ----------------------------------------------------

def sort_posts(posts: Sequence[PostRecord]) -> list[PostRecord]:
    """Chronological order; ties broken by lexicographic post_id."""
    return sorted(posts, key=lambda p: (p.postdate, p.post_id))


def build_windows(posts: Sequence[PostRecord], l: int) -> list[tuple[int, ...]]:
    """One window per target post over the global stream; positions before
    the start of the stream are PAD_INDEX sentinels."""
    if l < 1:
        raise DataError(f"window length must be >= 1, got {l}")
    n = len(posts)
    return [tuple(range(i - l + 1, i + 1)) if i - l + 1 >= 0
            else tuple([PAD_INDEX] * (l - 1 - i) + list(range(0, i + 1)))
            for i in range(n)]


def chronological_split(posts: Sequence[PostRecord],
                        ratios: tuple = (0.8, 0.1, 0.1)) -> tuple[range, range, range]:
    """Contiguous prefix/middle/suffix index ranges over the sorted stream."""
    n = len(posts)
    if n < 10:
        raise DataError(f"need at least 10 posts to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)


# --- normalization statistics ----------------------------------------------

STD_EPS = 1e-8


@dataclass
class Stats:
    mean: dict[str, float]
    std: dict[str, float]
    uid_to_index: dict[str, int]
    missing_count: int = 0

    @property
    def oov_index(self) -> int:
        return len(self.uid_to_index)

    @property
    def uid_vocab(self) -> int:
        return len(self.uid_to_index) + 1


def fit_stats(train_posts: Sequence[PostRecord]) -> Stats:
    """Per-field mean/std (std guarded by eps) and the train uid vocabulary."""
    if not train_posts:
        raise DataError("cannot fit statistics on an empty training split")
    mean, std = {}, {}
    for f in NUMERIC_FIELDS:
        vals = np.array([getattr(p, f) for p in train_posts
                         if getattr(p, f) is not None], dtype=float)
        if vals.size == 0:
            mean[f], std[f] = 0.0, STD_EPS
        else:
            mean[f] = float(vals.mean())
            s = float(vals.std())
            std[f] = s if s > STD_EPS else STD_EPS
    uids = {}
    for p in train_posts:
        if p.uid not in uids:
            uids[p.uid] = len(uids)
    return Stats(mean, std, uids)


def encode_user(post: PostRecord, stats: Stats) -> tuple[int, np.ndarray]:
    """(uid index, static feature vector): one-hot month/day/hour plus
    z-scored numeric fields. Missing numerics impute to the training mean
    (zero after z-score) and bump the stats counter."""
    uid_idx = stats.uid_to_index.get(post.uid, stats.oov_index)
    tm = time.gmtime(post.postdate)
    onehot = np.zeros(12 + 31 + 24)
    onehot[tm.tm_mon - 1] = 1.0
    onehot[12 + tm.tm_mday - 1] = 1.0
    onehot[12 + 31 + tm.tm_hour] = 1.0
    z = np.zeros(len(NUMERIC_FIELDS))
    for j, f in enumerate(NUMERIC_FIELDS):
        v = getattr(post, f)
        if v is None or (isinstance(v, float) and math.isnan(v)):
            stats.missing_count += 1
            z[j] = 0.0
        else:
            z[j] = (v - stats.mean[f]) / stats.std[f]
    return uid_idx, np.concatenate([onehot, z])


# --- batches ---------------------------------------------------------------

@dataclass
class WindowBatch:
    image: np.ndarray          # [B, l, d_origin]
    text: np.ndarray           # [B, l, d_origin]
    category_ids: np.ndarray   # int [B, l, 3]
    pad_mask: np.ndarray       # bool [B, l]
    uid_idx: np.ndarray        # int [B]
    user_static: np.ndarray    # [B, USER_STATIC_DIM]
    labels: np.ndarray         # [B]
    post_ids: list[str]


def make_batch(posts: Sequence[PostRecord], windows: Sequence[tuple[int, ...]],
               img: np.ndarray, txt: np.ndarray, stats: Stats) -> WindowBatch:
    """Assemble dense arrays for a set of windows. Sentinel positions get
    zero embeddings, category id 0 and a False mask entry."""
    B = len(windows)
    l = len(windows[0])
    d = img.shape[1]
    image = np.zeros((B, l, d))
    text = np.zeros((B, l, d))
    cats = np.zeros((B, l, 3), dtype=np.int64)
    mask = np.zeros((B, l), dtype=bool)
    uid_idx = np.zeros(B, dtype=np.int64)
    static = None
    labels = np.zeros(B)
    ids = []
    for b, win in enumerate(windows):
        for j, idx in enumerate(win):
            if idx == PAD_INDEX:
                continue
            p = posts[idx]
            image[b, j] = img[p.img_row]
            text[b, j] = txt[p.txt_row]
            cats[b, j] = (p.cat1, p.cat2, p.cat3)
            mask[b, j] = True
        target = posts[win[-1]]
        uid_idx[b], vec = encode_user(target, stats)
        if static is None:
            static = np.zeros((B, vec.size))
        static[b] = vec
        labels[b] = normalize_popularity(target.r, target.d)
        ids.append(target.post_id)
    return WindowBatch(image, text, cats, mask, uid_idx, static, labels, ids)


# --- embedding file format -------------------------------------------------

EMBED_MAGIC = b"DSNE"
EMBED_VERSION = 1
EMBED_DTYPE_F32 = 1
_EMBED_HEADER = struct.Struct("<4sIQIB")


def write_embedding_file(path, rows: np.ndarray):
    """rows: [count, dim] written as float32 little-endian, row-major."""
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise FormatError(f"embedding rows must be 2-D, got shape {rows.shape}")
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, EMBED_VERSION,
                                    rows.shape[0], rows.shape[1], EMBED_DTYPE_F32))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_embedding_file(path) -> np.ndarray:
    """Returns the rows upcast to float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _EMBED_HEADER.size:
        raise FormatError(f"embedding file truncated in header at offset {len(blob)}")
    magic, version, count, dim, dtype = _EMBED_HEADER.unpack_from(blob, 0)
    if magic != EMBED_MAGIC:
        raise FormatError(f"bad embedding magic {magic!r} at offset 0")
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported embedding file version {version}")
    if dtype != EMBED_DTYPE_F32:
        raise FormatError(f"unsupported embedding dtype code {dtype}")
    expected = _EMBED_HEADER.size + count * dim * 4
    if len(blob) != expected:
        raise FormatError(
            f"embedding payload length {len(blob)} != expected {expected} "
            f"(truncated at offset {len(blob)})")
    rows = np.frombuffer(blob, dtype="<f4", offset=_EMBED_HEADER.size)
    return rows.reshape(count, dim).astype(np.float64)


# --- post file format ------------------------------------------------------

def write_posts(path, posts: Sequence[PostRecord]):
    """One JSON object per line, UTF-8, with exactly the declared fields."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in posts:
            obj = {f: getattr(p, f) for f in POST_FIELDS}
            fh.write(json.dumps(obj) + "\n")


def read_posts(path) -> list[PostRecord]:
    posts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid record: {exc}") from exc
            unknown = set(obj) - set(POST_FIELDS)
            missing = set(POST_FIELDS) - set(obj)
            if unknown or missing:
                raise FormatError(
                    f"{path}:{lineno}: bad fields (unknown={sorted(unknown)}, "
                    f"missing={sorted(missing)})")
            posts.append(PostRecord(**obj))
    return posts


# --- dataset bundle --------------------------------------------------------

@dataclass
class Dataset:
    """Sorted posts with embeddings, split ranges, fitted stats and windows."""
    posts: list[PostRecord]
    img: np.ndarray
    txt: np.ndarray
    train_idx: range
    val_idx: range
    test_idx: range
    stats: Stats
    windows: list[tuple[int, ...]]
    window_len: int


def prepare_dataset(posts: Sequence[PostRecord], img: np.ndarray, txt: np.ndarray,
                    window_len: int, ratios: tuple = (0.8, 0.1, 0.1)) -> Dataset:
    posts = sort_posts(posts)
    for p in posts:
        if not (0 <= p.img_row < img.shape[0] and 0 <= p.txt_row < txt.shape[0]):
            raise DataError(f"post {p.post_id}: embedding row out of range")
    tr, va, te = chronological_split(posts, ratios)
    stats = fit_stats([posts[i] for i in tr])
    windows = build_windows(posts, window_len)
    return Dataset(posts, img, txt, tr, va, te, stats, windows, window_len)
