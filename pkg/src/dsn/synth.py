"""Synthetic SMPD-like data with a planted popularity signal.

The planted score mixes a user effect (recoverable from the numeric user
fields), a category effect inherited noisily down the three-level tree, an
embedding-direction effect, a short-range temporal term over the preceding
posts in the global stream, and Gaussian noise. Viewing counts are emitted
by inverting the log-normalization so that re-applying it recovers the
planted score up to integer rounding of the count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import CategoryTree, PostRecord, normalize_popularity
from .errors import DataError

BASE_POPULARITY = 6.0


@dataclass
class GenSpec:
    n_users: int
    n_posts: int
    d_origin: int
    cardinalities: tuple = (11, 77, 668)
    noise: float = 0.3
    temporal_weight: float = 0.4
    temporal_window: int = 4
    embed_weight: float = 0.5
    seed: int = 13

    def validate(self):
        if self.n_users < 1 or self.n_posts < 1 or self.d_origin < 1:
            raise DataError(f"counts must be positive: {self}")
        if any(n < 1 for n in self.cardinalities):
            raise DataError(f"cardinalities must be positive: {self.cardinalities}")


@dataclass
class SynthResult:
    posts: list[PostRecord]
    tree: CategoryTree
    img: np.ndarray       # float32 [n_posts, d_origin]
    txt: np.ndarray
    planted: np.ndarray   # the planted scores, stream order


def generate_synthetic(spec: GenSpec) -> SynthResult:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n1, n2, n3 = spec.cardinalities

    tree = CategoryTree(
        cardinalities=(n1, n2, n3),
        parent2=[int(v) for v in rng.integers(0, n1, size=n2)],
        parent3=[int(v) for v in rng.integers(0, n2, size=n3)],
    )
    tree.validate()

    # category effect inherited noisily from parents
    b1 = rng.normal(0.0, 0.5, size=n1)
    b2 = b1[tree.parent2] + rng.normal(0.0, 0.3, size=n2)
    b3 = b2[tree.parent3] + rng.normal(0.0, 0.2, size=n3)

    # per-leaf embedding cluster means; image and text share the cluster
    leaf_mu = rng.normal(0.0, 1.0, size=(n3, spec.d_origin)) / math.sqrt(spec.d_origin)

    # users: latent traits drive both the visible numeric fields and the
    # planted user effect, so the effect is recoverable from the fields
    z = rng.normal(0.0, 1.0, size=(spec.n_users, 6))
    ispro = (rng.random(spec.n_users) < 0.3).astype(float)
    user_fields = {
        "followers": np.maximum(0, np.round(500 + 300 * z[:, 0])),
        "following": np.maximum(0, np.round(200 + 80 * z[:, 1])),
        "views": np.maximum(0, np.round(5000 + 2000 * z[:, 2])),
        "tags": np.maximum(0, np.round(100 + 30 * z[:, 3])),
        "faves": np.maximum(0, np.round(800 + 300 * z[:, 4])),
        "ingroups": np.maximum(0, np.round(20 + 8 * z[:, 5])),
    }
    user_effect = 0.5 * z[:, 0] + 0.3 * z[:, 2] + 0.2 * z[:, 4] + 0.15 * ispro

    # power-law user activity
    weights = 1.0 / (1.0 + np.arange(spec.n_users)) ** 1.1
    weights /= weights.sum()
    post_user = rng.choice(spec.n_users, size=spec.n_posts, p=weights)

    post_leaf = rng.integers(0, n3, size=spec.n_posts)
    img = leaf_mu[post_leaf] + rng.normal(0.0, 0.3 / math.sqrt(spec.d_origin),
                                          size=(spec.n_posts, spec.d_origin))
    txt = leaf_mu[post_leaf] + rng.normal(0.0, 0.3 / math.sqrt(spec.d_origin),
                                          size=(spec.n_posts, spec.d_origin))

    u_dir = rng.normal(0.0, 1.0, size=spec.d_origin)
    u_dir /= np.linalg.norm(u_dir)
    dots = img @ u_dir
    dots = (dots - dots.mean()) / max(dots.std(), 1e-12)
    embed_effect = spec.embed_weight * dots

    timestamps = 1500000000 + np.cumsum(rng.integers(30, 600, size=spec.n_posts))
    days = rng.integers(1, 201, size=spec.n_posts).astype(float)

    noise = rng.normal(0.0, spec.noise, size=spec.n_posts)
    planted = np.empty(spec.n_posts)
    for i in range(spec.n_posts):
        base = (BASE_POPULARITY + user_effect[post_user[i]] + b3[post_leaf[i]]
                + embed_effect[i] + noise[i])
        if i > 0 and spec.temporal_weight != 0.0:
            lo = max(0, i - spec.temporal_window)
            base += spec.temporal_weight * (planted[lo:i].mean() - BASE_POPULARITY)
        planted[i] = base

    posts = []
    for i in range(spec.n_posts):
        u = post_user[i]
        c1, c2, c3 = tree.path_for_leaf(int(post_leaf[i]))
        r = max(1, int(np.round(days[i] * 2.0 ** (planted[i] - 1.0))))
        err = abs(normalize_popularity(r, days[i]) - planted[i])
        if err > math.log2(1.0 + 1.0 / r) + 1e-12:
            raise DataError(
                f"planted score {planted[i]:.3f} not recoverable from r={r}, d={days[i]}")
        posts.append(PostRecord(
            post_id=f"p{i:07d}",
            uid=f"u{u:05d}",
            postdate=int(timestamps[i]),
            cat1=c1, cat2=c2, cat3=c3,
            ispublic=1.0,
            ispro=float(ispro[u]),
            latitude=float(np.round(rng.uniform(-90, 90), 4)),
            longitude=float(np.round(rng.uniform(-180, 180), 4)),
            geoaccuracy=float(rng.integers(1, 17)),
            followers=float(user_fields["followers"][u]),
            following=float(user_fields["following"][u]),
            views=float(user_fields["views"][u]),
            tags=float(user_fields["tags"][u]),
            faves=float(user_fields["faves"][u]),
            ingroups=float(user_fields["ingroups"][u]),
            r=r,
            d=float(days[i]),
            img_row=i,
            txt_row=i,
        ))
    return SynthResult(posts, tree, img.astype(np.float32),
                       txt.astype(np.float32), planted)
