"""Frozen encoders mapping images and captions into one embedding space.

The registry keeps the encoder pluggable: a pretrained contrastive
vision-language backbone can be registered under its model identifier when
its weights are available locally. The built-in ``color-proj`` encoder is
fully deterministic and self-contained: it embeds images by their color
statistics and captions by the color words they contain, both through the
same frozen random projection, so an image and a caption that describe the
same scene land close together in embedding space.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np
from PIL import Image

from .errors import EncoderError

# anchor colors shared by the image and text towers
COLOR_ANCHORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "brown": (0.6, 0.3, 0.1),
}

_WORD = re.compile(r"[a-z]+")


class ColorProjectionEncoder:
    """Deterministic two-tower encoder over a shared color-anchor space.

    Both towers produce a soft assignment over the color anchors and pass
    it through one frozen Gaussian projection, so cosine similarity in the
    output space reflects agreement about the colors in the scene.
    """

    def __init__(self, dim: int, name: str = "color-proj-v1"):
        if dim < 1:
            raise EncoderError(f"encoder dim must be positive, got {dim}")
        self.dim = dim
        self.name = name
        seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        n_anchor = len(COLOR_ANCHORS)
        self._anchors = np.array(list(COLOR_ANCHORS.values()))
        self._proj = rng.normal(size=(n_anchor, dim)) / np.sqrt(n_anchor)
        self._words = {w: i for i, w in enumerate(COLOR_ANCHORS)}

    def _project(self, weights: np.ndarray) -> np.ndarray:
        out = weights @ self._proj
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        return np.where(norms > 0, out / np.maximum(norms, 1e-12), out)

    def _image_anchor_weights(self, image: Image.Image) -> np.ndarray:
        small = image.convert("RGB").resize((8, 8), Image.BILINEAR)
        pixels = np.asarray(small, dtype=np.float64).reshape(-1, 3) / 255.0
        # soft assignment of every pixel to its nearest anchors
        d2 = ((pixels[:, None, :] - self._anchors[None]) ** 2).sum(axis=-1)
        assign = np.exp(-d2 / 0.1)
        assign /= assign.sum(axis=-1, keepdims=True)
        return assign.mean(axis=0)

    def _caption_anchor_weights(self, caption: str) -> np.ndarray:
        weights = np.zeros(len(self._words))
        for token in _WORD.findall(caption.lower()):
            idx = self._words.get(token)
            if idx is not None:
                weights[idx] += 1.0
        total = weights.sum()
        return weights / total if total > 0 else weights

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        if not images:
            return np.zeros((0, self.dim), dtype=np.float32)
        weights = np.stack([self._image_anchor_weights(im) for im in images])
        return self._project(weights).astype(np.float32)

    def encode_texts(self, captions: list[str]) -> np.ndarray:
        if not captions:
            return np.zeros((0, self.dim), dtype=np.float32)
        weights = np.stack([self._caption_anchor_weights(c) for c in captions])
        return self._project(weights).astype(np.float32)


_REGISTRY = {"color-proj-v1": ColorProjectionEncoder}


def register_encoder(name: str, factory):
    """Register a factory(dim, name) for an encoder identifier."""
    _REGISTRY[name] = factory


def get_encoder(name: str, dim: int):
    factory = _REGISTRY.get(name)
    if factory is None:
        raise EncoderError(
            f"unknown encoder {name!r}; registered: {sorted(_REGISTRY)}")
    return factory(dim, name)
