"""DSN architecture: adapters, hierarchical category embedding, temporal
fusion, user encoder and prediction head, plus parameter init and the
checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ShapeError

CATEGORY_ENCODERS = ("hce", "level1", "level2", "level3", "concat", "sum")

# one-hot month(12) + day(31) + hour(24) + 11 z-scored numeric fields
USER_STATIC_DIM = 12 + 31 + 24 + 11


@dataclass
class ModelConfig:
    d_origin: int
    d_hidden: int = 256
    heads: int = 4
    window_len: int = 8
    hce_levels: int = 3
    level_cardinalities: tuple = (11, 77, 668)
    alpha: float = 0.2
    beta: float = 0.6
    dropout: float = 0.25
    uid_embed_dim: int = 32
    uid_vocab: int = 1  # training uids + 1 reserved OOV row; set from fitted stats
    use_image: bool = True
    use_text: bool = True
    use_category: bool = True
    use_local_lstm: bool = True
    use_long_attention: bool = True
    category_encoder: str = "hce"

    def __post_init__(self):
        self.level_cardinalities = tuple(int(n) for n in self.level_cardinalities)
        self.validate()

    def validate(self):
        if self.d_hidden % self.heads != 0:
            raise ConfigError(f"d_hidden={self.d_hidden} not divisible by heads={self.heads}")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError(f"alpha/beta must lie in [0,1], got {self.alpha}, {self.beta}")
        if self.window_len < 1:
            raise ConfigError(f"window_len must be >= 1, got {self.window_len}")
        if self.hce_levels != 3 or len(self.level_cardinalities) != 3:
            raise ConfigError("exactly three category levels are supported")
        if self.category_encoder not in CATEGORY_ENCODERS:
            raise ConfigError(f"unknown category_encoder {self.category_encoder!r}")

    @property
    def n_modalities(self) -> int:
        return int(self.use_image) + int(self.use_text) + int(self.use_category)

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Build every learnable tensor, keyed by layer. Shapes are fixed by the
    configuration; components disabled by switches get no parameters."""
    rng = np.random.default_rng(seed)
    d = cfg.d_hidden
    p: dict[str, np.ndarray] = {}

    def w(name, fan_in, shape):
        p[name] = _uniform(rng, fan_in, shape)

    def zeros(name, shape):
        p[name] = np.zeros(shape)

    if cfg.use_image:
        w("adapter_v.conv3.kernel", 3 * cfg.d_origin, (3, cfg.d_origin, d))
        zeros("adapter_v.conv3.bias", (d,))
        w("adapter_v.conv1.kernel", cfg.d_origin, (1, cfg.d_origin, d))
        zeros("adapter_v.conv1.bias", (d,))
    if cfg.use_text:
        w("adapter_t.conv3.kernel", 3 * cfg.d_origin, (3, cfg.d_origin, d))
        zeros("adapter_t.conv3.bias", (d,))
        w("adapter_t.conv1.kernel", cfg.d_origin, (1, cfg.d_origin, d))
        zeros("adapter_t.conv1.bias", (d,))
    if cfg.use_category:
        enc = cfg.category_encoder
        levels = {"level1": [0], "level2": [1], "level3": [2]}.get(enc, [0, 1, 2])
        for k in levels:
            w(f"cat.table{k + 1}", d, (cfg.level_cardinalities[k], d))
        if enc == "hce":
            w("hce.init", d, (d,))
            for k in (1, 2, 3):
                w(f"hce.gate{k}.w1", d, (d, d))
                zeros(f"hce.gate{k}.b1", (d,))
                w(f"hce.gate{k}.w2", d, (d, d))
                w(f"hce.gate{k}.w3", d, (d, d))
                zeros(f"hce.gate{k}.b2", (d,))
                w(f"hce.fuse{k}.w", 2 * d, (2 * d, d))
        elif enc == "concat":
            w("cat.concat.w", 3 * d, (3 * d, d))

    m = cfg.n_modalities
    if m > 0:
        din = m * d
        if cfg.use_local_lstm:
            w("lstm.wx", din, (din, 4 * d))
            w("lstm.wh", d, (d, 4 * d))
            zeros("lstm.b", (4 * d,))
            w("temporal.gate.w1", d, (d, d))
            zeros("temporal.gate.b1", (d,))
            w("temporal.gate.w2", d, (d, d))
            zeros("temporal.gate.b2", (d,))
            p["temporal.ln.gain"] = np.ones(d)
            zeros("temporal.ln.bias", (d,))
            w("grn.w2", d, (d, d))
            zeros("grn.b2", (d,))
            w("grn.w1", d, (d, d))
            zeros("grn.b1", (d,))
            w("grn.gate.w1", d, (d, d))
            zeros("grn.gate.b1", (d,))
            w("grn.gate.w2", d, (d, d))
            zeros("grn.gate.b2", (d,))
            p["grn.ln.gain"] = np.ones(d)
            zeros("grn.ln.bias", (d,))
        w("temporal.w", din, (din, d))
        if cfg.use_long_attention and cfg.window_len > 1:
            # per-head d x (d/heads) projections stored side by side
            w("attn.wq", d, (d, d))
            w("attn.wk", d, (d, d))
            w("attn.wv", d, (d, d))
        w("ffn.w1", 2 * d, (2 * d, d))
        zeros("ffn.b1", (d,))
        w("ffn.w2", d, (d, d))
        zeros("ffn.b2", (d,))

    w("user.uid_table", cfg.uid_embed_dim, (cfg.uid_vocab, cfg.uid_embed_dim))
    w("user.w", cfg.uid_embed_dim + USER_STATIC_DIM,
      (cfg.uid_embed_dim + USER_STATIC_DIM, d))
    zeros("user.b", (d,))
    w("head.w1", 2 * d, (2 * d, d))
    zeros("head.b1", (d,))
    w("head.w2", d, (d, 1))
    zeros("head.b2", (1,))

    return {name: ad.parameter(arr, name) for name, arr in p.items()}


# --- layers ----------------------------------------------------------------

def glu_gate(x: Tensor, y: Optional[Tensor], w1: Tensor, b1: Tensor,
             w2: Tensor, b2: Tensor, w3: Optional[Tensor] = None) -> Tensor:
    """(x W1 + b1) * sigmoid(x W2 + y W3 + b2); the single-input variant
    drops the y W3 term."""
    if (y is None) != (w3 is None):
        raise ShapeError("glu_gate: y and w3 must be given together")
    lin = ad.add(ad.matmul(x, w1), b1)
    pre = ad.add(ad.matmul(x, w2), b2)
    if y is not None:
        if y.data.shape != x.data.shape:
            raise ShapeError(f"glu_gate inputs disagree: {x.data.shape} vs {y.data.shape}")
        pre = ad.add(pre, ad.matmul(y, w3))
    return ad.mul(lin, ad.sigmoid(pre))


def vl_adapt(f_origin: Tensor, ratio: float, k3: Tensor, b3: Tensor,
             k1: Tensor, b1: Tensor) -> Tensor:
    """(1-ratio) * ReLU(Conv3(f)) + ratio * Conv1(f)."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"residual ratio must lie in [0,1], got {ratio}")
    adapted = ad.relu(ad.conv1d_same(f_origin, k3, b3))
    preserved = ad.conv1d_same(f_origin, k1, b1)
    return ad.add(ad.scale(adapted, 1.0 - ratio), ad.scale(preserved, ratio))


def hce_forward(category_ids: np.ndarray, params: dict[str, Tensor],
                cfg: ModelConfig) -> Tensor:
    """Stacked gated layers propagating category information coarse-to-fine.

    category_ids: int array [..., 3]. A learned level-0 embedding seeds the
    first gate. Returns the level-3 output, shape [..., d_hidden].
    """
    lead = category_ids.shape[:-1]
    prev = ad.reshape(params["hce.init"], (1,) * len(lead) + (cfg.d_hidden,))
    prev = ad.add(prev, ad.constant(np.zeros(lead + (cfg.d_hidden,))))  # broadcast
    out = prev
    for k in (1, 2, 3):
        f_k = ad.embedding_lookup(params[f"cat.table{k}"], category_ids[..., k - 1])
        gated = glu_gate(out, f_k,
                         params[f"hce.gate{k}.w1"], params[f"hce.gate{k}.b1"],
                         params[f"hce.gate{k}.w2"], params[f"hce.gate{k}.b2"],
                         params[f"hce.gate{k}.w3"])
        out = ad.matmul(ad.concat([f_k, gated], axis=-1), params[f"hce.fuse{k}.w"])
    return out


def category_encode(category_ids: np.ndarray, params: dict[str, Tensor],
                    cfg: ModelConfig) -> Tensor:
    """Dispatch between HCE and the drop-in alternative encoders."""
    enc = cfg.category_encoder
    if enc == "hce":
        return hce_forward(category_ids, params, cfg)
    if enc in ("level1", "level2", "level3"):
        k = int(enc[-1])
        return ad.embedding_lookup(params[f"cat.table{k}"], category_ids[..., k - 1])
    embs = [ad.embedding_lookup(params[f"cat.table{k}"], category_ids[..., k - 1])
            for k in (1, 2, 3)]
    if enc == "sum":
        return ad.add(ad.add(embs[0], embs[1]), embs[2])
    return ad.matmul(ad.concat(embs, axis=-1), params["cat.concat.w"])  # concat


def grn(x: Tensor, params: dict[str, Tensor], prefix: str = "grn") -> Tensor:
    """LayerNorm(x + Gate(W1 ELU(W2 x + b2) + b1)); with the gate saturated
    closed this collapses to LayerNorm(x)."""
    eta2 = ad.elu(ad.add(ad.matmul(x, params[f"{prefix}.w2"]), params[f"{prefix}.b2"]))
    eta1 = ad.add(ad.matmul(eta2, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    gated = glu_gate(eta1, None,
                     params[f"{prefix}.gate.w1"], params[f"{prefix}.gate.b1"],
                     params[f"{prefix}.gate.w2"], params[f"{prefix}.gate.b2"])
    return ad.layer_norm(ad.add(x, gated),
                         params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])


def local_temporal(f: Tensor, pad_mask: np.ndarray, params: dict[str, Tensor],
                   cfg: ModelConfig) -> Tensor:
    """LSTM over window positions with a gated residual downscale, then a
    gated residual network. With the LSTM switched off the features are
    linearly downscaled only.

    f: [B, l, m*d_hidden]; pad_mask: bool [B, l], True = real post.
    """
    keep = ad.constant(pad_mask[..., None].astype(float))
    f = ad.mul(f, keep)  # padding positions enter the LSTM as zeros
    down = ad.matmul(f, params["temporal.w"])
    if not cfg.use_local_lstm:
        return down
    o = ad.lstm_forward(f, params["lstm.wx"], params["lstm.wh"], params["lstm.b"])
    gated = glu_gate(o, None,
                     params["temporal.gate.w1"], params["temporal.gate.b1"],
                     params["temporal.gate.w2"], params["temporal.gate.b2"])
    theta = ad.layer_norm(ad.add(gated, down),
                          params["temporal.ln.gain"], params["temporal.ln.bias"])
    return grn(theta, params)


def target_attention(phi: Tensor, pad_mask: np.ndarray, params: dict[str, Tensor],
                     cfg: ModelConfig) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Multi-head dot-product attention of the target post over its window
    neighbors.

    phi: [B, l, d]; pad_mask: bool [B, l]. Returns (h [B, d],
    attention weights [B, heads, l-1], has_neighbors bool [B]).
    Windows without any real neighbor fall back to h = 0.
    """
    B, l, d = phi.data.shape
    nh = cfg.heads
    dh = d // nh
    if l < 2:
        return (ad.constant(np.zeros((B, d))), np.zeros((B, nh, 0)),
                np.zeros(B, dtype=bool))
    target = ad.reshape(ad.slice_axis(phi, 1, l - 1, l), (B, d))
    neigh = ad.slice_axis(phi, 1, 0, l - 1)
    nmask = pad_mask[:, : l - 1]
    has_neighbors = nmask.any(axis=1)
    # rows without neighbors get a fake all-true mask; their output is
    # zeroed afterwards, so no gradient leaks through the fake softmax
    safe_mask = np.where(has_neighbors[:, None], nmask, True)

    q = ad.matmul(target, params["attn.wq"])        # [B, d]
    k = ad.matmul(neigh, params["attn.wk"])         # [B, l-1, d]
    v = ad.matmul(neigh, params["attn.wv"])         # [B, l-1, d]
    q = ad.reshape(q, (B, 1, nh, dh))
    k = ad.reshape(k, (B, l - 1, nh, dh))
    v = ad.reshape(v, (B, l - 1, nh, dh))
    scores = ad.scale(ad.reduce_sum(ad.mul(q, k), axis=-1), 1.0 / np.sqrt(dh))
    scores_t = _transpose12(scores)                 # [B, nh, l-1]
    head_mask = np.broadcast_to(safe_mask[:, None, :], (B, nh, l - 1))
    w = ad.softmax_lastdim(scores_t, head_mask)     # [B, nh, l-1]
    w_for_v = _transpose12(w)                       # [B, l-1, nh]
    h = ad.reduce_sum(ad.mul(ad.reshape(w_for_v, (B, l - 1, nh, 1)), v), axis=1)
    h = ad.reshape(h, (B, d))
    h = ad.mul(h, ad.constant(has_neighbors[:, None].astype(float)))
    attn = np.where(has_neighbors[:, None, None], w.data, 0.0)
    return h, attn, has_neighbors


def _transpose12(x: Tensor) -> Tensor:
    """Swap the last two axes of a 3-D tensor."""
    data = np.swapaxes(x.data, 1, 2)
    return ad._make(data, [(x, lambda g: np.swapaxes(g, 1, 2))])


def fuse_ffn(h: Tensor, phi_target: Tensor, params: dict[str, Tensor]) -> Tensor:
    """ReLU([h || phi_target] W1 + b1) W2 + b2."""
    cat = ad.concat([h, phi_target], axis=-1)
    hidden = ad.relu(ad.add(ad.matmul(cat, params["ffn.w1"]), params["ffn.b1"]))
    return ad.add(ad.matmul(hidden, params["ffn.w2"]), params["ffn.b2"])


@dataclass
class ForwardResult:
    predictions: Tensor            # [B]
    attention: np.ndarray          # [B, heads, l-1]
    has_neighbors: np.ndarray      # bool [B]


def model_forward(batch, params: dict[str, Tensor], cfg: ModelConfig,
                  mode: str = "eval", rng: Optional[np.random.Generator] = None) -> ForwardResult:
    """Full forward pass over a WindowBatch. Dropout is active only in
    train mode (which then requires an rng)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    if train and cfg.dropout > 0 and rng is None:
        raise ConfigError("train mode with dropout needs an rng")
    B, l = batch.pad_mask.shape

    feats = []
    if cfg.use_image:
        fv = vl_adapt(ad.constant(batch.image), cfg.alpha,
                      params["adapter_v.conv3.kernel"], params["adapter_v.conv3.bias"],
                      params["adapter_v.conv1.kernel"], params["adapter_v.conv1.bias"])
        feats.append(fv)
    if cfg.use_text:
        ft = vl_adapt(ad.constant(batch.text), cfg.beta,
                      params["adapter_t.conv3.kernel"], params["adapter_t.conv3.bias"],
                      params["adapter_t.conv1.kernel"], params["adapter_t.conv1.bias"])
        feats.append(ft)
    if cfg.use_category:
        feats.append(category_encode(batch.category_ids, params, cfg))

    nh = cfg.heads
    if feats:
        f = feats[0] if len(feats) == 1 else ad.concat(feats, axis=-1)
        if train and cfg.dropout > 0:
            f = ad.dropout(f, cfg.dropout, rng)
        phi = local_temporal(f, batch.pad_mask, params, cfg)
        phi_target = ad.reshape(ad.slice_axis(phi, 1, l - 1, l), (B, cfg.d_hidden))
        if cfg.use_long_attention and l > 1:
            h, attn, has_neighbors = target_attention(phi, batch.pad_mask, params, cfg)
        else:
            h = ad.constant(np.zeros((B, cfg.d_hidden)))
            attn = np.zeros((B, nh, max(l - 1, 0)))
            has_neighbors = np.zeros(B, dtype=bool)
        h_tilde = fuse_ffn(h, phi_target, params)
        if train and cfg.dropout > 0:
            h_tilde = ad.dropout(h_tilde, cfg.dropout, rng)
    else:
        h_tilde = ad.constant(np.zeros((B, cfg.d_hidden)))
        attn = np.zeros((B, nh, max(l - 1, 0)))
        has_neighbors = np.zeros(B, dtype=bool)

    uid_emb = ad.embedding_lookup(params["user.uid_table"], batch.uid_idx)
    u_raw = ad.concat([uid_emb, ad.constant(batch.user_static)], axis=-1)
    u = ad.add(ad.matmul(u_raw, params["user.w"]), params["user.b"])
    head_in = ad.concat([h_tilde, u], axis=-1)
    hidden = ad.relu(ad.add(ad.matmul(head_in, params["head.w1"]), params["head.b1"]))
    pred = ad.add(ad.matmul(hidden, params["head.w2"]), params["head.b2"])
    pred = ad.reshape(pred, (B,))
    return ForwardResult(pred, attn, has_neighbors)


# --- checkpoint format -----------------------------------------------------

CHECKPOINT_MAGIC = b"DSNP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig):
    """Versioned binary: magic, version, config digest, then per-parameter
    records (name, shape, float64 little-endian payload)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(cfg.digest())
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            for dim in t.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> dict[str, Tensor]:
    """Read a checkpoint; validates the config digest when a config is given."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = blob[8:40]
    if cfg is not None and digest != cfg.digest():
        raise FormatError("checkpoint config digest does not match the given config")
    (n,) = struct.unpack_from("<I", blob, 40)
    off = 44
    params: dict[str, Tensor] = {}
    for _ in range(n):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
        except struct.error as exc:
            raise FormatError(f"truncated checkpoint record at offset {off}") from exc
        size = int(np.prod(shape)) if rank else 1
        end = off + 8 * size
        if end > len(blob):
            raise FormatError(f"truncated checkpoint payload at offset {off}")
        arr = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy()
        off = end
        params[name] = ad.parameter(arr, name)
    return params
