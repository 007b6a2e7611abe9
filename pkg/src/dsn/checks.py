"""Per-layer gradient checks against central finite differences.

Runs every layer and the composed model on a small configuration with
dropout disabled. Used by the grad-check CLI subcommand and the
acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, grad_check
from .data import WindowBatch
from .model import (ModelConfig, USER_STATIC_DIM, fuse_ffn, glu_gate, grn,
                    hce_forward, init_params, local_temporal, model_forward,
                    target_attention, vl_adapt)


def toy_config(**overrides) -> ModelConfig:
    base = dict(d_origin=6, d_hidden=8, heads=2, window_len=4,
                level_cardinalities=(3, 4, 5), uid_embed_dim=4, uid_vocab=3,
                dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


PROBE_SCALE = 0.01  # keeps |f| small so FD roundoff stays below tolerance


def _scaled_sum(t, w):
    return ad.scale(ad.reduce_sum(ad.mul(t, ad.constant(w))), PROBE_SCALE)


def toy_batch(cfg: ModelConfig, n_windows: int = 2, seed: int = 5) -> WindowBatch:
    rng = np.random.default_rng(seed)
    B, l = n_windows, cfg.window_len
    mask = np.ones((B, l), dtype=bool)
    if l > 1:
        mask[0, 0] = False  # one padded position to exercise masking
    cats = np.stack([rng.integers(0, n, size=(B, l))
                     for n in cfg.level_cardinalities], axis=-1)
    return WindowBatch(
        image=rng.normal(size=(B, l, cfg.d_origin)) * mask[..., None],
        text=rng.normal(size=(B, l, cfg.d_origin)) * mask[..., None],
        category_ids=cats,
        pad_mask=mask,
        uid_idx=rng.integers(0, cfg.uid_vocab, size=B),
        user_static=rng.normal(size=(B, USER_STATIC_DIM)),
        labels=rng.normal(size=B),
        post_ids=[f"t{i}" for i in range(B)],
    )


def layer_grad_reports(seed: int = 0, tol: float = 1e-4,
                       eps: float = 1e-5) -> dict[str, GradCheckReport]:
    """Gradient check every DSN layer plus the full model."""
    cfg = toy_config()
    rng = np.random.default_rng(seed)
    d = cfg.d_hidden
    params = init_params(cfg, seed=seed)
    reports: dict[str, GradCheckReport] = {}

    def check(name, f, tensors):
        reports[name] = grad_check(f, tensors, eps=eps, tol=tol)

    # glu_gate (two-input variant)
    x = ad.parameter(rng.normal(size=(3, d)), "x")
    y = ad.parameter(rng.normal(size=(3, d)), "y")
    gate_p = [params[f"hce.gate1.{k}"] for k in ("w1", "b1", "w2", "b2", "w3")]
    w = rng.normal(size=(3, d))
    check("glu_gate",
          lambda: _scaled_sum(glu_gate(x, y, *gate_p), w),
          [x, y] + gate_p)

    # vl_adapt
    fo = ad.parameter(rng.normal(size=(cfg.window_len, cfg.d_origin)), "f_origin")
    ap = [params[f"adapter_v.{k}"] for k in
          ("conv3.kernel", "conv3.bias", "conv1.kernel", "conv1.bias")]
    w = rng.normal(size=(cfg.window_len, d))
    check("vl_adapt",
          lambda: _scaled_sum(vl_adapt(fo, 0.3, *ap), w),
          [fo] + ap)

    # hce_forward
    ids = np.stack([rng.integers(0, n, size=(2, cfg.window_len))
                    for n in cfg.level_cardinalities], axis=-1)
    hce_names = (["hce.init"] + [f"cat.table{k}" for k in (1, 2, 3)]
                 + [f"hce.gate{k}.{p}" for k in (1, 2, 3)
                    for p in ("w1", "b1", "w2", "w3", "b2")]
                 + [f"hce.fuse{k}.w" for k in (1, 2, 3)])
    hce_p = [params[n] for n in hce_names]
    w = rng.normal(size=(2, cfg.window_len, d))
    check("hce_forward",
          lambda: _scaled_sum(hce_forward(ids, params, cfg), w),
          hce_p)

    # grn
    x = ad.parameter(rng.normal(size=(3, d)), "x")
    grn_p = [params[n] for n in params if n.startswith("grn.")]
    w = rng.normal(size=(3, d))
    check("grn",
          lambda: _scaled_sum(grn(x, params), w),
          [x] + grn_p)

    # local_temporal
    m = cfg.n_modalities
    f = ad.parameter(rng.normal(size=(2, cfg.window_len, m * d)), "f")
    mask = np.ones((2, cfg.window_len), dtype=bool)
    mask[0, 0] = False
    lt_p = [params[n] for n in params
            if n.startswith(("lstm.", "temporal.", "grn."))]
    # only non-padded positions are read downstream in the real model;
    # padded slices are exactly zero and sit on the layer-norm eps guard
    w = rng.normal(size=(2, cfg.window_len, d)) * mask[..., None]
    check("local_temporal",
          lambda: _scaled_sum(local_temporal(f, mask, params, cfg), w),
          [f] + lt_p)

    # target_attention
    phi = ad.parameter(rng.normal(size=(2, cfg.window_len, d)), "phi")
    at_p = [params[n] for n in ("attn.wq", "attn.wk", "attn.wv")]
    w = rng.normal(size=(2, d))
    check("target_attention",
          lambda: _scaled_sum(target_attention(phi, mask, params, cfg)[0], w),
          [phi] + at_p)

    # fuse_ffn
    h = ad.parameter(rng.normal(size=(2, d)), "h")
    pt = ad.parameter(rng.normal(size=(2, d)), "phi_target")
    ffn_p = [params[n] for n in ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]
    w = rng.normal(size=(2, d))
    check("fuse_ffn",
          lambda: _scaled_sum(fuse_ffn(h, pt, params), w),
          [h, pt] + ffn_p)

    # full model through the loss
    batch = toy_batch(cfg)
    target = rng.normal(size=2)

    def full():
        out = model_forward(batch, params, cfg, mode="eval")
        diff = ad.sub(out.predictions, ad.constant(target))
        return ad.scale(ad.reduce_mean(ad.mul(diff, diff)), PROBE_SCALE)

    reports["model_forward"] = grad_check(full, list(params.values()),
                                          eps=eps, tol=tol)
    return reports
