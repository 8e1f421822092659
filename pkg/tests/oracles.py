"""Slow, independent numpy references used as test oracles (float64, loops where clear)."""

from __future__ import annotations

import numpy as np


def window_indices(t_a: int, t_v: int) -> np.ndarray:
    c = t_a // t_v
    s = 3 * c
    out = np.zeros((t_v, s), dtype=np.int64)
    for i in range(t_v):
        m = int(np.floor(c / 2 + c * i))
        for k in range(s):
            out[i, k] = min(max(m - s // 2 + k, 0), t_a - 1)
    return out


def frame_of_audio(t_a: int, t_v: int) -> np.ndarray:
    return np.array([min((j * t_v) // t_a, t_v - 1) for j in range(t_a)], dtype=np.int64)


def rotate(x: np.ndarray, pos: float, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs of a 1-D vector by ``pos * base**(-2k/d)``."""
    d = x.shape[-1]
    y = np.array(x, dtype=np.float64)
    for k in range(d // 2):
        th = pos * base ** (-2.0 * k / d)
        a, b = x[2 * k], x[2 * k + 1]
        y[2 * k] = a * np.cos(th) - b * np.sin(th)
        y[2 * k + 1] = a * np.sin(th) + b * np.cos(th)
    return y


def rotate_heads(x: np.ndarray, pos: float, heads: int) -> np.ndarray:
    dh = x.shape[-1] // heads
    return np.concatenate([rotate(x[h * dh : (h + 1) * dh], pos) for h in range(heads)])


def layer_norm(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def masked_attention(q, keys, vals, counts, heads, q_tail=None, n_tail=0):
    """One query against all keys; ``counts`` is the multiplicity of each key (0 = masked).

    The last ``n_tail`` keys are scored against ``q_tail`` instead of ``q``.
    """
    d = q.shape[-1]
    dh = d // heads
    out = np.zeros(vals.shape[-1])
    probs_mean = np.zeros(len(keys))
    n_head = len(keys) - n_tail
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = np.concatenate([keys[:n_head, sl] @ q[sl], keys[n_head:, sl] @ (q if q_tail is None else q_tail)[sl]]) / np.sqrt(dh)
        w = np.where(counts > 0, counts * np.exp(logits - logits[counts > 0].max()), 0.0)
        w = w / w.sum()
        probs_mean += w / heads
        out[sl] = w @ vals[:, sl]
    return out, probs_mean


def dense_cca(x_a, x_v, pa2v, pv2a, heads_a, heads_v, t_a, t_v, hw, use, full_span=False):
    """Dense masked cross-modal attention for one block.

    ``x_a`` is ``(b, t_a, d_a)``, ``x_v`` is ``(b, t_v*hw, d_v)``; ``p*`` are dicts
    of float64 arrays; ``use`` maps direction -> (latent, lct). Returns deltas
    (None when the direction is off).
    """
    b = x_a.shape[0] if x_a is not None else x_v.shape[0]
    wins = window_indices(t_a, t_v) if not full_span else np.tile(np.arange(t_a), (t_v, 1))
    foa = frame_of_audio(t_a, t_v)
    pos_a = np.arange(t_a) * t_v / t_a
    res = {}
    for direction, xq, xkv, p, heads, n_q in (
        ("a2v", x_v, x_a, pa2v, heads_v, t_v * hw),
        ("v2a", x_a, x_v, pv2a, heads_a, t_a),
    ):
        lat, lct_on = use.get(direction, (False, False))
        lct = p.get("lct") if lct_on else None
        if xq is None or (not lat and lct is None):
            res[direction] = None
            continue
        out = np.zeros(xq.shape[:2] + (p["wo"].shape[0],))
        for bi in range(b):
            hq = layer_norm(xq[bi], p["norm_q_w"], p["norm_q_b"]) @ p["wq"]
            keys, vals, n_k = [], [], 0
            if lat:
                hk = layer_norm(xkv[bi], p["norm_kv_w"], p["norm_kv_b"])
                k = hk @ p["wk"]
                v = hk @ p["wv"]
                n_k = len(k)
                kpos = np.repeat(np.arange(t_v), hw) if direction == "v2a" else pos_a
                keys.append(np.stack([rotate_heads(k[j], kpos[j], heads) for j in range(n_k)]))
                vals.append(v)
            if lct is not None:
                keys.append(lct @ p["wk_lct"])
                vals.append(lct @ p["wv_lct"])
            K = np.concatenate(keys)
            V = np.concatenate(vals)
            for qi in range(n_q):
                counts = np.zeros(len(K))
                if lat:
                    if direction == "a2v":
                        f = qi // hw
                        qpos = f
                        for j in wins[f]:
                            counts[j] += 1
                    else:
                        qpos = pos_a[qi]
                        if full_span:
                            counts[:n_k] = 1
                        else:
                            f = foa[qi]
                            counts[f * hw : (f + 1) * hw] = 1
                else:
                    qpos = (qi // hw) if direction == "a2v" else pos_a[qi]
                counts[n_k:] = 1
                qv = rotate_heads(hq[qi], qpos, heads)
                n_lct = len(K) - n_k
                o, _ = masked_attention(qv, K, V, counts, heads, q_tail=hq[qi], n_tail=n_lct)
                out[bi, qi] = o @ p["wo"]
        res[direction] = out
    return res["v2a"], res["a2v"]
