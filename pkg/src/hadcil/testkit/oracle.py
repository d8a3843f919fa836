"""Brute-force reference computations for the test suite.

Deliberately written with plain Python loops over float64 numpy arrays and
without importing anything from the rest of the package.
"""

from __future__ import annotations

import math

import numpy as np


def fd_gradient(loss_fn, params, step: float = 1e-3, indices=None) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(flat_params) -> float``.

    Only coordinates in ``indices`` are probed when given; the rest of the
    returned vector is left at zero.
    """
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.zeros_like(p)
    coords = range(p.size) if indices is None else indices
    for i in coords:
        orig = p[i]
        p[i] = orig + step
        up = float(loss_fn(p.copy()))
        p[i] = orig - step
        down = float(loss_fn(p.copy()))
        p[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def softmax_rows(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(logits)
    for r in range(logits.shape[0]):
        top = max(logits[r])
        exps = [math.exp(v - top) for v in logits[r]]
        total = sum(exps)
        for c in range(logits.shape[1]):
            out[r, c] = exps[c] / total
    return out


def softmax_kl_oracle(rows_a, rows_b) -> float:
    """Mean over rows of KL(a || b); rows are normalised to sum one first."""
    rows_a = np.atleast_2d(np.asarray(rows_a, dtype=np.float64))
    rows_b = np.atleast_2d(np.asarray(rows_b, dtype=np.float64))
    total = 0.0
    for r in range(rows_a.shape[0]):
        sa = sum(rows_a[r])
        sb = sum(rows_b[r])
        kl = 0.0
        for c in range(rows_a.shape[1]):
            pa = rows_a[r, c] / sa
            pb = rows_b[r, c] / sb
            if pa > 0:
                kl += pa * math.log(pa / pb)
        total += kl
    return total / rows_a.shape[0]


def similarity_oracle(augmented, reference) -> np.ndarray:
    """Row softmax of explicit dot products between two row sets."""
    augmented = np.asarray(augmented, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    logits = np.zeros((augmented.shape[0], reference.shape[0]))
    for i in range(augmented.shape[0]):
        for j in range(reference.shape[0]):
            logits[i, j] = sum(augmented[i, d] * reference[j, d] for d in range(augmented.shape[1]))
    return softmax_rows(logits)


def _linear(x, weight, bias):
    out = np.zeros(weight.shape[0])
    for i in range(weight.shape[0]):
        acc = bias[i]
        for j in range(weight.shape[1]):
            acc += weight[i, j] * x[j]
        out[i] = acc
    return out


def _layer_norm(x, gain, shift, eps=1e-5):
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    return np.array([(x[i] - mean) / math.sqrt(var + eps) * gain[i] + shift[i] for i in range(n)])


def _attention(queries, context, p, prefix, heads):
    d = queries.shape[1]
    dh = d // heads
    q = [_linear(x, p[prefix + "q.weight"], p[prefix + "q.bias"]) for x in queries]
    k = [_linear(x, p[prefix + "k.weight"], p[prefix + "k.bias"]) for x in context]
    v = [_linear(x, p[prefix + "v.weight"], p[prefix + "v.bias"]) for x in context]
    out = []
    for i in range(len(queries)):
        mixed = np.zeros(d)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = [float(np.dot(q[i][sl], k[j][sl])) / math.sqrt(dh) for j in range(len(context))]
            top = max(scores)
            w = [math.exp(s - top) for s in scores]
            z = sum(w)
            for j in range(len(context)):
                mixed[sl] += (w[j] / z) * v[j][sl]
        out.append(_linear(mixed, p[prefix + "out.weight"], p[prefix + "out.bias"]))
    return np.array(out)


def _get(cfg, key):
    return cfg[key] if isinstance(cfg, dict) else getattr(cfg, key)


def tiny_fusion_oracle(cfg, params: dict, audio, visual):
    """Snippet and video features ``(h_a, h_v, H_a, H_v, H)`` for one sample."""
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    heads = _get(cfg, "num_heads")
    audio = np.asarray(audio, dtype=np.float64)
    visual = np.asarray(visual, dtype=np.float64)
    a = np.array([_linear(x, p["fusion.proj_a.weight"], p["fusion.proj_a.bias"]) for x in audio])
    v = np.array([_linear(x, p["fusion.proj_v.weight"], p["fusion.proj_v.bias"]) for x in visual])
    if _get(cfg, "positional"):
        a = a + p["fusion.pos_a"]
        v = v + p["fusion.pos_v"]
    na = np.array([_layer_norm(x, p["fusion.norm_self_a.weight"], p["fusion.norm_self_a.bias"])
                   for x in a])
    nv = np.array([_layer_norm(x, p["fusion.norm_self_v.weight"], p["fusion.norm_self_v.bias"])
                   for x in v])
    a = a + _attention(na, na, p, "fusion.self_a.", heads)
    v = v + _attention(nv, nv, p, "fusion.self_v.", heads)
    ca = np.array([_layer_norm(x, p["fusion.norm_cross_a.weight"], p["fusion.norm_cross_a.bias"])
                   for x in a])
    cv = np.array([_layer_norm(x, p["fusion.norm_cross_v.weight"], p["fusion.norm_cross_v.bias"])
                   for x in v])
    a2 = a + _attention(ca, cv, p, "fusion.cross_a.", heads)
    v2 = v + _attention(cv, ca, p, "fusion.cross_v.", heads)
    ha = sum(a2) / len(a2)
    hv = sum(v2) / len(v2)
    return a2, v2, ha, hv, ha + hv


def tiny_classify_oracle(cfg, params: dict, video) -> np.ndarray:
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    w = p["classifier.weight"]
    if _get(cfg, "head") == "linear":
        return np.array([sum(w[c, d] * video[d] for d in range(len(video))) + p["classifier.bias"][c]
                         for c in range(w.shape[0])])
    scale = math.exp(float(p["classifier.log_scale"]))
    xn = max(math.sqrt(sum(x * x for x in video)), 1e-8)
    out = []
    for c in range(w.shape[0]):
        wn = max(math.sqrt(sum(x * x for x in w[c])), 1e-8)
        out.append(scale * sum(video[d] * w[c, d] for d in range(len(video))) / (xn * wn))
    return np.array(out)


def tiny_forward_oracle(cfg, params: dict, audio, visual) -> np.ndarray:
    video = tiny_fusion_oracle(cfg, params, audio, visual)[-1]
    return tiny_classify_oracle(cfg, params, video)


def cross_entropy_oracle(logits, labels) -> float:
    probs = softmax_rows(logits)
    return sum(-math.log(probs[i, labels[i]]) for i in range(len(labels))) / len(labels)
