"""Slow, independent reference implementations used as test oracles."""

import math

import numpy as np


def direct_conv2d(x, w, b):
    """Naive same-padded stride-1 cross-correlation."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - p, j + dj - p
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[n, c, ii, jj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def stride2_conv_matrix(cin, cout, h, w, kernel):
    """Dense matrix of the stride-2, kernel-2 convolution from (cout, 2h, 2w) to (cin, h, w).

    ``kernel`` has shape (cin, cout, 2, 2): output channel c at (i, j)
    reads input channel o at (2i + p, 2j + q).
    """
    rows = cin * h * w
    cols = cout * 4 * h * w
    m = np.zeros((rows, cols))
    for c in range(cin):
        for i in range(h):
            for j in range(w):
                r = (c * h + i) * w + j
                for o in range(cout):
                    for p in range(2):
                        for q in range(2):
                            col = (o * 2 * h + 2 * i + p) * 2 * w + 2 * j + q
                            m[r, col] += kernel[c, o, p, q]
    return m


def block_max(x):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, h // 2, w // 2))
    for n in range(bsz):
        for k in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[n, k, i, j] = max(x[n, k, 2 * i + a, 2 * j + d] for a in range(2) for d in range(2))
    return out


def brute_region_loss(probs, polygon_maps, land_masks, charts, excluded):
    """Double loop over images and polygon ids with plain Python sums."""
    total = 0.0
    bsz, n, h, w = probs.shape
    for b in range(bsz):
        ids = sorted({int(v) for v in polygon_maps[b].ravel()})
        for pid in ids:
            if pid < 0:
                continue
            label = charts[b][pid]
            if label is excluded:
                continue
            pix = [
                probs[b, :, i, j]
                for i in range(h)
                for j in range(w)
                if polygon_maps[b][i, j] == pid and land_masks[b][i, j] == 0
            ]
            if not pix:
                continue
            loss = 0.0
            for c in range(n):
                mean_c = sum(float(p[c]) for p in pix) / len(pix)
                loss -= float(label[c]) * math.log(min(max(mean_c, 1e-7), 1.0))
            total += loss / n
    return total


def central_diff(f, x, idx, h=1e-5):
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def param_fd_errors(loss_fn, params, coords, h=1e-5):
    """Relative errors of tape gradients against central differences.

    ``loss_fn()`` builds the loss from the current parameter values and must
    record onto the active tape. ``coords`` are (param_index, flat_index) pairs.
    """
    from floeberg import autodiff as ad

    params.zero_grad()
    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(loss, tape)
    errs = []
    for pi, fi in coords:
        p = params.tensors[pi]
        a = float(p.grad.ravel()[fi])
        orig = p.data.ravel()[fi]
        p.data.ravel()[fi] = orig + h
        up = loss_fn().item()
        p.data.ravel()[fi] = orig - h
        down = loss_fn().item()
        p.data.ravel()[fi] = orig
        num = (up - down) / (2 * h)
        errs.append(abs(a - num) / max(abs(a), abs(num), 1e-8))
    return errs
