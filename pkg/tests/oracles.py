"""Independent brute-force oracles used to cross-check the vectorised code."""

import numpy as np


def conv_bruteforce(x, w, b, stride=1, pad=0):
    """Nested-loop convolution of one ``(C, H, W)`` image."""
    c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((f, oh, ow))
    for o in range(f):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for ch in range(c):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, ch, u, v] * xp[ch, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def maxpool_bruteforce(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(x[ch, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
    return out


def dense_bruteforce(x, w, b):
    return np.array([sum(w[r, k] * x[k] for k in range(len(x))) + b[r] for r in range(len(b))])


def mean_std_two_pass(values):
    flat = [float(v) for v in np.ravel(values)]
    mean = sum(flat) / len(flat)
    var = sum((v - mean) ** 2 for v in flat) / len(flat)
    return mean, var ** 0.5


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_param_gradients(model, x, target, loss_fn, n_per_layer=20, step=1e-3, seed=0,
                          dropout_seed=None):
    """Compare analytic gradients with central differences.

    ``loss_fn(output, target) -> (value, grad)``. Dropout masks are replayed by
    reseeding the generator for every forward pass. Returns the worst
    relative error over the sampled coordinates.
    """
    def run():
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        out = model.forward(x, training=dropout_seed is not None, rng=rng)
        return out

    out = run()
    _, g = loss_fn(out, target)
    model.backward(g)
    analytic = {id(l): (l.grad_weights.copy(), l.grad_bias.copy()) for l in model.weight_layers()}
    pick = np.random.default_rng(seed)
    worst = 0.0
    for layer in model.weight_layers():
        if layer.frozen:
            continue
        for which, arr in (("w", layer.weights), ("b", layer.bias)):
            grad = analytic[id(layer)][0 if which == "w" else 1]
            count = n_per_layer if which == "w" else min(n_per_layer, arr.size)
            flat_idx = pick.choice(arr.size, size=min(count, arr.size), replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + step
                lp = loss_fn(run(), target)[0]
                arr[idx] = orig - step
                lm = loss_fn(run(), target)[0]
                arr[idx] = orig
                numeric = (lp - lm) / (2 * step)
                worst = max(worst, rel_error(grad[idx], numeric))
    model.clear_cache()
    return worst
