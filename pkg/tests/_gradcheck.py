"""Central finite-difference oracle for network parameter gradients."""
import numpy as np

from speckle_lab.nn import backward, forward


def rel_err(a, b, floor=1e-3):
    # tensors whose true gradient vanishes (e.g. a bias feeding batch norm) are compared absolutely
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / scale


def projected_loss(state, spec, x, proj, mode):
    out, _ = forward(state, spec, x, mode)
    return float(np.sum(out * proj))


def check_network_gradients(state, spec, x, mode="train", samples=6, eps=1e-6, seed=0):
    """Compare analytic gradients of ``sum(out * R)`` with central differences.

    Returns ``{(layer, param): relative error}`` over ``samples`` random entries
    of every trainable tensor (all entries for tensors smaller than that).
    """
    rng = np.random.default_rng(seed)
    out, cache = forward(state, spec, x, mode)
    proj = rng.normal(size=out.shape)
    grads = backward(state, spec, cache, proj)
    errors = {}
    for name, layer_grads in grads.items():
        for key, g in layer_grads.items():
            p = state.params[name][key]
            flat = p.reshape(-1)
            idx = np.arange(flat.size) if flat.size <= samples else rng.choice(flat.size, samples, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                lp = projected_loss(state, spec, x, proj, mode)
                flat[i] = orig - eps
                lm = projected_loss(state, spec, x, proj, mode)
                flat[i] = orig
                num[j] = (lp - lm) / (2 * eps)
            errors[(name, key)] = rel_err(g.reshape(-1)[idx], num)
    return errors, grads
