"""Central finite-difference checks for double-precision graphs."""
import numpy as np

from forgekey.nncore import Tensor, backward


def numeric_grad(f, arrays, index, h=1e-6, coords=None):
    """d f / d arrays[index] by central differences at ``coords`` (flat indices)."""
    base = arrays[index]
    flat = base.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        up = f(*[Tensor(a) for a in arrays]).item()
        flat[c] = old - h
        down = f(*[Tensor(a) for a in arrays]).item()
        flat[c] = old
        out[c] = (up - down) / (2 * h)
    return out.reshape(base.shape)


def analytic_grads(f, arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = f(*leaves)
    backward(loss)
    return [leaf.grad for leaf in leaves]


def relative_error(a, n, floor=1e-7):
    """Norm-wise relative error; tiny gradients on both sides compare absolutely."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    diff = np.linalg.norm(a - n)
    return diff if scale < floor else diff / scale


def check(f, arrays, rng=None, max_coords=40, h=1e-6):
    """Worst relative error over all inputs (sampled coordinates for big ones)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = analytic_grads(f, arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        if a.size <= max_coords:
            coords = None
        else:
            coords = (rng or np.random.default_rng(0)).choice(a.size, max_coords, replace=False)
        num = numeric_grad(f, arrays, i, h, coords)
        ana = grads[i]
        if coords is not None:
            num = num.reshape(-1)[coords]
            ana = ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return worst
