"""Central finite-difference checks shared by the unit and acceptance tests."""
import numpy as np

from dvk import autodiff as ad

STEP = 1e-5


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(loss_fn, arrays, rng, max_coords=24, n_dirs=2, step=STEP):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` maps a dict of Tensors to a scalar Tensor. Per array we compare
    up to ``max_coords`` random coordinates (all of them for small arrays) and
    ``n_dirs`` random directional derivatives; errors are relative to the norm
    of the compared gradient entries.
    """
    tensors = {k: ad.Tensor(np.array(v, float), requires_grad=True) for k, v in arrays.items()}
    with ad.enable_grad():
        loss = loss_fn(tensors)
    names = list(tensors)
    grads = dict(zip(names, ad.grad(loss, [tensors[k] for k in names])))

    def value(name, delta):
        base = tensors[name].data
        shifted = dict(tensors)
        shifted[name] = ad.Tensor(base + delta)
        with ad.no_grad():
            return float(loss_fn(shifted).data)

    worst = 0.0
    for name in names:
        size = tensors[name].data.size
        shape = tensors[name].data.shape
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords,
                                                                          replace=False)
        fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            e = np.zeros(size)
            e[c] = step
            e = e.reshape(shape)
            fd[j] = (value(name, e) - value(name, -e)) / (2 * step)
        worst = max(worst, _rel(grads[name].reshape(-1)[coords], fd))
        for _ in range(n_dirs):
            v = rng.standard_normal(shape)
            v /= np.linalg.norm(v)
            fd_dir = (value(name, step * v) - value(name, -step * v)) / (2 * step)
            worst = max(worst, _rel(np.array([np.sum(grads[name] * v)]), np.array([fd_dir])))
    return worst


def projection(rng, shape):
    """Fixed random weights; ``(out * w).sum()`` keeps every output component in play."""
    return rng.standard_normal(shape)


def check_store_gradients(loss_fn, store, rng, max_coords=12, n_dirs=2, step=STEP,
                          names=None):
    """Like :func:`check_gradients` for parameters held in a ParameterStore.

    ``loss_fn()`` builds the scalar loss from the store's current values;
    perturbations are applied in place and undone afterwards.
    """
    names = list(store.names()) if names is None else list(names)
    tensors = [store[n] for n in names]
    with ad.enable_grad():
        loss = loss_fn()
    grads = dict(zip(names, ad.grad(loss, tensors)))

    def value(name, delta):
        t = store[name]
        base = t.data
        t.data = base + delta
        try:
            with ad.no_grad():
                return float(loss_fn().data)
        finally:
            t.data = base

    worst = 0.0
    for name in names:
        shape = store[name].data.shape
        size = store[name].data.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords,
                                                                          replace=False)
        fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            e = np.zeros(size)
            e[c] = step
            fd[j] = (value(name, e.reshape(shape)) - value(name, -e.reshape(shape))) / (2 * step)
        worst = max(worst, _rel(grads[name].reshape(-1)[coords], fd))
        for _ in range(n_dirs):
            v = rng.standard_normal(shape)
            v /= np.linalg.norm(v)
            fd_dir = (value(name, step * v) - value(name, -step * v)) / (2 * step)
            worst = max(worst, _rel(np.array([np.sum(grads[name] * v)]), np.array([fd_dir])))
    return worst
