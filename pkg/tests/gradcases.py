"""Random gradient-check instances for every differentiable primitive.

Each builder takes a Generator and returns ``(fn, inputs)`` where ``fn``
maps input tensors to a scalar tensor. Inputs avoid kinks (relu at 0,
maxpool ties, clip floors) so central differences are valid.
"""

import numpy as np

from biaslab import autodiff as ad


def _away(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-12), x)


def _weights(rng, shape):
    # fixed random projection turns any output into a scalar
    return rng.normal(size=shape)


def _scalarize(rng, t_shape):
    w = _weights(rng, t_shape)
    return lambda t: ad.tsum(ad.mul(t, w))


def case_add(rng):
    s = _scalarize(rng, (3, 4))
    return (lambda a, b: s(ad.add(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]


def case_sub(rng):
    s = _scalarize(rng, (3, 4))
    return (lambda a, b: s(ad.sub(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]


def case_mul(rng):
    s = _scalarize(rng, (2, 5))
    return (lambda a, b: s(ad.mul(a, b))), [rng.normal(size=(2, 5)), rng.normal(size=(2, 5))]


def case_div(rng):
    s = _scalarize(rng, (2, 3))
    b = rng.uniform(0.5, 2.0, (2, 3)) * rng.choice([-1, 1], (2, 3))
    return (lambda a, b: s(ad.div(a, b))), [rng.normal(size=(2, 3)), b]


def case_neg(rng):
    s = _scalarize(rng, (4,))
    return (lambda a: s(ad.neg(a))), [rng.normal(size=4)]


def case_matmul(rng):
    s = _scalarize(rng, (3, 2))
    return (lambda a, b: s(ad.matmul(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]


def case_conv2d(rng):
    s = _scalarize(rng, (2, 3, 5, 5))
    return (lambda x, w, b: s(ad.conv2d(x, w, b))), [
        rng.normal(size=(2, 2, 5, 5)),
        rng.normal(size=(3, 2, 3, 3)),
        rng.normal(size=3),
    ]


def case_conv2d_nobias(rng):
    s = _scalarize(rng, (1, 2, 4, 4))
    return (lambda x, w: s(ad.conv2d(x, w))), [rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(2, 1, 3, 3))]


def case_conv2d_wgrad(rng):
    s = _scalarize(rng, (2, 3, 3, 3))
    return (lambda x, g: s(ad.forward_primitive("conv2d_wgrad", x, g, k=3))), [
        rng.normal(size=(2, 3, 4, 4)),
        rng.normal(size=(2, 2, 4, 4)),
    ]


def case_kernel_flip(rng):
    s = _scalarize(rng, (3, 2, 3, 3))
    return (lambda w: s(ad.kernel_flip(w))), [rng.normal(size=(2, 3, 3, 3))]


def case_relu(rng):
    s = _scalarize(rng, (3, 4))
    return (lambda x: s(ad.relu(x))), [_away(rng, (3, 4))]


def case_maxpool(rng):
    s = _scalarize(rng, (1, 2, 2, 2))
    return (lambda x: s(ad.maxpool2x2(x))), [rng.permutation(32).reshape(1, 2, 4, 4) * 0.1 + rng.normal(0, 0.01, (1, 2, 4, 4))]


def case_unpool(rng):
    idx = rng.integers(0, 4, (1, 2, 2, 2))
    s = _scalarize(rng, (1, 2, 4, 4))
    return (lambda g: s(ad.forward_primitive("unpool2x2", g, index=idx))), [rng.normal(size=(1, 2, 2, 2))]


def case_gather(rng):
    idx = rng.integers(0, 4, (1, 2, 2, 2))
    s = _scalarize(rng, (1, 2, 2, 2))
    return (lambda x: s(ad.forward_primitive("gather2x2", x, index=idx))), [rng.normal(size=(1, 2, 4, 4))]


def case_flatten(rng):
    s = _scalarize(rng, (2, 12))
    return (lambda x: s(ad.flatten(x))), [rng.normal(size=(2, 3, 2, 2))]


def case_reshape(rng):
    s = _scalarize(rng, (6, 2))
    return (lambda x: s(ad.reshape(x, (6, 2)))), [rng.normal(size=(3, 4))]


def case_transpose(rng):
    s = _scalarize(rng, (4, 2, 3))
    return (lambda x: s(ad.transpose(x, (2, 0, 1)))), [rng.normal(size=(2, 3, 4))]


def case_softmax(rng):
    s = _scalarize(rng, (3, 4))
    return (lambda x: s(ad.softmax(x))), [rng.normal(size=(3, 4))]


def case_log(rng):
    s = _scalarize(rng, (5,))
    return (lambda x: s(ad.log(x))), [rng.uniform(0.5, 3.0, 5)]


def case_sum(rng):
    s = _scalarize(rng, (2, 1, 4))
    return (lambda x: s(ad.tsum(x, axis=1, keepdims=True))), [rng.normal(size=(2, 3, 4))]


def case_mean(rng):
    w = rng.normal()
    return (lambda x: ad.mul(ad.mean(x), w)), [rng.normal(size=(3, 3))]


def case_square(rng):
    s = _scalarize(rng, (4,))
    return (lambda x: s(ad.square(x))), [rng.normal(size=4)]


def case_abs(rng):
    s = _scalarize(rng, (6,))
    return (lambda x: s(ad.absolute(x))), [_away(rng, (6,))]


def case_broadcast(rng):
    s = _scalarize(rng, (3, 4))
    return (lambda x: s(ad.broadcast_to(x, (3, 4)))), [rng.normal(size=(1, 4))]


def case_clip_min(rng):
    s = _scalarize(rng, (5,))
    return (lambda x: s(ad.clip_min(x, 0.0))), [_away(rng, (5,))]


CASES = {
    name[len("case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("case_") and callable(fn)
}


def instances(count=100, seed=0):
    """``count`` (name, fn, inputs) triples cycling through every primitive case."""
    rng = np.random.default_rng(seed)
    names = list(CASES)
    for i in range(count):
        name = names[i % len(names)]
        fn, inputs = CASES[name](rng)
        yield name, fn, inputs


def attribution_loss_setup(seed=0):
    """A small conv net, a clean/biased batch, and the L_atr-of-parameters function."""
    from biaslab.attribution import saliency_tensor
    from biaslab.mitigation import attribution_loss
    from biaslab.model import Conv2d, Dense, Flatten, MaxPool2x2, ReLU, Sequential

    rng = np.random.default_rng(seed)
    layers = [Conv2d("c1", 1, 2), ReLU("r1"), MaxPool2x2("p1"), Flatten("f"), Dense("d", 2 * 2 * 2, 2)]
    params = {}
    for layer in layers:
        if hasattr(layer, "init"):
            params.update(layer.init(rng))
    params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in params.items()}
    net = Sequential(layers, params, 2)
    clean = rng.uniform(0.1, 0.9, (2, 4, 4))
    biased = clean.copy()
    biased[:, 0, :] = 0.0
    labels = np.array([0, 1])
    reference = saliency_tensor(net, clean, labels).data
    names = sorted(params)

    def loss_of(*leaves):
        p = dict(zip(names, leaves))
        return attribution_loss(reference, saliency_tensor(net, biased, labels, params=p, create_graph=True))

    return loss_of, [params[k] for k in names]
