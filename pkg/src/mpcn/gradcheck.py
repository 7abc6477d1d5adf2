"""Central-difference verification of analytic gradients.

All checks run in float64: the layers follow the dtype of whatever arrays
they are handed, so passing float64 inputs/parameters exercises exactly the
same code paths as float32 training while leaving enough precision to
resolve an epsilon of 1e-3.
"""

import numpy as np

EPSILON = 1e-3
TOLERANCE = 1e-4


def relative_error(a, b):
    """max over elements of |a-b| / max(|a|, |b|, 1e-4)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-4)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(fn, x, epsilon=EPSILON):
    """d fn / d x by central differences; fn returns a scalar and must not
    mutate x.  x is perturbed in place one element at a time."""
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + epsilon
        f_plus = fn()
        flat_x[i] = orig - epsilon
        f_minus = fn()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad


def check_gradient(fn, x, analytic, epsilon=EPSILON):
    """Compare an analytic gradient of a scalar fn against central
    differences; returns the worst relative error."""
    numeric = numeric_gradient(fn, x, epsilon)
    return relative_error(analytic, numeric)


def spread_values(rng, shape, step=0.1):
    """Values on a shuffled grid with spacing `step`, offset so no element
    sits within step/4 of zero — keeps finite differences of kinked
    functions (relu, max) away from their non-differentiable points."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2 + 0.25) * step).reshape(shape)


def _loss(t):
    """A fixed scalar readout with distinct per-element weights, so every
    output element influences the check."""
    w = np.arange(1, t.size + 1, dtype=np.float64).reshape(t.shape) / t.size
    return float(np.sum(t * w)), w


def run_gradient_audit(seed=0, epsilon=EPSILON):
    """Finite-difference audit of every layer plus a tiny two-path network;
    returns an ordered list of (check name, max relative error)."""
    from . import layers as nn

    rng = np.random.default_rng(seed)
    results = []

    conv = nn.Conv2d(2, 3, 3, stride=1, pad=1, rng=rng, dtype=np.float64)
    x = spread_values(rng, (2, 2, 6, 6))
    conv.weights[...] = spread_values(rng, conv.weights.shape, 0.05)
    conv.bias[...] = spread_values(rng, conv.bias.shape, 0.05)
    errs = _materialize(conv, (x,), {"weight": conv.weights, "bias": conv.bias},
                        ("grad_weights", "grad_bias"))
    results += [(f"conv2d/{k}", v) for k, v in errs.items()]

    pool = nn.MaxPool2d(3, 2)
    x = spread_values(rng, (2, 2, 7, 7))
    results += [(f"maxpool2d/{k}", v)
                for k, v in _materialize(pool, (x,), {}, ()).items()]

    relu = nn.ReLU()
    x = spread_values(rng, (3, 4, 4))
    results += [(f"relu/{k}", v)
                for k, v in _materialize(relu, (x,), {}, ()).items()]

    lrn = nn.Lrn(nn.LrnParams())
    x = spread_values(rng, (2, 7, 5, 5))
    results += [(f"lrn/{k}", v)
                for k, v in _materialize(lrn, (x,), {}, ()).items()]

    fc = nn.FullyConnected(8, 5, rng=rng, dtype=np.float64)
    x = spread_values(rng, (3, 8))
    fc.weights[...] = spread_values(rng, fc.weights.shape, 0.05)
    fc.bias[...] = spread_values(rng, fc.bias.shape, 0.05)
    results += [(f"fully_connected/{k}", v)
                for k, v in _materialize(fc, (x,),
                                         {"weight": fc.weights, "bias": fc.bias},
                                         ("grad_weights", "grad_bias")).items()]

    results.append(("dropout/input", _dropout_check(rng, epsilon)))
    results.append(("softmax_log_loss/input", _softmax_check(rng, epsilon)))
    results += _network_check(epsilon)
    return results


def _materialize(layer, inputs, params, grad_attrs):
    """Audit one layer: input gradient plus any (name -> param array)
    entries, whose analytic gradients live on the layer as `grad_attrs`."""
    def run():
        return _loss(layer.forward(*inputs))[0]

    out = layer.forward(*inputs)
    _, w = _loss(out)
    grad_in = layer.backward(w)
    first = grad_in[0] if isinstance(grad_in, tuple) else grad_in
    worst = {"input": check_gradient(run, inputs[0], first)}
    for (name, value), attr in zip(params.items(), grad_attrs):
        layer.forward(*inputs)
        layer.backward(w)
        worst[name] = check_gradient(run, value, getattr(layer, attr))
    return worst


def _dropout_check(rng, epsilon):
    from . import layers as nn

    drop = nn.Dropout(0.5)
    x = spread_values(rng, (4, 6))

    def run():
        # Recreate the stream every call so the mask is frozen.
        out = drop.forward(x, mode="train", rng=np.random.default_rng(77))
        return _loss(out)[0]

    out = drop.forward(x, mode="train", rng=np.random.default_rng(77))
    _, w = _loss(out)
    analytic = drop.backward(w)
    return check_gradient(run, x, analytic, epsilon)


def _softmax_check(rng, epsilon):
    from . import layers as nn

    loss_layer = nn.SoftmaxLogLoss()
    logits = spread_values(rng, (4, 6), 0.3)
    labels = np.array([0, 2, 5, 3])

    def run():
        _, loss = loss_layer.forward(logits, labels)
        return loss

    loss_layer.forward(logits, labels)
    analytic = loss_layer.backward()
    return check_gradient(run, logits, analytic, epsilon)


def _network_check(epsilon):
    """Whole-network parameter check on a tiny two-path model in float64.

    The init scale sits well above epsilon so the finite-difference nudges
    cannot flip relu or pool decisions mid-difference.
    """
    from . import network as nets

    layers = (nets.ConvSpec(2, 3), nets.LrnSpec(), nets.PoolSpec(3, 2))
    spec = nets.NetworkSpec(
        paths=(nets.PathSpec(layers, "source"), nets.PathSpec(layers, "bilateral")),
        n_classes=3, crop=8)
    net = nets.Network(spec, seed=41, dtype=np.float64, init_std=0.6)
    data_rng = np.random.default_rng(12)
    source = data_rng.standard_normal((2, 3, 8, 8))
    filtered = data_rng.standard_normal((2, 3, 8, 8))
    labels = np.array([0, 2])

    def run():
        _, loss = net.forward(source, filtered, labels=labels, mode="train",
                              dropout_rng=nets.keyed_rng(41, nets.SEED_DROPOUT, 0))
        return loss

    run()
    net.backward()
    grads = {name: g.copy() for name, g in net.grads().items()}
    params = net.params()
    worst = max(check_gradient(run, params[name], grads[name], epsilon)
                for name in sorted(params))
    return [("network/parameters", worst)]
