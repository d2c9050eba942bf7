"""Gradient-check cases: one scalar-valued function per differentiable op.

Each case is (name, fn, input arrays).  Inputs avoid kinks (|x| >= 0.1 for
relu, prelu and abs) so central differences with h = 1e-5 stay exact to
truncation error.
"""

import numpy as np

from dssep import autodiff as ad


def _away_from_zero(rng, shape, low=0.1):
    x = rng.uniform(low, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _weighted(t, seed=99):
    """Generic scalar readout sum(t * fixed random weights)."""
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.reduce_sum(ad.mul(t, w))


def build_cases(seed=0):
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    cases = [
        ("add", lambda a, b: _weighted(ad.add(a, b)), [n((3, 4)), n((4,))]),
        ("sub", lambda a, b: _weighted(ad.sub(a, b)), [n((3, 1)), n((3, 4))]),
        ("mul", lambda a, b: _weighted(ad.mul(a, b)), [n((2, 3)), n((2, 3))]),
        ("div", lambda a, b: _weighted(ad.div(a, b)), [n((2, 3)), pos(2, 3)]),
        ("scale", lambda a: _weighted(ad.scale(a, -2.5)), [n((5,))]),
        ("power", lambda a: _weighted(ad.power(a, 0.3)), [pos(2, 4)]),
        ("sqrt", lambda a: _weighted(ad.sqrt(a)), [pos(6)]),
        ("exp", lambda a: _weighted(ad.exp(a)), [n((6,))]),
        ("log", lambda a: _weighted(ad.log(a)), [pos(6)]),
        ("abs", lambda a: _weighted(ad.absolute(a)), [_away_from_zero(rng, (6,))]),
        ("sigmoid", lambda a: _weighted(ad.sigmoid(a)), [3 * n((6,))]),
        ("tanh", lambda a: _weighted(ad.tanh(a)), [n((6,))]),
        ("swish", lambda a: _weighted(ad.swish(a)), [3 * n((6,))]),
        ("gelu", lambda a: _weighted(ad.gelu(a)), [2 * n((6,))]),
        ("relu", lambda a: _weighted(ad.relu(a)), [_away_from_zero(rng, (6,))]),
        ("prelu", lambda a, al: _weighted(ad.prelu(a, al)), [_away_from_zero(rng, (4, 3)), n((3,))]),
        ("matmul", lambda a, b: _weighted(ad.matmul(a, b)), [n((2, 3, 4)), n((4, 5))]),
        ("linear", lambda x, w, b: _weighted(ad.linear(x, w, b)), [n((2, 3, 4)), n((4, 5)), n((5,))]),
        ("conv2d", lambda x, w, b: _weighted(ad.conv2d(x, w, b, dilation=(2, 1), padding=((2, 0), (1, 1)))),
         [n((1, 5, 4, 2)), n((2, 3, 2, 3)), n((3,))]),
        ("conv2d_stride", lambda x, w: _weighted(ad.conv2d(x, w, stride=(1, 2), padding=((0, 0), (1, 1)))),
         [n((1, 3, 6, 2)), n((1, 3, 2, 2))]),
        ("conv2d_depthwise", lambda x, w: _weighted(ad.conv2d(x, w, padding=((2, 0), (0, 0)), groups=3)),
         [n((2, 4, 1, 3)), n((3, 1, 1, 3))]),
        ("conv2d_grouped", lambda x, w: _weighted(ad.conv2d(x, w, groups=2)), [n((1, 3, 3, 4)), n((2, 2, 2, 4))]),
        ("reduce_sum", lambda a: _weighted(ad.reduce_sum(a, axis=1)), [n((3, 4, 2))]),
        ("reduce_mean", lambda a: _weighted(ad.reduce_mean(a, axis=(0, 2), keepdims=True)), [n((3, 4, 2))]),
        ("variance", lambda a: _weighted(ad.variance(a, axis=-1)), [n((3, 5))]),
        ("softmax", lambda a: _weighted(ad.softmax(a, axis=0)), [n((4, 3))]),
        ("layer_norm", lambda a, g, b: _weighted(ad.layer_norm(a, g, b)), [n((3, 6)), n((6,)), n((6,))]),
        ("reshape", lambda a: _weighted(ad.reshape(a, (3, 4))), [n((2, 6))]),
        ("permute", lambda a: _weighted(ad.permute(a, (2, 0, 1))), [n((2, 3, 4))]),
        ("concat", lambda a, b: _weighted(ad.concat([a, b], axis=1)), [n((2, 3)), n((2, 2))]),
        ("getitem", lambda a: _weighted(ad.getitem(a, (slice(1, None), Ellipsis, 0))), [n((3, 2, 2))]),
        ("split", lambda a: _weighted(ad.mul(*ad.split(a, [2, 2], axis=0))), [n((4, 3))]),
        ("pad", lambda a: _weighted(ad.pad(a, [(1, 0), (0, 2)])), [n((2, 3))]),
        ("pixel_shuffle", lambda a: _weighted(ad.pixel_shuffle(a, 2)), [n((2, 3, 4))]),
        ("pixel_unshuffle", lambda a: _weighted(ad.pixel_unshuffle(a, 2)), [n((2, 4, 2))]),
        ("take_rows", lambda t: _weighted(ad.take_rows(t, np.array([[0, 2], [2, 1]]))), [n((3, 4))]),
        ("istft", lambda r, i: _weighted(ad.istft(r, i, 1024)), [n((9, 257)), n((9, 257))]),
    ]
    return cases


def model_spot_check(variant="proposed_linear", n_weights=20, seed=0, h=1e-5, smooth_tol=1e-6):
    """Relative error of backprop vs central differences on ``n_weights`` random model weights.

    PReLU, ReLU and the time-domain |.| make the loss piecewise smooth.  A
    weight feeding thousands of activations (a bias, say) can push one of them
    across its kink inside a +-h step, and then the difference quotient is not
    a derivative estimate at all.  Such draws are detected by comparing the
    quotients at h and h/10 and replaced by a fresh draw; the accepted
    quotients still use step h.  Returns (error, n_rejected).
    """
    from dssep import model as M
    from dssep import training as T

    cfg = M.ModelConfig(variant=variant, channels=8, blocks=1, heads=2, reduced=True)
    w = M.init_weights(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mix, near = rng.standard_normal((2, 1, 1280)) * 0.1
    far = mix - near
    lw = (0.9, 0.1, 0.2)
    _, _, grads = T.loss_and_grads(w, mix, near, far, cfg, lw)

    def loss(weights):
        with ad.no_grad():
            est = M.forward(mix, cfg, {k: ad.Tensor(v) for k, v in weights.items()})
            total, _ = T.dss_loss(est["near"], est["far"], T.Target.from_wave(near, cfg),
                                  T.Target.from_wave(far, cfg), lw)
        return float(total.data)

    def quotient(flat, j, step):
        orig = flat[j]
        flat[j] = orig + step
        up = loss(w)
        flat[j] = orig - step
        down = loss(w)
        flat[j] = orig
        return (up - down) / (2 * step)

    names = sorted(w)
    sizes = np.array([w[k].size for k in names])
    edges = np.cumsum(sizes)
    order = rng.permutation(sizes.sum())
    analytic, numeric, rejected = [], [], 0
    for p in order:
        if len(numeric) == n_weights:
            break
        i = int(np.searchsorted(edges, p, side="right"))
        name, j = names[i], p - (edges[i] - sizes[i])
        flat = w[name].reshape(-1)
        coarse, fine = quotient(flat, j, h), quotient(flat, j, h / 10)
        if abs(coarse - fine) > smooth_tol * max(abs(fine), 1e-3):
            rejected += 1
            continue
        numeric.append(coarse)
        analytic.append(grads[name].reshape(-1)[j])
    return ad.relative_error(analytic, numeric), rejected
