"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import ContractError, Tape, Tensor, backward


def grad_check(f, x, h=1e-5):
    """Max componentwise relative error between tape and numeric gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    if x.dtype != np.float64:
        raise ContractError("grad_check needs a float64 input")
    leaf = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.astype(np.float64).copy()
    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base, dtype=np.float64)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base, dtype=np.float64)).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0


# --- randomized suites ----------------------------------------------------------
# Each builder draws shapes and fixed operands from ``rng`` and returns
# (f, x): f maps the checked input to a scalar. Element-wise outputs are
# reduced against a fixed random weighting so every output entry matters.

def _probe(rng, y):
    from . import tensor as T
    w = Tensor(rng.standard_normal(y.shape), dtype=np.float64)
    return T.sum(T.mul(y, w))


def _away_from_kinks(a, lo=0.0, hi=None, gap=1e-2):
    for k in (lo, hi):
        if k is not None:
            near = np.abs(a - k) < gap
            a[near] += 2 * gap * np.sign(a[near] - k + 1e-30)
    return a


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _fixed_probe(rng):
    seed = int(rng.integers(1 << 30))
    return lambda y: _probe(np.random.default_rng(seed), y)


def _suite_conv_x(rng):
    from . import tensor as T
    B, C, O, H = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(3, 7)))
    k, s = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
    w, p = _t(rng.standard_normal((O, C, k, k))), _fixed_probe(rng)
    return (lambda v: p(T.conv2d(v, w, s, (k - 1) // 2))), _t(rng.standard_normal((B, C, H, H)))


def _suite_conv_w(rng):
    from . import tensor as T
    B, C, O, H = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(3, 7)))
    k, s = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
    x, p = _t(rng.standard_normal((B, C, H, H))), _fixed_probe(rng)
    return (lambda v: p(T.conv2d(x, v, s, (k - 1) // 2))), _t(rng.standard_normal((O, C, k, k)))


def _suite_depthwise_x(rng):
    from . import tensor as T
    B, C, H, s = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(3, 7)), int(rng.choice([1, 2]))
    w, p = _t(rng.standard_normal((C, 1, 3, 3))), _fixed_probe(rng)
    return (lambda v: p(T.conv2d(v, w, s, 1, depthwise=True))), _t(rng.standard_normal((B, C, H, H)))


def _suite_depthwise_w(rng):
    from . import tensor as T
    B, C, H, s = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(3, 7)), int(rng.choice([1, 2]))
    x, p = _t(rng.standard_normal((B, C, H, H))), _fixed_probe(rng)
    return (lambda v: p(T.conv2d(x, v, s, 1, depthwise=True))), _t(rng.standard_normal((C, 1, 3, 3)))


def _suite_batch_norm(rng, training=True):
    from . import tensor as T
    # at least three samples per channel: with two, the normalised output is
    # locally constant and the exact zero gradient is pure roundoff
    B, C, H = int(rng.integers(3, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    shape = (B, C) if rng.random() < 0.3 else (B, C, H, H)
    g, b = _t(rng.uniform(0.5, 1.5, C)), _t(rng.standard_normal(C))
    rm, rv = rng.standard_normal(C), rng.uniform(0.5, 2.0, C)
    p = _fixed_probe(rng)

    def f(v):
        # fresh buffers per call keep f deterministic despite in-place running updates
        return p(T.batch_norm(v, g, b, rm.copy(), rv.copy(), training))
    return f, _t(rng.standard_normal(shape))


def _suite_batch_norm_eval(rng):
    return _suite_batch_norm(rng, training=False)


def _suite_linear(rng):
    from . import tensor as T
    B, D, O = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    w, p = _t(rng.standard_normal((O, D))), _fixed_probe(rng)
    return (lambda v: p(T.linear(v, w))), _t(rng.standard_normal((B, D)))


def _suite_relu6(rng):
    from . import tensor as T
    B, D = int(rng.integers(1, 5)), int(rng.integers(1, 8))
    x = _away_from_kinks(rng.uniform(-2, 8, (B, D)), 0.0, 6.0)
    p = _fixed_probe(rng)
    return (lambda v: p(T.relu6(v))), _t(x)


def _suite_global_avg_pool(rng):
    from . import tensor as T
    B, C, H = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    p = _fixed_probe(rng)
    return (lambda v: p(T.global_avg_pool(v))), _t(rng.standard_normal((B, C, H, H)))


def _suite_l2_normalize(rng):
    from . import tensor as T
    B, D = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    p = _fixed_probe(rng)
    return (lambda v: p(T.l2_normalize(v, axis=1))), _t(rng.standard_normal((B, D)))


def _suite_log_softmax(rng):
    from . import tensor as T
    B, D = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    p = _fixed_probe(rng)
    return (lambda v: p(T.log_softmax(v))), _t(rng.standard_normal((B, D)) * 3)


def _suite_split_concat(rng):
    from . import tensor as T
    B, D = 2 * int(rng.integers(1, 4)), int(rng.integers(1, 5))
    p = _fixed_probe(rng)

    def f(v):
        a, b = T.split(v, 2)
        return p(T.concat([T.mul(a, b), b], axis=1))
    return f, _t(rng.standard_normal((B, D)))


def _unit(rng, shape):
    a = rng.standard_normal(shape)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _suite_loss_cls(rng):
    from .losses import cls_loss
    B, D, Dt = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
    wa, zt = _t(rng.standard_normal((Dt, D))), _t(_unit(rng, (B, Dt)))
    return (lambda v: cls_loss(v, zt, wa)), _t(rng.standard_normal((B, D)))


def _suite_loss_cls_wa(rng):
    from .losses import cls_loss
    B, D, Dt = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
    zs, zt = _t(rng.standard_normal((B, D))), _t(_unit(rng, (B, Dt)))
    return (lambda v: cls_loss(zs, zt, v)), _t(rng.standard_normal((Dt, D)))


def _suite_loss_ms(rng):
    from .losses import ms_loss
    B, C = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    dims = [int(rng.integers(1, 4)) for _ in range(3)]
    student = [_t(rng.standard_normal((B, C, d, d))) for d in dims]
    teacher = [_t(rng.standard_normal((B, C, d, d))) for d in dims]
    k = int(rng.integers(3))

    def f(v):
        s = list(student)
        s[k] = v
        return ms_loss(s, teacher)
    return f, student[k]


def _suite_loss_infonce(rng):
    from . import tensor as T
    from .losses import infonce_loss
    B, D, K = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 6))
    z2, q = _t(_unit(rng, (B, D))), _t(_unit(rng, (K, D)))
    tau = float(rng.uniform(0.1, 1.0))
    return (lambda v: infonce_loss(T.l2_normalize(v, axis=1), z2, q, tau)), _t(rng.standard_normal((B, D)))


def _suite_loss_nt_xent(rng):
    from . import tensor as T
    from .losses import nt_xent_loss
    B, D = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    z2, tau = _t(_unit(rng, (B, D))), float(rng.uniform(0.1, 1.0))
    return (lambda v: nt_xent_loss(T.l2_normalize(v, axis=1), z2, tau)), _t(rng.standard_normal((B, D)))


def _suite_loss_byol(rng):
    from .losses import byol_loss
    B, D = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    target = _t(rng.standard_normal((B, D)))
    return (lambda v: byol_loss(v, target)), _t(rng.standard_normal((B, D)))


def _suite_loss_dino(rng):
    from .losses import DinoCenter, dino_self_distill_loss
    B, D = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    teacher = rng.standard_normal((B, D))
    center = DinoCenter(rng.standard_normal(D) * 0.1)
    return (lambda v: dino_self_distill_loss(v, teacher, center)[0]), _t(rng.standard_normal((B, D)) * 0.1)


def _suite_loss_cross_entropy(rng):
    from .losses import cross_entropy_loss
    B, C = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    labels = rng.integers(0, C, B)
    return (lambda v: cross_entropy_loss(v, labels)), _t(rng.standard_normal((B, C)) * 2)


KERNEL_SUITES = {
    "conv2d_input": _suite_conv_x,
    "conv2d_weight": _suite_conv_w,
    "depthwise_input": _suite_depthwise_x,
    "depthwise_weight": _suite_depthwise_w,
    "batch_norm_train": _suite_batch_norm,
    "batch_norm_eval": _suite_batch_norm_eval,
    "linear": _suite_linear,
    "relu6": _suite_relu6,
    "global_avg_pool": _suite_global_avg_pool,
    "l2_normalize": _suite_l2_normalize,
    "log_softmax": _suite_log_softmax,
    "split_concat": _suite_split_concat,
}

LOSS_SUITES = {
    "cls": _suite_loss_cls,
    "cls_align_weight": _suite_loss_cls_wa,
    "ms": _suite_loss_ms,
    "infonce": _suite_loss_infonce,
    "nt_xent": _suite_loss_nt_xent,
    "byol": _suite_loss_byol,
    "dino": _suite_loss_dino,
    "cross_entropy": _suite_loss_cross_entropy,
}

SUITES = {**KERNEL_SUITES, **LOSS_SUITES}


def run_suite(name, shapes=20, seed=0, h=1e-5):
    """Max relative error of suite ``name`` over ``shapes`` random draws."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(shapes):
        f, x = SUITES[name](rng)
        worst = max(worst, grad_check(f, x, h))
    return worst


def run_all(shapes=20, seed=0, names=None):
    return {name: run_suite(name, shapes, seed) for name in (names or SUITES)}
