"""Shared test machinery: finite-difference gradient checks and the
registry of primitive cases used by both the unit tests and the
acceptance gate.

The finite-difference oracle is deliberately independent of the autodiff
engine: it re-evaluates the forward function on perturbed plain arrays.
"""

import numpy as np

from emorec import autodiff as A
from emorec.autodiff import Tensor

FD_H = 1e-5


def rel_err(a, b, atol=1e-9):
    """Relative error with an absolute floor for near-zero pairs."""
    diff = abs(a - b)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(b))


def max_rel_err(a, b, atol=1e-9):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    return max((rel_err(x, y, atol) for x, y in zip(a, b)), default=0.0)


def gradcheck(fn, arrays, h=FD_H, max_coords=None, rng=None, atol=1e-9):
    """Max relative error between backward() and central finite differences.

    ``fn`` maps a list of Tensors to a scalar Tensor and must be
    deterministic across calls (closures over randomness reseed inside).
    When ``max_coords`` is set, at most that many coordinates per input are
    probed (chosen by ``rng``), keeping big-model checks affordable.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(tensors).backward()
    worst = 0.0
    for i, base in enumerate(arrays):
        grad = tensors[i].grad.ravel()
        size = base.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = range(size)
        for j in coords:
            worst = max(worst, rel_err(grad[j], _fd_coord(fn, arrays, i, j, h), atol))
    return worst


def _fd_coord(fn, arrays, i, j, h):
    def value(delta):
        shifted = arrays[i].copy()
        shifted.ravel()[j] += delta
        args = [Tensor(arrays[k] if k != i else shifted) for k in range(len(arrays))]
        return fn(args).item()

    return (value(h) - value(-h)) / (2.0 * h)


def _project(out, seed):
    """Collapse any output to a scalar through a fixed random projection so
    every output element participates in the gradient."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return A.sum_(A.mul(out, w))


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


# -- primitive gradient-check cases -----------------------------------------
# Each builder: rng -> (fn, arrays). Shapes stay small so full-coordinate
# finite differences run fast.


def _case_add(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    return lambda ts: _project(A.add(ts[0], ts[1]), 1), [a, b]


def _case_sub(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return lambda ts: _project(A.sub(ts[0], ts[1]), 2), [a, b]


def _case_mul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 1))
    return lambda ts: _project(A.mul(ts[0], ts[1]), 3), [a, b]


def _case_div(rng):
    a = rng.normal(size=(3, 4))
    b = _away_from_zero(rng.normal(size=(3, 4)), 0.3)
    return lambda ts: _project(A.div(ts[0], ts[1]), 4), [a, b]


def _case_pow(rng):
    a = _away_from_zero(rng.normal(size=(2, 3)), 0.2)
    return lambda ts: _project(A.pow_(ts[0], 3), 5), [a]


def _case_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    return lambda ts: _project(A.matmul(ts[0], ts[1]), 6), [a, b]


def _case_matmul_batched(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    return lambda ts: _project(A.matmul(ts[0], ts[1]), 7), [a, b]


def _case_conv1d(rng):
    x, w = rng.normal(size=(2, 7)), rng.normal(size=(3, 2, 3))
    return lambda ts: _project(A.conv1d_dilated(ts[0], ts[1], 1), 8), [x, w]


def _case_conv1d_dilated(rng):
    x, w = rng.normal(size=(2, 2, 9)), rng.normal(size=(3, 2, 3))
    return lambda ts: _project(A.conv1d_dilated(ts[0], ts[1], 2), 9), [x, w]


def _case_relu(rng):
    x = _away_from_zero(rng.normal(size=(3, 4)))
    return lambda ts: _project(A.relu(ts[0]), 10), [x]


def _case_gelu(rng):
    x = rng.normal(size=(3, 4))
    return lambda ts: _project(A.gelu(ts[0]), 11), [x]


def _case_sigmoid(rng):
    x = rng.normal(size=(3, 4))
    return lambda ts: _project(A.sigmoid(ts[0]), 12), [x]


def _case_tanh(rng):
    x = rng.normal(size=(3, 4))
    return lambda ts: _project(A.tanh(ts[0]), 13), [x]


def _case_exp(rng):
    x = rng.normal(size=(3, 4))
    return lambda ts: _project(A.exp(ts[0]), 14), [x]


def _case_log(rng):
    x = rng.uniform(0.2, 3.0, size=(3, 4))
    return lambda ts: _project(A.log(ts[0]), 15), [x]


def _case_softmax(rng):
    x = rng.normal(size=(3, 5))
    return lambda ts: _project(A.softmax(ts[0], axis=-1), 16), [x]


def _case_log_softmax(rng):
    x = rng.normal(size=(3, 5))
    return lambda ts: _project(A.log_softmax(ts[0], axis=-1), 17), [x]


def _case_layer_norm(rng):
    x = rng.normal(size=(4, 6))
    gain = rng.normal(1.0, 0.2, size=6)
    bias = rng.normal(0.0, 0.2, size=6)
    return lambda ts: _project(A.layer_norm(ts[0], ts[1], ts[2]), 18), [x, gain, bias]


def _case_dropout(rng):
    x = rng.normal(size=(4, 5))
    seed = int(rng.integers(1 << 31))

    def fn(ts):
        local = np.random.default_rng(seed)  # same mask on every evaluation
        return _project(A.dropout(ts[0], 0.4, local, training=True), 19)

    return fn, [x]


def _case_bce_with_logits(rng):
    x = rng.normal(size=(4, 3))
    y = rng.integers(0, 2, size=(4, 3)).astype(float)
    return lambda ts: _project(A.bce_with_logits(ts[0], y), 20), [x]


def _case_sum(rng):
    x = rng.normal(size=(3, 4, 2))
    return lambda ts: _project(A.sum_(ts[0], axis=1), 21), [x]


def _case_mean(rng):
    x = rng.normal(size=(3, 4, 2))
    return lambda ts: _project(A.mean(ts[0], axis=(0, 2)), 22), [x]


def _case_reshape_transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    return (
        lambda ts: _project(A.reshape(A.transpose(ts[0], (1, 0, 2)), (3, 8)), 23),
        [x],
    )


def _case_concatenate(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    return lambda ts: _project(A.concatenate([ts[0], ts[1]], axis=0), 24), [a, b]


def _case_take(rng):
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4, 1])  # repeated index exercises scatter-add
    return lambda ts: _project(A.take(ts[0], idx, axis=0), 25), [x]


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "pow": _case_pow,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "conv1d": _case_conv1d,
    "conv1d_dilated": _case_conv1d_dilated,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "sigmoid": _case_sigmoid,
    "tanh": _case_tanh,
    "exp": _case_exp,
    "log": _case_log,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "dropout": _case_dropout,
    "bce_with_logits": _case_bce_with_logits,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape_transpose": _case_reshape_transpose,
    "concatenate": _case_concatenate,
    "take": _case_take,
}


def composite_gradcheck(model, frames, labels, loss_fn, rng, param_coords=5,
                        h=FD_H, atol=1e-9):
    """Gradient check through a whole model: every input coordinate plus a
    random sample of coordinates from each parameter tensor, against central
    finite differences computed by perturbing values in place."""
    x = Tensor(frames, requires_grad=True)
    model.zero_grad()
    loss_fn(model(x), labels).backward()
    worst = 0.0

    def forward_value():
        return loss_fn(model(Tensor(frames)), labels).item()

    xgrad = x.grad.ravel()
    for j in range(frames.size):
        shifted = frames.copy()
        shifted.ravel()[j] += h
        fplus = loss_fn(model(Tensor(shifted)), labels).item()
        shifted.ravel()[j] -= 2 * h
        fminus = loss_fn(model(Tensor(shifted)), labels).item()
        worst = max(worst, rel_err(xgrad[j], (fplus - fminus) / (2 * h), atol))

    for _, p in model.named_parameters():
        flat = p.data.ravel()
        assert flat.base is p.data or flat.base is p.data.base  # in-place view
        grad = p.grad.ravel()
        count = min(param_coords, p.data.size)
        coords = rng.choice(p.data.size, size=count, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fplus = forward_value()
            flat[j] = orig - h
            fminus = forward_value()
            flat[j] = orig
            worst = max(worst, rel_err(grad[j], (fplus - fminus) / (2 * h), atol))
    model.zero_grad()
    return worst


# -- independent numpy oracles ----------------------------------------------


def conv1d_oracle(x, w, dilation):
    """Brute-force sliding-window convolution with symmetric zero padding."""
    c_out, c_in, k = w.shape
    length = x.shape[-1]
    pad = (k - 1) * dilation // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    out = np.zeros(x.shape[:-2] + (c_out, length))
    for o in range(c_out):
        for t in range(length):
            acc = 0.0
            for i in range(c_in):
                for j in range(k):
                    acc += w[o, i, j] * xp[..., i, t + j * dilation]
            out[..., o, t] = acc
    return out


def ccc_oracle(x, y):
    """Direct-formula CCC with population moments."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    return 2.0 * cov / (x.var() + y.var() + (mx - my) ** 2)


def expr_loss_oracle(logits, ids):
    """Direct -1/N sum log softmax[i, true_i] at float64."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    return float(-np.mean([np.log(probs[i, c]) for i, c in enumerate(ids)]))


def au_loss_oracle(logits, targets):
    """Naive sigmoid followed by binary cross-entropy at float64."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-x))
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


def macro_f1_oracle(pred, true, num_classes):
    """Confusion-matrix macro F1 computed from precision/recall directly."""
    scores = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (true == c))
        predicted = np.sum(pred == c)
        actual = np.sum(true == c)
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        scores.append(2 * precision * recall / (precision + recall)
                      if precision + recall else 0.0)
    return float(np.mean(scores)), np.array(scores)
