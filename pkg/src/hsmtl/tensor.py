"""Dense float tensors with taped reverse-mode gradients.

This is not a general autodiff system: it supports exactly the operation set
the patch classifier needs (conv2d, batch norm, relu, residual add, global
average pooling, dense, softmax, cross entropy, batch concat/slice), each with
a hand-written backward rule, plus a finite-difference checker used to verify
those rules.

Layout convention is channels-last throughout: 4-D activations are
B x H x W x C, conv kernels are Kh x Kw x Cin x Cout.
"""

from __future__ import annotations

import numpy as np

# When True, every forward op asserts its output is finite. Off by default
# because the check touches every output element; tests switch it on.
DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class Tensor:
    """A dense float array plus the flags the tape needs.

    Parameters are the leaves that receive gradients; everything else is an
    intermediate. Data is float32 in normal operation and float64 when the
    network is built in verification mode.
    """

    __slots__ = ("data", "is_param", "name")

    def __init__(self, data, is_param: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most 4-D, got shape {arr.shape}")
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.is_param = is_param
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class GradientTape:
    """Ordered record of executed ops for one forward pass.

    Ops executed inside the ``with`` block append themselves; ``backward``
    replays the records in exact reverse execution order, accumulating into
    each input. A tape can be consumed by backward only once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def record(self, output: Tensor, inputs: tuple, backward_fn) -> None:
        self._records.append((output, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


_TAPE_STACK: list[GradientTape] = []


def _active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in op output")
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape: GradientTape, loss: Tensor, params=None):
    """Reverse sweep over ``tape`` seeded at the scalar ``loss``.

    Returns a dict mapping each tensor in ``params`` to its accumulated
    gradient array; parameters that never entered the forward pass get a
    zero gradient of matching shape. A tape may be swept only once.
    """
    if tape._consumed:
        raise RuntimeError("backward was already invoked on this tape")
    tape._consumed = True
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # this op's output never reached the loss
        for inp, ig in zip(inputs, backward_fn(g)):
            if ig is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] += ig
            else:
                grads[key] = ig

    if params is None:
        return {}
    result = {}
    for p in params:
        g = grads.get(id(p))
        result[p] = g if g is not None else np.zeros_like(p.data)
    return result


# ---------------------------------------------------------------------------
# forward ops with backward rules
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero-padded "same" convolution.

    x: B x H x W x Cin, kernel: Kh x Kw x Cin x Cout (Kh, Kw odd),
    bias: Cout. Output spatial extents equal the input's.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be B x H x W x C, got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be Kh x Kw x Cin x Cout, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh} x {kw}")
    if x.shape[3] != cin:
        raise ShapeError(
            f"channel mismatch: input has shape {x.shape} (C={x.shape[3]}) "
            f"but kernel has shape {kernel.shape} (Cin={cin})")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")

    b, h, w, _ = x.shape
    kmat = kernel.data.reshape(kh * kw * cin, cout)

    if kh == 1 and kw == 1:
        # pointwise convolution: no padding or window extraction needed
        cols = x.data.reshape(b * h * w, cin)
        out = Tensor((cols @ kmat + bias.data).reshape(b, h, w, cout))

        def bwd_pointwise(g):
            g2 = g.reshape(b * h * w, cout)
            dk = (cols.T @ g2).reshape(kernel.shape)
            db = g2.sum(axis=0)
            dx = (g2 @ kmat.T).reshape(x.shape)
            return dx, dk, db

        return _finish(out, (x, kernel, bias), bwd_pointwise)

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # B, H, W, C, Kh, Kw -> columns (B*H*W, Kh*Kw*Cin) matching kernel layout
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, kh * kw * cin)
    out = Tensor((cols @ kmat + bias.data).reshape(b, h, w, cout))

    def bwd(g):
        g2 = g.reshape(b * h * w, cout)
        dk = (cols.T @ g2).reshape(kernel.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ kmat.T).reshape(b, h, w, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, ph:ph + h, pw:pw + w, :]
        return dx, dk, db

    return _finish(out, (x, kernel, bias), bwd)


class BatchNormState:
    """Running statistics for one batch-norm layer (one value per channel)."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9,
                 eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.initialized = False


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Per-channel batch normalization over the B, H, W axes.

    Train mode normalizes by batch statistics and folds them into the running
    stats (running <- momentum * running + (1 - momentum) * batch, biased
    variance). Infer mode uses the running stats and requires at least one
    prior training update.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be B x H x W x C, got {x.shape}")
    b, h, w, c = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    eps = state.eps

    if training:
        n = b * h * w
        if n <= 1:
            raise ShapeError(
                f"batch_norm train mode needs more than one value per channel, got B*H*W={n}")
        mean = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std
        out = Tensor(gamma.data * xhat + beta.data)

        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mean).astype(x.dtype)
        state.running_var = (m * state.running_var + (1.0 - m) * var).astype(x.dtype)
        state.initialized = True

        def bwd(g):
            dbeta = g.sum(axis=(0, 1, 2))
            dgamma = (g * xhat).sum(axis=(0, 1, 2))
            dxhat = g * gamma.data
            # standard batch-norm backward through the batch statistics
            dvar = (dxhat * (x.data - mean)).sum(axis=(0, 1, 2)) * (-0.5) * inv_std ** 3
            dmean = (-dxhat * inv_std).sum(axis=(0, 1, 2)) + dvar * (
                -2.0 * (x.data - mean)).sum(axis=(0, 1, 2)) / n
            dx = dxhat * inv_std + dvar * 2.0 * (x.data - mean) / n + dmean / n
            return dx, dgamma, dbeta

        return _finish(out, (x, gamma, beta), bwd)

    if not state.initialized:
        raise RuntimeError(
            "batch_norm infer mode called with uninitialized statistics; "
            "run at least one training step first")
    inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
    xhat = (x.data - state.running_mean.astype(x.dtype)) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd_infer(g):
        dbeta = g.sum(axis=(0, 1, 2))
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dx = g * gamma.data * inv_std
        return dx, dgamma, dbeta

    return _finish(out, (x, gamma, beta), bwd_infer)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient 0 at exactly 0."""
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _finish(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (the residual skip join)."""
    if a.shape != b.shape:
        raise ShapeError(f"add needs matching shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return _finish(out, (a, b), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """B x H x W x C -> B x C, mean over the spatial positions."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be B x H x W x C, got {x.shape}")
    b, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def bwd(g):
        scale = 1.0 / (h * w)
        return (np.broadcast_to((g * scale)[:, None, None, :], (b, h, w, c)).copy(),)

    return _finish(out, (x,), bwd)


def dense(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = v @ w + b for v: B x Din, w: Din x Dout, b: Dout."""
    if v.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense needs 2-D operands, got {v.shape} and {w.shape}")
    if v.shape[1] != w.shape[0]:
        raise ShapeError(
            f"dense dimension mismatch: input {v.shape} vs weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias must have shape ({w.shape[1]},), got {b.shape}")
    out = Tensor(v.data @ w.data + b.data)

    def bwd(g):
        return g @ w.data.T, v.data.T @ g, g.sum(axis=0)

    return _finish(out, (v, w, b), bwd)


def softmax(logits: Tensor) -> Tensor:
    """Row softmax with max subtraction; rows sum to 1."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax needs B x K with K >= 2, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    out = Tensor(probs)

    def bwd(g):
        dot = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - dot),)

    return _finish(out, (logits,), bwd)


LOG_CLAMP = 1e-12


def cross_entropy_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class.

    ``labels`` is an integer array over 0..K-1; probabilities are clamped at
    LOG_CLAMP below so a confidently wrong row cannot produce an infinite
    loss. Composed with softmax, the gradient reaching the logits is
    (probs - onehot) / B.
    """
    labels = np.asarray(labels)
    bsz, k = probs.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels must have shape ({bsz},), got {labels.shape}")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"label {int(labels[i])} at sample index {i} outside valid range 0..{k - 1}")
    p_true = probs.data[np.arange(bsz), labels]
    clamped = np.maximum(p_true, LOG_CLAMP)
    out = Tensor(np.asarray(-np.log(clamped).mean(), dtype=probs.dtype))

    def bwd(g):
        dp = np.zeros_like(probs.data)
        # gradient is zero where the clamp is active
        live = p_true >= LOG_CLAMP
        dp[np.arange(bsz), labels] = np.where(live, -1.0 / (clamped * bsz), 0.0) * g
        return (dp,)

    return _finish(out, (probs,), bwd)


def concat_batch(parts: list[Tensor]) -> Tensor:
    """Stack tensors along the batch axis (used by the fused multitask step)."""
    if not parts:
        raise ShapeError("concat_batch needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        offs = np.cumsum([0] + sizes)
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(parts)))

    return _finish(out, tuple(parts), bwd)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Take rows [start, stop) along the batch axis."""
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice [{start}:{stop}) out of range for batch {x.shape[0]}")
    out = Tensor(x.data[start:stop].copy())

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _finish(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: list[Tensor], eps: float = 1e-3,
               samples_per_param: int = 50, seed: int = 0) -> float:
    """Compare taped gradients against central finite differences.

    ``loss_fn`` runs one deterministic forward pass (batch norm in train mode
    on a fixed batch) and returns the loss tensor. All parameters must be
    float64; float32 finite differences are too noisy to be meaningful.
    Samples up to ``samples_per_param`` coordinates per parameter tensor and
    returns the max of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    A coordinate whose eps-step difference disagrees is re-measured at
    smaller steps before it counts as a failure: a relu kink inside the
    probing interval produces a spurious O(1) mismatch that vanishes as the
    step shrinks, while a genuinely wrong backward rule disagrees at every
    step size.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters "
                             f"(got {p.dtype} for {p.name or 'unnamed'})")

    with GradientTape() as tape:
        loss = loss_fn()
    analytic = backward(tape, loss, params=params)

    def central_diff(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        return (hi - lo) / (2.0 * step)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples_per_param else np.sort(
            rng.choice(n, size=samples_per_param, replace=False))
        a_flat = analytic[p].reshape(-1)
        for i in idx:
            a = float(a_flat[i])
            rel = np.inf
            for step in (eps, eps / 8.0, eps / 64.0):
                numeric = central_diff(flat, i, step)
                # keep the best-supported estimate: a kink artifact shrinks
                # with the step, rounding noise grows with it, and a wrong
                # backward rule disagrees at every step
                rel = min(rel, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
                if rel <= 1e-6:
                    break
            if rel > worst:
                worst = rel
    return worst
