"""First-order optimizers on flat parameter vectors.

Both optimizers take the gradient as a flat float64 array and return the
updated vector; internal state (Adam moments, step counter) lives on the
optimizer object. Learning rates are either a float or a callable k -> lr
evaluated at the current step index (0-based). Gradients pass through a
global-norm clip before the update; a non-finite gradient raises instead of
silently poisoning the parameters, since by then the useful diagnostic is
the iteration where it happened.
"""

import numpy as np


class NanGradientError(RuntimeError):
    """Gradient contained NaN/inf. Carries the step index for post-mortems."""

    def __init__(self, step, n_bad, n_total, grad_norm_finite):
        self.step = step
        msg = (f"non-finite gradient at step {step}: {n_bad}/{n_total} entries"
               f" bad, finite-part norm {grad_norm_finite:.6g}")
        super().__init__(msg)


def clip_global_norm(grad, max_norm):
    """Scale grad down to max_norm if its l2 norm exceeds it.

    Returns (clipped_grad, original_norm). No-op (same object) under the
    threshold so the common case costs one reduction.
    """
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def _check_finite(grad, step):
    bad = ~np.isfinite(grad)
    if bad.any():
        finite = grad[~bad]
        fn = float(np.linalg.norm(finite)) if finite.size else 0.0
        raise NanGradientError(step, int(bad.sum()), grad.size, fn)


def _lr_at(lr, k):
    return float(lr(k)) if callable(lr) else float(lr)


class Sgd:
    def __init__(self, lr, clip_norm=10.0):
        self.lr = lr
        self.clip_norm = clip_norm
        self.k = 0
        self.last_grad_norm = None
        self.last_lr = None

    def step(self, theta, grad):
        grad = np.asarray(grad, dtype=np.float64)
        _check_finite(grad, self.k)
        grad, norm = clip_global_norm(grad, self.clip_norm)
        lr = _lr_at(self.lr, self.k)
        self.last_grad_norm = norm
        self.last_lr = lr
        self.k += 1
        return theta - lr * grad


class Adam:
    """Adam with bias correction, betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=10.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.k = 0
        self.m = None
        self.v = None
        self.last_grad_norm = None
        self.last_lr = None

    def step(self, theta, grad):
        grad = np.asarray(grad, dtype=np.float64)
        _check_finite(grad, self.k)
        grad, norm = clip_global_norm(grad, self.clip_norm)
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        t = self.k + 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** t)
        vhat = self.v / (1.0 - self.beta2 ** t)
        lr = _lr_at(self.lr, self.k)
        self.last_grad_norm = norm
        self.last_lr = lr
        self.k += 1
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)
