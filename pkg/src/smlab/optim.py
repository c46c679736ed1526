"""Adam optimizer and a finite-difference gradient checker."""

import numpy as np


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors.

    ``step`` consumes the gradients: it applies the update and clears every
    ``grad`` buffer so the next backward starts from zero.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not params:
            raise ValueError("Adam needs at least one parameter")
        if not 0.0 < lr:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Apply one update using the accumulated gradients."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(
                    f"parameter {i} has no gradient; run backward before step"
                )
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self):
        """Moment buffers and step count, for checkpointing."""
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state):
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        for cur, new in zip(self.m, state["m"]):
            if cur.shape != new.shape:
                raise ValueError(
                    f"moment shape mismatch: {cur.shape} vs {new.shape}"
                )
        self.t = int(state["t"])
        self.m = [np.array(x, dtype=np.float64) for x in state["m"]]
        self.v = [np.array(x, dtype=np.float64) for x in state["v"]]


class GradCheckReport:
    """Per-element comparison of analytic and numeric gradients."""

    def __init__(self, tol):
        self.tol = tol
        self.rows = []  # (param_index, flat_index, analytic, numeric, rel_err)

    def add(self, pi, fi, analytic, numeric):
        denom = max(abs(analytic), abs(numeric), 1e-4)
        self.rows.append((pi, fi, analytic, numeric, abs(analytic - numeric) / denom))

    @property
    def max_rel_err(self):
        return max((r[4] for r in self.rows), default=0.0)

    @property
    def failures(self):
        return [r for r in self.rows if r[4] >= self.tol]

    @property
    def passed(self):
        return not self.failures

    def summary(self):
        return (
            f"checked {len(self.rows)} elements, max rel err "
            f"{self.max_rel_err:.3e}, {len(self.failures)} over tol {self.tol:.1e}"
        )


def finite_diff_check(loss_fn, params, h=1e-5, samples_per_param=16, rng=None,
                      tol=1e-4):
    """Compare stored analytic gradients against central differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter values
    (forward only); each tensor in ``params`` must already hold its analytic
    gradient in ``.grad``.  For every parameter, up to ``samples_per_param``
    elements are probed (random when ``rng`` is given, evenly spaced
    otherwise) with symmetric perturbations of size ``h``.
    """
    report = GradCheckReport(tol)
    for pi, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {pi} has no analytic gradient to check")
        n = p.data.size
        k = min(samples_per_param, n)
        if rng is not None:
            idx = sorted({int(rng.randrange(n)) for _ in range(k)})
        else:
            idx = sorted(set(np.linspace(0, n - 1, k).astype(int).tolist()))
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for fi in idx:
            keep = flat[fi]
            flat[fi] = keep + h
            up = loss_fn()
            flat[fi] = keep - h
            down = loss_fn()
            flat[fi] = keep
            report.add(pi, fi, float(gflat[fi]), (up - down) / (2.0 * h))
    return report
