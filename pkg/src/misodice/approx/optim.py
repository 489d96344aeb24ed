import logging

import numpy as np

log = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment optimiser with bias correction, updating arrays in place."""

    def __init__(self, params: dict, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.skipped = 0

    def step(self, grads: dict, lr=None) -> bool:
        """Apply one update. A non-finite gradient skips the step and returns False."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient at step %d; update skipped", self.t + 1)
            return False
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def step(optimizer: Adam, gradients: dict, lr=None) -> dict:
    optimizer.step(gradients, lr)
    return optimizer.params
