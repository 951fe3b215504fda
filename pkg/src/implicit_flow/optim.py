import numpy as np


class Adam:
    """Adam on a flat parameter vector.

    ``weight_decay`` is the classic L2 form (added to the gradient before the
    moment updates), which is what the inverse-rendering setting asks for.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr=None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        g = grad
        if self.weight_decay:
            g = g + self.weight_decay * theta
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        denom = np.sqrt(self.v / bc2) + self.eps
        return theta - (lr / bc1) * self.m / denom
