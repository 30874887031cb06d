##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Learning rules and learning-rate schedules used by training and QAT fine-tuning.               #
# Each rule keeps its own state per parameter and updates Tensor.data in place of the old array. #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import math

import numpy as np

from fitkit.errors import ValidationError

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

class LearningRule:
    """Base class. `step(grads, lr)` applies one update to every parameter."""

    def __init__(self, params):
        self.params = list(params)

    def step(self, grads, lr):
        raise NotImplementedError(f"{type(self).__name__} does not implement step.")


class SGD(LearningRule):
    """Plain gradient descent: param := param - lr * grad."""

    def step(self, grads, lr):
        for param, g in zip(self.params, grads):
            param.data = param.data - lr * g.data


class Adam(LearningRule):
    """Adaptive-moment updates with bias correction."""

    def __init__(self, params, betas=ADAM_BETAS, eps=ADAM_EPSILON):
        super().__init__(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, (param, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g.data
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g.data * g.data
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(kind, params):
    try:
        return OPTIMIZERS[kind](params)
    except KeyError:
        raise ValidationError(f"Unknown optimizer '{kind}' (expected one of {sorted(OPTIMIZERS)}).") from None


def learning_rate(base_lr, epoch, epochs, schedule):
    """
    Learning rate for a 0-based epoch.

    "cosine" anneals from base_lr towards 0 over `epochs`; "constant" keeps base_lr.
    """

    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))
    raise ValidationError(f"Unknown schedule '{schedule}' (expected 'cosine' or 'constant').")
