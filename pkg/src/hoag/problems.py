"""Benchmark bilevel problems.

Regularization hyperparameters are parametrized in log-space throughout:
a hyperparameter value lam enters the losses as e^lam, matching the
log-spaced grids these constants are usually searched over.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist
from scipy.special import expit, logsumexp, softmax

from .core import BilevelProblem

__all__ = [
    "AnalyticToyProblem",
    "analytic_toy_reference",
    "LogisticL2Problem",
    "KernelRidgeProblem",
    "MultiFeatureRegLogisticProblem",
]


def _row_norms(X) -> np.ndarray:
    if sp.issparse(X):
        return np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    return np.linalg.norm(np.asarray(X), axis=1)


def _logistic_loss(margins) -> float:
    # log(1 + e^-t), stable on both tails
    return float(np.logaddexp(0.0, -margins).sum())


def _logistic_dloss(margins) -> np.ndarray:
    # psi'(t) = -1 / (1 + e^t)
    return -expit(-margins)


def _logistic_ddloss(margins) -> np.ndarray:
    # psi''(t) = sigma(t) sigma(-t)
    return expit(margins) * expit(-margins)


class AnalyticToyProblem(BilevelProblem):
    """Closed-form sanity problem: shrink x toward c, score against d.

    h(x, lam) = 0.5 ||x - c||^2 + 0.5 e^lam ||x||^2 makes the inner
    solution X(lam) = c / (1 + e^lam) available in closed form, and with
    g(x) = 0.5 ||x - d||^2 the whole outer objective and its gradient
    are known exactly; see analytic_toy_reference.
    """

    n_hyper = 1
    quadratic_inner = True

    def __init__(self, c, d):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))
        self.d = np.atleast_1d(np.asarray(d, dtype=float))
        if self.c.shape != self.d.shape:
            raise ValueError("c and d must have the same length")
        self.n_params = self.c.shape[0]

    def inner_loss(self, x, lam):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(np.sum((x - self.c) ** 2)) + 0.5 * np.exp(
            lam[0]
        ) * float(np.sum(x**2))

    def inner_grad(self, x, lam):
        x = np.asarray(x, dtype=float)
        return (x - self.c) + np.exp(lam[0]) * x

    def hessian_vec(self, x, lam, v):
        return (1.0 + np.exp(lam[0])) * np.asarray(v, dtype=float)

    def cross_vec(self, x, lam, v):
        return np.array([np.exp(lam[0]) * float(np.dot(x, v))])

    def outer_loss(self, x, lam):
        return 0.5 * float(np.sum((np.asarray(x) - self.d) ** 2))

    def outer_grad_params(self, x, lam):
        return np.asarray(x, dtype=float) - self.d

    def outer_grad_hyper(self, x, lam):
        return np.zeros(1)

    def strong_convexity(self, lam):
        return 1.0 + float(np.exp(lam[0]))

    def outer_lipschitz(self):
        # reachable solutions satisfy ||x|| <= ||c||, so ||grad_x g|| <= ||c|| + ||d||
        return float(np.linalg.norm(self.c) + np.linalg.norm(self.d))


def analytic_toy_reference(problem: AnalyticToyProblem, lam):
    """Exact (X(lam), f(lam), f'(lam)) for the toy problem."""
    lam0 = float(np.atleast_1d(lam)[0])
    e = np.exp(lam0)
    x_star = problem.c / (1.0 + e)
    f_val = 0.5 * float(np.sum((x_star - problem.d) ** 2))
    dx_dlam = -problem.c * e / (1.0 + e) ** 2
    grad = np.array([float(np.dot(x_star - problem.d, dx_dlam))])
    return x_star, f_val, grad


class LogisticL2Problem(BilevelProblem):
    """One regularization hyperparameter for l2-penalized logistic regression.

    Inner: sum_i psi(b_i a_i^T x) + e^lam ||x||^2 on the train split
    (note the penalty carries no 1/2, so the Hessian floor is 2 e^lam).
    Outer: the same logistic loss on the held-out split; it has no
    direct lam dependence, so grad_lam g is identically zero.
    """

    n_hyper = 1

    def __init__(self, train_X, train_y, test_X, test_y, val_X=None, val_y=None):
        self.train_X = train_X
        self.train_y = np.asarray(train_y, dtype=float)
        self.test_X = test_X
        self.test_y = np.asarray(test_y, dtype=float)
        self.val_X = val_X
        self.val_y = None if val_y is None else np.asarray(val_y, dtype=float)
        for y in (self.train_y, self.test_y):
            if not np.all(np.isin(y, (-1.0, 1.0))):
                raise ValueError("labels must be -1/+1")
        self.n_params = train_X.shape[1]
        self._lipschitz = float(_row_norms(test_X).sum())

    @classmethod
    def from_dataset(cls, dataset, split):
        X, y = dataset.features, dataset.targets
        return cls(
            X[split.train], y[split.train],
            X[split.test], y[split.test],
            X[split.validation], y[split.validation],
        )

    def _margins(self, X, y, x):
        return y * (X @ x)

    def inner_loss(self, x, lam):
        m = self._margins(self.train_X, self.train_y, x)
        return _logistic_loss(m) + float(np.exp(lam[0])) * float(np.dot(x, x))

    def inner_grad(self, x, lam):
        m = self._margins(self.train_X, self.train_y, x)
        return self.train_X.T @ (self.train_y * _logistic_dloss(m)) + 2.0 * np.exp(
            lam[0]
        ) * np.asarray(x, dtype=float)

    def hessian_vec(self, x, lam, v):
        m = self._margins(self.train_X, self.train_y, x)
        return self.train_X.T @ (_logistic_ddloss(m) * (self.train_X @ v)) + (
            2.0 * np.exp(lam[0])
        ) * np.asarray(v, dtype=float)

    def cross_vec(self, x, lam, v):
        return np.array([2.0 * np.exp(lam[0]) * float(np.dot(x, v))])

    def outer_loss(self, x, lam):
        return _logistic_loss(self._margins(self.test_X, self.test_y, x))

    def outer_grad_params(self, x, lam):
        m = self._margins(self.test_X, self.test_y, x)
        return self.test_X.T @ (self.test_y * _logistic_dloss(m))

    def outer_grad_hyper(self, x, lam):
        return np.zeros(1)

    def strong_convexity(self, lam):
        return 2.0 * float(np.exp(lam[0]))

    def outer_lipschitz(self):
        return self._lipschitz

    def validation_loss(self, x, lam=None):
        if self.val_X is None:
            return None
        return _logistic_loss(self._margins(self.val_X, self.val_y, x))


class KernelRidgeProblem(BilevelProblem):
    """Kernel ridge regression with an exponential kernel; two hyperparameters.

    lam[0] sets the kernel width (gamma = e^lam0), lam[1] the ridge
    strength.  The kernel is exp(-gamma ||a - a'||) on the plain
    euclidean distance; pass squared=True for the gaussian variant.
    The inner problem is the linear system (K + e^lam1 I) x = b written
    as a quadratic so the generic oracle interface applies, and the
    outer loss sees the hyperparameters both through x and through the
    test-block kernel matrix.
    """

    n_hyper = 2
    quadratic_inner = True

    def __init__(self, train_X, train_y, test_X, test_y, val_X=None, val_y=None,
                 squared=False):
        train_X = np.asarray(train_X, dtype=float)
        test_X = np.asarray(test_X, dtype=float)
        self.train_y = np.asarray(train_y, dtype=float)
        self.test_y = np.asarray(test_y, dtype=float)
        power = 2 if squared else 1
        self.dist_train = cdist(train_X, train_X) ** power
        self.dist_test = cdist(test_X, train_X) ** power
        if val_X is not None:
            self.dist_val = cdist(np.asarray(val_X, dtype=float), train_X) ** power
            self.val_y = np.asarray(val_y, dtype=float)
        else:
            self.dist_val = None
            self.val_y = None
        self.n_params = train_X.shape[0]
        self.n_features = train_X.shape[1]
        m, n = self.dist_test.shape
        k_bound = np.sqrt(m * n)  # kernel entries lie in (0, 1]
        self._lipschitz = 2.0 * k_bound * (
            float(np.linalg.norm(self.test_y))
            + k_bound * float(np.linalg.norm(self.train_y))
        )
        self._kernel_cache = None

    @classmethod
    def from_dataset(cls, dataset, split, squared=False):
        X = dataset.features
        if sp.issparse(X):
            X = X.toarray()
        y = dataset.targets
        return cls(
            X[split.train], y[split.train],
            X[split.test], y[split.test],
            X[split.validation], y[split.validation],
            squared=squared,
        )

    def _kernels(self, lam):
        lam1 = float(lam[0])
        cached = self._kernel_cache
        if cached is not None and cached[0] == lam1:
            return cached[1]
        gamma = np.exp(lam1)
        k_train = np.exp(-gamma * self.dist_train)
        k_test = np.exp(-gamma * self.dist_test)
        # d/dlam1 exp(-e^lam1 D) = -e^lam1 D K
        dk_train = -gamma * self.dist_train * k_train
        dk_test = -gamma * self.dist_test * k_test
        kernels = (k_train, k_test, dk_train, dk_test)
        self._kernel_cache = (lam1, kernels)
        return kernels

    def inner_loss(self, x, lam):
        k_train, _, _, _ = self._kernels(lam)
        x = np.asarray(x, dtype=float)
        quad = k_train @ x + np.exp(lam[1]) * x
        return 0.5 * float(np.dot(x, quad)) - float(np.dot(self.train_y, x))

    def inner_grad(self, x, lam):
        k_train, _, _, _ = self._kernels(lam)
        x = np.asarray(x, dtype=float)
        return k_train @ x + np.exp(lam[1]) * x - self.train_y

    def hessian_vec(self, x, lam, v):
        k_train, _, _, _ = self._kernels(lam)
        v = np.asarray(v, dtype=float)
        return k_train @ v + np.exp(lam[1]) * v

    def cross_vec(self, x, lam, v):
        _, _, dk_train, _ = self._kernels(lam)
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.array(
            [float(np.dot(dk_train @ x, v)), np.exp(lam[1]) * float(np.dot(x, v))]
        )

    def _residual(self, x, lam):
        _, k_test, _, _ = self._kernels(lam)
        return self.test_y - k_test @ np.asarray(x, dtype=float)

    def outer_loss(self, x, lam):
        r = self._residual(x, lam)
        return float(np.dot(r, r))

    def outer_grad_params(self, x, lam):
        _, k_test, _, _ = self._kernels(lam)
        return -2.0 * (k_test.T @ self._residual(x, lam))

    def outer_grad_hyper(self, x, lam):
        _, _, _, dk_test = self._kernels(lam)
        r = self._residual(x, lam)
        return np.array([-2.0 * float(np.dot(r, dk_test @ np.asarray(x, dtype=float))), 0.0])

    def strong_convexity(self, lam):
        return float(np.exp(lam[1]))

    def outer_lipschitz(self):
        return self._lipschitz

    def default_lambda0(self):
        return np.array([-np.log(self.n_features), 0.0])

    def validation_loss(self, x, lam=None):
        if self.dist_val is None or lam is None:
            return None
        gamma = np.exp(float(lam[0]))
        k_val = np.exp(-gamma * self.dist_val)
        r = self.val_y - k_val @ np.asarray(x, dtype=float)
        return float(np.dot(r, r))


class MultiFeatureRegLogisticProblem(BilevelProblem):
    """Multinomial logistic regression with one penalty weight per coordinate.

    The flattened weight vector x (n_features * n_classes entries) pairs
    with an equally long lam, each coordinate penalized by
    0.5 e^lam_j x_j^2, which makes the cross derivative of h the diagonal
    e^lam * x.  Outer loss is the multinomial loss on the test split.
    """

    def __init__(self, train_X, train_y, test_X, test_y, val_X=None, val_y=None):
        self.train_X = train_X
        self.test_X = test_X
        self.val_X = val_X
        labels = np.unique(np.concatenate([np.asarray(train_y), np.asarray(test_y)]))
        self.classes = labels
        self.n_classes = labels.shape[0]
        self.n_features = train_X.shape[1]
        self.train_y = np.searchsorted(labels, np.asarray(train_y))
        self.test_y = np.searchsorted(labels, np.asarray(test_y))
        self.val_y = (
            None if val_y is None else np.searchsorted(labels, np.asarray(val_y))
        )
        self.n_params = self.n_features * self.n_classes
        self.n_hyper = self.n_params
        self._lipschitz = float(np.sqrt(2.0) * _row_norms(test_X).sum())

    @classmethod
    def from_dataset(cls, dataset, split):
        X, y = dataset.features, dataset.targets
        return cls(
            X[split.train], y[split.train],
            X[split.test], y[split.test],
            X[split.validation], y[split.validation],
        )

    def _weights(self, x):
        return np.asarray(x, dtype=float).reshape(self.n_features, self.n_classes)

    def _multinomial_loss(self, X, y, x):
        scores = X @ self._weights(x)
        return float(np.sum(logsumexp(scores, axis=1) - scores[np.arange(len(y)), y]))

    def _multinomial_grad(self, X, y, x):
        scores = X @ self._weights(x)
        probs = softmax(scores, axis=1)
        probs[np.arange(len(y)), y] -= 1.0
        return (X.T @ probs).reshape(-1)

    def inner_loss(self, x, lam):
        x = np.asarray(x, dtype=float)
        penalty = 0.5 * float(np.sum(np.exp(lam) * x**2))
        return self._multinomial_loss(self.train_X, self.train_y, x) + penalty

    def inner_grad(self, x, lam):
        x = np.asarray(x, dtype=float)
        return self._multinomial_grad(self.train_X, self.train_y, x) + np.exp(lam) * x

    def hessian_vec(self, x, lam, v):
        v = np.asarray(v, dtype=float)
        scores = self.train_X @ self._weights(x)
        probs = softmax(scores, axis=1)
        zv = self.train_X @ self._weights(v)
        inner = probs * zv - probs * np.sum(probs * zv, axis=1, keepdims=True)
        return (self.train_X.T @ inner).reshape(-1) + np.exp(lam) * v

    def cross_vec(self, x, lam, v):
        return np.exp(lam) * np.asarray(x, dtype=float) * np.asarray(v, dtype=float)

    def outer_loss(self, x, lam):
        return self._multinomial_loss(self.test_X, self.test_y, x)

    def outer_grad_params(self, x, lam):
        return self._multinomial_grad(self.test_X, self.test_y, x)

    def outer_grad_hyper(self, x, lam):
        return np.zeros(self.n_hyper)

    def strong_convexity(self, lam):
        return float(np.exp(np.min(lam)))

    def outer_lipschitz(self):
        return self._lipschitz

    def validation_loss(self, x, lam=None):
        if self.val_X is None:
            return None
        return self._multinomial_loss(self.val_X, self.val_y, x)
