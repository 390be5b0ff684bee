"""Regularized logistic regression over polynomial and distance features.

The classifier represents the probability that a state belongs to the
no-transfer region. Besides raw head-count monomials it uses distances from
the state to the simplex vertices (0, ..., n, ..., 0) with n the current
total; these capture the geometry of a connected region far better than
polynomials alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_LOGIT_CLIP = 30.0  # keeps predictions strictly inside (0, 1)


def feature_names(n_queues: int, blocks: str = "both"):
    names = []
    core = list(range(n_queues - 1))  # interaction subset: drop the last coordinate
    if blocks in ("both", "poly"):
        names += [f"x{i}^{p}" for p in (1, 2, 3) for i in range(n_queues)]
        names += [f"x{i}*x{j}" for i in core for j in core if i < j]
        names += [
            f"x{i}*x{j}*x{k}"
            for i in core
            for j in core
            for k in core
            if i < j < k
        ]
    if blocks in ("both", "dist"):
        names += [f"d{i}^{p}" for p in (1, 2, 3) for i in range(n_queues)]
        names += [f"d{i}*d{j}" for i in core for j in core if i < j]
        names += [
            f"d{i}*d{j}*d{k}"
            for i in core
            for j in core
            for k in core
            if i < j < k
        ]
    return names


def build_features(x, blocks: str = "both") -> np.ndarray:
    """Deterministic feature expansion of one state (bias excluded)."""
    x = np.asarray(x, dtype=float)
    return _expand(x[None, :], blocks)[0]


def _expand(X, blocks: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    R, N = X.shape
    cols = []
    core = list(range(N - 1))

    def block(V):
        for p in (1, 2, 3):
            for i in range(N):
                cols.append(V[:, i] ** p)
        for i in core:
            for j in core:
                if i < j:
                    cols.append(V[:, i] * V[:, j])
        for i in core:
            for j in core:
                for k in core:
                    if i < j < k:
                        cols.append(V[:, i] * V[:, j] * V[:, k])

    if blocks in ("both", "poly"):
        block(X)
    if blocks in ("both", "dist"):
        n = X.sum(axis=1)
        D = np.empty_like(X)
        for i in range(N):
            v = np.zeros((R, N))
            v[:, i] = n
            D[:, i] = np.linalg.norm(X - v, axis=1)
        block(D)
    return np.stack(cols, axis=1)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP)))


@dataclass
class ClassifierModel:
    weights: np.ndarray  # feature weights plus trailing intercept
    mean: np.ndarray
    std: np.ndarray
    blocks: str = "both"
    l2: float = 1e-4
    iterations: int = 0
    final_loss: float = 0.0
    layout_version: str = "poly-dist/1"

    def design(self, X):
        F = _expand(np.asarray(X, dtype=float), self.blocks)
        Z = (F - self.mean) / self.std
        return np.hstack([Z, np.ones((len(Z), 1))])

    def predict(self, x) -> float:
        return float(self.predict_many(np.asarray(x, dtype=float)[None, :])[0])

    def predict_many(self, X) -> np.ndarray:
        return _sigmoid(self.design(X) @ self.weights)

    def logits(self, X) -> np.ndarray:
        return self.design(X) @ self.weights

    def to_jsonable(self):
        return {
            "weights": self.weights.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "blocks": self.blocks,
            "l2": self.l2,
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "layout_version": self.layout_version,
        }

    @classmethod
    def from_jsonable(cls, obj):
        return cls(
            np.asarray(obj["weights"]),
            np.asarray(obj["mean"]),
            np.asarray(obj["std"]),
            obj["blocks"],
            obj["l2"],
            obj["iterations"],
            obj["final_loss"],
            obj["layout_version"],
        )


def _loss_grad_hess(D, y, w, l2):
    z = D @ w
    p = _sigmoid(z)
    # stable log-likelihood via logaddexp
    nll = float(np.sum(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
    grad = D.T @ (p - y) + l2 * w
    Wd = p * (1.0 - p)
    H = D.T @ (D * Wd[:, None]) + l2 * np.eye(len(w))
    return nll, grad, H


def train(states, labels, l2: float = 1e-4, blocks: str = "both",
          grad_tol: float = 1e-8, max_iter: int = 500) -> ClassifierModel:
    """Fit by damped Newton iterations on the L2-regularized log-loss."""
    X = np.asarray(states, dtype=float)
    y = np.asarray(labels, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite training features")
    F = _expand(X, blocks)
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    model = ClassifierModel(np.zeros(F.shape[1] + 1), mean, std, blocks, l2)
    D = model.design(X)
    w = model.weights
    loss, grad, H = _loss_grad_hess(D, y, w, l2)
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) <= grad_tol:
            break
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            w_new = w - t * step
            loss_new, grad_new, H_new = _loss_grad_hess(D, y, w_new, l2)
            if loss_new <= loss - 1e-12 * t or loss_new < loss + 1e-14:
                w, loss, grad, H = w_new, loss_new, grad_new, H_new
                break
            t *= 0.5
        else:
            break
    model.weights = w
    model.iterations = it
    model.final_loss = loss
    return model


def loss_and_grad(model: ClassifierModel, states, labels, weights=None):
    """Training objective and gradient at arbitrary weights (for checks)."""
    D = model.design(np.asarray(states, dtype=float))
    y = np.asarray(labels, dtype=float)
    w = model.weights if weights is None else np.asarray(weights)
    nll, grad, _ = _loss_grad_hess(D, y, w, model.l2)
    return nll, grad
