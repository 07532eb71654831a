"""Shared test oracles: finite differences, plain-numpy reference math."""
from __future__ import annotations

import numpy as np

from disue import nn
from disue.data import ClientDataset
from disue.orchestrator import ClientShard, FederatedData


def numeric_gradient(f, vec: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        up, down = vec.copy(), vec.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2.0 * h)
    return grad


def model_gradient(model, loss_fn) -> np.ndarray:
    """Autodiff gradient of loss_fn(model) flattened in parameter order."""
    loss = loss_fn(model)
    nn.backward(loss)
    return np.concatenate([p.grad.ravel() for p in model.parameters()])


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case |a-b| / max(1, |a|, |b|), the gradcheck metric."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def ref_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ref_kl(p: np.ndarray, q: np.ndarray) -> float:
    """Row-mean KL with the same clamping contract as the library."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    q = np.maximum(q, 1e-12)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, 1e-12)) - np.log(q)), 0.0)
    return float(terms.sum(axis=1).mean())


def ref_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    probs = ref_softmax(np.atleast_2d(logits))
    return float(-np.log(probs[np.arange(len(labels)), labels]).mean())


def identical_client_data(n_clients: int, per_class: int, num_classes: int = 4) -> FederatedData:
    """Every client holds the same 2D shard: the degenerate IID regime."""
    rng = np.random.default_rng(0)
    feats = []
    labels = []
    for c in range(num_classes):
        center = np.array([np.cos(2 * np.pi * c / num_classes), np.sin(2 * np.pi * c / num_classes)])
        feats.append(center + 0.3 * rng.normal(size=(per_class, 2)))
        labels.append(np.full(per_class, c, dtype=np.int64))
    X = np.concatenate(feats)
    y = np.concatenate(labels)
    clients = []
    for cid in range(n_clients):
        train = ClientDataset(cid, X.copy(), y.copy())
        holdout = ClientDataset(cid, X[:8].copy(), y[:8].copy())
        clients.append(ClientShard(cid, train, holdout))
    order = np.random.default_rng(1).permutation(X.shape[0])
    return FederatedData(clients=clients, test_features=X[order], test_labels=y[order], num_classes=num_classes, feature_dim=2)


def well_separated_classifier(rng: np.random.Generator, in_dim: int, hidden: tuple, classes: int, batch: int):
    """A random model and batch whose ReLU preactivations stay away from 0.

    Finite differencing is only valid away from the kink, so resample until
    every hidden preactivation has magnitude above 1e-3.
    """
    from disue.nn import Classifier

    for _ in range(200):
        model = Classifier(in_dim, classes, hidden=hidden, rng=rng)
        x = rng.standard_normal((batch, in_dim))
        ok = True
        h = x
        for layer in model.layers[:-1]:
            pre = h @ layer.w.data + layer.b.data
            if np.min(np.abs(pre)) < 1e-3:
                ok = False
                break
            h = np.maximum(pre, 0.0)
        if ok:
            return model, x
    raise AssertionError("could not build a kink-free test model")
