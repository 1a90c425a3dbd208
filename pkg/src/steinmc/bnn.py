"""One-hidden-layer Bayesian neural network regression potential.

Parameters are a single flat vector (first-layer weights and biases, output
weights, output bias) so the ensemble samplers can treat a network as one
particle.  Gradients are manual backprop through the ReLU layer; minibatch
gradients rescale the batch term by N / |batch|.  Targets are standardized
for sampling and predictions are mapped back to original units.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .targets import TargetModel

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class RegressionDataset:
    """Standardized train/test split of a numeric regression table."""

    features_train: np.ndarray
    targets_train: np.ndarray
    features_test: np.ndarray
    targets_test: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float
    split_seed: int
    name: str = "dataset"

    @property
    def n_train(self) -> int:
        return self.features_train.shape[0]

    @property
    def n_features(self) -> int:
        return self.features_train.shape[1]

    def destandardize_targets(self, y_std: np.ndarray) -> np.ndarray:
        return y_std * self.target_std + self.target_mean


def load_arrays(
    features: np.ndarray,
    targets: np.ndarray,
    split_fraction: float = 0.9,
    seed: int = 0,
    name: str = "dataset",
) -> RegressionDataset:
    """Standardize and split in-memory arrays (training stats only)."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float).ravel()
    n = features.shape[0]
    if n < 20:
        raise ValueError("need at least 20 rows")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must be in (0, 1)")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(split_fraction * n))
    train_idx, test_idx = order[:n_train], order[n_train:]

    x_train, x_test = features[train_idx], features[test_idx]
    y_train, y_test = targets[train_idx], targets[test_idx]

    f_std = x_train.std(axis=0, ddof=0)
    keep = f_std > 0
    if not np.all(keep):
        dropped = np.flatnonzero(~keep)
        warnings.warn(f"dropping zero-variance feature columns {dropped.tolist()}")
        x_train, x_test = x_train[:, keep], x_test[:, keep]
        f_std = f_std[keep]
    f_mean = x_train.mean(axis=0)

    t_mean = float(y_train.mean())
    t_std = float(y_train.std(ddof=0))
    if t_std == 0:
        raise ValueError("target column has zero variance")

    return RegressionDataset(
        features_train=(x_train - f_mean) / f_std,
        targets_train=(y_train - t_mean) / t_std,
        features_test=(x_test - f_mean) / f_std,
        targets_test=(y_test - t_mean) / t_std,
        feature_mean=f_mean,
        feature_std=f_std,
        target_mean=t_mean,
        target_std=t_std,
        split_seed=seed,
        name=name,
    )


def load_csv(
    path,
    target_column: str,
    split_fraction: float = 0.9,
    seed: int = 0,
) -> RegressionDataset:
    """Parse a numeric CSV with a header row into a standardized split."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if target_column not in header:
            raise ValueError(f"target column {target_column!r} not in header {header}")
        t_idx = header.index(target_column)
        rows = []
        for r, row in enumerate(reader, start=2):
            vals = []
            for c, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"non-numeric cell at row {r}, column {header[c]!r}: {cell!r}"
                    ) from None
            rows.append(vals)
    data = np.asarray(rows, dtype=float)
    targets = data[:, t_idx]
    features = np.delete(data, t_idx, axis=1)
    return load_arrays(
        features,
        targets,
        split_fraction=split_fraction,
        seed=seed,
        name=os.path.splitext(os.path.basename(str(path)))[0],
    )


@dataclass
class BnnPotential:
    """Gaussian-prior ReLU network potential on standardized targets."""

    input_dim: int
    hidden_dim: int = 50
    prior_std: float = 1.0
    noise_std: float = 0.5

    def __post_init__(self):
        if self.noise_std <= 0 or self.prior_std <= 0:
            raise ValueError("prior_std and noise_std must be positive")

    @property
    def n_params(self) -> int:
        return self.hidden_dim * (self.input_dim + 1) + self.hidden_dim + 1

    def unpack(self, theta: np.ndarray):
        h, p = self.hidden_dim, self.input_dim
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape[-1]}")
        i = 0
        w1 = theta[..., i : i + h * p].reshape(*theta.shape[:-1], h, p)
        i += h * p
        b1 = theta[..., i : i + h]
        i += h
        w2 = theta[..., i : i + h]
        i += h
        b2 = theta[..., i]
        return w1, b1, w2, b2

    def init_particles(self, n_particles: int, rng: np.random.Generator) -> np.ndarray:
        """Initial draws: fan-in-scaled first layer, prior-scale elsewhere."""
        h, p = self.hidden_dim, self.input_dim
        w1 = rng.standard_normal((n_particles, h * p)) / np.sqrt(p)
        b1 = rng.standard_normal((n_particles, h)) / np.sqrt(p)
        w2 = rng.standard_normal((n_particles, h)) / np.sqrt(h)
        b2 = rng.standard_normal((n_particles, 1))
        return np.concatenate([w1, b1, w2, b2], axis=1)

    def forward(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Network outputs; theta (K, P) or (P,), x (B, p).  Returns (K, B) or (B,)."""
        single = np.ndim(theta) == 1
        theta = np.atleast_2d(theta)
        w1, b1, w2, b2 = self.unpack(theta)
        pre = np.einsum("khp,bp->kbh", w1, x) + b1[:, None, :]
        act = np.maximum(pre, 0.0)
        out = np.einsum("kbh,kh->kb", act, w2) + b2[:, None]
        return out[0] if single else out

    def potential(self, theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_total: int) -> float:
        """Scalar potential (negative log posterior up to constants) for one particle."""
        theta = np.asarray(theta, dtype=float)
        pred = self.forward(theta, x)
        scale = n_total / x.shape[0]
        data = 0.5 * scale * float(np.sum((pred - y) ** 2)) / self.noise_std**2
        prior = 0.5 * float(np.dot(theta, theta)) / self.prior_std**2
        return prior + data

    def potential_grad(
        self, theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_total: int
    ) -> np.ndarray:
        """Gradient of the potential; theta (K, P) or (P,), batch (x, y).

        Manual backprop: residual -> output layer -> ReLU mask -> first layer,
        scaled by N/|batch| and the noise precision, plus the Gaussian prior
        term theta / prior_std^2.
        """
        single = np.ndim(theta) == 1
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        w1, b1, w2, b2 = self.unpack(theta)

        pre = np.einsum("khp,bp->kbh", w1, x) + b1[:, None, :]
        mask = pre > 0
        act = np.where(mask, pre, 0.0)
        out = np.einsum("kbh,kh->kb", act, w2) + b2[:, None]

        scale = n_total / x.shape[0] / self.noise_std**2
        resid = scale * (out - y[None, :])  # (K, B)

        g_w2 = np.einsum("kb,kbh->kh", resid, act)
        g_b2 = resid.sum(axis=1)
        g_act = resid[:, :, None] * w2[:, None, :] * mask
        g_w1 = np.einsum("kbh,bp->khp", g_act, x)
        g_b1 = g_act.sum(axis=1)

        k = theta.shape[0]
        data_grad = np.concatenate(
            [g_w1.reshape(k, -1), g_b1, g_w2, g_b2[:, None]], axis=1
        )
        grad = data_grad + theta / self.prior_std**2
        return grad[0] if single else grad


@dataclass
class BnnTarget(TargetModel):
    """Sampler-facing adapter: score is the negative minibatch potential gradient.

    ``resample_batch`` draws fresh batch indices; the ensemble runner calls it
    once per iteration so all particles share a batch.
    """

    potential: BnnPotential = None
    dataset: RegressionDataset = None
    batch_size: int = 100
    _batch: np.ndarray = field(default=None, repr=False)

    @classmethod
    def create(cls, potential: BnnPotential, dataset: RegressionDataset, batch_size: int):
        batch_size = min(batch_size, dataset.n_train)
        obj = cls(
            name=f"bnn-{dataset.name}",
            dim=potential.n_params,
            log_density=None,
            grad_log_density=None,
            potential=potential,
            dataset=dataset,
            batch_size=batch_size,
        )
        obj._batch = np.arange(batch_size)
        obj.log_density = obj._log_density
        obj.grad_log_density = obj._score
        obj.grad_log_density_batch = obj._score
        return obj

    def resample_batch(self, rng: np.random.Generator):
        self._batch = rng.choice(self.dataset.n_train, size=self.batch_size, replace=False)

    def _batch_xy(self):
        return (
            self.dataset.features_train[self._batch],
            self.dataset.targets_train[self._batch],
        )

    def _log_density(self, theta):
        x, y = self._batch_xy()
        return -self.potential.potential(theta, x, y, self.dataset.n_train)

    def _score(self, theta):
        x, y = self._batch_xy()
        return -self.potential.potential_grad(theta, x, y, self.dataset.n_train)


def predict(
    potential: BnnPotential,
    particles: np.ndarray,
    dataset: RegressionDataset,
    x_std: np.ndarray,
):
    """Equal-weight Gaussian-mixture predictive over parameter particles.

    Returns (mean, std, per_point_log_likelihood callable) in ORIGINAL target
    units; the log likelihood of observed values uses a log-sum-exp over the
    mixture components.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    preds_std = potential.forward(particles, x_std)  # (K, B)
    preds = dataset.destandardize_targets(preds_std)
    comp_std = potential.noise_std * dataset.target_std

    mean = preds.mean(axis=0)
    std = np.sqrt(comp_std**2 + preds.var(axis=0))

    def log_likelihood(y_original: np.ndarray) -> np.ndarray:
        y = np.asarray(y_original, dtype=float)
        z = (y[None, :] - preds) / comp_std
        logs = -0.5 * z * z - np.log(comp_std) - 0.5 * _LOG_2PI
        m = logs.max(axis=0)
        return m + np.log(np.mean(np.exp(logs - m), axis=0))

    return mean, std, log_likelihood


def evaluate(
    potential: BnnPotential, particles: np.ndarray, dataset: RegressionDataset
) -> dict:
    """Test RMSE and average per-point log likelihood in original units."""
    mean, _, loglik = predict(potential, particles, dataset, dataset.features_test)
    y_true = dataset.destandardize_targets(dataset.targets_test)
    rmse = float(np.sqrt(np.mean((mean - y_true) ** 2)))
    ll = float(np.mean(loglik(y_true)))
    return {"rmse": rmse, "test_ll": ll}
