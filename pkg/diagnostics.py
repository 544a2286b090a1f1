"""
Diagnostics for hotspot classifiers and the federated objective
- accuracy / TPR / FPR from confusion counts
- sampling estimators for the smoothness, gradient-bound, variance and
  public-dataset-consistency constants of the convergence analysis
- executable descent-inequality and rate checks on convex surrogates
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field

from litho_data import Dataset
from nn_engine import ModelSpec, ParameterSet, backward, params_to_vector, predict_logits, vector_to_params

logger = logging.getLogger(__name__)

DESCENT_TOLERANCE = 1e-10
RATE_CHECKPOINTS = (50, 100, 200)
RATE_MAX_RATIO = 0.75
# Minibatches averaged per point for the gradient variance estimates
VARIANCE_BATCHES = 8


class DiagnosticsError(ValueError):
    """Precondition of a diagnostic check does not hold"""


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

class ConfusionCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tp + other.tp, fp=self.fp + other.fp,
                               tn=self.tn + other.tn, fn=self.fn + other.fn)


class ClassificationMetrics(BaseModel):
    """None marks an undefined rate (zero denominator)"""

    model_config = ConfigDict(frozen=True)

    accuracy: Optional[float] = None
    tpr: Optional[float] = None
    fpr: Optional[float] = None


class MetricsRecord(BaseModel):
    """Evaluation of one round"""

    model_config = ConfigDict(frozen=True)

    round: int = Field(ge=0)
    accuracy: Optional[float] = None
    tpr: Optional[float] = None
    fpr: Optional[float] = None
    objective: Optional[float] = None
    participants: int = Field(0, ge=0)
    uplink_floats: int = Field(0, ge=0)
    wall_time: float = 0.0


def confusion_from_predictions(predictions, labels) -> ConfusionCounts:
    """Hotspot (label 1) is the positive class"""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DiagnosticsError(f"{predictions.shape} predictions for {labels.shape} labels")
    positive, actual = predictions == 1, labels == 1
    return ConfusionCounts(
        tp=int(np.sum(positive & actual)),
        fp=int(np.sum(positive & ~actual)),
        tn=int(np.sum(~positive & ~actual)),
        fn=int(np.sum(~positive & actual)),
    )


def confusion_from_logits(logits, labels) -> ConfusionCounts:
    # argmax resolves ties to class 0 (non-hotspot)
    return confusion_from_predictions(np.argmax(np.asarray(logits), axis=1), labels)


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


def compute_metrics(c: ConfusionCounts) -> ClassificationMetrics:
    return ClassificationMetrics(
        accuracy=_ratio(c.tp + c.tn, c.total),
        tpr=_ratio(c.tp, c.tp + c.fn),
        fpr=_ratio(c.fp, c.fp + c.tn),
    )


# ---------------------------------------------------------------------------
# Gradient oracles
# ---------------------------------------------------------------------------

class GradientOracle(ABC):
    """Flat-vector view of a training objective split into a local (CE) part and a distillation part"""

    n_samples: int = 1
    smoothness: Optional[float] = None

    @abstractmethod
    def sample_point(self, rng: np.random.Generator) -> np.ndarray:
        """Random parameter vector in the region of interest"""

    @abstractmethod
    def grad_local(self, w: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        """Gradient of the local loss on all samples, or on the rows `idx`"""

    def grad_distill(self, w: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        return np.zeros_like(w)


class ConvexSurrogate(GradientOracle):
    """Convex problem with a known minimizer and smoothness constant"""

    minimizer: np.ndarray
    smoothness: float

    @abstractmethod
    def value(self, w: np.ndarray) -> float:
        ...

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.grad_local(w)

    @property
    def min_value(self) -> float:
        return self.value(self.minimizer)


class QuadraticSurrogate(ConvexSurrogate):
    """F(w) = 0.5 (w - w*)^T A (w - w*) with A symmetric positive semi-definite"""

    def __init__(self, hessian, minimizer=None, scale: float = 1.0):
        hessian = np.atleast_2d(np.asarray(hessian, dtype=np.float64))
        if hessian.shape[0] != hessian.shape[1] or not np.allclose(hessian, hessian.T):
            raise DiagnosticsError("quadratic surrogate needs a symmetric square Hessian")
        eigenvalues = np.linalg.eigvalsh(hessian)
        if eigenvalues.min() < -1e-12:
            raise DiagnosticsError("quadratic surrogate must be convex")
        self.hessian = hessian
        self.minimizer = (np.zeros(hessian.shape[0]) if minimizer is None
                          else np.asarray(minimizer, dtype=np.float64).reshape(-1))
        self.smoothness = float(eigenvalues.max())
        self.scale = scale

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator,
               eigen_range: Tuple[float, float] = (1.0, 4.0)) -> "QuadraticSurrogate":
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigenvalues = rng.uniform(*eigen_range, size=dim)
        if dim > 1:
            eigenvalues[0], eigenvalues[1] = eigen_range
        hessian = (q * eigenvalues) @ q.T
        return cls((hessian + hessian.T) / 2.0, rng.standard_normal(dim))

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    def value(self, w) -> float:
        d = np.asarray(w, dtype=np.float64) - self.minimizer
        return float(0.5 * d @ self.hessian @ d)

    def grad_local(self, w, idx=None) -> np.ndarray:
        return self.hessian @ (np.asarray(w, dtype=np.float64) - self.minimizer)

    def sample_point(self, rng) -> np.ndarray:
        return self.minimizer + self.scale * rng.standard_normal(self.dim)


class LinearSurrogate(GradientOracle):
    """F(w) = c . w (constant gradient, zero smoothness)"""

    def __init__(self, coefficients, scale: float = 1.0):
        self.coefficients = np.atleast_1d(np.asarray(coefficients, dtype=np.float64))
        self.smoothness = 0.0
        self.scale = scale

    def value(self, w) -> float:
        return float(self.coefficients @ np.asarray(w, dtype=np.float64))

    def grad_local(self, w, idx=None) -> np.ndarray:
        return self.coefficients.copy()

    def sample_point(self, rng) -> np.ndarray:
        return self.scale * rng.standard_normal(self.coefficients.size)


class LogisticSurrogate(ConvexSurrogate):
    """L2-regularized logistic regression, labels in {0, 1}"""

    def __init__(self, features, labels, reg: float = 0.1, scale: float = 1.0, newton_steps: int = 50):
        if reg <= 0:
            raise DiagnosticsError(f"logistic surrogate needs reg > 0, got {reg}")
        self.features = np.asarray(features, dtype=np.float64)
        self.signs = 2.0 * np.asarray(labels, dtype=np.float64) - 1.0
        self.reg = reg
        self.scale = scale
        self.n_samples = self.features.shape[0]
        gram = self.features.T @ self.features / self.n_samples
        self.smoothness = float(np.linalg.eigvalsh(gram).max() / 4.0 + reg)
        self.minimizer = self._newton(newton_steps)

    @classmethod
    def from_dataset(cls, d, reg: float = 0.1, **kwargs) -> "LogisticSurrogate":
        """Row and column pattern densities plus a bias feature"""
        images = d.images
        features = np.concatenate(
            [images.mean(axis=2), images.mean(axis=1), np.ones((len(d), 1))], axis=1
        )
        return cls(features, d.labels, reg, **kwargs)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def _margins(self, w, idx=None):
        x = self.features if idx is None else self.features[idx]
        s = self.signs if idx is None else self.signs[idx]
        return x, s, s * (x @ w)

    def value(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        _, _, margins = self._margins(w)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.reg * w @ w)

    def grad_local(self, w, idx=None) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        x, s, margins = self._margins(w, idx)
        weights = -s / (1.0 + np.exp(margins))
        return x.T @ weights / x.shape[0] + self.reg * w

    def _newton(self, steps: int) -> np.ndarray:
        w = np.zeros(self.dim)
        for _ in range(steps):
            p = 1.0 / (1.0 + np.exp(-(self.features @ w)))
            hessian = (self.features.T * (p * (1 - p))) @ self.features / self.n_samples + self.reg * np.eye(self.dim)
            step = np.linalg.solve(hessian, self.grad_local(w))
            w = w - step
            if np.linalg.norm(step) < 1e-14:
                break
        return w

    def sample_point(self, rng) -> np.ndarray:
        return self.minimizer + self.scale * rng.standard_normal(self.dim)


class NetworkOracle(GradientOracle):
    """CE and distillation gradients of a CNN, flattened, around a base parameter set"""

    def __init__(self, spec, params, dataset, target_logits=None, scale: float = 0.05):
        self.spec = spec
        self.template = params
        self.center = params_to_vector(params)
        self.inputs = dataset.inputs()
        self.labels = dataset.labels
        self.target_logits = None if target_logits is None else np.asarray(target_logits, dtype=np.float64)
        self.n_samples = len(dataset)
        self.scale = scale

    def sample_point(self, rng) -> np.ndarray:
        return self.center + self.scale * rng.standard_normal(self.center.size)

    def _grad(self, w, idx, distill: bool) -> np.ndarray:
        params = vector_to_params(w, self.template)
        x = self.inputs if idx is None else self.inputs[idx]
        y = self.labels if idx is None else self.labels[idx]
        if distill:
            target = self.target_logits if idx is None else self.target_logits[idx]
            grads = backward(self.spec, params, x, y, target, lam=1.0, include_ce=False)
        else:
            grads = backward(self.spec, params, x, y)
        return params_to_vector(grads)

    def grad_local(self, w, idx=None) -> np.ndarray:
        return self._grad(w, idx, distill=False)

    def grad_distill(self, w, idx=None) -> np.ndarray:
        if self.target_logits is None:
            return np.zeros_like(w)
        return self._grad(w, idx, distill=True)


# ---------------------------------------------------------------------------
# Constant estimation
# ---------------------------------------------------------------------------

class ConvergenceConstants(BaseModel):
    """Sampling-based lower-bound estimates of the analysis constants"""

    model_config = ConfigDict(frozen=True)

    L_l: float = Field(0.0, ge=0.0)
    L_d: float = Field(0.0, ge=0.0)
    G_l: float = Field(0.0, ge=0.0)
    G_d: float = Field(0.0, ge=0.0)
    sigma_l2: float = Field(0.0, ge=0.0)
    sigma_d2: float = Field(0.0, ge=0.0)
    M_l: float = Field(0.0, ge=0.0)
    M_d: float = Field(0.0, ge=0.0)
    lam: float = Field(0.0, ge=0.0)
    n_pairs: int = Field(0, ge=0)

    @computed_field
    @property
    def L(self) -> float:
        return self.L_l + self.lam * self.L_d


def _lipschitz(g1: np.ndarray, g2: np.ndarray, distance: float) -> float:
    return float(np.linalg.norm(g1 - g2) / distance) if distance > 0 else 0.0


def estimate_constants(oracle: GradientOracle, lam: float, n_pairs: int, seed: int = 0,
                       batch_size: Optional[int] = None, public: Optional[GradientOracle] = None,
                       variance_batches: int = VARIANCE_BATCHES) -> ConvergenceConstants:
    """Max-over-pairs estimates of L_l, L_d, G_l, G_d, sigma_l^2, sigma_d^2.

    Pair p draws from its own stream (seed, p), so adding pairs can only raise
    the estimates. The variance terms are the mean squared deviation of
    `variance_batches` minibatch gradients of size `batch_size` from the
    full-batch gradient at the pair's first point, maximised over pairs;
    without a minibatch size they are zero. With `public`, M_l and M_d are
    taken over the same points.
    """
    if n_pairs < 2:
        raise DiagnosticsError(f"need at least 2 parameter pairs, got {n_pairs}")
    if variance_batches < 1:
        raise DiagnosticsError(f"need at least 1 variance minibatch, got {variance_batches}")
    values = dict(L_l=0.0, L_d=0.0, G_l=0.0, G_d=0.0, sigma_l2=0.0, sigma_d2=0.0, M_l=0.0, M_d=0.0)
    for pair in range(n_pairs):
        rng = np.random.default_rng([seed, pair])
        w1, w2 = oracle.sample_point(rng), oracle.sample_point(rng)
        distance = float(np.linalg.norm(w1 - w2))
        gl1, gl2 = oracle.grad_local(w1), oracle.grad_local(w2)
        gd1, gd2 = oracle.grad_distill(w1), oracle.grad_distill(w2)
        values["L_l"] = max(values["L_l"], _lipschitz(gl1, gl2, distance))
        values["L_d"] = max(values["L_d"], _lipschitz(gd1, gd2, distance))
        values["G_l"] = max(values["G_l"], float(np.linalg.norm(gl1)), float(np.linalg.norm(gl2)))
        values["G_d"] = max(values["G_d"], float(np.linalg.norm(gd1)), float(np.linalg.norm(gd2)))
        if batch_size is not None and batch_size < oracle.n_samples:
            sq_l, sq_d = [], []
            for _ in range(variance_batches):
                idx = rng.choice(oracle.n_samples, size=batch_size, replace=False)
                sq_l.append(float(np.sum((oracle.grad_local(w1, idx) - gl1) ** 2)))
                sq_d.append(float(np.sum((oracle.grad_distill(w1, idx) - gd1) ** 2)))
            values["sigma_l2"] = max(values["sigma_l2"], float(np.mean(sq_l)))
            values["sigma_d2"] = max(values["sigma_d2"], float(np.mean(sq_d)))
        if public is not None:
            for w, gl, gd in ((w1, gl1, gd1), (w2, gl2, gd2)):
                values["M_l"] = max(values["M_l"], float(np.linalg.norm(gl - public.grad_local(w))))
                values["M_d"] = max(values["M_d"], float(np.linalg.norm(gd - public.grad_distill(w))))
    constants = ConvergenceConstants(**values, lam=lam, n_pairs=n_pairs)
    logger.debug(f"Estimated constants over {n_pairs} pairs: {constants.model_dump()}")
    return constants


def estimate_public_gap(spec, params, private_shard, public, n_points: int = 4, scale: float = 0.05,
                        seed: int = 0) -> Tuple[float, float]:
    """(M_l, M_d): max gradient gap between a private shard and the public set.

    Distillation targets on each set are the base model's own logits, so the
    distillation gap measures how differently the two sets pull the model away
    from its current outputs.
    """
    if len(private_shard) == 0 or len(public) == 0:
        raise DiagnosticsError("public gap needs two non-empty datasets")
    private_oracle = NetworkOracle(spec, params, private_shard,
                                   predict_logits(spec, params, private_shard.inputs()), scale)
    public_oracle = NetworkOracle(spec, params, public, predict_logits(spec, params, public.inputs()), scale)
    m_l = m_d = 0.0
    for point in range(n_points):
        w = private_oracle.sample_point(np.random.default_rng([seed, point]))
        m_l = max(m_l, float(np.linalg.norm(private_oracle.grad_local(w) - public_oracle.grad_local(w))))
        m_d = max(m_d, float(np.linalg.norm(private_oracle.grad_distill(w) - public_oracle.grad_distill(w))))
    return m_l, m_d


# ---------------------------------------------------------------------------
# Descent and rate checks
# ---------------------------------------------------------------------------

@dataclass
class DescentStep:
    step: int
    value: float
    next_value: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.next_value <= self.bound + DESCENT_TOLERANCE * max(1.0, abs(self.bound))


@dataclass
class DescentReport:
    eta: float
    smoothness: float
    steps: List[DescentStep] = field(default_factory=list)

    @property
    def violations(self) -> List[int]:
        return [s.step for s in self.steps if not s.holds]

    @property
    def passed(self) -> bool:
        return not self.violations


def check_descent(surrogate: ConvexSurrogate, eta: float, steps: int, w0=None, seed: int = 0) -> DescentReport:
    """Gradient descent with F(w') <= F(w) - eta |g|^2 + (eta^2 L / 2) |g|^2 checked at every step"""
    smoothness = surrogate.smoothness
    if eta < 0 or (smoothness > 0 and eta * smoothness >= 1.0):
        raise DiagnosticsError(f"need 0 <= eta < 1/L, got eta={eta}, L={smoothness}")
    w = surrogate.sample_point(np.random.default_rng(seed)) if w0 is None else np.asarray(w0, dtype=np.float64)
    report = DescentReport(eta, smoothness)
    value = surrogate.value(w)
    for step in range(steps):
        g = surrogate.gradient(w)
        g2 = float(g @ g)
        w = w - eta * g
        next_value = surrogate.value(w)
        bound = value - eta * g2 + 0.5 * eta * eta * smoothness * g2
        report.steps.append(DescentStep(step, value, next_value, bound))
        value = next_value
    if not report.passed:
        logger.warning(f"descent inequality violated at steps {report.violations[:5]}")
    return report


def rate_bound(initial_distance_sq: float, eta: float, smoothness: float, T: int, grad_sq_sum: float) -> float:
    """|w0 - w*|^2 / (2 eta T) + (eta L / (2T)) * sum_{t<T} |grad F(w_t)|^2"""
    if eta <= 0 or T < 1:
        raise DiagnosticsError(f"need eta > 0 and T >= 1, got eta={eta}, T={T}")
    return initial_distance_sq / (2.0 * eta * T) + eta * smoothness / (2.0 * T) * grad_sq_sum


@dataclass
class RateCheckpoint:
    T: int
    average_gap: float
    bound: float
    ratio: Optional[float]

    @property
    def bound_holds(self) -> bool:
        return self.average_gap <= self.bound * (1.0 + DESCENT_TOLERANCE)

    @property
    def ratio_holds(self) -> bool:
        return self.ratio is None or self.ratio <= RATE_MAX_RATIO


@dataclass
class RateReport:
    eta: float
    smoothness: float
    gaps: np.ndarray
    checkpoints: List[RateCheckpoint]

    @property
    def failures(self) -> List[str]:
        out = []
        for c in self.checkpoints:
            if not c.bound_holds:
                out.append(f"T={c.T}: average gap {c.average_gap:.6e} exceeds bound {c.bound:.6e}")
            if not c.ratio_holds:
                out.append(f"T={c.T}: A(2T)/A(T) = {c.ratio:.4f} > {RATE_MAX_RATIO}")
        return out

    @property
    def passed(self) -> bool:
        return not self.failures


def check_rate(surrogate: ConvexSurrogate, eta: float, checkpoints: Sequence[int] = RATE_CHECKPOINTS,
                   w0=None, seed: int = 0) -> RateReport:
    """Average optimality gap A(T) of gradient descent against the rate bound, plus the halving test"""
    if eta <= 0:
        raise DiagnosticsError(f"need eta > 0, got {eta}")
    w = surrogate.sample_point(np.random.default_rng(seed)) if w0 is None else np.asarray(w0, dtype=np.float64)
    horizon = 2 * max(checkpoints)
    optimum = surrogate.min_value
    initial_distance_sq = float(np.sum((w - surrogate.minimizer) ** 2))
    gaps = np.empty(horizon)
    grad_sq = np.empty(horizon)
    for t in range(horizon):
        g = surrogate.gradient(w)
        gaps[t] = surrogate.value(w) - optimum
        grad_sq[t] = float(g @ g)
        w = w - eta * g

    def average(T: int) -> float:
        return float(gaps[:T].mean())

    results = []
    for T in checkpoints:
        a_t, a_2t = average(T), average(2 * T)
        ratio = a_2t / a_t if a_t > 0 else None
        bound = rate_bound(initial_distance_sq, eta, surrogate.smoothness, T, float(grad_sq[:T].sum()))
        results.append(RateCheckpoint(T, a_t, bound, ratio))
    report = RateReport(eta, surrogate.smoothness, gaps, results)
    for failure in report.failures:
        logger.warning(f"rate check: {failure}")
    return report


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def evaluate_pooled(models: Sequence[Tuple[ModelSpec, ParameterSet]],
                    test: Dataset) -> Tuple[ConfusionCounts, ClassificationMetrics]:
    """Confusion counts of every (spec, params) model on `test`, pooled"""
    if len(test) == 0:
        raise DiagnosticsError("test set is empty")
    inputs = test.inputs()
    counts = ConfusionCounts()
    for spec, params in models:
        counts = counts + confusion_from_logits(predict_logits(spec, params, inputs), test.labels)
    return counts, compute_metrics(counts)
