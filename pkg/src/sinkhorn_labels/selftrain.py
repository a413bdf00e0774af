"""Desk-scale self-training with transport-based label assignment.

A small ReLU network is trained on synthetic 2-D data with a FixMatch-style
split: weak views supply predictions and labeled-loss targets, strong views
receive the unlabeled consistency loss. Soft labels for the unlabeled batch
come either from the persisted allocation scalings (the transport assigner),
from confidence thresholding, from plain pseudo-labeling, or not at all
(supervised baseline). After each model update the visited rows of the cost
matrix are refreshed with - log p and the allocation is re-solved with the
scheduled mass floor, warm-started from the previous scalings.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .allocation import (
    C_MAX,
    P_FLOOR,
    AllocationConfig,
    AllocationSchedule,
    CostMatrix,
    SoftLabel,
    _check_simplex_rows,
    allocate,
    allocation_summary,
    build_padded_problem,
    schedule_value,
    soft_labels,
)
from .errors import InvalidInputError, NumericalFailureError
from .sinkhorn import ScalingVars, transport_plan

# Sentinel label for unlabeled rows.
UNLABELED = -1

ASSIGNERS = ("sla", "confidence_threshold", "pseudo_label", "supervised_only")

DATASET_KINDS = ("gaussian_blobs", "two_moons", "concentric_circles")

# Vacuously small threshold: every row clears it, so thresholding
# degenerates to argmax pseudo-labeling.
_VACUOUS_TAU = 1e-300


@dataclass
class Dataset:
    """Synthetic classification data with a partially labeled train split.

    labels uses UNLABELED (-1) for rows whose class is hidden from the
    trainer; labeled_indices lists exactly the visible rows. The test
    split is disjoint from the train split by construction.
    """

    features: np.ndarray
    labels: np.ndarray
    labeled_indices: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.labeled_indices = np.asarray(self.labeled_indices, dtype=int)
        self.test_features = np.asarray(self.test_features, dtype=float)
        self.test_labels = np.asarray(self.test_labels, dtype=int)
        if self.features.ndim != 2 or not np.isfinite(self.features).all():
            raise InvalidInputError("features must be a finite 2-D matrix")
        n, d = self.features.shape
        if self.labels.shape != (n,):
            raise InvalidInputError("labels must have one entry per train row")
        if self.test_features.ndim != 2 or self.test_features.shape[1] != d:
            raise InvalidInputError("test_features must be 2-D with matching width")
        if not np.isfinite(self.test_features).all():
            raise InvalidInputError("test_features must be finite")
        if self.test_labels.shape != (self.test_features.shape[0],):
            raise InvalidInputError("test_labels must have one entry per test row")
        mask = np.zeros(n, dtype=bool)
        if self.labeled_indices.size:
            if (self.labeled_indices < 0).any() or (self.labeled_indices >= n).any():
                raise InvalidInputError("labeled_indices out of range")
            mask[self.labeled_indices] = True
            if mask.sum() != self.labeled_indices.size:
                raise InvalidInputError("labeled_indices must be unique")
        if ((self.labels >= 0) != mask).any():
            raise InvalidInputError(
                "labels must be UNLABELED exactly off labeled_indices"
            )
        if (self.labels < UNLABELED).any() or (self.test_labels < 0).any():
            raise InvalidInputError("labels must be class indices or UNLABELED")
        k = self.n_classes
        present = np.unique(self.labels[mask])
        if present.size != k or (present != np.arange(k)).any():
            raise InvalidInputError("every class needs at least one labeled row")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def n_labeled(self):
        return self.labeled_indices.size

    @property
    def n_classes(self):
        hi = int(self.test_labels.max()) if self.test_labels.size else -1
        if (self.labels >= 0).any():
            hi = max(hi, int(self.labels.max()))
        return hi + 1


def _blob_points(rng, count, k, spread):
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(k), np.diff(np.linspace(0, count, k + 1).astype(int)))
    features = means[labels] + spread * rng.standard_normal((count, 2))
    return features, labels


def _moon_points(rng, count, spread):
    labels = np.repeat(np.arange(2), np.diff(np.linspace(0, count, 3).astype(int)))
    theta = rng.uniform(0.0, np.pi, size=count)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    features = np.where(labels[:, None] == 0, upper, lower)
    return features + spread * rng.standard_normal((count, 2)), labels


def _circle_points(rng, count, spread):
    labels = np.repeat(np.arange(2), np.diff(np.linspace(0, count, 3).astype(int)))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    radius = np.where(labels == 0, 1.0, 2.0)
    features = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return features + spread * rng.standard_normal((count, 2)), labels


def make_dataset(kind, n, n_per_class_labeled, seed, k=4, spread=0.35, n_test=500):
    """Sample a synthetic dataset with a balanced labeled subset.

    kind is one of gaussian_blobs, two_moons, concentric_circles; the two
    curve families are binary so they force k=2. Exactly
    n_per_class_labeled rows per class are revealed; the rest keep the
    UNLABELED sentinel. The test split is drawn fresh from the same
    distribution. Deterministic for a fixed seed.
    """
    if kind not in DATASET_KINDS:
        raise InvalidInputError(f"unknown dataset kind {kind!r}")
    if kind != "gaussian_blobs":
        k = 2
    if k < 2:
        raise InvalidInputError("need at least two classes")
    if n_per_class_labeled < 1:
        raise InvalidInputError("need at least one labeled example per class")
    if n < k * n_per_class_labeled:
        raise InvalidInputError(
            f"n={n} cannot hold {n_per_class_labeled} labeled rows "
            f"for each of {k} classes"
        )
    if n_test < 1:
        raise InvalidInputError("n_test must be at least 1")
    if spread < 0:
        raise InvalidInputError("spread must be nonnegative")

    rng = np.random.default_rng(seed)
    if kind == "gaussian_blobs":
        features, full_labels = _blob_points(rng, n, k, spread)
        test_features, test_labels = _blob_points(rng, n_test, k, spread)
    elif kind == "two_moons":
        features, full_labels = _moon_points(rng, n, spread)
        test_features, test_labels = _moon_points(rng, n_test, spread)
    else:
        features, full_labels = _circle_points(rng, n, spread)
        test_features, test_labels = _circle_points(rng, n_test, spread)

    labeled = []
    for j in range(k):
        rows = np.flatnonzero(full_labels == j)
        labeled.append(rng.choice(rows, size=n_per_class_labeled, replace=False))
    labeled_indices = np.sort(np.concatenate(labeled))

    labels = np.full(n, UNLABELED, dtype=int)
    labels[labeled_indices] = full_labels[labeled_indices]
    return Dataset(features, labels, labeled_indices, test_features, test_labels)


def export_dataset(dataset, path):
    """Write a dataset as CSV: header n,d,n_test then train and test rows.

    Each row is the feature values followed by the label; train rows keep
    the UNLABELED sentinel. %.17g formatting makes the round trip through
    import_dataset bitwise exact.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([dataset.n, dataset.d, dataset.test_features.shape[0]])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([f"{v:.17g}" for v in x] + [int(y)])
        for x, y in zip(dataset.test_features, dataset.test_labels):
            writer.writerow([f"{v:.17g}" for v in x] + [int(y)])


def import_dataset(path):
    """Inverse of export_dataset; reconstructs labeled_indices from labels."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != 3:
        raise InvalidInputError("dataset file must start with an n,d,n_test header")
    try:
        n, d, n_test = (int(v) for v in rows[0])
    except ValueError as exc:
        raise InvalidInputError(f"bad dataset header {rows[0]!r}") from exc
    body = rows[1:]
    if len(body) != n + n_test:
        raise InvalidInputError(f"expected {n + n_test} data rows, found {len(body)}")
    try:
        features = np.array([[float(v) for v in row[:d]] for row in body[:n]])
        labels = np.array([int(row[d]) for row in body[:n]])
        test_features = np.array([[float(v) for v in row[:d]] for row in body[n:]])
        test_labels = np.array([int(row[d]) for row in body[n:]])
    except (ValueError, IndexError) as exc:
        raise InvalidInputError(f"bad dataset row: {exc}") from exc
    return Dataset(features, labels, np.flatnonzero(labels >= 0),
                   test_features, test_labels)


@dataclass
class ClassifierParams:
    """One-hidden-layer ReLU network; hidden_units=0 degenerates to linear.

    The same container carries parameters, gradients, and momentum
    buffers, which all share this shape.
    """

    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: np.ndarray

    def __post_init__(self):
        self.hidden_weights = np.asarray(self.hidden_weights, dtype=float)
        self.hidden_bias = np.asarray(self.hidden_bias, dtype=float)
        self.output_weights = np.asarray(self.output_weights, dtype=float)
        self.output_bias = np.asarray(self.output_bias, dtype=float)
        if self.hidden_weights.ndim != 2 or self.output_weights.ndim != 2:
            raise InvalidInputError("weights must be 2-D matrices")
        h = self.hidden_weights.shape[0]
        if self.hidden_bias.shape != (h,):
            raise InvalidInputError("hidden_bias must match hidden_weights rows")
        width = h if h > 0 else self.hidden_weights.shape[1]
        if self.output_weights.shape[1] != width:
            raise InvalidInputError(
                "output_weights width must match the hidden layer "
                "(or the input when hidden_units=0)"
            )
        if self.output_bias.shape != (self.output_weights.shape[0],):
            raise InvalidInputError("output_bias must match output_weights rows")
        for arr in (self.hidden_weights, self.hidden_bias,
                    self.output_weights, self.output_bias):
            if not np.isfinite(arr).all():
                raise InvalidInputError("parameters must be finite")

    @property
    def hidden_units(self):
        return self.hidden_weights.shape[0]

    @property
    def n_classes(self):
        return self.output_weights.shape[0]


def init_params(rng, d, k, hidden_units):
    """He-scaled Gaussian weights, zero biases."""
    if d < 1 or k < 2 or hidden_units < 0:
        raise InvalidInputError("need d >= 1, k >= 2, hidden_units >= 0")
    h = hidden_units
    hidden_weights = rng.standard_normal((h, d)) * np.sqrt(2.0 / d)
    width = h if h > 0 else d
    output_weights = rng.standard_normal((k, width)) * np.sqrt(2.0 / width)
    return ClassifierParams(hidden_weights, np.zeros(h), output_weights, np.zeros(k))


def _zeros_like(params):
    return ClassifierParams(
        np.zeros_like(params.hidden_weights),
        np.zeros_like(params.hidden_bias),
        np.zeros_like(params.output_weights),
        np.zeros_like(params.output_bias),
    )


def augment(x, sigma, rng):
    """Gaussian input perturbation x + sigma * g, elementwise over any shape.

    sigma=0 returns a copy without consuming random draws, so disabling
    augmentation does not shift the stream.
    """
    x = np.asarray(x, dtype=float)
    if sigma < 0:
        raise InvalidInputError("sigma must be nonnegative")
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def _hidden_and_logits(params, X):
    if params.hidden_units > 0:
        hidden = np.maximum(X @ params.hidden_weights.T + params.hidden_bias, 0.0)
    else:
        hidden = X
    return hidden, hidden @ params.output_weights.T + params.output_bias


def _log_softmax(logits):
    shift = logits.max(axis=1, keepdims=True)
    return logits - shift - np.log(np.exp(logits - shift).sum(axis=1, keepdims=True))


def forward(params, x):
    """Class probabilities for one example (vector) or a batch (matrix)."""
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise InvalidInputError("inputs must be finite")
    single = x.ndim == 1
    X = x[None, :] if single else x
    _, logits = _hidden_and_logits(params, X)
    probs = np.exp(_log_softmax(logits))
    return probs[0] if single else probs


def _backward(params, X, hidden, dlogits, grads):
    grads.output_weights += dlogits.T @ hidden
    grads.output_bias += dlogits.sum(axis=0)
    if params.hidden_units > 0:
        dhidden = (dlogits @ params.output_weights) * (hidden > 0)
        grads.hidden_weights += dhidden.T @ X
        grads.hidden_bias += dhidden.sum(axis=0)


@dataclass
class LossParts:
    """total = supervised + unlabeled_weight * unsupervised, by construction."""

    total: float
    supervised: float
    unsupervised: float


def loss_and_grad(params, labeled_features, labeled_labels,
                  unlabeled_features, soft_targets, unlabeled_weight):
    """Supervised cross-entropy plus weighted soft-label consistency loss.

    The unlabeled term is -(1/m) sum_i sum_j q_ij log p(j | x'_i); rows
    whose soft label carries zero class mass contribute nothing, so
    abstention removes examples from the gradient. Gradients are exact
    analytic derivatives. The unlabeled batch may be empty, in which case
    the term is zero.
    """
    labeled_features = np.asarray(labeled_features, dtype=float)
    labeled_labels = np.asarray(labeled_labels, dtype=int)
    if labeled_features.ndim != 2 or labeled_features.shape[0] < 1:
        raise InvalidInputError("labeled batch must be a nonempty matrix")
    if labeled_labels.shape != (labeled_features.shape[0],):
        raise InvalidInputError("labeled batch needs one label per row")
    k = params.n_classes
    if (labeled_labels < 0).any() or (labeled_labels >= k).any():
        raise InvalidInputError("labeled batch labels out of range")
    if unlabeled_weight < 0:
        raise InvalidInputError("unlabeled_weight must be nonnegative")

    grads = _zeros_like(params)
    m_l = labeled_features.shape[0]
    hidden, logits = _hidden_and_logits(params, labeled_features)
    log_p = _log_softmax(logits)
    loss_sup = float(-log_p[np.arange(m_l), labeled_labels].mean())
    dlogits = np.exp(log_p)
    dlogits[np.arange(m_l), labeled_labels] -= 1.0
    _backward(params, labeled_features, hidden, dlogits / m_l, grads)

    unlabeled_features = np.asarray(unlabeled_features, dtype=float)
    m_u = 0 if unlabeled_features.size == 0 else unlabeled_features.shape[0]
    loss_unsup = 0.0
    if m_u:
        if len(soft_targets) != m_u:
            raise InvalidInputError("need one soft target per unlabeled row")
        q = np.stack([target.weights for target in soft_targets])
        if q.shape[1] != k:
            raise InvalidInputError("soft targets must cover every class")
        hidden, logits = _hidden_and_logits(params, unlabeled_features)
        log_p = _log_softmax(logits)
        loss_unsup = float(-(q * log_p).sum() / m_u)
        eta = q.sum(axis=1, keepdims=True)
        dlogits = unlabeled_weight * (eta * np.exp(log_p) - q) / m_u
        _backward(params, unlabeled_features, hidden, dlogits, grads)

    loss = loss_sup + unlabeled_weight * loss_unsup
    return LossParts(loss, loss_sup, loss_unsup), grads


def cosine_lr(t, T, lr_peak):
    """Learning rate lr_peak * cos(7 pi t / (16 T)) for t in [1, T]."""
    if not 1 <= t <= T:
        raise InvalidInputError(f"t={t} outside [1, {T}]")
    return lr_peak * float(np.cos(7.0 * np.pi * t / (16.0 * T)))


def nesterov_step(params, grads, buffers, lr, momentum, weight_decay):
    """One Nesterov momentum update; returns (new params, new buffers).

    Weight decay is added to the gradient of the weight matrices only,
    never the biases. With b' = momentum * b + g the applied step is
    lr * (g + momentum * b'), the standard look-ahead form.
    """
    new_p, new_b = {}, {}
    for name in ("hidden_weights", "hidden_bias", "output_weights", "output_bias"):
        p = getattr(params, name)
        g = getattr(grads, name)
        if weight_decay and name.endswith("weights"):
            g = g + weight_decay * p
        buf = momentum * getattr(buffers, name) + g
        new_b[name] = buf
        new_p[name] = p - lr * (g + momentum * buf)
    return ClassifierParams(**new_p), ClassifierParams(**new_b)


def ema_update(ema_params, params, decay):
    """Exponential moving average: decay * ema + (1 - decay) * current."""
    if not 0.0 <= decay < 1.0:
        raise InvalidInputError("decay must lie in [0, 1)")
    fields = {}
    for name in ("hidden_weights", "hidden_bias", "output_weights", "output_bias"):
        fields[name] = decay * getattr(ema_params, name) \
            + (1.0 - decay) * getattr(params, name)
    return ClassifierParams(**fields)


def assign_confidence_threshold(probs, tau):
    """One-hot soft labels where the max probability clears tau, else abstain."""
    probs = np.asarray(probs, dtype=float)
    _check_simplex_rows(probs, "probability matrix")
    if not 0.0 < tau < 1.0:
        raise InvalidInputError("tau must lie in (0, 1)")
    out = []
    k = probs.shape[1]
    for row in probs:
        j = int(np.argmax(row))
        if row[j] >= tau:
            weights = np.zeros(k)
            weights[j] = 1.0
            out.append(SoftLabel(weights, 0.0))
        else:
            out.append(SoftLabel(np.zeros(k), 1.0))
    return out


def evaluate(params, test_features, test_labels):
    """Fraction of argmax mispredictions; argmax breaks ties low."""
    test_features = np.asarray(test_features, dtype=float)
    test_labels = np.asarray(test_labels, dtype=int)
    if test_features.ndim != 2 or test_features.shape[0] < 1:
        raise InvalidInputError("test split must be a nonempty matrix")
    if test_labels.shape != (test_features.shape[0],):
        raise InvalidInputError("test split needs one label per row")
    predictions = np.argmax(forward(params, test_features), axis=1)
    return float((predictions != test_labels).mean())


@dataclass
class TrainConfig:
    """Hyperparameters for self_train.

    assigner selects how unlabeled soft labels are produced: "sla" uses
    the transport allocation (allocation and schedule are then required,
    with schedule.horizon equal to iterations; allocation.rho is ignored
    in favor of the scheduled value), "confidence_threshold" uses
    threshold, "pseudo_label" always takes the argmax, and
    "supervised_only" skips unlabeled data entirely. sla_every > 1
    re-solves the allocation only every that many iterations and is
    flagged in the trace as a deviation.
    """

    iterations: int = 20_000
    labeled_batch: int = 8
    unlabeled_batch: int = 56
    unlabeled_weight: float = 1.0
    lr_peak: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    weak_noise: float = 0.05
    strong_noise: float = 0.3
    assigner: str = "sla"
    allocation: Optional[AllocationConfig] = None
    schedule: Optional[AllocationSchedule] = None
    threshold: float = 0.95
    hidden_units: int = 32
    checkpoint_every: int = 500
    sla_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 2:
            raise InvalidInputError("iterations must be at least 2")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise InvalidInputError("batch sizes must be at least 1")
        if self.unlabeled_weight < 0:
            raise InvalidInputError("unlabeled_weight must be nonnegative")
        if not self.lr_peak > 0:
            raise InvalidInputError("lr_peak must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidInputError("ema_decay must lie in [0, 1)")
        if self.weak_noise < 0 or self.strong_noise < self.weak_noise:
            raise InvalidInputError("need 0 <= weak_noise <= strong_noise")
        if self.assigner not in ASSIGNERS:
            raise InvalidInputError(f"unknown assigner {self.assigner!r}")
        if self.assigner == "sla":
            if self.allocation is None or self.schedule is None:
                raise InvalidInputError(
                    "sla assigner needs allocation and schedule"
                )
            if self.schedule.horizon != self.iterations:
                raise InvalidInputError(
                    f"schedule horizon {self.schedule.horizon} must equal "
                    f"iterations {self.iterations}"
                )
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInputError("threshold must lie in (0, 1)")
        if self.hidden_units < 0:
            raise InvalidInputError("hidden_units must be nonnegative")
        if self.checkpoint_every < 1 or self.sla_every < 1:
            raise InvalidInputError("checkpoint_every and sla_every must be >= 1")


@dataclass
class TrainerState:
    """Mutable loop state; exposed for inspection and diagnostics."""

    params: ClassifierParams
    ema_params: ClassifierParams
    momentum_buffers: ClassifierParams
    cost_matrix: Optional[CostMatrix]
    scalings: Optional[ScalingVars]
    iteration: int
    labeled_rng: np.random.Generator
    unlabeled_rng: np.random.Generator
    trace: list = field(default_factory=list)


def _soft_targets(config, probs, scalings, k):
    if config.assigner == "sla":
        beta = scalings.beta if scalings is not None else np.zeros(k + 1)
        return soft_labels(probs, beta, config.allocation.gamma)
    if config.assigner == "confidence_threshold":
        return assign_confidence_threshold(probs, config.threshold)
    return assign_confidence_threshold(probs, _VACUOUS_TAU)


def self_train(dataset, config, return_state=False):
    """Run the training loop; returns (EMA classifier, metrics trace).

    Per iteration: sample the two batches, draw weak and strong views,
    form soft labels from the weak-view probabilities of the pre-update
    model, take one optimizer step on L_l + lambda * L_u, update the EMA,
    then (sla mode) refresh the visited cost rows with -log p and re-solve
    the allocation at the scheduled rho, warm-started from the previous
    scalings. Cost rows exist for unlabeled examples only and start at
    log k; rows never drawn stay there. A numerical failure in the solver
    appends a diagnostic record to the trace and re-raises.

    return_state=True appends the final TrainerState to the returned
    tuple, for inspection of the persisted costs and scalings.
    """
    k = dataset.n_classes
    if k < 2:
        raise InvalidInputError("training needs at least two classes")
    uses_unlabeled = config.assigner != "supervised_only"
    unlabeled_positions = np.flatnonzero(dataset.labels == UNLABELED)
    if uses_unlabeled and unlabeled_positions.size == 0:
        raise InvalidInputError(f"assigner {config.assigner!r} needs unlabeled rows")
    if config.assigner == "sla" and config.allocation.upper_bounds.size != k:
        raise InvalidInputError(
            f"allocation bounds cover {config.allocation.upper_bounds.size} "
            f"classes, dataset has {k}"
        )

    init_seq, labeled_seq, unlabeled_seq = \
        np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(init_seq)
    state = TrainerState(
        params=init_params(init_rng, dataset.d, k, config.hidden_units),
        ema_params=None,
        momentum_buffers=None,
        cost_matrix=None,
        scalings=None,
        iteration=0,
        labeled_rng=np.random.default_rng(labeled_seq),
        unlabeled_rng=np.random.default_rng(unlabeled_seq),
    )
    state.ema_params = ClassifierParams(
        state.params.hidden_weights.copy(), state.params.hidden_bias.copy(),
        state.params.output_weights.copy(), state.params.output_bias.copy(),
    )
    state.momentum_buffers = _zeros_like(state.params)
    if config.assigner == "sla":
        state.cost_matrix = CostMatrix(
            np.full((unlabeled_positions.size, k), np.log(k))
        )
    # global example index -> cost row
    cost_row = np.full(dataset.n, -1)
    cost_row[unlabeled_positions] = np.arange(unlabeled_positions.size)

    T = config.iterations
    lam = config.unlabeled_weight
    last_status = None
    last_rho = None
    for t in range(1, T + 1):
        state.iteration = t
        lr = cosine_lr(t, T, config.lr_peak)

        idx_l = state.labeled_rng.choice(
            dataset.labeled_indices, size=config.labeled_batch, replace=True
        )
        weak_l = augment(dataset.features[idx_l], config.weak_noise,
                         state.labeled_rng)

        if uses_unlabeled:
            idx_u = state.unlabeled_rng.choice(
                unlabeled_positions, size=config.unlabeled_batch, replace=True
            )
            weak_u = augment(dataset.features[idx_u], config.weak_noise,
                             state.unlabeled_rng)
            strong_u = augment(dataset.features[idx_u], config.strong_noise,
                               state.unlabeled_rng)
            probs_weak = forward(state.params, weak_u)
            targets = _soft_targets(config, probs_weak, state.scalings, k)
        else:
            strong_u = np.empty((0, dataset.d))
            targets = []

        parts, grads = loss_and_grad(
            state.params, weak_l, dataset.labels[idx_l], strong_u, targets, lam
        )
        state.params, state.momentum_buffers = nesterov_step(
            state.params, grads, state.momentum_buffers,
            lr, config.momentum, config.weight_decay,
        )
        state.ema_params = ema_update(state.ema_params, state.params,
                                      config.ema_decay)

        if config.assigner == "sla":
            rows = cost_row[idx_u]
            state.cost_matrix.values[rows] = np.clip(
                -np.log(np.maximum(probs_weak, P_FLOOR)), 0.0, C_MAX
            )
            if t % config.sla_every == 0:
                last_rho = schedule_value(config.schedule, t)
                run_config = AllocationConfig(
                    config.allocation.upper_bounds, rho=last_rho,
                    gamma=config.allocation.gamma,
                    tolerance_factor=config.allocation.tolerance_factor,
                )
                try:
                    state.scalings, last_status = allocate(
                        state.cost_matrix, run_config, warm_start=state.scalings
                    )
                except NumericalFailureError as exc:
                    state.trace.append({
                        "t": t, "event": "numerical_failure", "rho_t": last_rho,
                        "loss": parts.total, "lr": lr,
                    })
                    # callers (the CLI) persist this as the diagnostic checkpoint
                    exc.diagnostic_trace = state.trace
                    raise

        if t % config.checkpoint_every == 0 or t == 1 or t == T:
            record = {
                "t": t,
                "test_error": evaluate(state.params, dataset.test_features,
                                       dataset.test_labels),
                "ema_test_error": evaluate(state.ema_params,
                                           dataset.test_features,
                                           dataset.test_labels),
                "lr": lr,
                "loss": parts.total,
                "loss_sup": parts.supervised,
                "loss_unsup": parts.unsupervised,
            }
            if uses_unlabeled:
                record["batch_mass"] = float(
                    np.mean([target.mass for target in targets])
                )
            if config.assigner == "sla" and last_status is not None:
                summary = allocation_summary(transport_plan(
                    build_padded_problem(state.cost_matrix, run_config),
                    state.scalings, config.allocation.gamma,
                ))
                record.update({
                    "rho_t": last_rho,
                    "allocated_fraction": summary.allocated_fraction,
                    "per_class_mass": summary.per_class_mass.tolist(),
                    "sinkhorn_iters": last_status.iterations,
                    "col_residual": last_status.residual,
                    "sla_converged": last_status.converged,
                    "sla_every": config.sla_every,
                })
            state.trace.append(record)

    if return_state:
        return state.ema_params, state.trace, state
    return state.ema_params, state.trace
