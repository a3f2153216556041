"""Subject-level outlier detector: a small MLP written directly in numpy.

Architecture: ``[affine -> batch-norm -> ReLU -> dropout] x len(hidden)``
followed by a single affine output unit and a sigmoid.  Training minimises a
class-weighted binary cross-entropy on logits with Adam; healthy controls
get the larger weight so the detector errs on the side of keeping them.

Inputs are within-site z-scores, so the detector only ever sees how a
subject deviates from the rest of its own site.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .combat import FilterMask, MaskKind
from .data_model import CohortDataset, HC
from .errors import (
    ConfigError,
    DegenerateBatch,
    EmptySplit,
    IoFailure,
    NonFiniteLoss,
    ShapeMismatch,
    SiteTooSmall,
    TaxonomyMismatch,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 430
    hidden: tuple[int, ...] = (256, 128, 64)
    dropout_rate: float = 0.5
    batch_size: int = 64
    hc_penalty_weight: float = 2.0
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    max_epochs: int = 300
    early_stop_patience: int = 20
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.input_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError("layer widths must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch-norm statistics)")


@dataclass
class NetworkState:
    """Parameters, batch-norm running statistics and Adam accumulators.

    Parameter keys: ``W{l}``/``b{l}`` for every affine layer (the last one is
    the output unit) and ``bn_scale{l}``/``bn_shift{l}`` for hidden layers.
    """

    config: NetworkConfig
    params: dict[str, np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    taxonomy_fingerprint: str | None = None

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden)

    def copy(self) -> "NetworkState":
        return copy.deepcopy(self)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        for arr in self.running_mean + self.running_var:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_network(config: NetworkConfig, rng: np.random.Generator | int | None = None,
                 taxonomy_fingerprint: str | None = None) -> NetworkState:
    """Fan-in scaled uniform initialisation (He for ReLU layers, LeCun for the output)."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    dims = (config.input_dim, *config.hidden, 1)
    params: dict[str, np.ndarray] = {}
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = 6.0 if l < len(config.hidden) else 3.0
        limit = np.sqrt(gain / fan_in)
        params[f"W{l}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"b{l}"] = np.zeros(fan_out)
        if l < len(config.hidden):
            params[f"bn_scale{l}"] = np.ones(fan_out)
            params[f"bn_shift{l}"] = np.zeros(fan_out)
    return NetworkState(
        config=config,
        params=params,
        running_mean=[np.zeros(h) for h in config.hidden],
        running_var=[np.ones(h) for h in config.hidden],
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        taxonomy_fingerprint=taxonomy_fingerprint,
    )


# -- input preparation -------------------------------------------------------

def standardize_within_site(site: CohortDataset | np.ndarray) -> np.ndarray:
    """Per-feature z-scores against the site's own mean and (n-1) standard deviation."""
    x = site.features if isinstance(site, CohortDataset) else np.asarray(site, dtype=float)
    if x.shape[0] < 2:
        raise SiteTooSmall(f"within-site standardization needs 2 subjects, got {x.shape[0]}")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    ok = sd > 1e-12 * np.maximum(np.abs(mean), np.finfo(float).tiny)
    return np.where(ok, (x - mean) / np.where(ok, sd, 1.0), 0.0)


def site_standardized(dataset: CohortDataset) -> np.ndarray:
    """Standardize every site of a multi-site cohort separately; row order is kept."""
    out = np.empty_like(dataset.features)
    sites = np.array(dataset.site_ids)
    for s in dataset.sites():
        idx = np.flatnonzero(sites == s)
        out[idx] = standardize_within_site(dataset.features[idx])
    return out


def outlier_labels(dataset: CohortDataset) -> np.ndarray:
    """1 for pathology (positive class), 0 for healthy controls."""
    if not dataset.is_labeled:
        raise EmptySplit("training cohorts need a group label for every subject")
    return (~dataset.is_hc).astype(float)


# -- forward / backward ------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sample_dropout_masks(state: NetworkState, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Inverted-dropout masks (kept units scaled by 1/(1-p)) for one batch."""
    p = state.config.dropout_rate
    if p == 0:
        return [np.ones((n, h)) for h in state.config.hidden]
    return [(rng.random((n, h)) >= p) / (1.0 - p) for h in state.config.hidden]


def _forward(state: NetworkState, x: np.ndarray, *, batch_stats: bool,
             dropout_masks: Sequence[np.ndarray] | None = None,
             update_running: bool = False):
    cfg = state.config
    p = state.params
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeMismatch(f"expected batch of shape (n, {cfg.input_dim}), got {x.shape}")
    if batch_stats and x.shape[0] < 2:
        raise DegenerateBatch("batch-norm in training mode needs at least 2 samples")
    cache = {"x": x, "layers": []}
    h = x
    for l in range(state.n_hidden):
        a = h @ p[f"W{l}"] + p[f"b{l}"]
        if batch_stats:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            if update_running:
                m = cfg.bn_momentum
                n = a.shape[0]
                state.running_mean[l] = (1 - m) * state.running_mean[l] + m * mu
                state.running_var[l] = (1 - m) * state.running_var[l] + m * var * n / (n - 1)
        else:
            mu, var = state.running_mean[l], state.running_var[l]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
        xhat = (a - mu) * inv_std
        bn = p[f"bn_scale{l}"] * xhat + p[f"bn_shift{l}"]
        r = np.maximum(bn, 0.0)
        mask = None if dropout_masks is None else dropout_masks[l]
        out = r if mask is None else r * mask
        cache["layers"].append({"h_in": h, "pre": a, "xhat": xhat, "inv_std": inv_std,
                                "bn": bn, "mask": mask})
        h = out
    L = state.n_hidden
    logits = h @ p[f"W{L}"] + p[f"b{L}"]
    cache["h_last"] = h
    return logits[:, 0], cache


def forward(state: NetworkState, batch: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Outlier probabilities.

    ``mode="eval"`` uses running batch-norm statistics and no dropout and is
    a pure function of ``(state, batch)``.  ``mode="train"`` uses batch
    statistics and samples dropout masks from ``rng``; it does not touch the
    running statistics.
    """
    batch = np.asarray(batch, dtype=float)
    if mode == "eval":
        logits, _ = _forward(state, batch, batch_stats=False)
    elif mode == "train":
        rng = np.random.default_rng() if rng is None else rng
        masks = sample_dropout_masks(state, batch.shape[0], rng)
        logits, _ = _forward(state, batch, batch_stats=True, dropout_masks=masks)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _sigmoid(logits)


def weighted_bce_with_logits(logits: np.ndarray, labels: np.ndarray,
                             weights: np.ndarray) -> float:
    per = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float((weights * per).sum() / logits.size)


def sample_weights(labels: np.ndarray, hc_penalty_weight: float) -> np.ndarray:
    return np.where(np.asarray(labels) == 0, hc_penalty_weight, 1.0)


def backward(state: NetworkState, batch: np.ndarray, labels: np.ndarray, weights: np.ndarray,
             dropout_masks: Sequence[np.ndarray] | None = None,
             update_running: bool = False) -> tuple[float, dict[str, np.ndarray]]:
    """Training-mode loss and gradients for every parameter.

    The loss is ``sum(w * bce) / n``.  ``dropout_masks`` (from
    :func:`sample_dropout_masks`) are held fixed; ``None`` disables dropout.
    """
    batch = np.asarray(batch, dtype=float)
    labels = np.asarray(labels, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if labels.shape != (batch.shape[0],) or weights.shape != labels.shape:
        raise ShapeMismatch("labels and weights must have one entry per sample")
    logits, cache = _forward(state, batch, batch_stats=True, dropout_masks=dropout_masks,
                             update_running=update_running)
    loss = weighted_bce_with_logits(logits, labels, weights)
    p = state.params
    n = batch.shape[0]
    L = state.n_hidden
    grads: dict[str, np.ndarray] = {}

    d_logit = (weights * (_sigmoid(logits) - labels) / n)[:, None]
    grads[f"W{L}"] = cache["h_last"].T @ d_logit
    grads[f"b{L}"] = d_logit.sum(axis=0)
    dh = d_logit @ p[f"W{L}"].T
    for l in reversed(range(L)):
        c = cache["layers"][l]
        if c["mask"] is not None:
            dh = dh * c["mask"]
        dbn = dh * (c["bn"] > 0)
        grads[f"bn_scale{l}"] = (dbn * c["xhat"]).sum(axis=0)
        grads[f"bn_shift{l}"] = dbn.sum(axis=0)
        dxhat = dbn * p[f"bn_scale{l}"]
        da = c["inv_std"] / n * (n * dxhat - dxhat.sum(axis=0)
                                 - c["xhat"] * (dxhat * c["xhat"]).sum(axis=0))
        grads[f"W{l}"] = c["h_in"].T @ da
        grads[f"b{l}"] = da.sum(axis=0)
        dh = da @ p[f"W{l}"].T
    return loss, grads


def adam_step(state: NetworkState, grads: dict[str, np.ndarray]) -> None:
    cfg = state.config
    b1, b2 = cfg.adam_betas
    state.step += 1
    t = state.step
    for key, g in grads.items():
        m = state.adam_m[key] = b1 * state.adam_m[key] + (1 - b1) * g
        v = state.adam_v[key] = b2 * state.adam_v[key] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        state.params[key] = state.params[key] - cfg.learning_rate * m_hat / (
            np.sqrt(v_hat) + cfg.adam_epsilon)


# -- training ----------------------------------------------------------------

@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _eval_loss(state, x, y, w) -> tuple[float, float]:
    logits, _ = _forward(state, x, batch_stats=False)
    loss = weighted_bce_with_logits(logits, y, w)
    acc = float(((logits > 0) == (y > 0.5)).mean())
    return loss, acc


def train(train_set: CohortDataset, val_set: CohortDataset,
          config: NetworkConfig = NetworkConfig()) -> tuple[NetworkState, TrainingLog]:
    """Mini-batch Adam with early stopping on the validation loss.

    Both cohorts may hold many sites; features are z-scored within each
    site before training.  Samples are reshuffled every epoch and a trailing
    batch with fewer than two samples is skipped.  The returned state holds
    the parameters of the best validation epoch.  Deterministic given
    ``config.seed``.
    """
    if train_set.n_subjects == 0 or val_set.n_subjects == 0:
        raise EmptySplit("training and validation cohorts must be non-empty")
    if train_set.taxonomy.n_features != config.input_dim:
        raise ShapeMismatch(f"cohort has {train_set.taxonomy.n_features} features, "
                            f"network expects {config.input_dim}")
    if val_set.taxonomy != train_set.taxonomy:
        raise TaxonomyMismatch("training and validation cohorts use different taxonomies")
    x_tr, y_tr = site_standardized(train_set), outlier_labels(train_set)
    x_va, y_va = site_standardized(val_set), outlier_labels(val_set)
    w_tr = sample_weights(y_tr, config.hc_penalty_weight)
    w_va = sample_weights(y_va, config.hc_penalty_weight)

    rng = np.random.default_rng(config.seed)
    state = init_network(config, rng, train_set.taxonomy.fingerprint())
    history = TrainingLog()
    best = (np.inf, None, 0)
    n = x_tr.shape[0]
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            masks = sample_dropout_masks(state, idx.size, rng)
            loss, grads = backward(state, x_tr[idx], y_tr[idx], w_tr[idx], masks,
                                   update_running=True)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {state.step}")
            adam_step(state, grads)
        tr_loss, tr_acc = _eval_loss(state, x_tr, y_tr, w_tr)
        va_loss, va_acc = _eval_loss(state, x_va, y_va, w_va)
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise NonFiniteLoss(f"non-finite evaluation loss at epoch {epoch}")
        history.epochs.append({"epoch": epoch, "train_loss": tr_loss, "train_accuracy": tr_acc,
                               "val_loss": va_loss, "val_accuracy": va_acc})
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, tr_loss, va_loss, va_acc)
        if va_loss < best[0]:
            best = (va_loss, state.copy(), epoch)
        elif epoch - best[2] >= config.early_stop_patience:
            history.stopped_early = True
            break
    history.best_epoch = best[2]
    return best[1], history


# -- inference ---------------------------------------------------------------

def predict_proba(state: NetworkState, site: CohortDataset) -> np.ndarray:
    if state.taxonomy_fingerprint is not None and \
            state.taxonomy_fingerprint != site.taxonomy.fingerprint():
        raise TaxonomyMismatch("the detector was trained on a different bundle/metric layout")
    x = standardize_within_site(site)
    return forward(state, x, mode="eval")


def predict_outliers(state: NetworkState, site: CohortDataset,
                     threshold: float = 0.5) -> FilterMask:
    """Per-subject mask excluding subjects with outlier probability above ``threshold``.

    The probabilities are kept on the mask (``mask.scores``) for auditing.
    """
    prob = predict_proba(state, site)
    return FilterMask(MaskKind.PER_SUBJECT, prob <= threshold, prob)


def balanced_accuracy(mask: FilterMask, site: CohortDataset) -> float:
    truth = ~site.is_hc
    flagged = ~np.asarray(mask.include, dtype=bool)
    tpr = flagged[truth].mean() if truth.any() else 1.0
    tnr = (~flagged[~truth]).mean() if (~truth).any() else 1.0
    return float(0.5 * (tpr + tnr))


# -- persistence -------------------------------------------------------------

def save_network(state: NetworkState, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(state.config),
        "taxonomy_fingerprint": state.taxonomy_fingerprint,
        "step": state.step,
        "n_hidden": state.n_hidden,
    }
    arrays = {f"param__{k}": v for k, v in state.params.items()}
    for l in range(state.n_hidden):
        arrays[f"running_mean__{l}"] = state.running_mean[l]
        arrays[f"running_var__{l}"] = state.running_var[l]
    try:
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                     **arrays)
    except OSError as exc:
        raise IoFailure(f"cannot write model to {path}: {exc}") from exc


def load_network(path) -> NetworkState:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read model {path}: {exc}") from exc
    with data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise IoFailure(f"{path}: unsupported model format {meta.get('format_version')}")
        config = NetworkConfig(**meta["config"])
        params = {k[len("param__"):]: data[k].copy() for k in data.files if k.startswith("param__")}
        L = meta["n_hidden"]
        state = NetworkState(
            config=config,
            params=params,
            running_mean=[data[f"running_mean__{l}"].copy() for l in range(L)],
            running_var=[data[f"running_var__{l}"].copy() for l in range(L)],
            adam_m={k: np.zeros_like(v) for k, v in params.items()},
            adam_v={k: np.zeros_like(v) for k, v in params.items()},
            step=int(meta["step"]),
            taxonomy_fingerprint=meta["taxonomy_fingerprint"],
        )
    return state
