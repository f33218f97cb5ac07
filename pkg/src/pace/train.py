"""Training loop, metrics, permutation importance, and ablation runs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import Normalizer, PreparedData, SENSOR_FEATURES, WindowSet
from .errors import DomainError, InputError, NumericError
from .model import (ModelConfig, PaceModel, build_model, count_params_flops,
                    variant_config)
from .nn import backward, functional as F, no_grad
from .nn.optim import Adam
from .nn.rng import derive_rng, DOMAIN_EVAL, shuffle_rng

logger = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_mse", "val_mse", "stopped"]

EVAL_BATCH = 128


def _default_seeds() -> tuple:
    return (17, 42, 1234)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    lr: float = 1e-3
    seeds: tuple = field(default_factory=_default_seeds)
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.max_epochs < 1 or not self.patience < self.max_epochs:
            raise InputError("need 0 < patience < max_epochs")
        if self.patience < 1:
            raise InputError("patience must be >= 1")
        if self.lr < 0.0:
            raise InputError("lr must be non-negative")
        if not self.seeds:
            raise InputError("seeds must be non-empty")
        if not 0.0 < self.val_fraction < 1.0:
            raise InputError("val_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            value = getattr(self, f_.name)
            out[f_.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f_.name for f_ in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InputError(f"unknown train config fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        return cls(**kwargs)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    stopped: bool


@dataclass(frozen=True)
class Metrics:
    """Evaluation summary at the requested horizons (SoH fraction units)."""

    horizons: tuple
    rmse: dict
    mae: dict
    rmse_raw: dict
    mae_raw: dict
    param_count: int
    flops: int
    eta: dict
    mean_eta: float

    def to_dict(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "rmse": {str(h): v for h, v in self.rmse.items()},
            "mae": {str(h): v for h, v in self.mae.items()},
            "rmse_raw": {str(h): v for h, v in self.rmse_raw.items()},
            "mae_raw": {str(h): v for h, v in self.mae_raw.items()},
            "param_count": self.param_count,
            "flops": self.flops,
            "eta": {str(h): v for h, v in self.eta.items()},
            "mean_eta": self.mean_eta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Metrics":
        def by_horizon(key):
            return {int(h): float(v) for h, v in data[key].items()}

        try:
            return cls(
                horizons=tuple(int(h) for h in data["horizons"]),
                rmse=by_horizon("rmse"), mae=by_horizon("mae"),
                rmse_raw=by_horizon("rmse_raw"), mae_raw=by_horizon("mae_raw"),
                param_count=int(data["param_count"]),
                flops=int(data["flops"]),
                eta=by_horizon("eta"), mean_eta=float(data["mean_eta"]),
            )
        except KeyError as exc:
            raise InputError(f"metrics dict missing {exc}") from None


def split_train_val(windows: WindowSet, val_fraction: float) -> tuple:
    """Hold out each cell's trailing windows (by anchor cycle) for validation."""
    if not 0.0 < val_fraction < 1.0:
        raise InputError("val_fraction must be in (0, 1)")
    train_idx: list[int] = []
    val_idx: list[int] = []
    for cell_id in np.unique(windows.cell_ids):
        (members,) = np.nonzero(windows.cell_ids == cell_id)
        members = members[np.argsort(windows.anchors[members], kind="stable")]
        n_val = max(1, int(len(members) * val_fraction)) if len(members) > 1 else 0
        cut = len(members) - n_val
        train_idx.extend(members[:cut])
        val_idx.extend(members[cut:])
    return (windows.take(np.array(sorted(train_idx), dtype=np.int64)),
            windows.take(np.array(sorted(val_idx), dtype=np.int64)))


def predict(model: PaceModel, features: np.ndarray, clamp: bool = True,
            batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode predictions ``[N, H]`` without recording a graph."""
    outputs = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            out = model.forward(features[start:start + batch_size],
                                training=False, clamp=clamp)
            outputs.append(out.data)
    return np.concatenate(outputs, axis=0)


def _dataset_mse(model: PaceModel, windows: WindowSet) -> float:
    preds = predict(model, windows.features, clamp=False)
    diff = preds.astype(np.float64) - windows.targets.astype(np.float64)
    return float((diff ** 2).mean())


def train(model: PaceModel, windows: WindowSet, config: TrainConfig,
          seed: int) -> list:
    """Fit ``model`` in place; returns the epoch history.

    Each cell's trailing ``val_fraction`` of windows is held out; after
    every epoch the validation MSE is computed and the best parameters
    are snapshotted.  Training stops after ``patience`` epochs without
    strict improvement or at ``max_epochs``; the best snapshot is
    restored before returning.
    """
    if len(windows) == 0:
        raise InputError("training window set is empty")
    if windows.targets.shape[1] != model.config.n_horizons:
        raise InputError(
            f"windows carry {windows.targets.shape[1]} horizons, model "
            f"predicts {model.config.n_horizons}")
    train_ws, val_ws = split_train_val(windows, config.val_fraction)
    if len(val_ws) == 0:
        logger.warning("no validation windows; early stopping uses train MSE")

    optimizer = Adam(model.parameters(), lr=config.lr)
    best_val = math.inf
    best_state: dict[str, np.ndarray] = {}
    bad_epochs = 0
    global_step = 0
    history: list[EpochRecord] = []

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng(seed, epoch).permutation(len(train_ws))
        sq_sum = 0.0
        n_rows = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            out = model.forward(train_ws.features[batch], training=True,
                                seed=seed, step=global_step)
            loss = F.mse_loss(out, train_ws.targets[batch])
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch "
                    f"{start // config.batch_size} (windows {batch[:4]}...)")
            backward(loss)
            optimizer.step()
            global_step += 1
            sq_sum += loss_value * out.data.shape[0] * out.data.shape[1]
            n_rows += out.data.shape[0] * out.data.shape[1]
        train_mse = sq_sum / max(n_rows, 1)
        val_mse = _dataset_mse(model, val_ws) if len(val_ws) else train_mse

        improved = val_mse < best_val
        if improved:
            best_val = val_mse
            best_state = {name: p.data.copy() for name, p in model.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
        stopping = bad_epochs >= config.patience or epoch == config.max_epochs
        history.append(EpochRecord(epoch, train_mse, val_mse,
                                   stopping and bad_epochs >= config.patience))
        if stopping:
            break

    for name, data in best_state.items():
        model.params[name].data = data
    return history


def write_history(path, history: list) -> None:
    lines = [",".join(HISTORY_HEADER)]
    for rec in history:
        lines.append("%d,%.9g,%.9g,%s" % (
            rec.epoch, rec.train_mse, rec.val_mse,
            "true" if rec.stopped else "false"))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# metrics


def efficiency(rmse: float, params_in_thousands: float) -> float:
    """Accuracy per model size: 1000 / (rmse * thousands of parameters)."""
    if not rmse > 0.0 or not params_in_thousands > 0.0:
        raise DomainError("efficiency needs positive rmse and parameter count")
    return 1000.0 / (rmse * params_in_thousands)


def _column_metrics(preds: np.ndarray, targets: np.ndarray, col: int) -> tuple:
    diff = preds[:, col].astype(np.float64) - targets[:, col].astype(np.float64)
    return float(np.sqrt((diff ** 2).mean())), float(np.abs(diff).mean())


def evaluate(model: PaceModel, windows: WindowSet,
             horizons=(1, 30, 50)) -> Metrics:
    """Per-horizon RMSE/MAE over ``windows`` plus size-aware efficiency.

    Primary metrics use evaluation-mode (clamped) predictions; ``*_raw``
    carry the unclamped variants.  ``horizons`` are cycle offsets and
    must be present in the model's configured horizon list.
    """
    if len(windows) == 0:
        raise InputError("evaluation window set is empty")
    horizons = tuple(int(h) for h in horizons)
    columns = {}
    for h in horizons:
        try:
            columns[h] = model.config.horizons.index(h)
        except ValueError:
            raise InputError(
                f"horizon {h} not in model horizons "
                f"(max {model.config.horizons[-1]})") from None
    clamped = predict(model, windows.features, clamp=True)
    raw = predict(model, windows.features, clamp=False)
    param_count, flops = count_params_flops(model)
    rmse, mae, rmse_raw, mae_raw, eta = {}, {}, {}, {}, {}
    for h, col in columns.items():
        rmse[h], mae[h] = _column_metrics(clamped, windows.targets, col)
        rmse_raw[h], mae_raw[h] = _column_metrics(raw, windows.targets, col)
        # perfect predictions make the size-normalized score unbounded
        eta[h] = (efficiency(rmse[h], param_count / 1000.0)
                  if rmse[h] > 0.0 else math.inf)
    return Metrics(horizons=horizons, rmse=rmse, mae=mae, rmse_raw=rmse_raw,
                   mae_raw=mae_raw, param_count=param_count, flops=flops,
                   eta=eta, mean_eta=float(np.mean(list(eta.values()))))


# ---------------------------------------------------------------------------
# permutation importance


@dataclass(frozen=True)
class ImportanceResult:
    feature_names: tuple
    base_rmse: float
    raw: np.ndarray
    percent: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "base_rmse": self.base_rmse,
            "raw": [float(v) for v in self.raw],
            "percent": [float(v) for v in self.percent],
        }


def permutation_importance(model: PaceModel, windows: WindowSet,
                           seed: int) -> ImportanceResult:
    """Error increase when one feature column is shuffled across windows.

    Each feature's whole per-window series moves as a block (the same
    permutation applies at every timestep), so temporal structure inside
    a window is preserved while the cross-window association breaks.
    Raw importances are clipped at zero and normalized to percentages.
    """
    if len(windows) == 0:
        raise InputError("importance needs a non-empty window set")
    n_features = windows.features.shape[2]
    preds = predict(model, windows.features)
    diff = preds.astype(np.float64) - windows.targets.astype(np.float64)
    base_rmse = float(np.sqrt((diff ** 2).mean()))

    raw = np.zeros(n_features)
    for col in range(n_features):
        perm = derive_rng(seed, DOMAIN_EVAL, col).permutation(len(windows))
        shuffled = windows.features.copy()
        shuffled[:, :, col] = shuffled[perm, :, col]
        preds = predict(model, shuffled)
        diff = preds.astype(np.float64) - windows.targets.astype(np.float64)
        raw[col] = max(0.0, float(np.sqrt((diff ** 2).mean())) - base_rmse)

    total = raw.sum()
    if total > 0.0:
        percent = raw / total * 100.0
    else:
        logger.warning("all permutation importances are zero; "
                       "reporting a uniform distribution")
        percent = np.full(n_features, 100.0 / n_features)
    return ImportanceResult(feature_names=tuple(windows.feature_names),
                            base_rmse=base_rmse, raw=raw, percent=percent)


# ---------------------------------------------------------------------------
# multi-seed runs and ablations


@dataclass(frozen=True)
class RunReport:
    variant: str
    model_config: ModelConfig
    train_config: TrainConfig
    config_digest: str
    seeds: tuple
    metrics: list
    histories: list

    def mean_rmse(self, horizon: int) -> float:
        return float(np.mean([m.rmse[horizon] for m in self.metrics]))

    def std_rmse(self, horizon: int) -> float:
        return float(np.std([m.rmse[horizon] for m in self.metrics]))

    def mean_eta(self) -> float:
        return float(np.mean([m.mean_eta for m in self.metrics]))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "config_digest": self.config_digest,
            "seeds": list(self.seeds),
            "metrics": [m.to_dict() for m in self.metrics],
            "histories": [[[r.epoch, r.train_mse, r.val_mse, r.stopped]
                           for r in hist] for hist in self.histories],
            "mean_rmse": {str(h): self.mean_rmse(h)
                          for h in self.metrics[0].horizons},
            "std_rmse": {str(h): self.std_rmse(h)
                         for h in self.metrics[0].horizons},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        try:
            return cls(
                variant=str(data["variant"]),
                model_config=ModelConfig.from_dict(data["model_config"]),
                train_config=TrainConfig.from_dict(data["train_config"]),
                config_digest=str(data["config_digest"]),
                seeds=tuple(int(s) for s in data["seeds"]),
                metrics=[Metrics.from_dict(m) for m in data["metrics"]],
                histories=[[EpochRecord(int(e), float(t), float(v), bool(s))
                            for e, t, v, s in hist]
                           for hist in data["histories"]],
            )
        except KeyError as exc:
            raise InputError(f"run report missing {exc}") from None


def config_digest(model_config: ModelConfig, train_config: TrainConfig) -> str:
    """Digest of everything that defines a run except the seed."""
    payload = {"model": model_config.to_dict(),
               "train": {k: v for k, v in train_config.to_dict().items()
                         if k != "seeds"}}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def prepared_variant(prepared: PreparedData, variant: str) -> PreparedData:
    """Project the window sets for ablations that change the feature set."""
    if variant == "no_physics":
        cols = [prepared.feature_names.index(n) for n in SENSOR_FEATURES]
        return PreparedData(train=prepared.train.take_features(cols),
                            test=prepared.test.take_features(cols),
                            window=prepared.window,
                            horizons=prepared.horizons,
                            feature_names=tuple(
                                prepared.feature_names[c] for c in cols))
    return prepared


def run_training(prepared: PreparedData, model_config: ModelConfig,
                 train_config: TrainConfig, variant: str = "base",
                 eval_horizons=(1, 30, 50)) -> tuple:
    """Train/evaluate one configuration across all seeds.

    Returns ``(RunReport, artifacts)`` where ``artifacts`` maps each seed
    to its trained model and the shared fitted normalizer.
    """
    if model_config.features != prepared.train.features.shape[2]:
        raise InputError(
            f"config expects {model_config.features} features, windows have "
            f"{prepared.train.features.shape[2]}")
    normalizer = Normalizer.fit(prepared.train)
    train_ws = normalizer.apply(prepared.train)
    test_ws = normalizer.apply(prepared.test)

    metrics, histories, models = [], [], {}
    for seed in train_config.seeds:
        model = build_model(model_config, seed)
        history = train(model, train_ws, train_config, seed)
        metrics.append(evaluate(model, test_ws, eval_horizons))
        histories.append(history)
        models[seed] = model
        logger.info("variant=%s seed=%d stopped_after=%d rmse_h1=%.5f",
                    variant, seed, len(history),
                    metrics[-1].rmse[eval_horizons[0]])
    report = RunReport(
        variant=variant, model_config=model_config, train_config=train_config,
        config_digest=config_digest(model_config, train_config),
        seeds=train_config.seeds, metrics=metrics, histories=histories)
    return report, {"models": models, "normalizer": normalizer,
                    "test_windows": test_ws, "train_windows": train_ws}


def run_ablation(base_config: ModelConfig, variant: str,
                 prepared: PreparedData, train_config: TrainConfig,
                 eval_horizons=(1, 30, 50)) -> tuple:
    """Train the base and one ablated variant under identical seeds."""
    var_config = variant_config(base_config, variant)  # validates the name
    base_report, _ = run_training(prepared, base_config, train_config,
                                  "base", eval_horizons)
    var_report, _ = run_training(prepared_variant(prepared, variant),
                                 var_config, train_config, variant,
                                 eval_horizons)
    return base_report, var_report
