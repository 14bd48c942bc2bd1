"""The four training stages and the fault/bit-width sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import crossbar as xb
from .config import PipelineConfig
from .data import Dataset, load_dataset, write_digits_corpus
from .model import Model, evaluate_accuracy, reference_architecture
from .pruning import PruneParams, SparsityReport, adaptive_prune, global_prune, measure_sparsity
from .quantizer import QuantScheme, quantize_model, quantize_values
from .regularizers import regularized_layers, relax_lambda, sawtooth
from .tensor import DTYPE, softmax_cross_entropy_forward

logger = logging.getLogger(__name__)

STAGE_IDS = {"initial": 1, "regularized": 2, "prune_quantize": 3, "finetune": 4, "sweep": 5}
# canonical order of record stages in a run log
STAGE_ORDER = ("initial", "regularized", "prune_quantize", "finetune", "inject", "eval", "sweep")
SWEEP_AXES = ("bits", "drift_r", "stuck_fraction", "aging")


class NumericalError(RuntimeError):
    pass


def stage_rank(stage: str) -> int:
    """Position of a record's stage (``"sweep:bits"`` ranks as ``"sweep"``)."""
    return STAGE_ORDER.index(stage.split(":")[0])


@dataclass
class MetricsRecord:
    stage: str
    epoch: int
    train_loss: float | None = None
    val_accuracy: float | None = None
    test_accuracy: float | None = None
    sparsity: float | None = None
    lambda_s: float | None = None
    faults: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PipelineState:
    """Everything carried between stages.

    ``float_model`` is the full-precision network (the shadow weights once
    fine-tuning starts); ``model`` is the deployable one, quantized after
    stage three.
    """

    float_model: Model
    model: Model
    scheme: QuantScheme | None = None
    report: SparsityReport | None = None
    prune_steps: list = field(default_factory=list)
    records: list = field(default_factory=list)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_IDS[stage]])


def build_model(config: PipelineConfig, data: Dataset) -> Model:
    return Model(reference_architecture(data.num_classes, data.image_shape),
                 data.image_shape, data.num_classes, seed=config.seed)


def prepare_data(config: PipelineConfig, workdir=None) -> Dataset:
    path = config.data.path
    if path is None:
        from pathlib import Path
        path = Path(workdir or ".") / "digits8x8.csv"
        if not path.exists():
            write_digits_corpus(path)
    return load_dataset(path, config.data.format, config.data.fractions, config.seed,
                        config.data.num_classes, config.data.labels_path)


def _snapshot(model: Model, data: Dataset, stage: str, epoch: int, loss=None, lam=None,
              faults=None) -> MetricsRecord:
    return MetricsRecord(
        stage, epoch, loss,
        evaluate_accuracy(model, data.X_val, data.y_val) if len(data.y_val) else None,
        evaluate_accuracy(model, data.X_test, data.y_test) if len(data.y_test) else None,
        measure_sparsity(model).overall, lam, faults)


def train_epochs(model: Model, data: Dataset, config: PipelineConfig, stage: str, epochs: int,
                 scheme: QuantScheme | None = None, lambda_s=None,
                 shadow: Model | None = None,
                 learning_rate: float | None = None) -> tuple[Model, list[MetricsRecord]]:
    """Minibatch SGD on cross-entropy plus the configured penalty.

    ``lambda_s(epoch)`` gives the sawtooth coefficient per epoch (1-based).
    With ``shadow`` given, training is straight-through: each step runs the
    network on the quantized shadow weights and applies the gradient to the
    shadow; ``model`` holds the quantized weights at every epoch end.
    """
    reg = config.regularizer
    tc = config.train
    rng = stage_rng(config.seed, stage)
    scales = scheme.per_layer_scale if scheme is not None else None
    a = config.clamp_levels
    if a is None and scheme is not None:
        a = scheme.a
    records = []
    n = len(data.y_train)
    lr = tc.learning_rate if learning_rate is None else learning_rate
    master = shadow if shadow is not None else model
    for epoch in range(1, epochs + 1):
        lam = None if lambda_s is None else float(lambda_s(epoch))
        order = rng.permutation(n)
        loss_sum, batches = 0.0, 0
        for s in range(0, n, tc.batch_size):
            idx = order[s:s + tc.batch_size]
            if shadow is not None:
                _load_quantized(model, shadow, scheme)
            model.zero_grad()
            logits = model.forward(data.X_train[idx], train=True)
            loss, dlogits = softmax_cross_entropy_forward(logits, data.y_train[idx])
            model.backward(dlogits)
            penalty, rgrads = (0.0, {}) if reg.kind == "none" else \
                reg.penalty_and_gradients(master, scales, a, lam)
            total = loss + penalty
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss in stage {stage}, epoch {epoch}")
            step = DTYPE(lr)
            for i in master.weight_layers:
                g = model.weights[i].grad
                if i in rgrads:
                    g = g + rgrads[i]
                master.weights[i].data -= step * g
                master.biases[i].data -= step * model.biases[i].grad
            master.apply_masks()
            loss_sum += total
            batches += 1
        if shadow is not None:
            _load_quantized(model, shadow, scheme)
        for t in model.parameters():
            if not np.all(np.isfinite(t.data)):
                raise NumericalError(f"non-finite weights in stage {stage}, epoch {epoch}")
        records.append(_snapshot(model, data, stage, epoch, loss_sum / max(batches, 1), lam))
        lr *= tc.lr_decay
    model.zero_grad()
    return model, records


def _load_quantized(model: Model, shadow: Model, scheme: QuantScheme) -> None:
    for i in shadow.weight_layers:
        p = scheme.per_layer_scale[i]
        model.weights[i].data = quantize_values(shadow.weights[i].data, p, scheme.a)
        model.biases[i].data = quantize_values(shadow.biases[i].data, p, scheme.a)
    model.apply_masks()


def mean_sawtooth(model: Model, scheme: QuantScheme, a: int | None = None) -> float:
    """Mean per-weight sawtooth value over the regularized layers."""
    a = scheme.a if a is None else a
    vals = [sawtooth(model.weights[i].data, scheme.per_layer_scale[i], a).ravel()
            for i in regularized_layers(model)]
    return float(np.concatenate(vals).mean())


def level_mass(model: Model, scheme: QuantScheme, tol: float = 0.1) -> float:
    """Fraction of weights within ``tol`` periods of a level multiple."""
    vals = []
    for i in regularized_layers(model):
        x = model.weights[i].data.astype(np.float64) / scheme.per_layer_scale[i]
        vals.append(np.abs(x - np.round(x)).ravel() <= tol)
    return float(np.concatenate(vals).mean())


def quantization_error(model: Model, scheme: QuantScheme) -> float:
    """L1 distance between the weights and their quantized image."""
    err = 0.0
    for i in model.weight_layers:
        w = model.weights[i].data
        err += float(np.abs(w - quantize_values(w, scheme.per_layer_scale[i], scheme.a)).sum(
            dtype=np.float64))
    return err


def weight_histogram(model: Model, scheme: QuantScheme, bin_width: float = 0.05) -> str:
    """CSV histogram of regularized weights in level units (``w / p``)."""
    x = np.concatenate([model.weights[i].data.ravel().astype(np.float64)
                        / scheme.per_layer_scale[i] for i in regularized_layers(model)])
    top = np.ceil(np.abs(x).max() + bin_width) if x.size else 1.0
    edges = np.arange(-top, top + bin_width / 2, bin_width)
    counts, edges = np.histogram(x, bins=edges)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left", "bin_right", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])
    return buf.getvalue()


def stage_initial_train(config: PipelineConfig, data: Dataset,
                        model: Model | None = None) -> PipelineState:
    model = build_model(config, data) if model is None else model.copy()
    model, records = train_epochs(model, data, _without_regularizer(config), "initial",
                                  config.train.epochs_initial)
    return PipelineState(model, model, records=records)


def _without_regularizer(config: PipelineConfig) -> PipelineConfig:
    from dataclasses import replace
    return replace(config, regularizer=replace(config.regularizer, kind="none"))


def calibrate_scheme(model: Model, config: PipelineConfig) -> QuantScheme:
    return QuantScheme(config.quant.bits, config.quant.clamp()).calibrate(model)


def stage_regularized_train(state: PipelineState, config: PipelineConfig,
                            data: Dataset) -> PipelineState:
    """Train with the configured penalty; the level periods are frozen at stage start."""
    model = state.float_model.copy()
    scheme = calibrate_scheme(model, config)
    lam = config.regularizer.lambda_s
    model, records = train_epochs(model, data, config, "regularized",
                                  config.train.epochs_regularized, scheme, lambda e: lam)
    return PipelineState(model, model, scheme, records=state.records + records)


def stage_prune(state: PipelineState, config: PipelineConfig, data: Dataset,
                params: PruneParams | None = None) -> PipelineState:
    """Adaptive (or global) pruning of the float model, judged on the validation split."""
    params = config.prune if params is None else params
    scheme = state.scheme or calibrate_scheme(state.float_model, config)
    model = state.float_model
    steps = []
    if config.prune.enabled and params.lambda_p > 0:
        if config.prune.use_global:
            model = global_prune(model, params.lambda_p, params.mu)
        else:
            model, _ = adaptive_prune(
                model, params, lambda m: evaluate_accuracy(m, data.X_val, data.y_val),
                history=steps)
    return PipelineState(model, model, scheme, measure_sparsity(model), steps,
                         list(state.records))


def stage_quantize(state: PipelineState, config: PipelineConfig, data: Dataset) -> PipelineState:
    """Put the (pruned) float model on its layers' conductance levels."""
    scheme = state.scheme or calibrate_scheme(state.float_model, config)
    qmodel, _ = quantize_model(state.float_model, scheme)
    report = measure_sparsity(qmodel)
    rec = _snapshot(qmodel, data, "prune_quantize", 0)
    return PipelineState(state.float_model, qmodel, scheme, report, state.prune_steps,
                         state.records + [rec])


def stage_prune_quantize(state: PipelineState, config: PipelineConfig, data: Dataset,
                         params: PruneParams | None = None) -> PipelineState:
    """Adaptive (or global) pruning on the validation split, then quantization."""
    return stage_quantize(stage_prune(state, config, data, params), config, data)


def stage_fine_tune(state: PipelineState, config: PipelineConfig, data: Dataset,
                    decay: float | None = None) -> PipelineState:
    """Straight-through fine-tuning with the sawtooth coefficient relaxed every epoch."""
    reg = config.regularizer
    decay = reg.decay if decay is None else decay
    shadow = state.float_model.copy()
    model = state.model.copy()
    model, records = train_epochs(model, data, config, "finetune", config.train.epochs_finetune,
                                  state.scheme, lambda e: relax_lambda(reg.lambda_s, decay, e),
                                  shadow=shadow, learning_rate=config.train.finetune_learning_rate)
    return PipelineState(shadow, model, state.scheme, measure_sparsity(model), state.prune_steps,
                         state.records + records)


def run_pipeline(config: PipelineConfig, data: Dataset) -> PipelineState:
    state = stage_initial_train(config, data)
    state = stage_regularized_train(state, config, data)
    state = stage_prune_quantize(state, config, data)
    return stage_fine_tune(state, config, data)


def fault_seed(seed: int, rep: int) -> int:
    return seed * 1000 + rep + 1


def sweep(state: PipelineState, config: PipelineConfig, data: Dataset, axis: str, grid,
          repetitions: int | None = None) -> tuple[list[MetricsRecord], list[dict]]:
    """Evaluate the mapped model on the test split at every grid point.

    Returns per-repetition records and one summary row (mean, std) per point.
    Fault axes repeat with a fresh fault seed per repetition.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    fc = config.faults
    reps = 1 if axis == "bits" else (fc.repetitions if repetitions is None else repetitions)
    scheme = state.scheme or calibrate_scheme(state.float_model, config)
    if axis == "aging" and any(int(v) >= 2 ** scheme.bits for v in grid):
        raise ValueError(f"aging grid values must be < 2**bits = {2 ** scheme.bits}")
    base_pairs = None
    if axis != "bits":
        base_pairs = xb.map_model(state.model, scheme)
    records, summary = [], []
    for value in grid:
        accs = []
        for rep in range(reps):
            seed = fault_seed(config.seed, rep)
            if axis == "bits":
                s = scheme.with_bits(int(value))
                qmodel, _ = quantize_model(state.float_model, s)
                model, pairs = qmodel, xb.map_model(qmodel, s)
            else:
                model = state.model
                if axis == "drift_r":
                    pairs = xb.inject_drift(base_pairs, xb.DriftParams(float(value),
                                                                       fc.drift_fraction), seed)
                elif axis == "stuck_fraction":
                    pairs = xb.inject_stuck_off(base_pairs, float(value), seed)
                else:
                    pairs = base_pairs if int(value) == 0 else xb.inject_aging(
                        base_pairs, xb.AgingParams(fc.sweep_aging_fraction, int(value)), seed)
            acc = xb.evaluate_on_crossbar(pairs, model, data.X_test, data.y_test)
            accs.append(acc)
            records.append(MetricsRecord(f"sweep:{axis}", rep, test_accuracy=acc,
                                         sparsity=measure_sparsity(model).overall,
                                         faults={"axis": axis, "value": value, "seed": seed}))
        summary.append({"axis": axis, "value": value, "mean": float(np.mean(accs)),
                        "std": float(np.std(accs)), "n": reps})
    return records, summary
