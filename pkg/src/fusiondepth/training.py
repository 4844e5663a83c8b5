"""Training loop, evaluation and the alpha sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tensor, backward, no_grad, precision
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import DatasetError, ImageSample, load_dataset, synth_dataset
from .model import DepthEstimator
from .objective import LossConfig, MetricsReport, composite_loss, metric_errors, write_report
from .optim import Adam, AdamState
from .spectral import frequency_input

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float | str):
        super().__init__(f"non-finite loss at step {step}: {loss}")
        self.step = step
        self.loss = loss


class FrequencyCache:
    """Per-sample frequency-branch inputs, keyed by sample id."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def get(self, sample: ImageSample) -> np.ndarray:
        arr = self._store.get(sample.id)
        if arr is None:
            arr = frequency_input(sample.image).data
            self._store[sample.id] = arr
        return arr

    def __len__(self) -> int:
        return len(self._store)


def resolve_dataset(source: str, image_size: int, depth_scale: float) -> list[ImageSample]:
    """``synth:N:seed`` or a dataset directory."""
    if source.startswith("synth:"):
        try:
            _, count, seed = source.split(":")
            count, seed = int(count), int(seed)
        except ValueError:
            raise DatasetError(f"bad synthetic dataset {source!r}; expected synth:N:seed") from None
        if count < 1:
            raise DatasetError("synthetic dataset needs at least one sample")
        return synth_dataset(count, seed, image_size, depth_scale)
    return load_dataset(source, image_size)


def _batch(samples: Sequence[ImageSample], cache: FrequencyCache) -> tuple[Tensor, Tensor, Tensor]:
    images = Tensor(np.stack([s.image for s in samples]))
    freqs = Tensor(np.stack([cache.get(s) for s in samples]))
    depths = Tensor(np.stack([s.depth for s in samples]))
    return images, freqs, depths


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for one epoch from a counter-based generator keyed by (seed, epoch)."""
    key = np.array([seed, epoch], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def snapshot(model: DepthEstimator, cfg: TrainConfig, opt: Adam | None = None) -> Checkpoint:
    state = opt.state if opt is not None else AdamState()
    return Checkpoint(
        config=cfg,
        params={k: p.data.copy() for k, p in model.named_parameters()},
        buffers={k: v.copy() for k, v in model.state_arrays().items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        step=state.t,
    )


def restore(ckpt: Checkpoint) -> DepthEstimator:
    """Rebuild the network from a checkpoint (parameters are copied bit-exactly)."""
    model = DepthEstimator.from_config(ckpt.config)
    params = model.parameters()
    missing = params.keys() - ckpt.params.keys()
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}")
    for name, p in params.items():
        arr = ckpt.params[name]
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint parameter {name} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        p.zero_grad()
    model.load_state_arrays(ckpt.buffers)
    return model


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def train(cfg: TrainConfig, samples: Sequence[ImageSample] | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on the composite loss; deterministic for a fixed (seed, cfg)."""
    with precision(cfg.precision):
        if samples is None:
            samples = resolve_dataset(cfg.dataset, cfg.image_size, cfg.depth_scale)
        _check_sizes(samples, cfg)
        model = DepthEstimator.from_config(cfg)
        params = model.parameters()
        opt = Adam(params, lr=cfg.learning_rate)
        loss_cfg = LossConfig(alpha=cfg.alpha)
        cache = FrequencyCache()
        result = TrainResult(snapshot(model, cfg))

        step = 0
        for epoch in range(cfg.epochs):
            order = epoch_order(cfg.seed, epoch, len(samples))
            total, count = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                step += 1
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                images, freqs, depths = _batch(batch, cache)
                try:
                    pred = model(images, freqs)
                    loss = composite_loss(pred, depths, loss_cfg)
                except NonFiniteError as exc:
                    raise TrainingDiverged(step, str(exc)) from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(step, value)
                backward(loss, leaves=params.values())
                opt.step()
                result.step_losses.append(value)
                total += value * len(batch)
                count += len(batch)
            mean_loss = total / count
            result.epoch_losses.append(mean_loss)
            log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, mean_loss)
            if on_epoch is not None:
                on_epoch(epoch, mean_loss)
        result.checkpoint = snapshot(model, cfg, opt)
    return result


def _check_sizes(samples: Sequence[ImageSample], cfg: TrainConfig) -> None:
    if not samples:
        raise DatasetError("dataset is empty")
    for s in samples:
        if s.size != (cfg.image_size, cfg.image_size):
            raise ValueError(f"sample {s.id} is {s.size[0]}×{s.size[1]}, model expects {cfg.image_size}×{cfg.image_size}")


def predict(model: DepthEstimator, samples: Sequence[ImageSample], cache: FrequencyCache | None = None,
            batch_size: int = 8) -> np.ndarray:
    """Eval-mode forward pass; returns B×1×H×W normalised depth."""
    cache = cache or FrequencyCache()
    model.eval()
    outs = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            images, freqs, _ = _batch(samples[start:start + batch_size], cache)
            outs.append(model(images, freqs).values.data)
    return np.concatenate(outs)


def evaluate(ckpt: Checkpoint, dataset: Sequence[ImageSample]) -> MetricsReport:
    """Depth metrics over the concatenated valid pixels of ``dataset``."""
    cfg = ckpt.config
    with precision(cfg.precision):
        _check_sizes(dataset, cfg)
        model = restore(ckpt)
        pred = predict(model, dataset)
    scales = np.array([s.depth_scale for s in dataset])[:, None, None, None]
    target = np.stack([s.depth for s in dataset])
    return metric_errors(pred * scales, target * scales, cfg.min_valid)


def alpha_sweep(cfg: TrainConfig, alphas: Sequence[float] = DEFAULT_ALPHAS,
                samples: Sequence[ImageSample] | None = None,
                eval_samples: Sequence[ImageSample] | None = None) -> tuple[str, list[str]]:
    """Train and evaluate one model per alpha (same seed); returns (CSV text, failures).

    Rows are in ascending alpha order. A failed run is reported as a row of
    ``nan`` metrics and its message collected in ``failures``.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alpha list is empty")
    bad = [a for a in alphas if not 0.0 <= a <= 1.0]
    if bad:
        raise ValueError(f"alpha values outside [0, 1]: {bad}")
    if samples is None:
        samples = resolve_dataset(cfg.dataset, cfg.image_size, cfg.depth_scale)
    if eval_samples is None:
        eval_samples = (resolve_dataset(cfg.eval_dataset, cfg.image_size, cfg.depth_scale)
                        if cfg.eval_dataset else samples)

    rows: list[tuple[float, MetricsReport]] = []
    failures: list[str] = []
    for alpha in sorted(alphas):
        try:
            result = train(cfg.replace(alpha=alpha), samples)
            report = evaluate(result.checkpoint, eval_samples)
        except Exception as exc:  # one α failing must not sink the others
            log.error("alpha %.3f failed: %s", alpha, exc)
            failures.append(f"alpha={alpha}: {exc}")
            nan = float("nan")
            report = MetricsReport(nan, nan, nan, nan, 0)
        else:
            log.info("alpha %.3f rmse %.4f abs_rel %.4f", alpha, report.rmse, report.abs_rel)
        rows.append((alpha, report))
    return write_report(rows), failures
