"""Poisson-loss training: AdamW, plateau learning-rate decay, early stopping, two phases.

Phase 1 trains encoder and readout jointly on the source condition. Phase 2
freezes the encoder, attaches zero-initialized modulation units and trains
them (and, by default, the readout) on a new condition. Both phases share
the schedule and return the best-validation checkpoint.
"""

import enum
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np
import pandas as pd

from .autodiff import DiffTensor, as_tensor, backward, log, no_grad, tape_scope
from .checkpoint import Checkpoint
from .config import ModulationConfig, ReadoutConfig, TrainConfig
from .errors import ConfigError, ContractError, DivergenceError, InvariantBreach
from .model import AvmModel, FreezePlan, digest_arrays
from .synthdata import Batch, DatasetBundle, TrialSet

logger = logging.getLogger(__name__)

STRATEGIES = ("avm", "avm-s", "avm-b", "full-ft", "frozen")
LOG_COLUMNS = ["epoch", "split", "loss", "lr", "seconds"]
EVAL_BATCH = 64
PREFETCH_CAPACITY = 2


def poisson_loss(r: Union[np.ndarray, DiffTensor], o: DiffTensor, eps: float = 1e-8) -> DiffTensor:
    """``sum(o - r * log(o + eps))`` over trials and neurons."""
    r = np.asarray(r.values if isinstance(r, DiffTensor) else r, dtype=np.float64)
    o = as_tensor(o)
    if r.shape != o.shape:
        raise ContractError(f"poisson_loss: responses {r.shape} and predictions {o.shape} differ in shape")
    if np.any(o.values <= 0):
        raise ContractError("poisson_loss: predictions must be strictly positive")
    return (o - log(o + eps) * r).sum()


def poisson_loss_value(r: np.ndarray, o: np.ndarray, eps: float = 1e-8) -> float:
    """Mean over trials of the per-trial Poisson loss, without recording."""
    return float(np.sum(o - r * np.log(o + eps)) / r.shape[0])


@dataclass
class OptimizerState:
    """AdamW moments for trainable parameters only."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initialize(cls, params: dict[str, DiffTensor], config: TrainConfig) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.values) for name, p in params.items()},
            v={name: np.zeros_like(p.values) for name, p in params.items()},
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
        )


def adamw_step(
    params: dict[str, DiffTensor], state: OptimizerState, lr: float, weight_decay: float = 0.0
) -> None:
    """One decoupled-weight-decay Adam update using each parameter's ``grad``."""
    missing = [name for name in params if name not in state.m]
    if missing:
        raise ContractError(f"optimizer state missing for {missing[:3]}")
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        grad = param.grad
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps) + weight_decay * param.values
        param.values -= lr * update


class ScheduleAction(str, enum.Enum):
    KEEP = "keep"
    DECAY = "decay"
    STOP = "stop"


class PlateauScheduler:
    """Decay on a validation plateau; stop once decays are exhausted and a further window passes."""

    def __init__(self, config: TrainConfig):
        self.patience = config.plateau_patience
        self.max_decays = config.max_decays_before_stop
        self.threshold = config.improvement_threshold
        self.max_epochs = config.max_epochs
        self.best = float("inf")
        self.stale_epochs = 0
        self.decays = 0
        self.epoch = 0

    def step(self, val_loss: float) -> ScheduleAction:
        self.epoch += 1
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1

        if self.epoch >= self.max_epochs:
            return ScheduleAction.STOP
        if self.stale_epochs >= self.patience:
            self.stale_epochs = 0
            if self.decays >= self.max_decays:
                return ScheduleAction.STOP
            self.decays += 1
            return ScheduleAction.DECAY
        return ScheduleAction.KEEP

    @classmethod
    def replay(cls, history: Iterable[float], config: TrainConfig) -> "PlateauScheduler":
        scheduler = cls(config)
        for loss in history:
            scheduler.step(loss)
        return scheduler


def lr_schedule_step(val_loss_history: list[float], config: TrainConfig) -> ScheduleAction:
    """Action after the last epoch of ``val_loss_history``, as a pure function of the history."""
    if not val_loss_history:
        raise ContractError("the schedule needs at least one completed epoch")
    scheduler = PlateauScheduler.replay(val_loss_history[:-1], config)
    return scheduler.step(val_loss_history[-1])


_DONE = object()


class BatchPrefetcher:
    """Assemble batches on a background thread, at most ``capacity`` ahead of the consumer."""

    def __init__(self, trials: TrialSet, order: list[np.ndarray], capacity: int = PREFETCH_CAPACITY):
        self._trials = trials
        self._order = order
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._fill, name="batch-prefetch", daemon=True)

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self) -> None:
        try:
            for index in self._order:
                if not self._put(self._trials.batch(index)):
                    return
        except Exception as e:
            self._put(e)
        finally:
            self._put(_DONE)

    def __iter__(self) -> Iterator[Batch]:
        self._thread.start()
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=1.0)

    def __enter__(self) -> "BatchPrefetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def predict(model: AvmModel, trials: TrialSet, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode predictions ``[n_trials, n_neurons]``."""
    outputs = []
    with no_grad():
        for start in range(0, len(trials), batch_size):
            batch = trials.batch(np.arange(start, min(start + batch_size, len(trials))))
            outputs.append(model.forward(batch.images, batch.behavior, mode="eval").values)
    return np.concatenate(outputs)


def evaluate_loss(model: AvmModel, trials: TrialSet, eps: float = 1e-8) -> float:
    return poisson_loss_value(trials.responses, predict(model, trials), eps)


@dataclass
class TrainingLog:
    """Per-epoch ``epoch,split,loss,lr,seconds`` rows."""

    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, loss: float, lr: float, seconds: float) -> None:
        self.rows.append({"epoch": epoch, "split": split, "loss": loss, "lr": lr, "seconds": seconds})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Training log written to: {path}")


class Trainer:
    """Mini-batch AdamW loop with plateau decay and best-validation snapshots."""

    def __init__(
        self,
        model: AvmModel,
        train_set: TrialSet,
        val_set: TrialSet,
        config: TrainConfig,
        plan: FreezePlan,
        strategy: str = "plain",
    ):
        config.validate()
        if train_set.num_neurons != model.readout.num_neurons or val_set.num_neurons != model.readout.num_neurons:
            raise ConfigError(
                f"dataset has {train_set.num_neurons} neurons, readout has {model.readout.num_neurons}"
            )
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.config = config
        self.plan = plan
        self.strategy = strategy
        model.apply_freeze(plan)
        self.params = model.trainable_parameters()
        self.state = OptimizerState.initialize(self.params, config)
        self.rng = np.random.default_rng(config.seed)
        self.scheduler = PlateauScheduler(config)
        self.history: list[float] = []
        self.lr = config.lr
        self.epoch = 0
        self.stopped = False
        self.log = TrainingLog()
        self.base_backbone_digest: Optional[str] = None
        self.best_val = float("inf")
        self.best: Optional[Checkpoint] = None

    @classmethod
    def resume(
        cls,
        checkpoint: Checkpoint,
        train_set: TrialSet,
        val_set: TrialSet,
        config: TrainConfig,
        plan: FreezePlan,
    ) -> "Trainer":
        """Continue from a snapshot exactly where it left off."""
        trainer = cls(checkpoint.build_model(), train_set, val_set, config, plan, checkpoint.strategy)
        if set(checkpoint.adam_m) != set(trainer.params):
            raise ConfigError("checkpoint optimizer state does not match the freeze plan")
        trainer.state.m = {k: v.copy() for k, v in checkpoint.adam_m.items()}
        trainer.state.v = {k: v.copy() for k, v in checkpoint.adam_v.items()}
        trainer.state.t = checkpoint.adam_t
        trainer.rng = checkpoint.restore_rng()
        trainer.history = list(checkpoint.val_history)
        trainer.scheduler = PlateauScheduler.replay(trainer.history, config)
        trainer.lr = checkpoint.lr
        trainer.epoch = checkpoint.epoch
        trainer.base_backbone_digest = checkpoint.base_backbone_digest
        trainer.best_val = checkpoint.best_val_loss
        trainer.best = checkpoint
        return trainer

    @property
    def trainable_count(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    def snapshot(self) -> Checkpoint:
        return Checkpoint(
            spec=self.model.spec,
            params=self.model.state_arrays(),
            adam_m={k: v.copy() for k, v in self.state.m.items()},
            adam_v={k: v.copy() for k, v in self.state.v.items()},
            adam_t=self.state.t,
            epoch=self.epoch,
            best_val_loss=self.best_val,
            val_history=list(self.history),
            lr=self.lr,
            rng_state=self.rng.bit_generator.state,
            phase=self.plan.phase,
            strategy=self.strategy,
            trainable=sorted(self.params),
            base_backbone_digest=self.base_backbone_digest,
        )

    def epoch_order(self) -> list[np.ndarray]:
        permutation = self.rng.permutation(len(self.train_set))
        size = self.config.batch_size
        return [permutation[i : i + size] for i in range(0, permutation.size, size)]

    def batches(self, order: list[np.ndarray]) -> Iterator[Batch]:
        if not self.config.prefetch:
            for index in order:
                yield self.train_set.batch(index)
            return
        with BatchPrefetcher(self.train_set, order) as prefetcher:
            yield from prefetcher

    def train_step(self, batch: Batch, step: int) -> float:
        with tape_scope():
            predictions = self.model.forward(batch.images, batch.behavior, mode="train", rng=self.rng)
            loss = poisson_loss(batch.responses, predictions, self.config.loss_eps)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {self.epoch + 1}, step {step} (lr={self.lr:g})"
                )
            for param in self.params.values():
                param.zero_grad()
            backward(loss)
        adamw_step(self.params, self.state, self.lr, self.config.weight_decay)
        self.model.readout.clamp_()
        return value

    def evaluate(self, split: str) -> float:
        trials = self.train_set if split == "train" else self.val_set
        value = evaluate_loss(self.model, trials, self.config.loss_eps)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite {split} loss after epoch {self.epoch}")
        return value

    def log_initial(self) -> float:
        """Record the untrained model as epoch 0 and return its validation loss."""
        start = time.perf_counter()
        train_loss = self.evaluate("train")
        val_loss = self.evaluate("val")
        seconds = time.perf_counter() - start
        self.log.add(0, "train", train_loss, self.lr, seconds)
        self.log.add(0, "val", val_loss, self.lr, seconds)
        self.best_val = val_loss
        self.best = self.snapshot()
        logger.info(f"Epoch 0: train {train_loss:.6f}, val {val_loss:.6f}")
        return val_loss

    def run_epoch(self) -> ScheduleAction:
        start = time.perf_counter()
        lr = self.lr
        order = self.epoch_order()
        for step, batch in enumerate(self.batches(order)):
            batch_loss = self.train_step(batch, step)
            logger.debug(f"Epoch {self.epoch + 1} step {step}: batch loss {batch_loss:.6f}")
        self.epoch += 1

        train_loss = self.evaluate("train")
        val_loss = self.evaluate("val")
        seconds = time.perf_counter() - start
        self.log.add(self.epoch, "train", train_loss, lr, seconds)
        self.log.add(self.epoch, "val", val_loss, lr, seconds)

        improved = val_loss < self.best_val
        if improved:
            self.best_val = val_loss
        self.history.append(val_loss)
        action = self.scheduler.step(val_loss)
        if action is ScheduleAction.DECAY:
            self.lr *= self.config.lr_decay_factor
            logger.info(f"Validation plateau: learning rate decayed to {self.lr:g}")
        if improved:
            self.best = self.snapshot()
        logger.info(
            f"Epoch {self.epoch}: train {train_loss:.6f}, val {val_loss:.6f}, lr {lr:g}, {seconds:.1f}s"
            + (" (best)" if improved else "")
        )
        return action

    def run(self, max_epochs: Optional[int] = None) -> Checkpoint:
        """Train until the schedule stops (or ``max_epochs`` more epochs); return the best snapshot."""
        if self.best is None:
            self.best = self.snapshot()
        budget = max_epochs if max_epochs is not None else self.config.max_epochs
        for _ in range(budget):
            if self.stopped:
                break
            if self.run_epoch() is ScheduleAction.STOP:
                self.stopped = True
                logger.info(f"Early stop after epoch {self.epoch} (best val {self.best_val:.6f})")
        return self.best


def _split_sets(dataset: DatasetBundle) -> tuple[TrialSet, TrialSet]:
    return dataset.trials("train"), dataset.trials("val")


def train_phase1(
    model: AvmModel,
    dataset: DatasetBundle,
    config: TrainConfig,
    log_path: Optional[Path] = None,
    max_epochs: Optional[int] = None,
) -> Checkpoint:
    """Jointly train encoder and readout on the source condition."""
    if model.modulation is not None:
        raise ConfigError("phase 1 trains the plain encoder; remove the modulation variant first")
    train_set, val_set = _split_sets(dataset)
    trainer = Trainer(model, train_set, val_set, config, FreezePlan.phase1(), strategy="plain")
    logger.info(
        f"Phase 1 on '{dataset.condition}': {len(train_set)} train / {len(val_set)} val trials, "
        f"{trainer.trainable_count} trainable parameters"
    )
    trainer.log_initial()
    try:
        best = trainer.run(max_epochs)
    finally:
        if log_path is not None:
            trainer.log.write(log_path)
    return best


@dataclass
class AdaptationResult:
    checkpoint: Checkpoint
    log: TrainingLog
    trainable_params: int
    step0_val_loss: float
    base_val_loss: float


def train_phase2(
    checkpoint: Checkpoint,
    strategy: str,
    dataset: DatasetBundle,
    config: TrainConfig,
    modulation: Optional[ModulationConfig] = None,
    readout: Optional[ReadoutConfig] = None,
    log_path: Optional[Path] = None,
    max_epochs: Optional[int] = None,
) -> AdaptationResult:
    """Adapt a phase-1 checkpoint to a new condition.

    ``avm``, ``avm-s`` and ``avm-b`` freeze the encoder and train the
    modulation units; ``full-ft`` trains everything; ``frozen`` takes no
    optimizer step. A neuron-count change reinitializes the readout.

    Raises:
        InvariantBreach: the frozen encoder changed, or the freshly attached
            modulation changed the step-0 validation loss.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown adaptation strategy '{strategy}' (expected one of {STRATEGIES})")
    if checkpoint.spec.modulation.variant != "plain":
        raise ConfigError("adaptation starts from a plain phase-1 checkpoint")
    readout = readout or ReadoutConfig()
    model = checkpoint.build_model()
    base_digest = digest_arrays(checkpoint.backbone_arrays())

    if dataset.num_neurons != model.readout.num_neurons:
        model.replace_readout(dataset.num_neurons, seed=readout.seed)
    train_set, val_set = _split_sets(dataset)
    base_val = evaluate_loss(model, val_set, config.loss_eps)

    if strategy in ("avm", "avm-s", "avm-b"):
        config_m = modulation or ModulationConfig()
        model.attach_modulation(ModulationConfig(**{**asdict(config_m), "variant": strategy}))
        plan = FreezePlan.phase2(readout_trainable=readout.train_in_phase2)
    elif strategy == "full-ft":
        plan = FreezePlan.full_finetune()
    else:
        plan = FreezePlan("phase2", {"backbone": False, "modulation": False, "readout": False})

    trainer = Trainer(model, train_set, val_set, config, plan, strategy=strategy)
    trainer.base_backbone_digest = base_digest
    logger.info(
        f"Phase 2 ({strategy}) on '{dataset.condition}': {trainer.trainable_count} trainable parameters"
    )
    step0_val = trainer.log_initial()
    if step0_val != base_val:
        raise InvariantBreach(
            f"{strategy}: step-0 validation loss {step0_val!r} differs from the base model's {base_val!r}"
        )

    try:
        best = trainer.snapshot() if strategy == "frozen" else trainer.run(max_epochs)
    finally:
        if log_path is not None:
            trainer.log.write(log_path)

    if strategy != "full-ft":
        final_digest = digest_arrays(best.backbone_arrays())
        if final_digest != base_digest or model.backbone_digest() != base_digest:
            raise InvariantBreach(f"frozen backbone drifted during {strategy} adaptation")
    return AdaptationResult(
        checkpoint=best,
        log=trainer.log,
        trainable_params=trainer.trainable_count,
        step0_val_loss=step0_val,
        base_val_loss=base_val,
    )
