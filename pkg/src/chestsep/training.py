"""Two-phase training loop: SI-SDR maximization with AdamW+AMSGrad, global
gradient clipping, plateau-halved learning rate, and validation-based model
selection.

Training data is synthesized on the fly (see datagen.TrainingStream); the
noise level range widens at the fine-tune boundary. The checkpoint written
whenever validation improves is what train() hands back, never the final
epoch's weights.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen
from .datagen import DatasetParams, TrainingStream, build_validation_manifest, render_sample
from .errors import ConfigError, NonFiniteError, TrainingDiverged
from .model import SeparatorConfig, SeparatorModel
from .nn import AdamWAmsgrad, PlateauScheduler, Tensor, clip_grad_l2, functional as F, no_grad


@dataclass
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 250
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 0.1
    clip_norm: float = 5.0
    scheduler_factor: float = 0.5
    scheduler_patience: int = 4
    phase1_noise_db: tuple = (-20.0, 0.0)
    phase2_noise_db: tuple = (-10.0, 10.0)
    finetune_start_epoch: int = 20
    crop_s: float | None = datagen.CROP_SECONDS
    include_stethoscope: bool = False
    seed: int = 0

    def noise_range(self, epoch: int) -> tuple:
        return self.phase1_noise_db if epoch < self.finetune_start_epoch else self.phase2_noise_db


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return min(self.epochs, key=lambda e: e.val_loss).epoch

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss,lr,seconds\n")
            for e in self.epochs:
                fh.write(f"{e.epoch},{e.train_loss:.6f},{e.val_loss:.6f},{e.lr:.8g},{e.seconds:.3f}\n")


def loss(batch_est, batch_target) -> Tensor:
    """Negative mean SI-SDR with fixed heart/lung channel assignment."""
    est = batch_est if isinstance(batch_est, Tensor) else Tensor(np.asarray(batch_est, dtype=np.float32))
    return F.si_sdr_loss(est, np.asarray(batch_target.data if isinstance(batch_target, Tensor) else batch_target))


def _train_step(model, optimizer, mixtures, targets, clip_norm):
    est = model.forward(mixtures)
    step_loss = F.si_sdr_loss(est, targets)
    model.zero_grad()
    step_loss.backward()
    clip_grad_l2(model.parameters(), clip_norm)
    optimizer.step()
    return float(step_loss.data)


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.params.items()}


class _ValidationSet:
    """Renders a fixed validation manifest once and scores batches of it."""

    def __init__(self, manifest, batch_size=8):
        mixtures, targets = [], []
        for record in manifest.rows:
            sample = render_sample(record)
            mixtures.append(sample.mixture.samples)
            targets.append(sample.targets_array())
        self.mixtures = np.asarray(mixtures, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)
        self.batch_size = batch_size

    def loss(self, model) -> float:
        total, count = 0.0, 0
        with no_grad():
            for start in range(0, len(self.mixtures), self.batch_size):
                chunk = slice(start, start + self.batch_size)
                est = model.forward(self.mixtures[chunk])
                n = est.shape[0]
                total += float(F.si_sdr_loss(est, self.targets[chunk]).data) * n
                count += n
        return total / count


def train(
    model: SeparatorModel,
    cfg: TrainConfig,
    dataset: DatasetParams | None = None,
    checkpoint_path=None,
    start_epoch: int = 0,
    optimizer: AdamWAmsgrad | None = None,
    scheduler: PlateauScheduler | None = None,
    log: TrainLog | None = None,
) -> tuple[SeparatorModel, TrainLog]:
    """Run the full loop; the model comes back holding the best-validation weights.

    With checkpoint_path set, `<path>.best` tracks the best validation loss and
    `<path>.last` holds the final state plus optimizer moments for resuming.
    """
    dataset = (dataset or DatasetParams(seed=cfg.seed)).validate()
    stream = TrainingStream(
        seed=cfg.seed, params=dataset, crop_s=cfg.crop_s,
        include_stethoscope=cfg.include_stethoscope,
    )
    validation = _ValidationSet(build_validation_manifest(dataset))
    optimizer = optimizer or AdamWAmsgrad(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
    )
    scheduler = scheduler or PlateauScheduler(
        optimizer, factor=cfg.scheduler_factor, patience=cfg.scheduler_patience,
    )
    log = log or TrainLog()
    best_val = min((e.val_loss for e in log.epochs), default=float("inf"))
    best_state = _snapshot(model)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        noise_range = cfg.noise_range(epoch)
        epoch_loss = 0.0
        for step in range(cfg.steps_per_epoch):
            mixtures, targets = stream.batch(epoch, step, cfg.batch_size, noise_range)
            try:
                epoch_loss += _train_step(model, optimizer, mixtures, targets, cfg.clip_norm)
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} step {step}: {err}", epoch, step
                ) from err
        val_loss = validation.loss(model)
        lr = scheduler.step(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = _snapshot(model)
            if checkpoint_path is not None:
                model.save(f"{checkpoint_path}.best", extra_config={"train.epoch": epoch})
        log.epochs.append(EpochStats(
            epoch, epoch_loss / cfg.steps_per_epoch, val_loss, lr, time.perf_counter() - t0,
        ))
        if checkpoint_path is not None:
            _save_resume_state(model, optimizer, scheduler, epoch, f"{checkpoint_path}.last")
    model.load_tensors(best_state)
    return model, log


def fit_arrays(
    model: SeparatorModel,
    mixtures: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    weight_decay: float = 0.1,
    clip_norm: float = 5.0,
    scheduler_factor: float = 0.5,
    scheduler_patience: int = 4,
    seed: int = 0,
) -> tuple[SeparatorModel, TrainLog]:
    """Train on fixed (n, T) / (n, 2, T) arrays; validation loss is measured on
    the same arrays (this is the array-API / overfit path, not the full
    stream protocol)."""
    mixtures = np.asarray(mixtures, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    optimizer = AdamWAmsgrad(model.parameters(), lr=learning_rate, weight_decay=weight_decay)
    scheduler = PlateauScheduler(optimizer, factor=scheduler_factor, patience=scheduler_patience)
    log = TrainLog()
    n = mixtures.shape[0]
    best_val = float("inf")
    best_state = _snapshot(model)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(datagen.mix64(seed, epoch)).permutation(n)
        epoch_loss, n_steps = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            try:
                epoch_loss += _train_step(model, optimizer, mixtures[idx], targets[idx], clip_norm)
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} step {n_steps}: {err}", epoch, n_steps
                ) from err
            n_steps += 1
        with no_grad():
            val_loss = float(F.si_sdr_loss(model.forward(mixtures), targets).data)
        lr = scheduler.step(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = _snapshot(model)
        log.epochs.append(EpochStats(epoch, epoch_loss / max(n_steps, 1), val_loss, lr, time.perf_counter() - t0))
    model.load_tensors(best_state)
    return model, log


# ---------------------------------------------------------------------------
# resume support
# ---------------------------------------------------------------------------

def _save_resume_state(model, optimizer, scheduler, epoch, path):
    sched = scheduler.state_dict()
    extra_config = {
        "train.next_epoch": epoch + 1,
        "train.step_count": optimizer.step_count,
        "train.lr": repr(sched["lr"]),
        "train.best_metric": repr(sched["best_metric"]),
        "train.epochs_since_improvement": sched["epochs_since_improvement"],
        "train.cooldown_left": sched["cooldown_left"],
    }
    model.save(path, extra_config=extra_config, extra_tensors=optimizer.state_tensors())


def load_resume_state(path, cfg: TrainConfig):
    """Rebuild (model, optimizer, scheduler, next_epoch) from a `.last` checkpoint."""
    from .model import read_checkpoint

    config, tensors, _ = read_checkpoint(path)
    model = SeparatorModel(SeparatorConfig.from_strings(config))
    model.load_tensors({k: v for k, v in tensors.items() if not k.startswith("optim/")})
    optimizer = AdamWAmsgrad(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    optimizer.step_count = int(config["train.step_count"])
    optimizer.load_state_tensors(tensors)
    scheduler = PlateauScheduler(optimizer, factor=cfg.scheduler_factor, patience=cfg.scheduler_patience)
    scheduler.load_state_dict({
        "lr": float(config["train.lr"]),
        "best_metric": float(config["train.best_metric"]),
        "epochs_since_improvement": int(config["train.epochs_since_improvement"]),
        "cooldown_left": int(config["train.cooldown_left"]),
    })
    return model, optimizer, scheduler, int(config["train.next_epoch"])


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATIONS = {
    "no_crop": "train on the full 10 s segments instead of random 8 s crops",
    "wide_snr": "use the -10..10 dB noise range from the first epoch",
    "with_steth": "keep stethoscope handling noise in the training stream",
    "stft": "swap the learned encoder/decoder for the STFT baseline",
    "kernel256": "encoder kernel 256",
    "kernel1024": "encoder kernel 1024",
    "feature256": "encoder feature space 256",
    "feature1024": "encoder feature space 1024",
    "no_conv": "drop the conv blocks, add transformer layers to compensate",
}


def apply_ablation(name: str, model_cfg: SeparatorConfig, train_cfg: TrainConfig):
    """One variable changed from the baseline; everything else untouched."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; supported: {sorted(ABLATIONS)}")
    if name == "no_crop":
        train_cfg = replace(train_cfg, crop_s=None)
    elif name == "wide_snr":
        train_cfg = replace(train_cfg, phase1_noise_db=(-10.0, 10.0), phase2_noise_db=(-10.0, 10.0))
    elif name == "with_steth":
        train_cfg = replace(train_cfg, include_stethoscope=True)
    elif name == "stft":
        model_cfg = replace(model_cfg, encoder_kind="stft_baseline")
    elif name == "kernel256":
        model_cfg = replace(model_cfg, kernel_size=256, stride=128)
    elif name == "kernel1024":
        model_cfg = replace(model_cfg, kernel_size=1024, stride=512)
    elif name == "feature256":
        model_cfg = replace(model_cfg, feature_size=256)
    elif name == "feature1024":
        model_cfg = replace(model_cfg, feature_size=1024)
    elif name == "no_conv":
        model_cfg = replace(model_cfg, use_conv_blocks=False,
                            transformer_depth=model_cfg.transformer_depth + 2)
    return model_cfg, train_cfg


def ablation_run(
    name: str,
    base_model_cfg: SeparatorConfig | None = None,
    base_train_cfg: TrainConfig | None = None,
    dataset: DatasetParams | None = None,
    test_manifest=None,
    checkpoint_path=None,
    eval_threads: int = 1,
):
    """Train one ablation under the identical harness and evaluate it."""
    from .metrics import evaluate_testset

    model_cfg, train_cfg = apply_ablation(
        name, base_model_cfg or SeparatorConfig(), base_train_cfg or TrainConfig()
    )
    dataset = dataset or DatasetParams(seed=train_cfg.seed)
    model = SeparatorModel(model_cfg, seed=train_cfg.seed)
    model, log = train(model, train_cfg, dataset, checkpoint_path=checkpoint_path)
    manifest = test_manifest if test_manifest is not None else datagen.build_test_manifest(dataset)
    report = evaluate_testset(model, manifest, threads=eval_threads)
    return model, log, report
