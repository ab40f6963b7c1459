"""
Adversarial Training Loop

Trains the detection transformer on labelled source batches and unlabelled
target batches with three arms:
    - source_only: detection loss only
    - da_cnn: detection loss + per-pixel alignment of the last backbone map
    - sfa: detection loss + encoder/decoder sequence alignment (domain query
      and token-wise, summed over layers) + bipartite matching consistency

The objective is a single minimisation,

    total = L_det + lambda_enc * L_enc + lambda_dec * L_dec + lambda_cons * L_cons + lambda_cnn * L_cnn

and gradient reversal inside the alignment losses turns it into the min-max
game: discriminators descend on their domain loss, features ascend on it.
A term whose flag is off or whose weight is zero is neither computed nor
inserted into the network (no domain query), and is reported as 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import pandas as pd

from src.analysis.detection_metrics import evaluate_map
from src.autodiff.tensor import Tensor
from src.data.dataset_io import load_split
from src.data.preprocessing import SOURCE, TARGET, Batch, paired_batches, prefetch
from src.data.synthetic_scenes import Scene
from src.errors import CheckpointError, ConfigError, TrainingError
from src.losses.alignment import Discriminator, cnn_alignment_loss, side_alignment_loss
from src.losses.consistency import consistency_loss
from src.losses.matching import detection_loss
from src.models.checkpoint import load_checkpoint, load_module_state, module_state, save_checkpoint
from src.models.detection_transformer import DetectionTransformer
from src.models.layers import Module
from src.training.optimizer import Adam

if TYPE_CHECKING:
    from src.config import ExperimentConfig

logger = logging.getLogger(__name__)

ARMS = ("source_only", "da_cnn", "sfa")
METRIC_COLUMNS = ["epoch", "step", "L_det", "L_enc", "L_dec", "L_cons", "total",
                  "target_mAP50", "source_mAP50", "L_cnn"]
LOSS_COMPONENTS = ("L_det", "L_enc", "L_dec", "L_cons", "L_cnn")

METRICS_FILE = "metrics.csv"
LAST_CHECKPOINT = "checkpoint_last.npz"
BEST_CHECKPOINT = "checkpoint_best.npz"


# === Configuration ===

@dataclass
class AblationFlags:
    """
    Switches for the additive alignment terms of the sfa arm.

    dqfa_enc, dqfa_dec : domain-query alignment in the encoder / decoder
    tda_enc, tda_dec : token-wise alignment in the encoder / decoder
    hierarchical : align every layer (False: only the last one)
    bmc : bipartite matching consistency
    cnn : also align the last backbone map (off by default)
    """
    dqfa_enc: bool = True
    dqfa_dec: bool = True
    tda_enc: bool = True
    tda_dec: bool = True
    hierarchical: bool = True
    bmc: bool = True
    cnn: bool = False

    def validate(self) -> "AblationFlags":
        for f in fields(self):
            if not isinstance(getattr(self, f.name), bool):
                raise ConfigError(f"ablation.{f.name} must be true or false")
        return self

    def ablate(self, names: Sequence[str]) -> "AblationFlags":
        """Switch off flags by name; 'dq' and 'tw' cover both sides."""
        groups = {"dq": ("dqfa_enc", "dqfa_dec"), "tw": ("tda_enc", "tda_dec"), "hr": ("hierarchical",)}
        for name in names:
            name = name.strip().lower()
            if not name:
                continue
            targets = groups.get(name, (name,))
            for target in targets:
                if target not in {f.name for f in fields(self)} or target == "cnn":
                    raise ConfigError(f"unknown ablation flag {name!r}")
                setattr(self, target, False)
        return self


@dataclass
class TrainConfig:
    """
    Optimisation settings.

    lr_decay_epoch defaults to 80% of `epochs`; from the epoch after it the
    learning rate is multiplied by `decay_factor`.
    """
    arm: str = "sfa"
    epochs: int = 50
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay_epoch: int | None = None
    decay_factor: float = 0.1
    backbone_lr_scale: float = 1.0
    seed: int = 0
    prefetch: int = 2
    eval_batch_size: int = 16
    score_threshold: float = 0.0

    def validate(self) -> "TrainConfig":
        if self.arm not in ARMS:
            raise ConfigError(f"train.arm must be one of {ARMS}, got {self.arm!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("train.lr must be positive and betas in [0, 1)")
        if self.decay_factor <= 0 or self.backbone_lr_scale < 0:
            raise ConfigError("train.decay_factor must be positive and backbone_lr_scale non-negative")
        return self

    @property
    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return int(round(0.8 * self.epochs))

    def lr_at(self, epoch: int) -> float:
        """Learning rate of 1-based `epoch`."""
        return self.lr * (self.decay_factor if epoch > self.decay_epoch else 1.0)


SCENARIO_PRESETS = {
    "weather": {"lambda_enc": 1.0, "lambda_dec": 1.0, "lambda_cons": 1.0},
    "synthetic_to_real": {"lambda_enc": 0.01, "lambda_dec": 0.01, "lambda_cons": 0.1},
}


def apply_preset(config: "ExperimentConfig", name: str) -> "ExperimentConfig":
    if name not in SCENARIO_PRESETS:
        raise ConfigError(f"unknown scenario preset {name!r}; choose from {sorted(SCENARIO_PRESETS)}")
    preset = SCENARIO_PRESETS[name]
    config.alignment.lambda_enc = preset["lambda_enc"]
    config.alignment.lambda_dec = preset["lambda_dec"]
    config.consistency.lambda_cons = preset["lambda_cons"]
    return config


@dataclass(frozen=True)
class ActiveTerms:
    enc_query: bool
    enc_tokens: bool
    dec_query: bool
    dec_tokens: bool
    consistency: bool
    cnn: bool

    @property
    def enc(self) -> bool:
        return self.enc_query or self.enc_tokens

    @property
    def dec(self) -> bool:
        return self.dec_query or self.dec_tokens

    @property
    def alignment(self) -> bool:
        return self.enc or self.dec or self.cnn


def active_terms(config: "ExperimentConfig") -> ActiveTerms:
    """Which loss terms a training step computes under `config`."""
    arm, flags, align = config.train.arm, config.ablation, config.alignment
    sfa = arm == "sfa"
    return ActiveTerms(
        enc_query=sfa and flags.dqfa_enc and align.lambda_enc > 0,
        enc_tokens=sfa and flags.tda_enc and align.lambda_enc > 0,
        dec_query=sfa and flags.dqfa_dec and align.lambda_dec > 0,
        dec_tokens=sfa and flags.tda_dec and align.lambda_dec > 0,
        consistency=sfa and flags.bmc and config.consistency.lambda_cons > 0,
        cnn=(arm == "da_cnn" or (sfa and flags.cnn)) and align.lambda_cnn > 0,
    )


# === Model ===

class SFAModel(Module):
    """Detector plus the discriminators the arm needs (absent ones are None)."""

    def __init__(self, detector: DetectionTransformer, enc_discriminator: Discriminator | None = None,
                 dec_discriminator: Discriminator | None = None, cnn_discriminator: Discriminator | None = None):
        self.detector = detector
        self.enc_discriminator = enc_discriminator
        self.dec_discriminator = dec_discriminator
        self.cnn_discriminator = cnn_discriminator

    @property
    def discriminators(self) -> list[Discriminator]:
        return [d for d in (self.enc_discriminator, self.dec_discriminator, self.cnn_discriminator) if d is not None]

    def forward(self, images: Tensor, **kwargs):
        return self.detector(images, **kwargs)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators, so adding a discriminator never moves detector weights."""
    names = ("detector", "enc_discriminator", "dec_discriminator", "cnn_discriminator", "data")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def build_model(config: "ExperimentConfig") -> SFAModel:
    """
    Detector and discriminators for `config.train.arm`.

    sfa gets one encoder and one decoder discriminator, each shared by the
    domain-query and token-wise terms of every layer; da_cnn (or sfa with
    ablation.cnn) gets a per-pixel backbone discriminator.
    """
    streams = rng_streams(config.train.seed)
    detector = DetectionTransformer(config.model, streams["detector"])
    arm, flags = config.train.arm, config.ablation
    dim = config.model.hidden_dim
    enc = dec = cnn = None
    if arm == "sfa" and (flags.dqfa_enc or flags.tda_enc):
        enc = Discriminator(dim, streams["enc_discriminator"])
    if arm == "sfa" and (flags.dqfa_dec or flags.tda_dec):
        dec = Discriminator(dim, streams["dec_discriminator"])
    if arm == "da_cnn" or (arm == "sfa" and flags.cnn):
        channels = detector.backbone.out_channels
        cnn = Discriminator(channels, streams["cnn_discriminator"], hidden_dim=dim)
    return SFAModel(detector, enc, dec, cnn)


def make_optimizer(model: SFAModel, config: TrainConfig) -> Adam:
    params = model.named_parameters()
    scales = {name: config.backbone_lr_scale for name in params if name.startswith("detector.backbone.")}
    return Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps,
                weight_decay=config.weight_decay, lr_scales=scales)


# === Step ===

@dataclass
class LossReport:
    L_det: float = 0.0
    L_enc: float = 0.0
    L_dec: float = 0.0
    L_cons: float = 0.0
    L_cnn: float = 0.0
    total: float = 0.0

    def weighted_total(self, config: "ExperimentConfig") -> float:
        align = config.alignment
        return (self.L_det + align.lambda_enc * self.L_enc + align.lambda_dec * self.L_dec
                + config.consistency.lambda_cons * self.L_cons + align.lambda_cnn * self.L_cnn)


def compute_losses(model: SFAModel, source: Batch, target: Batch,
                   config: "ExperimentConfig") -> tuple[Tensor, dict[str, Tensor | None]]:
    """Forward both batches and assemble the weighted objective; inactive components are None."""
    if len(source) == 0 or len(target) == 0:
        raise TrainingError("train_step needs a non-empty source and target batch")
    terms = active_terms(config)
    align, cons = config.alignment, config.consistency
    flags = config.ablation

    outputs = [(SOURCE, model.detector(Tensor(source.images), enc_domain_query=terms.enc_query,
                                       dec_domain_query=terms.dec_query))]
    if terms.alignment or (terms.consistency and cons.applies_to(TARGET)):
        outputs.append((TARGET, model.detector(Tensor(target.images), enc_domain_query=terms.enc_query,
                                               dec_domain_query=terms.dec_query)))

    components: dict[str, Tensor | None] = {name: None for name in LOSS_COMPONENTS}
    for pred in outputs[0][1].predictions:
        if not (np.isfinite(pred.class_probs.data).all() and np.isfinite(pred.boxes.data).all()):
            raise TrainingError("non-finite loss component L_det (source predictions are not finite)")
    components["L_det"] = detection_loss(outputs[0][1].predictions, source.targets, config.matching)

    def add(name: str, value: Tensor) -> None:
        components[name] = value if components[name] is None else components[name] + value

    for domain, out in outputs:
        if terms.enc:
            add("L_enc", side_alignment_loss(out.encoder_states, model.enc_discriminator, domain, align.lambda_enc_q,
                                             terms.enc_query, terms.enc_tokens, flags.hierarchical))
        if terms.dec:
            add("L_dec", side_alignment_loss(out.decoder_states, model.dec_discriminator, domain, align.lambda_dec_q,
                                             terms.dec_query, terms.dec_tokens, flags.hierarchical))
        if terms.cnn:
            add("L_cnn", cnn_alignment_loss(out.features[-1], model.cnn_discriminator, domain))
        if terms.consistency and cons.applies_to(domain):
            add("L_cons", consistency_loss(out.predictions, cons.lambda_l1))

    weights = {"L_enc": align.lambda_enc, "L_dec": align.lambda_dec,
               "L_cons": cons.lambda_cons, "L_cnn": align.lambda_cnn}
    total = components["L_det"]
    for name, weight in weights.items():
        if components[name] is not None:
            total = total + weight * components[name]
    return total, components


def train_step(model: SFAModel, optimizer: Adam, source: Batch, target: Batch,
               config: "ExperimentConfig") -> LossReport:
    """
    One optimisation step on a (source, target) batch pair.

    Returns
    -------
    LossReport
        Unweighted components and the weighted total actually minimised.

    Raises
    ------
    TrainingError
        On an empty batch or a non-finite loss component (named in the message).
    """
    optimizer.zero_grad()
    total, components = compute_losses(model, source, target, config)
    values = {name: (0.0 if t is None else t.item()) for name, t in components.items()}
    for name, value in list(values.items()) + [("total", total.item())]:
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss component {name} ({value})")
    total.backward()
    optimizer.step()
    return LossReport(total=total.item(), **values)


# === Fit ===

@dataclass
class Datasets:
    source_train: list[Scene]
    target_train: list[Scene]
    source_val: list[Scene] = field(default_factory=list)
    target_val: list[Scene] = field(default_factory=list)


def load_datasets(data_dir: Path | str) -> Datasets:
    """Train and val splits of both domains from a dataset root."""
    return Datasets(
        source_train=load_split(data_dir, SOURCE, "train"),
        target_train=load_split(data_dir, TARGET, "train"),
        source_val=load_split(data_dir, SOURCE, "val"),
        target_val=load_split(data_dir, TARGET, "val"),
    )


@dataclass
class TrainState:
    """Everything besides parameters and moments needed to resume bit-exactly."""
    epoch: int = 0
    step: int = 0
    optimizer_step: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    best_metric: float | None = None
    best_epoch: int | None = None


@dataclass
class FitResult:
    model: SFAModel
    state: TrainState
    output_dir: Path

    @property
    def metrics(self) -> pd.DataFrame:
        return pd.DataFrame(self.state.history, columns=METRIC_COLUMNS)


def _save(path: Path, model: SFAModel, optimizer: Adam, state: TrainState, config: "ExperimentConfig") -> None:
    state.optimizer_step = optimizer.t
    arrays = module_state(model)
    arrays.update(optimizer.state_arrays())
    save_checkpoint(path, arrays, {"config": config.to_dict(), "state": asdict(state)})


def restore(path: Path | str, model: SFAModel, optimizer: Adam | None = None) -> tuple[TrainState, dict]:
    """Load parameters (and optimizer moments) in place; returns the saved TrainState and header."""
    arrays, header = load_checkpoint(path)
    load_module_state(model, arrays)
    if "state" not in header:
        raise CheckpointError(f"{path}: missing training state")
    state = TrainState(**header["state"])
    if optimizer is not None:
        optimizer.load_state_arrays(arrays, state.optimizer_step)
    return state, header


def load_trained_model(path: Path | str) -> tuple[SFAModel, "ExperimentConfig", dict]:
    """Rebuild the model stored in a checkpoint from its embedded config and load its weights."""
    from src.config import ExperimentConfig

    _, header = load_checkpoint(path)
    if "config" not in header:
        raise CheckpointError(f"{path}: missing embedded config")
    config = ExperimentConfig.from_dict(header["config"]).validate()
    model = build_model(config)
    restore(path, model)
    return model, config, header


def write_metrics(history: list[dict], path: Path) -> Path:
    pd.DataFrame(history, columns=METRIC_COLUMNS).to_csv(path, index=False, float_format="%.10g")
    return path


def _evaluate(model: SFAModel, scenes: list[Scene], config: "ExperimentConfig") -> float:
    if not scenes:
        return float("nan")
    return evaluate_map(model.detector, scenes, score_threshold=config.train.score_threshold,
                        batch_size=config.train.eval_batch_size).map


def fit(datasets: Datasets, config: "ExperimentConfig", output_dir: Path | str, resume: bool = False) -> FitResult:
    """
    Train for `config.train.epochs` epochs.

    Writes into `output_dir`: metrics.csv (one row per epoch), checkpoint_last.npz
    (also written before the first epoch) and checkpoint_best.npz (best target
    mAP on the target val split). With `resume`, training continues from
    checkpoint_last.npz and reproduces the uninterrupted run exactly.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    train = config.train
    model = build_model(config)
    optimizer = make_optimizer(model, train)
    data_rng = rng_streams(train.seed)["data"]
    last_path = output_dir / LAST_CHECKPOINT

    if resume and last_path.exists():
        state, _ = restore(last_path, model, optimizer)
        data_rng.bit_generator.state = state.rng_state
        logger.info("resumed from %s at epoch %d", last_path, state.epoch)
    else:
        state = TrainState(rng_state=data_rng.bit_generator.state)
        _save(last_path, model, optimizer, state, config)

    for epoch in range(state.epoch + 1, train.epochs + 1):
        optimizer.lr = train.lr_at(epoch)
        sums = dict.fromkeys(LOSS_COMPONENTS + ("total",), 0.0)
        steps = 0
        batches = paired_batches(datasets.source_train, datasets.target_train, train.batch_size, data_rng)
        for source, target in prefetch(batches, depth=train.prefetch):
            report = train_step(model, optimizer, source, target, config)
            state.step += 1
            steps += 1
            for name in sums:
                sums[name] += getattr(report, name)
            logger.debug("step %d: total %.6f", state.step, report.total)

        means = {name: value / max(steps, 1) for name, value in sums.items()}
        target_map = _evaluate(model, datasets.target_val, config)
        source_map = _evaluate(model, datasets.source_val, config)
        state.history.append({"epoch": epoch, "step": state.step, **means,
                              "target_mAP50": target_map, "source_mAP50": source_map})
        state.epoch = epoch
        state.rng_state = data_rng.bit_generator.state
        write_metrics(state.history, output_dir / METRICS_FILE)

        improved = math.isfinite(target_map) and (state.best_metric is None or target_map > state.best_metric)
        if improved:
            state.best_metric, state.best_epoch = target_map, epoch
        _save(last_path, model, optimizer, state, config)
        if improved:
            _save(output_dir / BEST_CHECKPOINT, model, optimizer, state, config)
        logger.info("epoch %d/%d lr %.2e | L_det %.4f L_enc %.4f L_dec %.4f L_cons %.4f L_cnn %.4f | "
                    "target mAP %.4f source mAP %.4f", epoch, train.epochs, optimizer.lr, means["L_det"],
                    means["L_enc"], means["L_dec"], means["L_cons"], means["L_cnn"], target_map, source_map)

    return FitResult(model=model, state=state, output_dir=output_dir)


__all__ = [
    "ARMS",
    "METRIC_COLUMNS",
    "AblationFlags",
    "TrainConfig",
    "SCENARIO_PRESETS",
    "apply_preset",
    "ActiveTerms",
    "active_terms",
    "SFAModel",
    "rng_streams",
    "build_model",
    "make_optimizer",
    "LossReport",
    "compute_losses",
    "train_step",
    "Datasets",
    "load_datasets",
    "TrainState",
    "FitResult",
    "restore",
    "load_trained_model",
    "write_metrics",
    "fit",
]
