"""Two-stage remote training: label-free contrastive pre-training of the
transmitter, then joint fine-tuning of transmitter and receiver where every
mini-batch costs one communication round."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, SGD, SgdConfig, Tensor
from .channel import ChannelConfig, transmit
from .data import AugmentConfig, Dataset, LabelMask, augment, batch_indices, rounds_per_epoch, subsample_labels
from .errors import ConfigError
from .loss import InfoNceConfig, cross_entropy, info_nce
from .model import EncoderSpec, ReceiverSpec, SplitModel, predict

PRETRAIN = "pretrain"
FINETUNE = "finetune"


@dataclass(frozen=True)
class Regime:
    name: str
    pretrain: bool
    label_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", key="regime.label_fraction")


REGIMES = {
    "Sup": Regime("Sup", pretrain=False, label_fraction=1.0),
    "Sup(60%)": Regime("Sup(60%)", pretrain=False, label_fraction=0.6),
    "SSL-FT": Regime("SSL-FT", pretrain=True, label_fraction=1.0),
    "SSL-FT(60%)": Regime("SSL-FT(60%)", pretrain=True, label_fraction=0.6),
}


def get_regime(name: str) -> Regime:
    key = name.replace(" ", "")
    for regime_name, regime in REGIMES.items():
        if regime_name.lower() == key.lower():
            return regime
    raise ConfigError(f"unknown regime {name!r}; choose from {', '.join(REGIMES)}", key="regimes")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    stage: str
    epoch: int
    train_loss: float
    test_accuracy: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 30
    finetune_epochs: int = 100
    batch_size: int = 128
    sgd: SgdConfig = SgdConfig(0.02)
    pretrain_sgd: SgdConfig | None = SgdConfig(0.1, 0.9)
    infonce: InfoNceConfig = InfoNceConfig()
    channel: ChannelConfig = ChannelConfig()
    augment: AugmentConfig = AugmentConfig(jitter_sigma=1.0, mask_prob=0.1, scale_range=(0.8, 1.2))
    hidden_dims: tuple = (256, 128)
    feature_dim: int = 32
    receiver_hidden_dims: tuple = (128,)
    max_rounds: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0", key="train.pretrain_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", key="train.batch_size")
        if self.pretrain_epochs > 0 and self.batch_size < 2:
            raise ConfigError("pre-training needs batch_size >= 2 for negatives", key="train.batch_size")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("must be >= 1", key="train.max_rounds")

    @property
    def stage1_sgd(self) -> SgdConfig:
        return self.pretrain_sgd or self.sgd


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream so that e.g. the encoder init is shared
    by every regime run with the same seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def new_model(input_dim: int, cfg: TrainConfig) -> SplitModel:
    spec = EncoderSpec(input_dim, cfg.hidden_dims, cfg.feature_dim)
    return SplitModel.create(spec, cfg.channel, stream(cfg.seed, "encoder-init"))


@dataclass
class PretrainResult:
    theta: list
    records: list = field(default_factory=list)


def pretrain(model: SplitModel, data: Dataset, cfg: TrainConfig) -> list[RoundRecord]:
    """Stage I on the device: maximise agreement between the received features
    of a sample and of its augmentation.  Reads ``data.features`` only and
    costs zero communication rounds.  Returns one record per epoch."""
    x_all = data.features
    shuffle = stream(cfg.seed, "pretrain-shuffle")
    aug_rng = stream(cfg.seed, "pretrain-augment")
    link = stream(cfg.seed, "pretrain-channel")
    opt = SGD(model.theta, cfg.stage1_sgd)
    records = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        for idx in batch_indices(len(x_all), cfg.batch_size, shuffle):
            if idx.size < 2:
                continue
            x = x_all[idx]
            zhat, zhat_aug = model.forward_pair(x, augment(x, cfg.augment, aug_rng), link)
            loss = info_nce(zhat, zhat_aug, cfg.infonce)
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        records.append(RoundRecord(0, PRETRAIN, epoch, float(np.mean(losses)) if losses else float("nan")))
    return records


@dataclass
class RoundTrace:
    """What crossed the link in one fine-tuning round."""

    loss: float
    uplink: np.ndarray
    downlink: np.ndarray


def communication_round(model: SplitModel, x, y, link: np.random.Generator) -> RoundTrace:
    """Forward features over the channel, backward gradients over the
    (lossless) return path, leaving grads on theta and phi."""
    device, server = Graph(), Graph()
    with ad.use_graph(device):
        zhat = transmit(model.encode(x), model.channel, link)
    uplink = zhat.data.copy()
    with ad.use_graph(server):
        received = Tensor(uplink, requires_grad=True)
        loss = cross_entropy(model.infer(received), y)
        ad.backward(loss)
    downlink = received.grad.copy()
    ad.backward(zhat, grad=downlink)
    return RoundTrace(loss.item(), uplink, downlink)


def evaluate(model: SplitModel, data: Dataset, rng: np.random.Generator, batch_size: int = 1024) -> float:
    """Test accuracy with the channel in the loop (SNR_test = SNR_train)."""
    correct = 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            x = data.features[start : start + batch_size]
            logits = model.forward(x, rng)
            correct += int((predict(logits) == data.labels[start : start + batch_size]).sum())
    return correct / len(data)


def finetune(
    model: SplitModel,
    data: Dataset,
    label_mask: LabelMask,
    cfg: TrainConfig,
    test: Dataset | None = None,
    num_classes: int | None = None,
) -> list[RoundRecord]:
    """Stage II: fresh random receiver, joint SGD on (theta, phi) over labelled
    samples only; one record per round, test accuracy once per epoch."""
    labelled = label_mask.indices
    if labelled.size == 0:
        raise ConfigError("no labelled samples available for fine-tuning", key="label_fraction")
    num_classes = data.num_classes if num_classes is None else num_classes
    model.attach_receiver(
        ReceiverSpec(model.encoder_spec.feature_dim, cfg.receiver_hidden_dims, num_classes),
        stream(cfg.seed, "receiver-init"),
    )
    shuffle = stream(cfg.seed, "finetune-shuffle")
    link = stream(cfg.seed, "finetune-channel")
    eval_link = stream(cfg.seed, "eval-channel")
    opt = SGD(model.theta + model.phi, cfg.sgd)
    x_all, y_all = data.features[labelled], data.labels[labelled]
    records: list[RoundRecord] = []
    rnd = 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        for idx in batch_indices(labelled.size, cfg.batch_size, shuffle):
            rnd += 1
            trace = communication_round(model, x_all[idx], y_all[idx], link)
            opt.step()
            records.append(RoundRecord(rnd, FINETUNE, epoch, trace.loss))
            if cfg.max_rounds is not None and rnd >= cfg.max_rounds:
                break
        if test is not None:
            records[-1] = replace(records[-1], test_accuracy=evaluate(model, test, eval_link))
        if cfg.max_rounds is not None and rnd >= cfg.max_rounds:
            break
    return records


def run_regime(
    regime: Regime,
    train: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    pretrained: PretrainResult | None = None,
) -> list[RoundRecord]:
    """Label subsampling, optional stage I, then stage II.  ``pretrained`` lets
    callers share one stage-I result between regimes with the same seed."""
    model = new_model(train.dim, cfg)
    mask = subsample_labels(train, regime.label_fraction, int(stream(cfg.seed, "labels").integers(2**32)))
    records: list[RoundRecord] = []
    if regime.pretrain:
        if pretrained is None:
            pretrained = run_pretrain(train, cfg)
        for p, arr in zip(model.theta, pretrained.theta):
            p.data = arr.copy()
        records.extend(pretrained.records)
    records.extend(finetune(model, train, mask, cfg, test))
    return records


def run_pretrain(train: Dataset, cfg: TrainConfig) -> PretrainResult:
    model = new_model(train.dim, cfg)
    records = pretrain(model, train.without_labels(), cfg)
    return PretrainResult(model.theta_arrays(), records)


def rounds_to_threshold(records: Sequence[RoundRecord], thresholds: Iterable[float]) -> list[int | None]:
    """First fine-tuning round whose mini-batch loss is <= each threshold
    (``None`` when never reached)."""
    ft = [r for r in records if r.stage == FINETUNE]
    if not ft:
        raise ConfigError("no fine-tuning records")
    out = []
    for thr in thresholds:
        out.append(next((r.round for r in ft if r.train_loss <= thr), None))
    return out


def expected_rounds(n_labelled: int, batch_size: int, epochs: int) -> int:
    return epochs * rounds_per_epoch(n_labelled, batch_size)
