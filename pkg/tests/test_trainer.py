import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tocsim import autodiff as ad
from tocsim.autodiff import SgdConfig
from tocsim.channel import AWGN, RAYLEIGH, ChannelConfig, transmit
from tocsim.data import Dataset, LabelMask, make_blobs, subsample_labels
from tocsim.errors import ConfigError
from tocsim.loss import cross_entropy
from tocsim.model import ReceiverSpec
from tocsim.trainer import (
    FINETUNE,
    PRETRAIN,
    REGIMES,
    RoundRecord,
    TrainConfig,
    communication_round,
    expected_rounds,
    finetune,
    get_regime,
    new_model,
    pretrain,
    rounds_to_threshold,
    run_pretrain,
    run_regime,
)


def tiny_cfg(**kw):
    base = dict(
        pretrain_epochs=2,
        finetune_epochs=2,
        batch_size=8,
        sgd=SgdConfig(0.05),
        channel=ChannelConfig(AWGN, 10),
        hidden_dims=(16,),
        feature_dim=4,
        receiver_hidden_dims=(6,),
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return make_blobs(3, 10, 6, 3.0, seed=1, centers_seed=0), make_blobs(3, 5, 6, 3.0, seed=2, centers_seed=0)


class TestPretrain:
    def test_one_record_per_epoch_at_round_zero(self, data):
        train, _ = data
        records = pretrain(new_model(6, tiny_cfg()), train, tiny_cfg())
        assert [(r.round, r.stage, r.epoch) for r in records] == [(0, PRETRAIN, 1), (0, PRETRAIN, 2)]

    def test_changes_theta(self, data):
        train, _ = data
        cfg = tiny_cfg()
        before = new_model(6, cfg).theta_arrays()
        after = run_pretrain(train, cfg).theta
        assert any(not np.array_equal(a, b) for a, b in zip(before, after))

    @pytest.mark.parametrize("mutation", ["delete", "permute", "constant"])
    def test_label_blind(self, data, mutation):
        train, _ = data
        cfg = tiny_cfg(channel=ChannelConfig(RAYLEIGH, 10))
        reference = run_pretrain(train, cfg)
        if mutation == "delete":
            mutated = train.without_labels()
        elif mutation == "permute":
            mutated = Dataset(train.features, np.random.default_rng(0).permutation(train.labels), 3)
        else:
            mutated = Dataset(train.features, np.zeros(len(train), dtype=int), 3)
        result = run_pretrain(mutated, cfg)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(reference.theta, result.theta))
        assert [r.train_loss for r in reference.records] == [r.train_loss for r in result.records]


class TestCommunicationRound:
    @pytest.mark.parametrize("kind", [AWGN, RAYLEIGH])
    def test_split_backward_equals_single_graph(self, data, kind):
        train, _ = data
        cfg = tiny_cfg(channel=ChannelConfig(kind, 5))
        x, y = train.features[:8], train.labels[:8]

        split = new_model(6, cfg)
        split.attach_receiver(ReceiverSpec(4, (6,), 3), np.random.default_rng(0))
        joint = split.copy()

        trace = communication_round(split, x, y, np.random.default_rng(9))
        loss = cross_entropy(joint.infer(transmit(joint.encode(x), joint.channel, np.random.default_rng(9))), y)
        assert trace.loss == loss.item()
        ad.backward(loss)
        for a, b in zip(split.theta + split.phi, joint.theta + joint.phi):
            np.testing.assert_allclose(a.grad, b.grad, rtol=1e-12, atol=1e-15)

    def test_only_features_and_gradients_cross(self, data):
        train, _ = data
        model = new_model(6, tiny_cfg())
        model.attach_receiver(ReceiverSpec(4, (6,), 3), np.random.default_rng(0))
        trace = communication_round(model, train.features[:5], train.labels[:5], np.random.default_rng(0))
        assert trace.uplink.shape == trace.downlink.shape == (5, 4)
        assert len(ad.current_graph()) == 0


class TestFinetune:
    def test_round_count(self, data):
        train, _ = data
        cfg = tiny_cfg()
        records = run_regime(REGIMES["Sup"], train, cfg)
        ft = [r for r in records if r.stage == FINETUNE]
        assert len(ft) == expected_rounds(30, 8, 2) == 8
        assert [r.round for r in ft] == list(range(1, 9))

    def test_sixty_percent_round_count(self, data):
        train, _ = data
        records = run_regime(REGIMES["Sup(60%)"], train, tiny_cfg())
        # ceil(0.6 * 10) = 6 per class -> 18 labelled -> 3 rounds per epoch
        assert max(r.round for r in records) == 6

    def test_pretraining_costs_no_rounds(self, data):
        train, _ = data
        records = run_regime(REGIMES["SSL-FT"], train, tiny_cfg())
        assert [r.round for r in records if r.stage == PRETRAIN] == [0, 0]
        assert max(r.round for r in records) == 8

    def test_accuracy_once_per_epoch(self, data):
        train, test = data
        records = run_regime(REGIMES["Sup"], train, tiny_cfg(), test)
        acc = [(r.epoch, r.test_accuracy) for r in records if r.test_accuracy is not None]
        assert [e for e, _ in acc] == [1, 2]
        assert all(0.0 <= a <= 1.0 for _, a in acc)

    def test_max_rounds(self, data):
        train, test = data
        records = run_regime(REGIMES["Sup"], train, tiny_cfg(max_rounds=5), test)
        assert max(r.round for r in records) == 5
        assert records[-1].test_accuracy is not None

    def test_theta_moves_each_round(self, data):
        train, _ = data
        cfg = tiny_cfg(finetune_epochs=1, max_rounds=1)
        model = new_model(6, cfg)
        before = model.theta_arrays()
        finetune(model, train, subsample_labels(train, 1.0, 0), cfg)
        assert all(not np.array_equal(a, p.data) for a, p in zip(before, model.theta))

    def test_unlabelled_samples_never_used(self, data):
        train, _ = data
        cfg = tiny_cfg(finetune_epochs=1)
        available = np.zeros(len(train), dtype=bool)
        available[::3] = True
        corrupted = train.features.copy()
        corrupted[~available] = 1e6
        ref, alt = new_model(6, cfg), new_model(6, cfg)
        finetune(ref, train, LabelMask(available, 1 / 3), cfg)
        finetune(alt, Dataset(corrupted, train.labels, 3), LabelMask(available, 1 / 3), cfg)
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(ref.theta, alt.theta))

    def test_no_labels_is_an_error(self, data):
        train, _ = data
        with pytest.raises(ConfigError):
            finetune(new_model(6, tiny_cfg()), train, LabelMask(np.zeros(len(train), dtype=bool), 0.1), tiny_cfg())

    @pytest.mark.parametrize("name", list(REGIMES))
    def test_deterministic(self, data, name):
        train, test = data
        a = run_regime(REGIMES[name], train, tiny_cfg(), test)
        b = run_regime(REGIMES[name], train, tiny_cfg(), test)
        assert a == b

    def test_shared_pretrain_matches_fresh(self, data):
        train, _ = data
        cfg = tiny_cfg()
        shared = run_pretrain(train, cfg)
        assert run_regime(REGIMES["SSL-FT"], train, cfg, pretrained=shared) == run_regime(REGIMES["SSL-FT"], train, cfg)


def ft(losses):
    return [RoundRecord(i + 1, FINETUNE, 1, v) for i, v in enumerate(losses)]


class TestRoundsToThreshold:
    def test_basic(self):
        assert rounds_to_threshold(ft([3.0, 2.5, 1.9, 2.1, 0.9]), [2.0, 1.0, 0.5]) == [3, 5, None]

    def test_above_initial_loss(self):
        assert rounds_to_threshold(ft([3.0, 2.5]), [10.0]) == [1]

    def test_pretrain_records_ignored(self):
        records = [RoundRecord(0, PRETRAIN, 1, 0.01)] + ft([3.0, 0.5])
        assert rounds_to_threshold(records, [1.0]) == [2]

    @given(st.lists(st.floats(0, 5), min_size=1, max_size=50), st.lists(st.floats(0, 5), min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, losses, thresholds):
        thresholds = sorted(thresholds, reverse=True)
        rounds = [math.inf if r is None else r for r in rounds_to_threshold(ft(losses), thresholds)]
        assert rounds == sorted(rounds)

    def test_empty(self):
        with pytest.raises(ConfigError):
            rounds_to_threshold([], [1.0])


class TestRegimes:
    def test_lookup(self):
        assert get_regime("ssl-ft(60%)") is REGIMES["SSL-FT(60%)"]
        assert get_regime("Sup (60%)").label_fraction == 0.6

    def test_unknown(self):
        with pytest.raises(ConfigError, match="unknown regime"):
            get_regime("semi")

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)
        with pytest.raises(ConfigError):
            TrainConfig(max_rounds=0)
