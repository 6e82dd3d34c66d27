"""End-to-end acceptance suite, one test per criterion.

Run ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from tocsim import autodiff as ad
from tocsim import cli
from tocsim.autodiff import Tensor
from tocsim.channel import AWGN, RAYLEIGH, ChannelConfig, draw_realization, power_normalize
from tocsim.config import parse_config
from tocsim.data import Dataset
from tocsim.infotheory import (
    DiscreteJoint,
    conditional_mi,
    mutual_information,
    run_sweep,
    theorem_instance,
    verify_theorem1,
)
from tocsim.loss import InfoNceConfig, cross_entropy, info_nce, info_nce_bound
from tocsim.model import EncoderSpec, ReceiverSpec, SplitModel
from tocsim.report import read_records, render_table, run_filename, write_records
from tocsim.trainer import FINETUNE, REGIMES, RoundRecord, new_model, pretrain, rounds_to_threshold

from helpers import H, REL_TOL, check_grads

criterion = pytest.mark.criterion
POINTS = 20


def _param(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


OPS = {
    "matmul": lambda r: ([_param(r, 3, 4), _param(r, 4, 2)], lambda a, b: ad.tsum(ad.exp(ad.scale(ad.matmul(a, b), 0.3)))),
    "add/sub/mul": lambda r: ([_param(r, 5), _param(r, 5)], lambda a, b: ad.tsum(ad.mul(ad.add(a, b), ad.sub(a, b)))),
    "neg/mean": lambda r: ([_param(r, 3, 5)], lambda a: ad.mean(ad.mul(a, ad.neg(a)))),
    "relu": lambda r: ([_param(r, 6)], lambda a: ad.tsum(ad.mul(ad.relu(a), a))),
    "exp/log": lambda r: ([_param(r, 5, positive=True)], lambda a: ad.tsum(ad.mul(ad.log(a), ad.exp(ad.scale(a, 0.5))))),
    "sqrt/reciprocal": lambda r: ([_param(r, 5, positive=True)], lambda a: ad.tsum(ad.mul(ad.sqrt(a), ad.reciprocal(a)))),
    "transpose": lambda r: ([_param(r, 3, 5)], lambda a: ad.tsum(ad.mul(ad.transpose(a), ad.transpose(a)))),
    "row sum": lambda r: ([_param(r, 3, 5)], lambda a: ad.tsum(ad.exp(ad.scale(ad.tsum(a, axis=1, keepdims=True), 0.2)))),
    "add_bias": lambda r: ([_param(r, 4, 3), _param(r, 3)], lambda a, b: ad.tsum(ad.exp(ad.scale(ad.add_bias(a, b), 0.5)))),
    "mul_rows": lambda r: ([_param(r, 4, 3), _param(r, 4, 1)], lambda a, s: ad.tsum(ad.mul(ad.mul_rows(a, s), a))),
    "log_softmax": lambda r: ([_param(r, 4, 6)], lambda a: ad.tsum(ad.mul(ad.log_softmax(a), ad.exp(ad.scale(a, 0.1))))),
    "masked gather": lambda r: (
        [_param(r, 4, 6)],
        lambda a: ad.mean(ad.gather_rows(ad.log_softmax(a, mask=np.eye(4, 6, dtype=bool)), [1, 2, 3, 0])),
    ),
    "concat_rows": lambda r: ([_param(r, 2, 3), _param(r, 4, 3)], lambda a, b: ad.tsum(ad.mul(ad.concat_rows(a, b), ad.concat_rows(a, b)))),
    "power_normalize": lambda r: ([_param(r, 3, 4)], lambda a: ad.tsum(ad.mul(power_normalize(a, 2.0), Tensor(np.arange(12.0).reshape(3, 4))))),
    "info_nce": lambda r: ([_param(r, 4, 6), _param(r, 4, 6)], lambda a, b: info_nce(a, b, InfoNceConfig(0.5))),
}


@criterion(1, "gradient correctness")
def test_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for name, build in OPS.items():
        for _ in range(POINTS):
            tensors, f = build(rng)
            worst[name] = max(worst.get(name, 0.0), check_grads(lambda: f(*tensors), tensors, H))
    for kind in (AWGN, RAYLEIGH):
        for point in range(POINTS):
            prng = np.random.default_rng(point)
            model = SplitModel.create(EncoderSpec(5, (16,), 4), ChannelConfig(kind, 10.0), prng)
            model.attach_receiver(ReceiverSpec(4, (6,), 3), prng)
            x, y = prng.normal(size=(6, 5)), prng.integers(0, 3, size=6)
            build = lambda: cross_entropy(model.forward(x, np.random.default_rng(point)), y)
            key = f"composite {kind}"
            worst[key] = max(worst.get(key, 0.0), check_grads(build, model.theta + model.phi, H))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < REL_TOL}
    assert not bad, bad
    assert elapsed < 10.0


@criterion(2, "channel statistics")
def test_channel_statistics():
    rng = np.random.default_rng(2)
    for snr, expected in [(0.0, 1.0), (10.0, 0.1), (20.0, 0.01)]:
        cfg = ChannelConfig(AWGN, snr, power=1.0)
        assert cfg.noise_variance == expected
        noise = draw_realization((100_000, 2), cfg, rng).noise[:, 0]
        assert abs(np.mean(np.abs(noise) ** 2) / expected - 1.0) < 0.01
    z = power_normalize(Tensor(rng.normal(scale=7.0, size=(50, 32))), 1.0).data
    assert np.max(np.abs((z**2).mean(axis=1) - 1.0)) < 1e-12


def _h2(p):
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


@criterion(3, "exact MI oracle")
def test_exact_mi_oracle():
    p = 0.11
    bsc = DiscreteJoint([("X", 2), ("Y", 2)], 0.5 * np.array([[1 - p, p], [p, 1 - p]]))
    assert abs(mutual_information(bsc, "X", "Y") - (1 - _h2(p))) < 1e-9
    table = np.zeros((2, 2, 2))
    for x in range(2):
        for xp in range(2):
            table[x, xp, x ^ xp] = 0.25
    xor = DiscreteJoint([("X", 2), ("X'", 2), ("Y", 2)], table)
    assert abs(mutual_information(xor, "X", "Y")) < 1e-9
    assert abs(conditional_mi(xor, "X", "Y", "X'") - 1.0) < 1e-9


@criterion(4, "information identities")
def test_identities():
    start = time.perf_counter()
    result = run_sweep(seed=4, n_joints=200, n_pgms=200, n_theorem=0)
    elapsed = time.perf_counter() - start
    for name in ("chain_rule", "nonnegativity", "decomposition", "surrogate_bound", "dpi", "d_separation"):
        assert result.counts[name] == 200 and result.failures[name] == 0, name
    assert elapsed < 60.0


@criterion(5, "bound chain sweep")
def test_bound_chain_sweep(tmp_path):
    rng = np.random.default_rng(5)
    failures = []
    for i in range(100):
        pgm, channel = theorem_instance(rng, (2, 4))
        report = verify_theorem1(pgm, channel, tol=1e-9)
        if not report.chain_holds:
            failures.append({"instance": i, "pgm": repr(pgm), "channel": channel.tolist(), "slacks": list(report.slacks)})
    if failures:
        (tmp_path / "violations.json").write_text(json.dumps(failures, indent=2))
    assert not failures, failures


def _gaussian_pair(rng, b, k, rho):
    z = rng.normal(size=(b, k))
    return z, rho * z + math.sqrt(1 - rho**2) * rng.normal(size=(b, k))


@criterion(6, "InfoNCE properties")
def test_info_nce_properties():
    rng = np.random.default_rng(6)
    cfg = InfoNceConfig(0.1)
    for _ in range(50):
        a, b = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
        loss = info_nce(a, b, cfg).item()
        assert loss >= 0.0
        assert abs(info_nce(3.5 * a, 0.2 * b, cfg).item() - loss) < 1e-9
        assert abs(info_nce(b, a, cfg).item() - loss) < 1e-9
    same = np.tile(rng.normal(size=(1, 6)), (8, 1))
    assert info_nce(same, same, cfg).item() == pytest.approx(math.log(15), abs=1e-12)
    # correlated Gaussian pairs with known MI, small batch
    for k, rho, b in [(8, 0.99, 4), (16, 0.9, 2)]:
        mi = -0.5 * k * math.log(1 - rho**2)
        assert mi > math.log(2 * b - 1)
        for _ in range(500):
            za, zb = _gaussian_pair(rng, b, k, rho)
            assert info_nce_bound(info_nce(za, zb, cfg).item(), b) <= mi + 1e-6
    # weakly dependent pairs: the bound holds on average
    k, rho, b = 4, 0.5, 4
    est = np.array([info_nce_bound(info_nce(*_gaussian_pair(rng, b, k, rho), InfoNceConfig(0.5)).item(), b) for _ in range(2000)])
    assert est.mean() + 3 * est.std() / math.sqrt(est.size) <= -0.5 * k * math.log(1 - rho**2)


def _ordering_violations(rounds: dict, thresholds) -> tuple[list, int, int]:
    bad, wins, counted = [], 0, 0
    for i, t in enumerate(thresholds):
        row = {name: rounds[name][i] for name in REGIMES}
        if None in row.values():
            continue
        counted += 1
        if not row["SSL-FT"] < row["Sup"]:
            bad.append(("SSL-FT < Sup", t, row))
        if not row["SSL-FT(60%)"] < row["Sup(60%)"]:
            bad.append(("SSL-FT(60%) < Sup(60%)", t, row))
        wins += row["SSL-FT(60%)"] <= row["Sup"]
    return bad, wins, counted


@criterion(7, "convergence ordering")
def test_convergence_ordering(tmp_path):
    cfg = parse_config(overrides={"seeds": [0, 1, 2], "channel.kind": [AWGN, RAYLEIGH], "channel.snr_db": [10.0], "output_dir": str(tmp_path)})
    start = time.perf_counter()
    cli.run_experiment(cfg)
    elapsed = time.perf_counter() - start
    problems = []
    for seed, channel in cfg.runs():
        rounds = {
            name: rounds_to_threshold(read_records(tmp_path / run_filename(name, channel.label, seed)), cfg.thresholds)
            for name in REGIMES
        }
        bad, wins, counted = _ordering_violations(rounds, cfg.thresholds)
        if counted == 0:
            problems.append((channel.label, seed, "no threshold reached by all four regimes"))
        problems += [(channel.label, seed) + b for b in bad]
        if not 2 * wins > counted:
            problems.append((channel.label, seed, f"SSL-FT(60%) <= Sup at {wins} of {counted} thresholds"))
    assert not problems, problems
    assert elapsed < 600.0


# Verbatim rounds from the AWGN table; "b" marks bold (best), "u" underlined (second).
TABLE_AWGN = {
    "0dB": {
        "SSL-FT": ["b560", "b882", "b1512", "b3507"],
        "Sup": ["u840", "u1344", "u2408", "6230"],
        "SSL-FT(60%)": ["980", "1547", "2618", "u5957"],
        "Sup(60%)": ["1526", "2373", "4144", "7000"],
    },
    "10dB": {
        "SSL-FT": ["b441", "b679", "b1099", "b2100"],
        "Sup": ["u686", "u1106", "1897", "4291"],
        "SSL-FT(60%)": ["770", "1169", "u1855", "u3514"],
        "Sup(60%)": ["1162", "1890", "3213", "6762"],
    },
    "20dB": {
        "SSL-FT": ["b413", "b637", "b1015", "b1890"],
        "Sup": ["u588", "u973", "u1708", "3801"],
        "SSL-FT(60%)": ["721", "1113", "1750", "u3213"],
        "Sup(60%)": ["1029", "1701", "2919", "6055"],
    },
}
TABLE_RAYLEIGH = {
    "0dB": {
        "SSL-FT": ["b658", "b1022", "b1729", "b4361"],
        "Sup": ["u924", "u1470", "u2695", "7000"],
        "SSL-FT(60%)": ["1127", "1750", "2961", "7000"],
        "Sup(60%)": ["1589", "2527", "4578", "7000"],
    },
    "10dB": {
        "SSL-FT": ["b504", "b777", "b1253", "b2590"],
        "Sup": ["u742", "u1190", "u2086", "5068"],
        "SSL-FT(60%)": ["854", "1323", "2121", "u4235"],
        "Sup(60%)": ["1260", "2023", "3472", "7000"],
    },
    "20dB": {
        "SSL-FT": ["b483", "b749", "b1218", "b2415"],
        "Sup": ["u672", "u1120", "u2002", "4816"],
        "SSL-FT(60%)": ["868", "1330", "2107", "u4095"],
        "Sup(60%)": ["1260", "2016", "3395", "7000"],
    },
}
TABLE_LOSSES = [4.0, 3.0, 2.0, 1.0]
TABLE_BUDGET = 7000


def _staircase(crossings):
    """Loss log that first reaches each tabulated loss exactly at its round."""
    records = []
    for rnd in range(1, TABLE_BUDGET + 1):
        reached = [t for t, c in zip(TABLE_LOSSES, crossings) if c <= rnd]
        records.append(RoundRecord(rnd, FINETUNE, 1 + (rnd - 1) // 7, min(reached) if reached else 5.0))
    return records


@criterion(8, "table fixture markings")
@pytest.mark.parametrize("kind, table", [("AWGN", TABLE_AWGN), ("Rayleigh", TABLE_RAYLEIGH)])
def test_table_fixture(tmp_path, kind, table):
    expected = {}
    for snr, rows in table.items():
        label = f"{kind}_{snr}"
        for regime, cells in rows.items():
            rounds = [int(c.lstrip("bu")) for c in cells]
            write_records(tmp_path / run_filename(regime, label, 0), _staircase(rounds))
            for loss, cell in zip(TABLE_LOSSES, cells):
                text = cell.lstrip("bu")
                expected[(regime, (label, loss))] = {"b": f"*{text}*", "u": f"_{text}_"}.get(cell[0], text)
    rendered = render_table([tmp_path], TABLE_LOSSES, max_rounds=TABLE_BUDGET)
    got = {key: rendered.cell_text(*key) for key in expected}
    assert got == expected


def _csv_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.glob("*.csv"))}


@criterion(9, "determinism")
def test_determinism(tmp_path):
    args = ["run", "--seed", "0", "--channel", "AWGN,Rayleigh", "--snr", "10"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    first, second = _csv_bytes(tmp_path / "a"), _csv_bytes(tmp_path / "b")
    assert len(first) == 8
    assert first == second


@criterion(10, "label blindness")
def test_label_blindness():
    cfg = parse_config()
    train, _ = cfg.data.load(0)

    def stage_one(data):
        model = new_model(train.dim, cfg.train)
        pretrain(model, data, cfg.train)
        return model.theta_arrays()

    reference = stage_one(train)
    unlabelled = stage_one(Dataset(train.features.copy(), None, train.num_classes))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(reference, unlabelled))
