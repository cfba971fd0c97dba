import json

import numpy as np
import pytest

from attnaspp.data import SynthConfig, gen_synthetic
from attnaspp.models import load_checkpoint, load_network
from attnaspp.optim import NumericalError, cosine_lr, optimizer_state_from_entries
from attnaspp.train import RunConfig, lr_trace_matches, train


@pytest.fixture(scope="module")
def tiny_data():
    s = gen_synthetic(SynthConfig(size=16, seed=5), 10)
    return s[:6], s[6:8], s[8:]


def tiny_cfg(**kw):
    base = dict(variant="att_unet_aspp", base_channels=2, input_size=16, epochs=3,
                batch_size=3, seed=2)
    return RunConfig(**{**base, **kw})


def test_same_seed_gives_identical_loss_trace(tiny_data):
    _, a = train(tiny_cfg(), *tiny_data)
    _, b = train(tiny_cfg(), *tiny_data)
    assert [e["train_loss"] for e in a.epochs] == [e["train_loss"] for e in b.epochs]
    _, c = train(tiny_cfg(seed=3), *tiny_data)
    assert [e["train_loss"] for e in a.epochs] != [e["train_loss"] for e in c.epochs]


def test_lr_trace_follows_cosine(tiny_data):
    _, rep = train(tiny_cfg(epochs=4), *tiny_data)
    assert rep.lr_trace[0] == 1e-3
    assert rep.lr_trace[-1] == cosine_lr(0.0, 1e-3, 3, 4)
    assert lr_trace_matches(rep)


def test_long_cycle_trace_endpoints():
    from attnaspp.optim import CosineSchedule
    s = CosineSchedule(eta_max=1e-3, t_i=100)
    trace = []
    for _ in range(100):
        trace.append(s.lr_at())
        s.epoch_tick()
    assert trace[0] == 1e-3 and trace[-1] == cosine_lr(0, 1e-3, 99, 100)


def test_outputs_written(tmp_path, tiny_data):
    net, rep = train(tiny_cfg(), *tiny_data, out_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"best.ckpt", "last.ckpt", "report.json", "test_metrics.csv",
            "test_metrics.txt"} <= names
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["timings"]["note"].startswith("hardware-dependent")
    assert len(report["epochs"]) == 3
    last = load_checkpoint(tmp_path / "last.ckpt")
    st, sched = optimizer_state_from_entries(last)
    assert st.t == 3 * 2 and sched.t_cur == 3  # 2 batches per epoch
    best = load_network(tmp_path / "best.ckpt")
    for k, v in net.state_dict().items():
        assert np.array_equal(best.state_dict()[k], v), k


def test_nan_loss_aborts_with_location(tiny_data):
    tr, va, te = tiny_data
    bad = list(tr)
    bad[0] = type(bad[0])(np.full_like(bad[0].image, np.nan), bad[0].mask, "nan")
    with pytest.raises(NumericalError, match="epoch 0 step"):
        train(tiny_cfg(batch_size=6), bad, va)


def test_size_mismatch_rejected(tiny_data):
    with pytest.raises(ValueError, match="expects"):
        train(tiny_cfg(input_size=32), *tiny_data)
