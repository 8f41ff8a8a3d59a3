import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from flycl.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from flycl.errors import FormatError
from flycl.learners import STRATEGIES, ClipConfig, make_learner
from flycl.model import forward, make_model

HP = {"lam": 2.0, "c": 0.5, "alpha": 0.1, "shrink": 0.2, "perturb": 0.1, "cbp_rate": 0.2, "cbp_maturity": 1}


def _trained(strategy, **model_kw):
    kw = dict(n_kc=80, degree=3, coding_level=0.1, hidden=(6,), seed=3)
    kw.update(model_kw)
    model = make_model(10, 4, **kw)
    learner = make_learner(strategy, model, 0.05, ClipConfig(5.0), **HP)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 10))
    for _ in range(4):
        learner.step(x, np.arange(12) % 4, rng=rng)
    learner.end_task(x, rng=rng)
    return model, learner


def _same_model(a, b):
    assert len(a.parameters()) == len(b.parameters())
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()
    if not a.ablate_kc:
        assert_array_equal(a.projection.rows, b.projection.rows)
    x = np.random.default_rng(1).normal(size=(5, a.input_dim))
    assert forward(a, x).logits.tobytes() == forward(b, x).logits.tobytes()


class TestRoundTrip:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_with_learner(self, strategy, tmp_path):
        model, learner = _trained(strategy)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, learner)
        model2, learner2 = load_checkpoint(path)
        _same_model(model, model2)
        assert learner2.name == learner.name
        assert learner2.clip.max_norm == 5.0
        a, b = learner.state_dict(), learner2.state_dict()
        assert a["scalars"] == b["scalars"]
        for key in a["arrays"]:
            assert a["arrays"][key].tobytes() == b["arrays"][key].tobytes()

    def test_resumed_training_is_identical(self):
        model, learner = _trained("si")
        model2, record = decode_checkpoint(encode_checkpoint(model, learner))
        from flycl.checkpoint import restore_learner

        learner2 = restore_learner(model2, record)
        x = np.random.default_rng(5).normal(size=(8, 10))
        y = np.arange(8) % 4
        for _ in range(3):
            learner.step(x, y)
            learner2.step(x, y)
        _same_model(model, model2)

    @pytest.mark.parametrize("kw", [
        {"ablate_kc": True},
        {"hidden": ()},
        {"head_bias": True, "ablate_kc": True},
        {"hidden": (7, 5)},
    ])
    def test_model_variants(self, kw):
        model = make_model(10, 4, **{"n_kc": 60, "degree": 3, "seed": 2, **kw})
        back, record = decode_checkpoint(encode_checkpoint(model))
        assert record is None
        _same_model(model, back)

    def test_encoding_deterministic(self):
        model, learner = _trained("ewc")
        assert encode_checkpoint(model, learner) == encode_checkpoint(model, learner)


class TestErrors:
    def test_bad_magic(self):
        buf = b"XXXX" + encode_checkpoint(make_model(4, 2, n_kc=10, degree=2))[4:]
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(buf)

    def test_bad_version(self):
        buf = bytearray(encode_checkpoint(make_model(4, 2, n_kc=10, degree=2)))
        buf[4:6] = struct.pack("<H", 99)
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(bytes(buf))

    def test_every_truncation_fails(self):
        model, learner = _trained("ewc", hidden=(), n_kc=20)
        buf = encode_checkpoint(model, learner)
        for cut in range(0, len(buf), max(1, len(buf) // 200)):
            with pytest.raises(FormatError):
                decode_checkpoint(buf[:cut])

    def test_unknown_section(self):
        buf = encode_checkpoint(make_model(4, 2, n_kc=10, degree=2))
        with pytest.raises(FormatError, match="section"):
            decode_checkpoint(buf + b"ZZZZ" + struct.pack("<Q", 0))
