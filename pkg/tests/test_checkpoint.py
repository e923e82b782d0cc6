import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from forgekey.checkpoint import (
    MAGIC,
    Checkpoint,
    checkpoint_to_model,
    from_bytes,
    load_model,
    model_to_checkpoint,
    save_model,
    to_bytes,
)
from forgekey.errors import FormatError
from forgekey.inference import FusionStrategy, logits_matrix, predict_batch
from forgekey.membank import delete
from tests_support import tiny_model

names = st.text(st.characters(min_codepoint=48, max_codepoint=122), min_size=1, max_size=12)
arrays = st.one_of(
    hnp.arrays(np.dtype("<f4"), hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
               elements=st.floats(-1e6, 1e6, width=32)),
    hnp.arrays(np.dtype("<u8"), hnp.array_shapes(min_dims=1, max_dims=2, max_side=5)),
    hnp.arrays(np.dtype("u1"), hnp.array_shapes(min_dims=1, max_dims=2, max_side=5)),
)
metas = st.dictionaries(st.text(max_size=6), st.one_of(st.integers(-10**6, 10**6), st.text(max_size=8),
                                                         st.lists(st.integers(0, 9), max_size=4)), max_size=4)


@settings(max_examples=50)
@given(st.dictionaries(names, arrays, max_size=5), metas)
def test_round_trip_random_checkpoints(tensors, meta):
    ck = Checkpoint(tensors, meta)
    blob = to_bytes(ck)
    back = from_bytes(blob)
    assert set(back.tensors) == set(tensors) and back.meta == meta
    for n, a in tensors.items():
        assert back.tensors[n].dtype == a.dtype and back.tensors[n].tobytes() == a.tobytes()
        assert back.tensors[n].shape == a.shape
    assert to_bytes(back) == blob


def test_bad_magic_is_named():
    blob = to_bytes(Checkpoint({"x": np.zeros(3, np.float32)}, {}))
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"NOPE" + blob[4:])


def test_every_truncation_is_rejected():
    blob = to_bytes(Checkpoint({"a": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": 1}))
    for cut in range(len(blob)):
        with pytest.raises(FormatError):
            from_bytes(blob[:cut])
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(blob + b"\0")


def test_unknown_major_version_and_dtype():
    blob = bytearray(to_bytes(Checkpoint({"a": np.zeros(2, np.float32)}, {})))
    bumped = bytes(blob[:4]) + struct.pack("<H", 9) + bytes(blob[6:])
    with pytest.raises(FormatError, match="version"):
        from_bytes(bumped)
    minor = bytes(blob[:6]) + struct.pack("<H", 7) + bytes(blob[8:])
    assert from_bytes(minor).version == (1, 7)
    # dtype byte sits right after the one-character name
    pos = 4 + 8 + 4 + 1
    bad = bytes(blob[:pos]) + b"\x09" + bytes(blob[pos + 1:])
    with pytest.raises(FormatError, match="dtype"):
        from_bytes(bad)
    with pytest.raises(FormatError):
        to_bytes(Checkpoint({"a": np.zeros(2, np.int16)}, {}))


def test_model_round_trip_is_lossless(tmp_path):
    model, ds = tiny_model()
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    back = load_model(path)
    assert back.history == model.history and back.config == model.config
    for n, t in model.params.items():
        assert np.array_equal(back.params[n].data, t.data) and back.params[n].decay == t.decay
    imgs = ds.split("test").images
    st_ = FusionStrategy("ensemble", K=4)
    assert np.array_equal(logits_matrix(predict_batch(imgs, back, st_)),
                          logits_matrix(predict_batch(imgs, model, st_)))
    save_model(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_deletions_survive_save_and_load(tmp_path):
    model, _ = tiny_model()
    m = model.copy()
    gone = m.memory.ids[: len(m.memory) // 10]
    delete(m.memory, gone)
    save_model(tmp_path / "u.ckpt", m)
    back = load_model(tmp_path / "u.ckpt")
    assert back.memory.live_count == len(model.memory) - len(gone)
    assert not set(gone.tolist()) & set(back.memory.live_ids().tolist())
    before = model_to_checkpoint(model).tensors
    after = model_to_checkpoint(back).tensors
    for n in before:
        if n.startswith("model."):
            assert before[n].tobytes() == after[n].tobytes()


def test_missing_fields_rejected():
    with pytest.raises(FormatError, match="lacks"):
        checkpoint_to_model(Checkpoint({}, {}))
    assert MAGIC == b"MNKY"
