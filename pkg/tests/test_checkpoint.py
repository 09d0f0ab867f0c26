import numpy as np
import pytest
from conftest import tiny_inputs

from tactile_vla import checkpoint as C
from tactile_vla.dataset import NormStats
from tactile_vla.encoders import TactileEncoder
from tactile_vla.policy import lora_wrap, policy_forward


@pytest.fixture
def policy(tiny):
    p = tiny("TacFiLM", seed=3)
    p.norm_stats = NormStats([-1.0, -2.0, -0.05], [1.0, 2.0, 0.05])
    return p


def test_policy_roundtrip_bit_exact(policy, tmp_path):
    path = C.save_policy(policy, tmp_path / "p.ckpt", {"step": 7})
    loaded = C.load_policy(path)
    assert C.module_checksums(loaded) == C.module_checksums(policy)
    assert [p.frozen for p in loaded.parameters()] == [p.frozen for p in policy.parameters()]
    np.testing.assert_array_equal(loaded.norm_stats.lo, policy.norm_stats.lo)
    assert loaded.config == policy.config
    inp = tiny_inputs(policy.config)
    np.testing.assert_array_equal(policy_forward(loaded, inp).data, policy_forward(policy, inp).data)
    assert C.read_manifest(path)["step"] == 7
    assert path.read_bytes() == C.save_policy(loaded, tmp_path / "q.ckpt", {"step": 7}).read_bytes()


def test_lora_policy_roundtrip(policy, tmp_path):
    lora_wrap(policy, r=2, alpha=4)
    for n, p in policy.named_parameters():
        if n.endswith("lora.B"):
            p.data = np.full(p.shape, 0.01)
    loaded = C.load_policy(C.save_policy(policy, tmp_path / "l.ckpt"))
    assert C.module_checksums(loaded) == C.module_checksums(policy)
    inp = tiny_inputs(policy.config)
    np.testing.assert_array_equal(policy_forward(loaded, inp).data, policy_forward(policy, inp).data)


def test_corruption_is_located(policy, tmp_path):
    path = C.save_policy(policy, tmp_path / "p.ckpt")
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    with pytest.raises(C.CheckpointError) as e:
        C.policy_from_bytes(bytes(data))
    assert e.value.tensor is not None and e.value.offset is not None
    with pytest.raises(C.CheckpointError, match="truncated"):
        C.policy_from_bytes(bytes(data[:-100]))
    with pytest.raises(C.CheckpointError, match="trailing"):
        C.policy_from_bytes(path.read_bytes() + b"\0")
    with pytest.raises(C.CheckpointError, match="magic"):
        C.policy_from_bytes(b"XXXXXXXX" + path.read_bytes()[8:])


def test_encoder_roundtrip_and_kind_check(tmp_path):
    enc = TactileEncoder(rng=np.random.default_rng(5))
    enc.freeze()
    path = C.save_encoder(enc, tmp_path / "e.ckpt", seed=5)
    back = C.load_encoder(path)
    assert C.module_checksums(back) == C.module_checksums(enc)
    assert all(p.frozen for p in back.parameters())
    with pytest.raises(C.CheckpointError, match="policy"):
        C.load_policy(path)


def test_shape_mismatch_rejected(policy, tiny, tmp_path):
    path = C.save_policy(policy, tmp_path / "p.ckpt")
    manifest, tensors = C.decode(path.read_bytes())
    other = tiny("TacFiLM", d_lm=8)
    with pytest.raises(C.CheckpointError, match="shape"):
        C.load_into(other, manifest, tensors)
