import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvd import diffcore as dc
from dvd import driftnet as dn
from dvd.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from dvd.errors import CheckpointRoleError, FormatError, ParameterError


def net(seed=0, widths=(3, 5, 2)):
    acts = ["relu"] * (len(widths) - 2) + ["softmax" if seed % 2 else "identity"]
    return dc.MlpNet.init(list(widths), acts, np.random.default_rng(seed))


@given(st.integers(0, 1000), st.lists(st.integers(1, 6), min_size=2, max_size=4), st.booleans())
def test_net_round_trip_is_exact(seed, widths, frozen):
    a = net(seed, widths)
    blob = encode_checkpoint(a, "G", frozen=frozen)
    b, role, fr = decode_checkpoint(blob)
    assert role == "G" and fr == frozen and b.frozen == frozen
    assert b.checksum() == a.checksum()
    assert [l.activation for l in b.layers] == [l.activation for l in a.layers]
    assert encode_checkpoint(b, "G") == blob


def test_drift_round_trip_keeps_schedule():
    d = dn.DriftModel.init(4, np.random.default_rng(1), hidden=(7,), T=23)
    d.frozen = True
    back, role, frozen = decode_checkpoint(encode_checkpoint(d, "D"))
    assert role == "D" and frozen and back.T == 23 and back.n_freqs == d.n_freqs
    assert back.checksum() == d.checksum()


def test_source_and_adapted_encoders_share_a_tag():
    a = net()
    assert encode_checkpoint(a, "Gs") == encode_checkpoint(a, "Gt") == encode_checkpoint(a, "G")


@pytest.mark.parametrize("stored,expected", [("D", "F"), ("F", "D"), ("G", "F"), ("F", "Gt")])
def test_role_mismatch(tmp_path, stored, expected):
    model = dn.DriftModel.init(2, np.random.default_rng(0), hidden=(3,)) if stored == "D" else net()
    path = save_checkpoint(model, tmp_path / "x.ckpt", stored)
    with pytest.raises(CheckpointRoleError):
        load_checkpoint(path, expect=expected)


def test_role_must_match_model_type():
    with pytest.raises(CheckpointRoleError):
        encode_checkpoint(net(), "D")
    with pytest.raises(CheckpointRoleError):
        encode_checkpoint(dn.DriftModel.init(2, np.random.default_rng(0), hidden=(3,)), "F")
    with pytest.raises(ParameterError):
        encode_checkpoint(net(), "Q")


def test_truncations_report_offsets():
    blob = encode_checkpoint(dn.DriftModel.init(2, np.random.default_rng(0), hidden=(3,)), "D")
    for n in range(len(blob)):
        with pytest.raises(FormatError, match="offset"):
            decode_checkpoint(blob[:n])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(blob + b"\0")


def test_bad_header_fields():
    blob = bytearray(encode_checkpoint(net(), "F"))
    for pos, value in ((0, ord("X")), (4, 9), (6, 77)):
        bad = bytearray(blob)
        bad[pos] = value
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(bad))


def test_file_helpers(tmp_path):
    a = net(3)
    path = save_checkpoint(a, tmp_path / "sub" / "F.ckpt", "F", frozen=True)
    model, role, frozen = read_checkpoint(path, expect="F")
    assert role == "F" and frozen and model.checksum() == a.checksum()
    assert [p.name for p in path.parent.iterdir()] == ["F.ckpt"]
