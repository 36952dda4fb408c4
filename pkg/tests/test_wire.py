import numpy as np
import pytest

from fbttr.wire import (
    HEADER_LEN,
    MAGIC,
    AceReport,
    BlockUpdate,
    DeflateAck,
    Done,
    GlobalBlock,
    Hello,
    HyperAssign,
    Message,
    MessageKind,
    ProtocolErrorInfo,
    WireError,
    decode_message,
    encode_message,
    frame_length,
)


def sample_messages():
    rng = np.random.default_rng(0)
    core = rng.normal(size=(1, 2, 2))
    score = rng.normal(size=(1, 2, 2))
    factors = [rng.normal(size=(5, 2)), rng.normal(size=(4, 2))]
    q = rng.normal(size=(2, 1))
    return [
        Message(MessageKind.HELLO, 0, 3, Hello(
            sample_count=23, feature_shape=(5, 4), n_responses=2,
            max_blocks=4, epsilon=1e-8, snr_values=(1.0, 5.0), tau_values=(95.0, 100.0))),
        Message(MessageKind.ACE_REPORT, 1, 3, AceReport(
            skip=False, snr=12.0, tau=97.0, bic=-3.25, ranks=(2, 2))),
        Message(MessageKind.ACE_REPORT, 2, 1, AceReport(skip=True)),
        Message(MessageKind.HYPER_ASSIGN, 1, 3, HyperAssign(snr=12.0, tau=97.0, target_ranks=(2, 1))),
        Message(MessageKind.BLOCK_UPDATE, 1, 3, BlockUpdate(
            skip=False, n_samples=23, core=core, score_core=score, factors=factors, q=q, d=1.5)),
        Message(MessageKind.BLOCK_UPDATE, 2, 3, BlockUpdate(skip=True, n_samples=23)),
        Message(MessageKind.GLOBAL_BLOCK, 1, 3, GlobalBlock(
            core=core, score_core=score, factors=factors, q=q, d=-0.75)),
        Message(MessageKind.DEFLATE_ACK, 1, 3, DeflateAck(e_norm=2.5, f_norm=0.25)),
        Message(MessageKind.DONE, 4, 3, Done(blocks_extracted=4)),
        Message(MessageKind.ERROR, 2, 3, ProtocolErrorInfo(code=1, detail="round aborted")),
    ]


@pytest.mark.parametrize("msg", sample_messages(), ids=lambda m: f"{m.kind.name}-{m.round}")
def test_round_trip_byte_identical(msg):
    frame = encode_message(msg)
    decoded = decode_message(frame)
    assert decoded.kind == msg.kind
    assert decoded.round == msg.round
    assert decoded.client_id == msg.client_id
    # a second encode of the decoded message must reproduce the same bytes
    assert encode_message(decoded) == frame


def test_frame_header_and_length():
    msg = sample_messages()[0]
    frame = encode_message(msg)
    assert frame[:4] == MAGIC
    assert frame[4] == 1
    assert frame_length(frame[:HEADER_LEN]) == len(frame)


def test_decode_rejects_bad_frames():
    msg = sample_messages()[1]
    frame = encode_message(msg)
    with pytest.raises(WireError):
        decode_message(b"XXXX" + frame[4:])
    with pytest.raises(WireError):
        decode_message(frame[:9])
    bad_version = bytearray(frame)
    bad_version[4] = 99
    with pytest.raises(WireError):
        decode_message(bytes(bad_version))
    bad_kind = bytearray(frame)
    bad_kind[5] = 200
    with pytest.raises(WireError):
        decode_message(bytes(bad_kind))
    with pytest.raises(WireError):
        decode_message(frame + b"\x00")


def test_block_update_payload_field_inventory():
    # the update carries cores, factors, loading, coefficient and count only
    msg = sample_messages()[4]
    decoded = decode_message(encode_message(msg))
    p = decoded.payload
    assert set(vars(p)) == {"skip", "n_samples", "core", "score_core", "factors", "q", "d"}
    assert np.allclose(p.core, msg.payload.core)
    assert p.core.shape == (1, 2, 2)
    assert [f.shape for f in p.factors] == [(5, 2), (4, 2)]
