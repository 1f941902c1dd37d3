import hashlib

import pytest

from dualside import first_protected_packet, handshake, oracle_keys, oracle_mpint, oracle_verify
from kexlearn import kex as kx
from kexlearn.wire import (IntegrityError, PayloadReader, SequenceCounters, encode_packet, mpint,
                           try_decode_packet)

FLOWS = [kx.ECDH, kx.DH, kx.DHGEX]


@pytest.fixture(scope="module")
def host_key():
    return kx.HostKey()


@pytest.mark.parametrize("flow", FLOWS, ids=lambda f: f.key)
def test_both_ends_agree(flow, host_key):
    hs = handshake(flow, host_key)
    assert hs.strict
    assert hs.client.shared_secret == hs.server.shared_secret
    assert hs.client.exchange_hash == hs.server.exchange_hash
    assert hs.client.session_id == hs.client.exchange_hash
    oracle_verify(hs.reply, hs.client.exchange_hash)
    h, k = hs.client.exchange_hash, hs.client.shared_secret
    kc = kx.derive_keys(k, h, hs.client.session_id)
    ks = kx.derive_keys(hs.server.shared_secret, hs.server.exchange_hash, hs.server.session_id)
    assert kc == ks
    expected = oracle_keys(k, h, h)
    assert {name: getattr(kc, name) for name in expected} == expected
    up, down = first_protected_packet(hs, kc, ks)
    assert up.startswith(b"\x05") and down.startswith(b"\x06")


def test_mac_fails_without_reset(host_key):
    hs = handshake(kx.ECDH, host_key)
    keys = kx.derive_keys(hs.client.shared_secret, hs.client.exchange_hash, hs.client.session_id)
    out, _ = keys.cipher_states()
    inn, _ = keys.cipher_states()
    # client keeps counting, server resets: the MAC must not validate
    wire = encode_packet(b"\x05", out, SequenceCounters(send=hs.client_packets))
    with pytest.raises(IntegrityError):
        try_decode_packet(bytearray(wire), inn, SequenceCounters())


def test_tampered_signature_rejected(host_key):
    c = kx.KexTranscript("SSH-2.0-a", "SSH-2.0-b", b"\x14c", b"\x14s")
    s = kx.KexTranscript("SSH-2.0-a", "SSH-2.0-b", b"\x14c", b"\x14s")
    init = kx.generate_kex_init_message(kx.ECDH, c)
    reply = bytearray(kx.server_kex_reply(kx.ECDH, init, s, host_key))
    reply[-1] ^= 1
    with pytest.raises(kx.CryptoError):
        kx.process_kex_reply(kx.ECDH, bytes(reply), c)


def test_signature_from_other_key_rejected(host_key):
    with pytest.raises(kx.CryptoError):
        kx.verify_host_signature(host_key.blob, kx.HostKey().sign(b"h"), b"h")


def test_x25519_low_order_point():
    c = kx.KexTranscript()
    kx.generate_kex_init_message(kx.ECDH, c)
    with pytest.raises(kx.CryptoError):
        kx._x25519_shared(c.ecdh_private, bytes(32))


def test_dh_value_out_of_range():
    c = kx.KexTranscript()
    kx.generate_kex_init_message(kx.DH, c)
    with pytest.raises(kx.CryptoError):
        kx._dh_shared(c.dh_private, 1, kx.GROUP14_P, kx.GROUP14_G)


def test_gex_group_checks():
    c = kx.KexTranscript()
    assert kx.handle_gex_group(kx.gex_group_payload(), c) == (kx.GROUP14_P, 2)
    with pytest.raises(kx.ParameterError):
        kx.handle_gex_group(kx.gex_group_payload((1 << 511) + 187, 2), c)


def test_gex_uses_stored_group():
    c = kx.KexTranscript()
    kx.handle_gex_group(kx.gex_group_payload(), c)
    msg = kx.generate_kex_init_message(kx.DHGEX, c)
    assert msg[0] == kx.MSG_KEX_DH_GEX_INIT
    assert PayloadReader(msg, 1).mpint() == c.e
    assert 1 < c.e < kx.GROUP14_P


def test_gex_request_bounds_checked():
    with pytest.raises(kx.ParameterError):
        kx.parse_gex_request(b"\x22" + (4096).to_bytes(4, "big") + (2048).to_bytes(4, "big")
                             + (8192).to_bytes(4, "big"), kx.KexTranscript())


def test_init_without_kexinit_uses_defaults():
    ctx = kx.KexTranscript()
    assert kx.generate_kex_init_message(kx.ECDH, ctx)[0] == kx.MSG_KEX_ECDH_INIT
    assert len(ctx.q_c) == 32
    assert kx.generate_kex_init_message(kx.DHGEX, kx.KexTranscript())[0] == kx.MSG_KEX_DH_GEX_INIT


def test_forged_reply_leaves_client_state(host_key):
    ctx = kx.KexTranscript()
    kx.generate_kex_init_message(kx.ECDH, ctx)
    q_c = ctx.q_c
    reply = kx.forge_kex_reply(kx.ECDH, ctx, host_key)
    assert reply[0] == kx.MSG_KEX_ECDH_REPLY
    assert ctx.q_c == q_c and not ctx.keys_available


def test_derive_keys_deterministic_and_sized():
    a = kx.derive_keys(12345, b"h" * 32, b"s" * 32)
    assert a == kx.derive_keys(12345, b"h" * 32, b"s" * 32)
    assert len(a.enc_c2s) == 16 and len(a.mac_c2s) == 32 and len(a.iv_s2c) == 16
    long = kx.derive_keys(12345, b"h" * 32, b"s" * 32, mac_length=80)
    assert long.mac_c2s[:32] == a.mac_c2s and len(long.mac_c2s) == 80


@pytest.mark.parametrize("k", [1, 0x7f, 0x80, 0xff00, 2**255 + 19])
def test_mpint_matches_oracle(k):
    assert mpint(k) == oracle_mpint(k)


def test_unsupported_flows():
    for flow in (kx.RSA, kx.PQ_HYBRID):
        with pytest.raises(kx.UnsupportedFlow):
            flow.activate()
    assert kx.flow_by_name("dhgex") is kx.DHGEX
    assert kx.ECDH.hash is hashlib.sha256
