import os

import pytest
from hypothesis import given, settings, strategies as st

from mixnn import crypto
from mixnn.crypto import (Address, DecryptionError, KeyRecord, gen_keypair,
                          open_sealed, seal)


class TestKeyGen:
    def test_unseeded_pairs_are_distinct(self, keypair, keypair2):
        assert keypair.pk != keypair2.pk
        assert keypair.sk != keypair2.sk

    def test_seeded_is_deterministic(self):
        a = gen_keypair(b"same-seed")
        b = gen_keypair(b"same-seed")
        assert a.pk == b.pk and a.sk == b.sk

    def test_different_seeds_differ(self):
        assert gen_keypair(b"seed-a").pk != gen_keypair(b"seed-b").pk

    def test_roundtrip_on_1mib(self, keypair):
        msg = os.urandom(1 << 20)
        assert open_sealed(keypair.sk, seal(keypair.pk, msg)) == msg

    def test_seeded_key_works_for_sealing(self):
        kp = gen_keypair(b"functional")
        assert open_sealed(kp.sk, seal(kp.pk, b"hello")) == b"hello"


class TestSealOpen:
    def test_empty_roundtrip(self, keypair):
        assert open_sealed(keypair.sk, seal(keypair.pk, b"")) == b""

    def test_randomized_encryption(self, keypair):
        assert seal(keypair.pk, b"same") != seal(keypair.pk, b"same")

    def test_overhead_constant(self, keypair):
        overheads = {
            len(seal(keypair.pk, b"\x00" * n)) - n for n in (0, 1, 1_000_000)
        }
        assert overheads == {crypto.seal_overhead()}

    def test_ciphertext_layout(self, keypair):
        # [wrapped-key length u16 BE][wrapped key][nonce][body][tag]
        import struct
        ct = seal(keypair.pk, b"abc")
        (wklen,) = struct.unpack(">H", ct[:2])
        assert wklen == crypto.RSA_BYTES
        assert len(ct) == 2 + wklen + crypto.NONCE_LEN + 3 + crypto.TAG_LEN

    def test_wrong_key_fails(self, keypair, keypair2):
        ct = seal(keypair.pk, b"secret")
        with pytest.raises(DecryptionError):
            open_sealed(keypair2.sk, ct)

    def test_every_bit_flip_detected(self, keypair):
        ct = bytearray(seal(keypair.pk, b"x"))
        for byte_idx in range(len(ct)):
            for bit in range(8):
                ct[byte_idx] ^= 1 << bit
                with pytest.raises(DecryptionError):
                    open_sealed(keypair.sk, bytes(ct))
                ct[byte_idx] ^= 1 << bit

    def test_truncation_fails(self, keypair):
        ct = seal(keypair.pk, b"hello world")
        for cut in (0, 1, 2, len(ct) // 2, len(ct) - 1):
            with pytest.raises(DecryptionError):
                open_sealed(keypair.sk, ct[:cut])

    @settings(max_examples=60, deadline=None)
    @given(st.binary(min_size=0, max_size=4096))
    def test_roundtrip_property(self, message):
        kp = _property_keypair()
        assert open_sealed(kp.sk, seal(kp.pk, message)) == message


_PROPERTY_KP = None


def _property_keypair():
    global _PROPERTY_KP
    if _PROPERTY_KP is None:
        _PROPERTY_KP = gen_keypair()
    return _PROPERTY_KP


class TestAddress:
    def test_roundtrip(self):
        a = Address("example.host", 8080)
        assert Address.parse(str(a)) == a

    def test_bad_port(self):
        with pytest.raises(ValueError):
            Address("h", 0)
        with pytest.raises(ValueError):
            Address("h", 70000)

    def test_parse_requires_port(self):
        with pytest.raises(ValueError):
            Address.parse("nohost")


class TestKeyRecord:
    def test_line_roundtrip(self, keypair):
        rec = KeyRecord("node-1", Address("10.0.0.1", 9000), keypair.pk,
                        {"region": "x", "price": "2"})
        back = KeyRecord.from_line(rec.to_line())
        assert back.node_id == rec.node_id
        assert back.address == rec.address
        assert back.pk == rec.pk
        assert back.metadata == rec.metadata

    def test_record_never_holds_sk(self, keypair):
        rec = KeyRecord("node-1", Address("10.0.0.1", 9000), keypair.pk, {})
        assert keypair.sk not in rec.to_line().encode()
