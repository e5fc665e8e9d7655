"""Key pairs and hybrid public-key sealing of arbitrary-length byte strings.

Sealing wraps a fresh AES-256 key under RSA-2048-OAEP and encrypts the body
with AES-GCM, so tampering anywhere in a ciphertext is detected when opening.

Ciphertext layout: [wrapped-key length: u16 BE][wrapped key][nonce][body][tag].
The overhead over the plaintext length is a constant (286 bytes for 2048-bit
keys): 2 + 256 + 12 + 16.
"""

import base64
import functools
import hashlib
import os
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

RSA_BITS = 2048
RSA_BYTES = RSA_BITS // 8
AES_KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

_OAEP = padding.OAEP(
    mgf=padding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)


class DecryptionError(Exception):
    """Wrong key, tampered ciphertext, or malformed sealed data."""


@dataclass(frozen=True)
class Address:
    host: str
    port: int

    def __post_init__(self):
        if not (1 <= self.port <= 65535):
            raise ValueError(f"port out of range: {self.port}")

    def __str__(self):
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Address":
        host, sep, port = text.rpartition(":")
        if not sep or not host:
            raise ValueError(f"address must be host:port, got {text!r}")
        return cls(host, int(port))


@dataclass
class KeyPair:
    pk: bytes  # DER SubjectPublicKeyInfo
    sk: bytes  # DER PKCS8, unencrypted


@dataclass
class KeyRecord:
    node_id: str
    address: Address
    pk: bytes
    metadata: dict = field(default_factory=dict)

    def to_line(self) -> str:
        meta = ";".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        return f"{self.node_id} {self.address} {base64.b64encode(self.pk).decode()} {meta}"

    @classmethod
    def from_line(cls, line: str) -> "KeyRecord":
        parts = line.split(" ", 3)
        if len(parts) < 3:
            raise ValueError(f"malformed key record: {line!r}")
        node_id, addr, pk_b64 = parts[0], parts[1], parts[2]
        meta = {}
        if len(parts) == 4 and parts[3]:
            for item in parts[3].split(";"):
                k, _, v = item.partition("=")
                meta[k] = v
        return cls(node_id, Address.parse(addr), base64.b64decode(pk_b64), meta)


def _keypair_from_private(priv) -> KeyPair:
    return KeyPair(
        pk=priv.public_key().public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        ),
        sk=priv.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        ),
    )


class _DRBG:
    """SHA-256 counter stream; used only for seeded (reproducible) key generation."""

    def __init__(self, seed: bytes):
        self.seed = seed
        self.counter = 0

    def getrandbits(self, bits: int) -> int:
        nbytes = (bits + 7) // 8
        out = b""
        while len(out) < nbytes:
            out += hashlib.sha256(self.seed + struct.pack(">Q", self.counter)).digest()
            self.counter += 1
        value = int.from_bytes(out[:nbytes], "big")
        return value >> (nbytes * 8 - bits)


_SMALL_PRIMES = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59,
                 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127,
                 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
                 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251]


def _is_probable_prime(n: int, rng: _DRBG, rounds: int = 40) -> bool:
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = 2 + rng.getrandbits(64) % (n - 3)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _gen_prime(bits: int, rng: _DRBG) -> int:
    while True:
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if _is_probable_prime(cand, rng):
            return cand


def _seeded_rsa(seed: bytes):
    rng = _DRBG(seed)
    e = 65537
    while True:
        p = _gen_prime(RSA_BITS // 2, rng)
        q = _gen_prime(RSA_BITS // 2, rng)
        if p == q:
            continue
        if p < q:
            p, q = q, p
        n = p * q
        if n.bit_length() != RSA_BITS:
            continue
        phi = (p - 1) * (q - 1)
        if phi % e == 0:
            continue
        d = pow(e, -1, phi)
        numbers = rsa.RSAPrivateNumbers(
            p=p, q=q, d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(e=e, n=n),
        )
        return numbers.private_key()


def gen_keypair(seed: bytes | None = None) -> KeyPair:
    """Generate an RSA-2048 key pair. A seed makes generation deterministic
    (intended for tests; seeded prime search is pure Python and slow)."""
    if seed is None:
        priv = rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS)
    else:
        priv = _seeded_rsa(bytes(seed))
    return _keypair_from_private(priv)


@functools.lru_cache(maxsize=256)
def _load_pk(pk: bytes):
    return serialization.load_der_public_key(pk)


@functools.lru_cache(maxsize=256)
def _load_sk(sk: bytes):
    return serialization.load_der_private_key(sk, password=None)


def seal_overhead() -> int:
    return 2 + RSA_BYTES + NONCE_LEN + TAG_LEN


def seal(pk: bytes, plaintext: bytes) -> bytes:
    """Encrypt plaintext of any length to the holder of pk's secret key."""
    key = os.urandom(AES_KEY_LEN)
    nonce = os.urandom(NONCE_LEN)
    wrapped = _load_pk(pk).encrypt(key, _OAEP)
    body = AESGCM(key).encrypt(nonce, plaintext, None)  # ciphertext || 16-byte tag
    return struct.pack(">H", len(wrapped)) + wrapped + nonce + body


def open_sealed(sk: bytes, ciphertext: bytes) -> bytes:
    """Open a sealed ciphertext. Raises DecryptionError on any corruption,
    truncation, or key mismatch; never returns partial plaintext."""
    try:
        if len(ciphertext) < 2:
            raise ValueError("truncated")
        (wklen,) = struct.unpack(">H", ciphertext[:2])
        rest = ciphertext[2:]
        if len(rest) < wklen + NONCE_LEN + TAG_LEN:
            raise ValueError("truncated")
        wrapped = rest[:wklen]
        nonce = rest[wklen:wklen + NONCE_LEN]
        body = rest[wklen + NONCE_LEN:]
        key = _load_sk(sk).decrypt(wrapped, _OAEP)
        return AESGCM(key).decrypt(nonce, body, None)
    except Exception as exc:
        raise DecryptionError("authenticated decryption failed") from exc
