"""Hashing, Ed25519 envelopes and a two-level test PKI bound to SIP URIs."""

from __future__ import annotations

import functools
import hashlib
import os
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .core import (
    Certificate,
    Decoder,
    Digest,
    Encoder,
    FormatError,
    HashAlgorithm,
    SignatureAlgorithm,
    SignedEnvelope,
    decode_exact,
)

DEFAULT_HASH = HashAlgorithm.SHA256

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


def digest(data: bytes, algorithm: HashAlgorithm = DEFAULT_HASH) -> Digest:
    return Digest(algorithm, hashlib.sha256(data).digest())


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class VerifyKey:
    public_bytes: bytes
    algorithm: SignatureAlgorithm = SignatureAlgorithm.ED25519

    def verify(self, signature: bytes, data: bytes) -> bool:
        return _ed25519_verify(self.public_bytes, bytes(signature), bytes(data))


@functools.lru_cache(maxsize=4096)
def _ed25519_verify(public_bytes: bytes, signature: bytes, data: bytes) -> bool:
    # pure in its arguments; re-verifying one archive under many edits hits the cache
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class SigningKey:
    private_bytes: bytes
    algorithm: SignatureAlgorithm = SignatureAlgorithm.ED25519

    @classmethod
    def generate(cls) -> "SigningKey":
        return cls(os.urandom(32))

    @classmethod
    def from_seed(cls, seed: bytes) -> "SigningKey":
        """Deterministic key from arbitrary seed material (simulations, golden files)."""
        if len(seed) != 32:
            seed = hashlib.sha256(seed).digest()
        return cls(seed)

    def _key(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.private_bytes)

    def sign_raw(self, data: bytes) -> bytes:
        return self._key().sign(data)

    @property
    def verify_key(self) -> VerifyKey:
        return VerifyKey(self._key().public_key().public_bytes(**_RAW), self.algorithm)

    def encode(self) -> bytes:
        return Encoder().u8(self.algorithm).blob(self.private_bytes).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "SigningKey":
        def get(d: Decoder) -> "SigningKey":
            alg = d.enum(SignatureAlgorithm)
            raw = d.blob()
            if len(raw) != 32:
                raise FormatError(1, "Ed25519 private key must be 32 bytes")
            return cls(raw, alg)
        return decode_exact(data, get)


def cert_verify_key(cert: Certificate) -> VerifyKey:
    return VerifyKey(cert.public_key, cert.key_algorithm)


@dataclass(frozen=True)
class TrustAnchor:
    roots: tuple[Certificate, ...]

    def __init__(self, roots: Iterable[Certificate]):
        object.__setattr__(self, "roots", tuple(roots))

    def find(self, subject_uri: str) -> list[Certificate]:
        return [r for r in self.roots if r.subject_uri == subject_uri]


class VerifyResult(Enum):
    VALID = "Valid"
    BAD_SIGNATURE = "BadSignature"
    UNTRUSTED_CHAIN = "UntrustedChain"
    CERT_MISMATCH = "CertMismatch"


def sign(key: SigningKey, data: bytes, chain: Optional[Iterable[Certificate]] = None) -> SignedEnvelope:
    """Wrap ``data`` in a signed envelope; pass ``chain`` only for the start chunk."""
    return SignedEnvelope(
        payload_bytes=data,
        signature=key.sign_raw(data),
        cert_chain=None if chain is None else tuple(chain),
        signature_algorithm=key.algorithm,
    )


def check_signature(leaf: Certificate, env: SignedEnvelope) -> bool:
    if env.signature_algorithm != leaf.key_algorithm:
        return False
    return cert_verify_key(leaf).verify(env.signature, env.payload_bytes)


def _within(cert: Certificate, at_ms: Optional[int]) -> bool:
    return at_ms is None or cert.not_before <= at_ms <= cert.not_after


def chain_is_trusted(
    anchor: TrustAnchor,
    leaf: Certificate,
    intermediates: Iterable[Certificate] = (),
    at_ms: Optional[int] = None,
) -> bool:
    """Walk issuer links from ``leaf`` to a root held by ``anchor``."""
    pool = list(intermediates)
    cert = leaf
    for _ in range(len(pool) + 2):
        if not _within(cert, at_ms):
            return False
        for root in anchor.find(cert.issuer_uri):
            if cert_verify_key(root).verify(cert.issuer_signature, cert.body()):
                if cert == root or _within(root, at_ms):
                    return True
        issuers = [c for c in pool if c.subject_uri == cert.issuer_uri and c != cert]
        parent = next(
            (c for c in issuers if cert_verify_key(c).verify(cert.issuer_signature, cert.body())),
            None,
        )
        if parent is None:
            return False
        pool.remove(parent)
        cert = parent
    return False


def verify_envelope(
    anchor: TrustAnchor,
    leaf: Certificate,
    env: SignedEnvelope,
    expected_uri: Optional[str] = None,
    at_ms: Optional[int] = None,
) -> VerifyResult:
    if not anchor.roots:
        raise ValueError("trust anchor is empty")
    intermediates: tuple[Certificate, ...] = ()
    if env.cert_chain:
        if env.cert_chain[0] != leaf:
            return VerifyResult.CERT_MISMATCH
        intermediates = env.cert_chain[1:]
    if not chain_is_trusted(anchor, leaf, intermediates, at_ms):
        return VerifyResult.UNTRUSTED_CHAIN
    if expected_uri is not None and leaf.subject_uri != expected_uri:
        return VerifyResult.CERT_MISMATCH
    if not check_signature(leaf, env):
        return VerifyResult.BAD_SIGNATURE
    return VerifyResult.VALID


def make_root(subject_uri: str, validity: tuple[int, int], key: Optional[SigningKey] = None):
    """Self-signed root certificate. Returns ``(cert, key)``."""
    key = key or SigningKey.generate()
    return issue_certificate(key, None, subject_uri, validity, subject_key=key)


def issue_certificate(
    issuer_key: SigningKey,
    issuer_cert: Optional[Certificate],
    subject_uri: str,
    validity: tuple[int, int],
    subject_key: Optional[SigningKey] = None,
) -> tuple[Certificate, SigningKey]:
    """Issue a certificate binding a fresh (or given) key to ``subject_uri``.

    With ``issuer_cert=None`` the certificate is self-issued by ``issuer_key``.
    """
    not_before, not_after = validity
    if not_after < not_before:
        raise CertificateError("validity window ends before it starts")
    if not subject_uri:
        raise CertificateError("subject URI must be non-empty")
    if issuer_cert is not None:
        if issuer_cert.public_key != issuer_key.verify_key.public_bytes:
            raise CertificateError("issuer key does not match issuer certificate")
        self_issued = issuer_cert.issuer_uri == issuer_cert.subject_uri
        if self_issued and not cert_verify_key(issuer_cert).verify(
            issuer_cert.issuer_signature, issuer_cert.body()
        ):
            raise CertificateError("issuer certificate is not validly self-signed")
    if issuer_cert is None:
        subject_key = issuer_key
    subject_key = subject_key or SigningKey.generate()
    unsigned = Certificate(
        subject_uri=subject_uri,
        issuer_uri=subject_uri if issuer_cert is None else issuer_cert.subject_uri,
        key_algorithm=subject_key.algorithm,
        public_key=subject_key.verify_key.public_bytes,
        not_before=not_before,
        not_after=not_after,
    )
    cert = Certificate(**{**unsigned.__dict__, "issuer_signature": issuer_key.sign_raw(unsigned.body())})
    return cert, subject_key


# Key and certificate files: 4-byte magic, u16 version, canonical body.

CERT_MAGIC = b"VCRT"
KEY_MAGIC = b"VKEY"
FILE_VERSION = 1


def _wrap(magic: bytes, body: bytes) -> bytes:
    return Encoder().raw(magic).u16(FILE_VERSION).raw(body).getvalue()


def _unwrap(magic: bytes, data: bytes) -> bytes:
    if data[:4] != magic:
        raise FormatError(0, f"bad magic, expected {magic!r}")
    d = Decoder(data)
    d.raw(4)
    version = d.u16()
    if version != FILE_VERSION:
        raise FormatError(4, f"unsupported file version {version}")
    return data[6:]


def encode_cert_file(cert: Certificate) -> bytes:
    return _wrap(CERT_MAGIC, cert.encode())


def decode_cert_file(data: bytes) -> Certificate:
    return Certificate.decode(_unwrap(CERT_MAGIC, data), 6)


def encode_key_file(key: SigningKey) -> bytes:
    return _wrap(KEY_MAGIC, key.encode())


def decode_key_file(data: bytes) -> SigningKey:
    return SigningKey.decode(_unwrap(KEY_MAGIC, data))
