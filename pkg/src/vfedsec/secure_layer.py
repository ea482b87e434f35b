"""Pairwise masking over the 2**32 ring.

Every pair of pool members agrees on a secret (X25519 + HKDF). From that
secret both ends expand the same pseudorandom residues with AES-CTR; the
higher participant id adds them and the lower one subtracts them, so the
masks of a whole pool cancel when the server adds all messages together.

The same pair secret also keys the channel that carries sealed sample-id
assignments (ChaCha20-Poly1305, 16-byte tag).
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .qcode import sum_mod

ACTIVE_ID = 0
SERVER_ID = 0xFFFFFFFF
PUBLIC_KEY_BYTES = 32
SEAL_OVERHEAD = 8 + 16  # nonce counter + auth tag
_NO_ID = 0xFFFFFFFFFFFFFFFF


class SecureLayerError(Exception):
    pass


class AuthenticationError(SecureLayerError):
    pass


class IncompletePoolError(SecureLayerError):
    pass


class Phase(enum.IntEnum):
    FORWARD_EMBEDDING = 0
    BACKWARD_UPDATE = 1
    EVAL_EMBEDDING = 2


@dataclass(frozen=True)
class NoiseTag:
    epoch: int
    round: int
    phase: Phase
    shape: tuple[int, int]

    def encode(self) -> bytes:
        return struct.pack("<QQIII", self.epoch, self.round, int(self.phase), *self.shape)


@dataclass(frozen=True)
class KeyPair:
    private_value: X25519PrivateKey = field(repr=False)
    public_value: bytes

    def __reduce__(self):
        raise TypeError("KeyPair holds a private value and is not serializable")


def gen_keypair(rng: np.random.Generator) -> KeyPair:
    private = X25519PrivateKey.from_private_bytes(rng.bytes(32))
    public = private.public_key().public_bytes_raw()
    return KeyPair(private, public)


def derive_shared_secret(my: KeyPair, their_public: bytes) -> bytes:
    if not isinstance(their_public, (bytes, bytearray)) or len(their_public) != PUBLIC_KEY_BYTES:
        raise SecureLayerError("malformed public element")
    try:
        raw = my.private_value.exchange(X25519PublicKey.from_public_bytes(bytes(their_public)))
    except ValueError as exc:  # low-order point
        raise SecureLayerError("malformed public element") from exc
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"vfedsec/pair").derive(raw)


def prf_stream(secret: bytes, tag: NoiseTag) -> np.ndarray:
    """Counter-mode expansion of (secret, tag) into ``tag.shape`` uint32 words."""
    rows, cols = tag.shape
    key = hashlib.blake2b(tag.encode(), key=secret, digest_size=16, person=b"vfedsec-noise").digest()
    enc = Cipher(algorithms.AES(key), modes.CTR(bytes(16))).encryptor()
    words = np.frombuffer(enc.update(bytes(4 * rows * cols)), dtype="<u4")
    return words.astype(np.uint32).reshape(rows, cols)


def orient(p: np.ndarray, u: int, v: int) -> np.ndarray:
    """n_{u,v}: the stream itself when u > v, its additive inverse otherwise."""
    if u == v:
        raise SecureLayerError("pair noise needs two distinct participants")
    p = np.asarray(p, dtype=np.uint32)
    return p.copy() if u > v else np.negative(p)


def pair_noise(u: int, v: int, secret: bytes, tag: NoiseTag) -> np.ndarray:
    if u == v:
        raise SecureLayerError("pair noise needs two distinct participants")
    return orient(prf_stream(secret, tag), u, v)


@dataclass
class PairPool:
    """Shared secrets among one group's members ({C0} plus group clients)."""

    group_id: int
    members: tuple[int, ...]
    secrets: dict[tuple[int, int], bytes]
    epoch: int = 0
    public_keys: dict[int, bytes] = field(default_factory=dict)

    def __post_init__(self):
        self.members = tuple(sorted(self.members))
        if len(set(self.members)) != len(self.members):
            raise SecureLayerError("duplicate pool member")
        for u, v in itertools.combinations(self.members, 2):
            if (u, v) not in self.secrets:
                raise SecureLayerError(f"missing secret for pair ({u}, {v})")

    def secret(self, u: int, v: int) -> bytes:
        return self.secrets[(min(u, v), max(u, v))]

    def subpool(self, members) -> "PairPool":
        members = tuple(sorted(members))
        if not set(members) <= set(self.members):
            raise SecureLayerError("sub-pool members must belong to the pool")
        secrets = {pair: s for pair, s in self.secrets.items() if pair[0] in members and pair[1] in members}
        keys = {m: self.public_keys[m] for m in members if m in self.public_keys}
        return PairPool(self.group_id, members, secrets, self.epoch, keys)


def setup_pool(group_id: int, members, epoch: int, keypair_rng) -> PairPool:
    """Run key agreement for ``members``.

    ``keypair_rng(member)`` returns the generator that member draws its key
    from. Each pair derives its secret once from the lower member's side; the
    other side derives the same bytes (checked in the tests).
    """
    members = tuple(sorted(members))
    keys = {m: gen_keypair(keypair_rng(m)) for m in members}
    secrets = {
        (u, v): derive_shared_secret(keys[u], keys[v].public_value)
        for u, v in itertools.combinations(members, 2)
    }
    return PairPool(group_id, members, secrets, epoch, {m: k.public_value for m, k in keys.items()})


def rotate_epoch(pool: PairPool, new_epoch: int, keypair_rng) -> PairPool:
    if new_epoch <= pool.epoch:
        raise SecureLayerError(f"epoch must increase: {pool.epoch} -> {new_epoch}")
    return setup_pool(pool.group_id, pool.members, new_epoch, keypair_rng)


def self_noise(u: int, pool: PairPool, tag: NoiseTag) -> np.ndarray:
    if u not in pool.members:
        raise SecureLayerError(f"participant {u} is not in pool {pool.group_id}")
    others = [v for v in pool.members if v != u]
    if not others:
        return np.zeros(tag.shape, dtype=np.uint32)
    return sum_mod(pair_noise(u, v, pool.secret(u, v), tag) for v in others)


def mask_tensor(q: np.ndarray, noise: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.uint32)
    noise = np.asarray(noise, dtype=np.uint32)
    if q.shape != noise.shape:
        raise SecureLayerError(f"shape mismatch: {q.shape} vs {noise.shape}")
    return q + noise


def unmask_aggregate(msgs, pool_complete: bool) -> np.ndarray:
    """Modular sum of one masked tensor per pool member; the masks cancel."""
    if not pool_complete:
        raise IncompletePoolError("incomplete pool")
    try:
        return sum_mod(msgs)
    except ValueError as exc:
        raise SecureLayerError(str(exc)) from exc


# sealed sample-id channel

def _channel_key(secret: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"vfedsec/ids").derive(secret)


def encode_ids(ids, slots: int | None = None) -> bytes:
    """Slot table: slot ``row`` holds the sample id placed at that batch row.

    ``slots`` pads the table so the ciphertext length does not reveal how many
    rows the receiver owns.
    """
    ids = list(ids)
    need = max((row for _, row in ids), default=-1) + 1
    slots = need if slots is None else slots
    if slots < need:
        raise ValueError(f"row index {need - 1} does not fit in {slots} slots")
    table = np.full(slots, _NO_ID, dtype="<u8")
    for sample_id, row in ids:
        if not 0 <= sample_id < _NO_ID:
            raise ValueError(f"sample id {sample_id} out of range")
        if table[row] != _NO_ID:
            raise ValueError(f"batch row {row} assigned twice")
        table[row] = sample_id
    return struct.pack("<I", slots) + table.tobytes()


def decode_ids(buf: bytes) -> list[tuple[int, int]]:
    (slots,) = struct.unpack_from("<I", buf)
    table = np.frombuffer(buf, dtype="<u8", offset=4, count=slots)
    return [(int(sid), row) for row, sid in enumerate(table) if sid != _NO_ID]


def seal_ids(secret: bytes, ids, counter: int = 0, slots: int | None = None) -> bytes:
    nonce = struct.pack("<Q", counter)
    ct = ChaCha20Poly1305(_channel_key(secret)).encrypt(nonce + bytes(4), encode_ids(ids, slots), None)
    return nonce + ct


def open_ids(secret: bytes, ciphertext: bytes) -> list[tuple[int, int]]:
    if len(ciphertext) < SEAL_OVERHEAD:
        raise AuthenticationError("ciphertext too short")
    nonce, ct = ciphertext[:8], ciphertext[8:]
    try:
        plain = ChaCha20Poly1305(_channel_key(secret)).decrypt(nonce + bytes(4), ct, None)
    except InvalidTag as exc:
        raise AuthenticationError("authentication failure") from exc
    return decode_ids(plain)
