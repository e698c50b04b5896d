from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blindfl import fhe
from blindfl.fhe import ckks
from blindfl.fhe.container import CT_VERSION
from blindfl.fhe.params import chain_primes
from blindfl.model import ParamMatrix


def is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d, s = d // 2, s + 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@pytest.fixture(scope="module")
def desk_keys():
    params = fhe.desk_profile("ckks")
    return fhe.keygen(params, np.random.default_rng(1), round_id=3)


@pytest.mark.parametrize("n,bits", [(2**12, (60, 40, 40, 60)), (2**14, (60, 40, 40, 60)), (64, (30, 25, 20))])
def test_chain_primes_are_ntt_friendly(n, bits):
    primes = chain_primes(n, bits)
    assert len(set(primes)) == len(primes)
    for q, b in zip(primes, bits):
        assert is_probable_prime(q)
        assert q % (2 * n) == 1
        assert q.bit_length() == b


def test_param_validation():
    with pytest.raises(fhe.ParamError):
        fhe.FheParams("ckks", 1000)
    with pytest.raises(fhe.ParamError):
        fhe.FheParams("bfv")
    with pytest.raises(fhe.ParamError):
        fhe.FheParams("ckks", 2**12, 60, (60, 40, 60))
    p = fhe.production_profile()
    assert (p.ring_dim, p.scale_bits, p.chain_bits, p.levels, p.slot_capacity) == (2**14, 20, (60, 40, 40, 60), 2, 2**13)


def test_encode_decode_roundtrip():
    r = np.random.default_rng(0)
    v = r.uniform(-1, 1, 2048)
    got = ckks.decode(ckks.encode(v, 4096, 2.0**40), 4096, 2.0**40)
    assert np.max(np.abs(got - v)) < 1e-9


def test_encode_is_slotwise_multiplicative():
    # products in the ring multiply slot values pointwise
    n, scale = 16, 2.0**20
    r = np.random.default_rng(2)
    a, b = r.uniform(-1, 1, n // 2), r.uniform(-1, 1, n // 2)
    pa, pb = ckks.encode(a, n, scale), ckks.encode(b, n, scale)
    prod = np.zeros(2 * n, dtype=object)
    for i in range(n):
        for j in range(n):
            prod[i + j] += int(pa[i]) * int(pb[j])
    neg = np.array([prod[k] - prod[k + n] for k in range(n)], dtype=float)
    got = ckks.decode(neg, n, scale * scale)
    assert np.max(np.abs(got - a * b)) < 1e-4


def test_encrypt_decrypt_precision(desk_keys):
    r = np.random.default_rng(5)
    v = r.uniform(-1, 1, 2048)
    ct = fhe.encrypt_vector(desk_keys.public, v, r)
    assert ct.level == 2 and ct.round_id == 3
    assert np.max(np.abs(fhe.decrypt_vector(desk_keys.secret, ct) - v)) < 1e-6


def test_homomorphic_add_and_scalar_chain(desk_keys):
    r = np.random.default_rng(6)
    x, y = r.uniform(-1, 1, 100), r.uniform(-1, 1, 100)
    cx = fhe.encrypt_vector(desk_keys.public, x, r)
    cy = fhe.encrypt_vector(desk_keys.public, y, r)
    s = fhe.add(cx, cy)
    assert np.max(np.abs(fhe.decrypt_vector(desk_keys.secret, s, 100) - (x + y))) < 1e-6
    m1 = fhe.mul_plain(s, 7)
    assert m1.level == 1
    m2 = fhe.mul_plain(m1, Fraction(1, 13))
    assert m2.level == 0
    got = fhe.decrypt_vector(desk_keys.secret, m2, 100)
    assert np.max(np.abs(got - (x + y) * 7 / 13)) < 1e-6
    with pytest.raises(fhe.LevelError):
        fhe.mul_plain(m2, 2)


def test_vector_plain_multiply(desk_keys):
    r = np.random.default_rng(7)
    x, w = r.uniform(-1, 1, 50), r.uniform(-2, 2, 50)
    ct = fhe.mul_plain(fhe.encrypt_vector(desk_keys.public, x, r), w)
    assert np.max(np.abs(fhe.decrypt_vector(desk_keys.secret, ct, 50) - x * w)) < 1e-6


def test_mismatch_errors(desk_keys):
    r = np.random.default_rng(8)
    other = fhe.keygen(desk_keys.params, r, round_id=4)
    a = fhe.encrypt_vector(desk_keys.public, [1.0], r)
    b = fhe.encrypt_vector(other.public, [1.0], r)
    with pytest.raises(fhe.KeyRoundError):
        fhe.add(a, b)
    with pytest.raises(fhe.KeyRoundError):
        fhe.decrypt_vector(other.secret, a)
    with pytest.raises(fhe.MismatchError):
        fhe.add(a, fhe.mul_plain(a, 1))
    with pytest.raises(fhe.CapacityError):
        fhe.encrypt_vector(desk_keys.public, np.zeros(2049))
    with pytest.raises(fhe.BoundError):
        fhe.encrypt_vector(desk_keys.public, [fhe.VALUE_BOUND * 2])
    with pytest.raises(fhe.BoundError):
        fhe.encrypt_vector(desk_keys.public, [np.nan])


@given(st.lists(st.floats(-1000, 1000, allow_nan=False), min_size=1, max_size=16), st.integers(1, 10**6))
def test_oracle_is_exact(values, t):
    params = fhe.FheParams("oracle", 32, 40, (60, 40, 40, 60), "test")
    keys = fhe.keygen(params, None, 1)
    ct = fhe.encrypt_vector(keys.public, values)
    out = fhe.mul_plain(fhe.mul_plain(fhe.add(ct, ct), t), Fraction(1, 2 * t))
    assert fhe.decrypt_vector(keys.secret, out, len(values)).tolist() == [float(v) for v in values]


def test_matrix_chunking(tiny_ckks, tiny_oracle):
    r = np.random.default_rng(9)
    m = ParamMatrix(4, (5, 7), r.uniform(-1, 1, 35), "weight", "fc.w")
    for params in (tiny_ckks, tiny_oracle):
        keys = fhe.keygen(params, r, 2)
        em = fhe.encrypt_matrix(keys.public, m, r)
        assert len(em.chunks) == fhe.chunk_count(35, params) == 3
        assert [c.chunk_index for c in em.chunks] == [0, 1, 2]
        back = fhe.decrypt_matrix(keys.secret, em)
        assert back.shape == m.shape and back.index == 4 and back.name == "fc.w"
        assert np.max(np.abs(back.values - m.values)) < 1e-6
        with pytest.raises(fhe.MismatchError):
            fhe.decrypt_matrix(keys.secret, fhe.EncryptedMatrix(4, (5, 7), "weight", "fc.w", em.chunks[:2]))


def test_ciphertext_container_roundtrip_and_rejections(tiny_ckks, tiny_oracle):
    r = np.random.default_rng(10)
    for params in (tiny_ckks, tiny_oracle):
        keys = fhe.keygen(params, r, 77)
        ct = fhe.mul_plain(fhe.encrypt_vector(keys.public, r.uniform(-1, 1, 16), r), 3).with_chunk(1, 4)
        buf = fhe.serialize_ciphertext(ct)
        back, end = fhe.deserialize_ciphertext(buf + b"tail", 0, params)
        assert end == len(buf) and back == ct
        assert np.allclose(fhe.decrypt_vector(keys.secret, back), fhe.decrypt_vector(keys.secret, ct))
        with pytest.raises(fhe.TruncationError):
            fhe.deserialize_ciphertext(buf[:-1])
        with pytest.raises(fhe.TruncationError):
            fhe.deserialize_ciphertext(buf[:10])
        flipped = bytearray(buf)
        flipped[len(buf) // 2] ^= 0x10
        with pytest.raises(fhe.ChecksumError):
            fhe.deserialize_ciphertext(bytes(flipped))
        versioned = bytearray(buf)
        versioned[4] = CT_VERSION + 1
        with pytest.raises(fhe.VersionError):
            fhe.deserialize_ciphertext(bytes(versioned))


def test_key_roundtrip(tiny_ckks, tiny_oracle):
    r = np.random.default_rng(11)
    for params in (tiny_ckks, tiny_oracle):
        keys = fhe.keygen(params, r, 5)
        pk = fhe.deserialize_public_key(fhe.serialize_public_key(keys.public))
        sk = fhe.deserialize_secret_key(fhe.serialize_secret_key(keys.secret))
        assert pk.params == params and pk.round_id == 5 and sk.round_id == 5
        assert fhe.key_fingerprint(pk) == fhe.key_fingerprint(keys.public)
        ct = fhe.encrypt_vector(pk, [0.25, -0.5], r)
        assert np.allclose(fhe.decrypt_vector(sk, ct, 2), [0.25, -0.5], atol=1e-6)
        raw = bytearray(fhe.serialize_public_key(keys.public))
        raw[-6] ^= 1
        with pytest.raises(fhe.SerializationError):
            fhe.deserialize_public_key(bytes(raw))
        with pytest.raises(fhe.SerializationError):
            fhe.deserialize_secret_key(fhe.serialize_public_key(keys.public))


def test_fresh_keys_differ_per_round(tiny_ckks):
    r = np.random.default_rng(12)
    a = fhe.keygen(tiny_ckks, r, 1)
    b = fhe.keygen(tiny_ckks, r, 2)
    assert fhe.key_fingerprint(a.public) != fhe.key_fingerprint(b.public)
