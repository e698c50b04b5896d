"""Client model segmentation.

The server builds a c x M binary request matrix: each selected client sends
only the N = ceil(M * p / c) parameter matrices its row names, and every
global matrix is still covered by at least p clients.  Aggregation is the
training-set-size weighted mean over exactly the clients that contributed
each matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from . import fhe
from .fhe import EncryptedMatrix
from .model import ModelParams, ParamMatrix


class SegmentationError(ValueError):
    pass


def compute_quota(M: int, p: int, c: int) -> int:
    if M < 1 or c < 2 or not 1 <= p <= c:
        raise SegmentationError(f"need M >= 1, c >= 2 and 1 <= p <= c (got M={M}, p={p}, c={c})")
    return -(-M * p // c)


@dataclass(frozen=True, eq=False)
class RequestMatrix:
    rows: np.ndarray
    p: int
    N: int

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int8)
        if rows.ndim != 2 or not np.isin(rows, (0, 1)).all():
            raise SegmentationError("request matrix must be a binary 2-D array")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    @property
    def c(self) -> int:
        return self.rows.shape[0]

    @property
    def M(self) -> int:
        return self.rows.shape[1]

    def row(self, client: int) -> np.ndarray:
        """Row for a 1-based client position."""
        return self.rows[client - 1]

    def contributors(self, j: int) -> list[int]:
        """1-based client positions requested to send matrix j."""
        return [int(i) + 1 for i in np.flatnonzero(self.rows[:, j - 1])]

    def violations(self) -> list[str]:
        out = []
        if self.N != compute_quota(self.M, self.p, self.c):
            out.append(f"N={self.N} differs from ceil(M*p/c)")
        for i, s in enumerate(self.rows.sum(axis=1), start=1):
            if s < self.N:
                out.append(f"row {i} has {s} < N ones")
        for j, s in enumerate(self.rows.sum(axis=0), start=1):
            if s < self.p:
                out.append(f"column {j} covered {s} < p times")
        return out

    def __eq__(self, other):
        if not isinstance(other, RequestMatrix):
            return NotImplemented
        return self.p == other.p and self.N == other.N and np.array_equal(self.rows, other.rows)


def generate_request_matrix(M: int, c: int, p: int, rng: np.random.Generator) -> RequestMatrix:
    """Greedy min-coverage fill.

    Row 1 is a uniform random N-subset.  Each later row takes N distinct
    columns one at a time, always among the columns with the lowest running
    coverage, ties broken uniformly at random.
    """
    N = compute_quota(M, p, c)
    if N > M:
        raise SegmentationError(f"quota N={N} exceeds M={M}")
    R = np.zeros((c, M), dtype=np.int8)
    R[0, rng.choice(M, size=N, replace=False)] = 1
    sums = R[0].astype(np.int64)
    for i in range(1, c):
        for _ in range(N):
            free = np.flatnonzero(R[i] == 0)
            low = sums[free].min()
            pick = rng.choice(free[sums[free] == low])
            R[i, pick] = 1
            sums[pick] += 1
    # repair pass; the distinct-column fill already guarantees coverage
    for j in np.flatnonzero(sums < p):
        while sums[j] < p:
            zero_rows = np.flatnonzero(R[:, j] == 0)
            target = zero_rows[np.argmin(R[zero_rows].sum(axis=1))]
            R[target, j] = 1
            sums[j] += 1
    return RequestMatrix(R, p, N)


def full_request_matrix(M: int, c: int) -> RequestMatrix:
    """All-ones request (segmentation off)."""
    return RequestMatrix(np.ones((c, M), dtype=np.int8), c, M)


Contribution = Union[ParamMatrix, EncryptedMatrix]


@dataclass(frozen=True)
class ClientResponse:
    client: int
    selected: tuple[tuple[int, Contribution], ...]
    t: int

    def __post_init__(self):
        if self.t < 1:
            raise SegmentationError("training example count t must be positive")
        object.__setattr__(self, "selected", tuple(self.selected))

    @property
    def indices(self) -> list[int]:
        return [j for j, _ in self.selected]

    def get(self, j: int) -> Contribution:
        for k, m in self.selected:
            if k == j:
                return m
        raise KeyError(j)


def build_response(model: ModelParams, row: Sequence[int], t: int, client: int = 1) -> ClientResponse:
    row = np.asarray(row)
    if row.shape != (len(model),):
        raise SegmentationError(f"request row of length {row.size} for a model with {len(model)} matrices")
    if t < 1:
        raise SegmentationError("training example count t must be positive")
    selected = tuple((j, model[j]) for j in range(1, len(model) + 1) if row[j - 1])
    return ClientResponse(client, selected, int(t))


def encrypt_response(resp: ClientResponse, pk, rng=None) -> ClientResponse:
    sel = tuple((j, fhe.encrypt_matrix(pk, m, rng)) for j, m in resp.selected)
    return ClientResponse(resp.client, sel, resp.t)


def _by_client(responses: Sequence[ClientResponse], R: RequestMatrix) -> dict[int, ClientResponse]:
    table = {}
    for r in responses:
        if r.client in table:
            raise SegmentationError(f"duplicate response from client {r.client}")
        if not 1 <= r.client <= R.c:
            raise SegmentationError(f"client {r.client} has no request row")
        expected = [j + 1 for j in np.flatnonzero(R.row(r.client))]
        if sorted(r.indices) != expected:
            raise SegmentationError(f"client {r.client} sent matrices {r.indices}, requested {expected}")
        table[r.client] = r
    return table


def _contributions(table, R: RequestMatrix, j: int):
    clients = [i for i in R.contributors(j) if i in table]
    if not clients:
        raise SegmentationError(f"no contribution for matrix {j}")
    return [(table[i].get(j), table[i].t) for i in clients]


def weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[int]) -> np.ndarray:
    """sum(w_i * a_i) / sum(w_i), computed exactly and rounded once."""
    total = sum(int(w) for w in weights)
    if len(arrays) == 1:
        return np.array(arrays[0], dtype=np.float64)
    acc = None
    for a, w in zip(arrays, weights):
        term = np.array([Fraction(v) for v in np.asarray(a, dtype=np.float64).tolist()], dtype=object) * int(w)
        acc = term if acc is None else acc + term
    return np.array([float(v / total) for v in acc.tolist()], dtype=np.float64)


def aggregate_plain(responses: Sequence[ClientResponse], R: RequestMatrix, M: int | None = None) -> ModelParams:
    M = R.M if M is None else M
    table = _by_client(responses, R)
    out = []
    for j in range(1, M + 1):
        contrib = _contributions(table, R, j)
        mats = [m for m, _ in contrib]
        if len({m.shape for m in mats}) != 1:
            raise SegmentationError(f"shape mismatch among contributions to matrix {j}")
        values = weighted_mean([m.values for m in mats], [t for _, t in contrib])
        out.append(mats[0].with_values(values))
    return ModelParams(tuple(out))


def fedavg(models: Sequence[ModelParams], ts: Sequence[int]) -> ModelParams:
    """Plain federated averaging of whole models."""
    first = models[0]
    if any(not first.compatible(m) for m in models):
        raise SegmentationError("models are not aggregation-compatible")
    return ModelParams(
        tuple(
            first[j].with_values(weighted_mean([m[j].values for m in models], ts))
            for j in range(1, len(first) + 1)
        )
    )


def aggregate_encrypted(
    responses: Sequence[ClientResponse],
    R: RequestMatrix,
    M: int | None = None,
    round_id: int | None = None,
) -> list[EncryptedMatrix]:
    """Weighted mean under encryption: sum(ct * t_i), then times 1/sum(t).

    Consumes two levels per chunk.  ``round_id``, when given, is the round of
    the current public key and every ciphertext must carry it.
    """
    M = R.M if M is None else M
    table = _by_client(responses, R)
    out = []
    for j in range(1, M + 1):
        contrib = _contributions(table, R, j)
        mats = [m for m, _ in contrib]
        if not all(isinstance(m, EncryptedMatrix) for m in mats):
            raise SegmentationError(f"plaintext contribution to matrix {j} in encrypted aggregation")
        if len({m.shape for m in mats}) != 1:
            raise SegmentationError(f"shape mismatch among contributions to matrix {j}")
        if len({len(m.chunks) for m in mats}) != 1:
            raise SegmentationError(f"chunk-count mismatch among contributions to matrix {j}")
        rounds = {ct.round_id for m in mats for ct in m.chunks}
        if len(rounds) != 1 or (round_id is not None and rounds != {round_id}):
            raise fhe.KeyRoundError(f"matrix {j} mixes key rounds {sorted(rounds)}")
        total = sum(t for _, t in contrib)
        chunks = []
        for k in range(len(mats[0].chunks)):
            acc = None
            for m, t in contrib:
                term = fhe.mul_plain(m.chunks[k], t)
                acc = term if acc is None else fhe.add(acc, term)
            chunks.append(fhe.mul_plain(acc, Fraction(1, total)))
        first = mats[0]
        out.append(EncryptedMatrix(first.index, first.shape, first.role, first.name, tuple(chunks)))
    return out
