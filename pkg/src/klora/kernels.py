"""Kernel functions and the kernelized merge of low-rank factor pairs.

A factor pair (A: n x r, B: m x r) is merged into an m x n update matrix by
evaluating a kernel between factor rows: entry (i, j) compares B's row i
with A's row j. The plain inner product reproduces the usual low-rank
product (rank <= r); nonlinear kernels break that cap. The mixed kind adds
a column-normalized exponential of the piecewise-linear kernel plus a
learnable offset, keeping gradients alive at large factor scales where a
bare RBF flatlines.

Coefficient conventions
-----------------------
zero_init: every learnable coefficient starts at 0 (so the merge is the
zero matrix and an adapted layer equals its base layer) except the RBF and
sigmoid bandwidths, which start at 1 and must stay positive.
canonical:  every learnable coefficient is 1 except additive offsets
(gamma terms and the mixed kind's offset), which are 0. This is the
positive-semidefinite configuration used by analysis utilities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    Tensor,
    add,
    column_softmax,
    exp,
    matmul,
    mul,
    reciprocal,
    record_and_backward,
    reduce_sum,
    reshape,
    scalar_add,
    square,
    sub,
    segment_l2_norm,
    transpose,
)


class KernelKind(enum.Enum):
    LINEAR = "linear"
    P_LINEAR = "p-linear"
    SIGMOID = "sigmoid"
    RBF = "rbf"
    RBF_NORMALIZED = "rbf-normalized"
    MIX_K = "mix-k"


_KIND_ALIASES = {
    "linear": KernelKind.LINEAR,
    "plinear": KernelKind.P_LINEAR,
    "p-linear": KernelKind.P_LINEAR,
    "p_linear": KernelKind.P_LINEAR,
    "sigmoid": KernelKind.SIGMOID,
    "rbf": KernelKind.RBF,
    "rbfnorm": KernelKind.RBF_NORMALIZED,
    "rbf-norm": KernelKind.RBF_NORMALIZED,
    "rbf-normalized": KernelKind.RBF_NORMALIZED,
    "rbf_normalized": KernelKind.RBF_NORMALIZED,
    "mixk": KernelKind.MIX_K,
    "mix-k": KernelKind.MIX_K,
    "mix_k": KernelKind.MIX_K,
}

#: Kinds whose value at (a, b) depends only on the two vectors.
PAIRWISE_KINDS = frozenset(
    {KernelKind.LINEAR, KernelKind.P_LINEAR, KernelKind.SIGMOID, KernelKind.RBF}
)

#: Kinds with piecewise segments (need 1 <= P <= r).
PIECEWISE_KINDS = frozenset({KernelKind.P_LINEAR, KernelKind.MIX_K})


def parse_kernel_kind(name) -> KernelKind:
    if isinstance(name, KernelKind):
        return name
    key = str(name).strip().lower()
    if key not in _KIND_ALIASES:
        known = ", ".join(sorted(set(a.value for a in _KIND_ALIASES.values())))
        raise ValueError(f"unknown kernel {name!r} (known: {known})")
    return _KIND_ALIASES[key]


def segment_bounds(r: int, pieces: int):
    """Split [0, r) into `pieces` contiguous near-equal half-open ranges."""
    if pieces < 1:
        raise ValueError(f"piece count must be >= 1, got {pieces}")
    if pieces > r:
        raise ValueError(f"piece count {pieces} exceeds rank {r}")
    return [(r * (p - 1) // pieces, r * p // pieces) for p in range(1, pieces + 1)]


@dataclass
class KernelSpec:
    """A kernel kind plus its learnable coefficients.

    Only the fields a kind uses are populated:
      linear          -- none
      p-linear        -- alpha_p (one scale per piece)
      mix-k           -- alpha_p, alpha (mixing scale), beta (offset)
      sigmoid         -- sig_alpha, sig_beta, sig_gamma
      rbf, rbf-norm.  -- rbf_alpha, rbf_beta (> 0), rbf_gamma
    """

    kind: KernelKind
    pieces: int = 2
    alpha_p: Tensor | None = None
    alpha: Tensor | None = None
    beta: Tensor | None = None
    sig_alpha: Tensor | None = None
    sig_beta: Tensor | None = None
    sig_gamma: Tensor | None = None
    rbf_alpha: Tensor | None = None
    rbf_beta: Tensor | None = None
    rbf_gamma: Tensor | None = None

    def __post_init__(self):
        self.kind = parse_kernel_kind(self.kind)
        if self.kind in PIECEWISE_KINDS and self.pieces < 1:
            raise ValueError(f"piece count must be >= 1, got {self.pieces}")
        if self.rbf_beta is not None and float(self.rbf_beta.data) <= 0.0:
            raise ValueError("rbf_beta must be positive")

    @classmethod
    def zero_init(cls, kind, pieces: int = 2, trainable: bool = True) -> "KernelSpec":
        kind = parse_kernel_kind(kind)
        t = lambda v: Tensor(np.asarray(v, dtype=np.float64), requires_grad=trainable)
        spec = cls(kind=kind, pieces=pieces)
        if kind in PIECEWISE_KINDS:
            spec.alpha_p = t(np.zeros(pieces))
        if kind is KernelKind.MIX_K:
            spec.alpha = t(0.0)
            spec.beta = t(0.0)
        if kind is KernelKind.SIGMOID:
            spec.sig_alpha = t(0.0)
            spec.sig_beta = t(1.0)
            spec.sig_gamma = t(0.0)
        if kind in (KernelKind.RBF, KernelKind.RBF_NORMALIZED):
            spec.rbf_alpha = t(0.0)
            spec.rbf_beta = t(1.0)
            spec.rbf_gamma = t(0.0)
        return spec

    @classmethod
    def canonical(cls, kind, pieces: int = 2, trainable: bool = False) -> "KernelSpec":
        kind = parse_kernel_kind(kind)
        t = lambda v: Tensor(np.asarray(v, dtype=np.float64), requires_grad=trainable)
        spec = cls(kind=kind, pieces=pieces)
        if kind in PIECEWISE_KINDS:
            spec.alpha_p = t(np.ones(pieces))
        if kind is KernelKind.MIX_K:
            spec.alpha = t(1.0)
            spec.beta = t(0.0)
        if kind is KernelKind.SIGMOID:
            spec.sig_alpha = t(1.0)
            spec.sig_beta = t(1.0)
            spec.sig_gamma = t(0.0)
        if kind in (KernelKind.RBF, KernelKind.RBF_NORMALIZED):
            spec.rbf_alpha = t(1.0)
            spec.rbf_beta = t(1.0)
            spec.rbf_gamma = t(0.0)
        return spec

    def coefficients(self) -> list:
        """Learnable coefficient tensors in the documented checkpoint order."""
        order = {
            KernelKind.LINEAR: [],
            KernelKind.P_LINEAR: [self.alpha_p],
            KernelKind.MIX_K: [self.alpha_p, self.alpha, self.beta],
            KernelKind.SIGMOID: [self.sig_alpha, self.sig_beta, self.sig_gamma],
            KernelKind.RBF: [self.rbf_alpha, self.rbf_beta, self.rbf_gamma],
            KernelKind.RBF_NORMALIZED: [self.rbf_alpha, self.rbf_beta, self.rbf_gamma],
        }[self.kind]
        return [c for c in order if c is not None]

    def coefficient_values(self) -> np.ndarray:
        vals = [np.atleast_1d(c.data).ravel() for c in self.coefficients()]
        return np.concatenate(vals) if vals else np.zeros(0)

    @classmethod
    def from_coefficient_values(cls, kind, values, trainable: bool = True) -> "KernelSpec":
        kind = parse_kernel_kind(kind)
        vals = np.asarray(values, dtype=np.float64).ravel()
        t = lambda v: Tensor(np.asarray(v, dtype=np.float64), requires_grad=trainable)
        if kind is KernelKind.LINEAR:
            if vals.size:
                raise ValueError("linear kernel takes no coefficients")
            return cls(kind=kind)
        if kind is KernelKind.P_LINEAR:
            if vals.size < 1:
                raise ValueError("p-linear kernel needs at least one piece coefficient")
            return cls(kind=kind, pieces=vals.size, alpha_p=t(vals))
        if kind is KernelKind.MIX_K:
            if vals.size < 3:
                raise ValueError("mix-k kernel needs at least 3 coefficients")
            pieces = vals.size - 2
            return cls(kind=kind, pieces=pieces, alpha_p=t(vals[:pieces]), alpha=t(vals[-2]), beta=t(vals[-1]))
        if vals.size != 3:
            raise ValueError(f"{kind.value} kernel needs exactly 3 coefficients")
        if kind is KernelKind.SIGMOID:
            return cls(kind=kind, sig_alpha=t(vals[0]), sig_beta=t(vals[1]), sig_gamma=t(vals[2]))
        return cls(kind=kind, rbf_alpha=t(vals[0]), rbf_beta=t(vals[1]), rbf_gamma=t(vals[2]))

    def with_coefficients(self, tensors) -> "KernelSpec":
        """Copy of this spec with coefficient tensors replaced (same order)."""
        tensors = list(tensors)
        names = {
            KernelKind.LINEAR: [],
            KernelKind.P_LINEAR: ["alpha_p"],
            KernelKind.MIX_K: ["alpha_p", "alpha", "beta"],
            KernelKind.SIGMOID: ["sig_alpha", "sig_beta", "sig_gamma"],
            KernelKind.RBF: ["rbf_alpha", "rbf_beta", "rbf_gamma"],
            KernelKind.RBF_NORMALIZED: ["rbf_alpha", "rbf_beta", "rbf_gamma"],
        }[self.kind]
        present = [n for n in names if getattr(self, n) is not None]
        if len(tensors) != len(present):
            raise ValueError(f"expected {len(present)} coefficient tensors, got {len(tensors)}")
        out = replace(self)
        for name, tensor in zip(present, tensors):
            setattr(out, name, tensor)
        return out


@dataclass
class LowRankPair:
    """The factor matrices A (n x r) and B (m x r) for one adapted weight."""

    A: Tensor
    B: Tensor

    def __post_init__(self):
        if self.A.data.ndim != 2 or self.B.data.ndim != 2:
            raise ValueError("factors must be matrices")
        if self.A.data.shape[1] != self.B.data.shape[1]:
            raise ValueError(
                f"factor ranks differ: A has {self.A.data.shape[1]}, B has {self.B.data.shape[1]}"
            )
        if self.r > min(self.m, self.n):
            raise ValueError(f"rank {self.r} exceeds min(m, n) = {min(self.m, self.n)}")

    @property
    def n(self) -> int:
        return self.A.data.shape[0]

    @property
    def m(self) -> int:
        return self.B.data.shape[0]

    @property
    def r(self) -> int:
        return self.A.data.shape[1]

    @classmethod
    def random(cls, m: int, n: int, r: int, rng: np.random.Generator, std: float = 0.02,
               trainable: bool = True) -> "LowRankPair":
        a = rng.normal(0.0, std, size=(n, r))
        b = rng.normal(0.0, std, size=(m, r))
        return cls(A=Tensor(a, requires_grad=trainable), B=Tensor(b, requires_grad=trainable))


def _require(spec: KernelSpec, *names):
    for name in names:
        if getattr(spec, name) is None:
            raise ValueError(f"{spec.kind.value} kernel needs coefficient {name!r}")


def kernel_eval(spec: KernelSpec, a, b) -> Tensor:
    """Evaluate a pairwise kernel between two r-vectors.

    Defined for the linear, piecewise-linear, sigmoid, and RBF kinds; the
    merge-level kinds (mix-k, rbf-normalized) need whole columns and are
    only available through `merge`.
    """
    a, b = _as_vec(a), _as_vec(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"length mismatch: {a.data.shape} vs {b.data.shape}")
    kind = spec.kind
    if kind is KernelKind.LINEAR:
        return reduce_sum(mul(a, b))
    if kind is KernelKind.P_LINEAR:
        _require(spec, "alpha_p")
        bounds = segment_bounds(a.data.shape[-1], spec.pieces)
        seg = segment_l2_norm(sub(a, b), bounds)
        return reduce_sum(mul(seg, spec.alpha_p))
    if kind is KernelKind.SIGMOID:
        _require(spec, "sig_alpha", "sig_beta", "sig_gamma")
        s = reduce_sum(mul(a, b))
        logistic = reciprocal(scalar_add(exp(mul(spec.sig_beta, -s)), 1.0))
        return add(mul(spec.sig_alpha, logistic), spec.sig_gamma)
    if kind is KernelKind.RBF:
        _require(spec, "rbf_alpha", "rbf_beta", "rbf_gamma")
        d2 = reduce_sum(square(sub(a, b)))
        return add(mul(spec.rbf_alpha, exp(mul(spec.rbf_beta, -d2))), spec.rbf_gamma)
    raise ValueError(f"{kind.value} has no pairwise form; use merge()")


def _as_vec(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim != 1:
        raise ValueError(f"expected a vector, got shape {t.data.shape}")
    return t


def merge(spec: KernelSpec, pair: LowRankPair) -> Tensor:
    """Merge a factor pair into the m x n update matrix.

    Entry (i, j) is the kernel between A's row j and B's row i. The mixed
    kind adds alpha * (softmax down each column of the piecewise-linear
    matrix) + beta; rbf-normalized applies that column softmax to the RBF
    matrix alone. The result participates in gradient recording.
    """
    m, n, r = pair.m, pair.n, pair.r
    kind = spec.kind
    if kind is KernelKind.LINEAR:
        return matmul(pair.B, transpose(pair.A))
    if kind is KernelKind.SIGMOID:
        _require(spec, "sig_alpha", "sig_beta", "sig_gamma")
        s = matmul(pair.B, transpose(pair.A))
        logistic = reciprocal(scalar_add(exp(mul(spec.sig_beta, -s)), 1.0))
        return add(mul(spec.sig_alpha, logistic), spec.sig_gamma)

    diff = sub(reshape(pair.B, (m, 1, r)), reshape(pair.A, (1, n, r)))
    if kind in (KernelKind.RBF, KernelKind.RBF_NORMALIZED):
        _require(spec, "rbf_alpha", "rbf_beta", "rbf_gamma")
        d2 = reduce_sum(square(diff), axis=2)
        k = add(mul(spec.rbf_alpha, exp(mul(spec.rbf_beta, -d2))), spec.rbf_gamma)
        if kind is KernelKind.RBF:
            return k
        return column_softmax(k)

    _require(spec, "alpha_p")
    bounds = segment_bounds(r, spec.pieces)
    seg = segment_l2_norm(diff, bounds)
    kp = reduce_sum(mul(seg, spec.alpha_p), axis=2)
    if kind is KernelKind.P_LINEAR:
        return kp
    _require(spec, "alpha", "beta")
    return add(add(kp, mul(spec.alpha, column_softmax(kp))), spec.beta)


def numerical_rank(matrix, eps_rel: float) -> int:
    """Count singular values >= eps_rel * sigma_max; a zero matrix has rank 0."""
    a = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if not 0.0 < eps_rel < 1.0:
        raise ValueError(f"eps_rel must lie in (0, 1), got {eps_rel}")
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s >= eps_rel * s[0]))


def psd_check(spec: KernelSpec, points) -> float:
    """Minimum eigenvalue of the kernel Gram matrix over the given points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"points must be a (k, r) array with k >= 1, got shape {pts.shape}")
    k = pts.shape[0]
    gram = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            gram[i, j] = kernel_eval(spec, pts[i], pts[j]).item()
            gram[j, i] = gram[i, j]
    return float(np.linalg.eigvalsh(gram)[0])


def mean_abs_factor_gradient(spec: KernelSpec, pair: LowRankPair) -> float:
    """Mean |gradient| over both factors for a sum-of-entries loss on the merge.

    The probe behind the gradient-vanishing contrast: at large factor
    scales a bare RBF merge returns nearly zero everywhere here, while the
    mixed kind keeps gradients at unit order.
    """
    grads = record_and_backward(lambda: reduce_sum(merge(spec, pair)), [pair.A, pair.B])
    ga = np.abs(grads[pair.A].data)
    gb = np.abs(grads[pair.B].data)
    return float((ga.sum() + gb.sum()) / (ga.size + gb.size))
