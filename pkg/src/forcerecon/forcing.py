"""Forces of quasi-finite rank: enslaving maps and their completion f = l + F(l).

Every built-in map is linear in the low modes, so it is stored as a sparse
matrix acting on the flattened coefficient array of a grid.  That makes exact
Lipschitz constants available in any order (alpha, beta) through a singular
value computation, next to the cheaper summation bound over target modes.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import zeta

from .errors import ConfigError, SupportError
from .spectral import (
    ScalarField,
    VectorField,
    leray_coeffs,
    project_coeffs,
    random_scalar,
    seminorm_coeffs,
)

_SUPPORT_TOL = 1e-12


def _check_support(grid, coeffs, N, what="field"):
    outside = coeffs * ~grid.low_mask(N)
    big = np.abs(outside).max(initial=0.0)
    scale = np.abs(coeffs).max(initial=0.0)
    if big > _SUPPORT_TOL * max(scale, 1e-300):
        raise SupportError(f"{what} has coefficients beyond |k| = {N}")


def _mode_index(grid, k):
    return int(np.ravel_multi_index(tuple(int(ki) + grid.K for ki in k), grid.shape))


def _in_grid(grid, k):
    return all(abs(int(ki)) <= grid.K for ki in k)


@dataclass(frozen=True)
class EnslavingMap:
    """Map F_N from modes |k| <= rank to modes |k| > rank."""

    rank: int
    order: tuple = (-1.0, -1.0)
    declared_lipschitz: float | None = None

    kind = "abstract"

    def __post_init__(self):
        if self.rank < 0:
            raise ValueError("rank must be nonnegative")
        object.__setattr__(self, "order", (float(self.order[0]), float(self.order[1])))

    # subclasses provide the linear action as sparse triplets
    def _triplets(self, grid):
        raise NotImplementedError

    def is_linear(self):
        return True

    @lru_cache(maxsize=8)
    def _matrix(self, grid):
        src, tgt, coef = self._triplets(grid)
        n = int(np.prod(grid.shape))
        return sp.csr_matrix((coef, (tgt, src)), shape=(n, n))

    def apply_coeffs(self, grid, coeffs):
        """Tail coefficients for low-mode coefficients (no support check)."""
        lead = coeffs.shape[: coeffs.ndim - grid.dim]
        flat = coeffs.reshape((-1, int(np.prod(grid.shape)))).T
        out = (self._matrix(grid) @ flat).T.reshape(lead + grid.shape)
        if lead:
            out = leray_coeffs(grid, out) if self._needs_leray else out
        return out

    _needs_leray = False

    def evaluate(self, l):
        """F(l) for a field supported in |k| <= rank."""
        _check_support(l.grid, l.coeffs, self.rank, "enslaving-map input")
        return l._like(self.apply_coeffs(l.grid, l.coeffs))

    # ---------------------------------------------------------------- Lipschitz
    def _dense(self, grid):
        """Matrix restricted to (target rows, low-mode columns) plus their |k|."""
        src, tgt, coef = self._triplets(grid)
        low = grid.low_index(self.rank)
        targets = np.unique(tgt)
        if len(targets) == 0:
            return np.zeros((0, len(low))), np.zeros(0), grid.kmag.ravel()[low]
        col = {j: i for i, j in enumerate(low)}
        row = {j: i for i, j in enumerate(targets)}
        A = np.zeros((len(targets), len(low)), dtype=complex)
        for s, t, c in zip(src, tgt, coef):
            A[row[t], col[s]] += c
        kmag = grid.kmag.ravel()
        return A, kmag[targets], kmag[low]

    def lipschitz(self, grid, order=None):
        """Exact Lipschitz constant on ``grid`` in the given order (default: own order)."""
        alpha, beta = self.order if order is None else order
        A, kt, ks = self._dense(grid)
        if A.size == 0:
            return 0.0
        M = (kt**beta)[:, None] * A * (ks ** (-alpha))[None, :]
        return float(np.linalg.norm(M, 2))

    def analytic_bound(self, grid, order=None):
        """Summation bound (sum_k ||F_k||^2 |k|^(2 beta))^(1/2) over target modes.

        ||F_k|| is the sharp per-mode constant over real fields: a source mode s
        always appears together with -s in ||l||_alpha, hence the factor 1/2.
        """
        alpha, beta = self.order if order is None else order
        src, tgt, coef = self._triplets(grid)
        kmag = grid.kmag.ravel()
        per_target = {}
        for s, t, c in zip(src, tgt, coef):
            per_target[t] = per_target.get(t, 0.0) + abs(c) ** 2 * kmag[s] ** (-2 * alpha) / 2
        total = sum(v * kmag[t] ** (2 * beta) for t, v in per_target.items())
        return math.sqrt(total)

    def declare(self, grid, order=None):
        """Copy with declared_lipschitz set to the exact constant on ``grid``."""
        order = self.order if order is None else order
        return dataclasses.replace(self, order=order, declared_lipschitz=self.lipschitz(grid, order))


@dataclass(frozen=True)
class ZeroMap(EnslavingMap):
    declared_lipschitz: float | None = 0.0
    kind = "zero"

    def _triplets(self, grid):
        e = np.zeros(0, dtype=int)
        return e, e, np.zeros(0)

    def apply_coeffs(self, grid, coeffs):
        return np.zeros_like(coeffs)


@dataclass(frozen=True)
class PowerLawTail(EnslavingMap):
    """Tail fed by harmonics of the low modes.

    The coefficient at m*k (m >= 2, |m k| > rank) receives ``w_k p(m) l_k`` with
    ``p(m) = m^-s`` (profile 'power') or ``exp(-s (m - 1))`` (profile 'exp').
    Targets are parallel to their source, so vector inputs stay solenoidal.
    """

    exponent: float = 4.0
    amplitude: float = 1.0
    weights: tuple = ()
    profile: str = "power"
    kind = "power_law_tail"

    def __post_init__(self):
        super().__post_init__()
        if self.profile not in ("power", "exp"):
            raise ValueError(f"unknown profile {self.profile!r}")
        w = tuple(sorted((tuple(int(x) for x in k), float(v)) for k, v in dict(self.weights).items()))
        object.__setattr__(self, "weights", w)

    def weight_of(self, k):
        table = dict(self.weights)
        k = tuple(int(x) for x in k)
        neg = tuple(-x for x in k)
        return table.get(k, table.get(neg, self.amplitude))

    def profile_at(self, m):
        m = np.asarray(m, dtype=float)
        if self.profile == "power":
            return m ** (-self.exponent)
        return np.exp(-self.exponent * (m - 1.0))

    @lru_cache(maxsize=8)
    def _triplets(self, grid):
        src, tgt, coef = [], [], []
        kv = grid.kvec.reshape(grid.dim, -1)
        for s in grid.low_index(self.rank):
            k = kv[:, s].astype(int)
            w = self.weight_of(k)
            m = 2
            while True:
                t = m * k
                if not _in_grid(grid, t):
                    break
                if float(t @ t) > self.rank**2 + 1e-9:
                    src.append(s)
                    tgt.append(_mode_index(grid, t))
                    coef.append(w * float(self.profile_at(m)))
                m += 1
        return np.array(src, dtype=int), np.array(tgt, dtype=int), np.array(coef, dtype=float)

    def truncation_error(self, grid, order=None):
        """Largest relative share (in the beta-norm) of a source's tail lying beyond the grid."""
        _, beta = self.order if order is None else order
        kv = grid.kvec.reshape(grid.dim, -1)
        worst = 0.0
        for s in grid.low_index(self.rank):
            k = kv[:, s].astype(int)
            kmax = int(np.abs(k).max())
            m_last = grid.K // kmax  # last harmonic inside the box
            m0 = 2
            while m0 <= m_last and float((m0 * k) @ (m0 * k)) <= self.rank**2 + 1e-9:
                m0 += 1
            kept = self._tail_sum(m0, m_last, beta)
            total = self._tail_sum(m0, None, beta)
            if total > 0:
                worst = max(worst, math.sqrt(max(total - kept, 0.0) / total))
        return worst

    def _tail_sum(self, m_first, m_last, beta):
        # sum_m p(m)^2 m^(2 beta), the |k|^(2 beta) factor cancels in ratios
        if m_last is not None:
            if m_last < m_first:
                return 0.0
            m = np.arange(m_first, m_last + 1, dtype=float)
            return float(np.sum(self.profile_at(m) ** 2 * m ** (2 * beta)))
        if self.profile == "power":
            q = 2 * self.exponent - 2 * beta
            if q <= 1:
                return math.inf
            return float(zeta(q, m_first))
        m = np.arange(m_first, m_first + 20000, dtype=float)
        return float(np.sum(self.profile_at(m) ** 2 * m ** (2 * beta)))


@dataclass(frozen=True)
class FourierEntry:
    """One target mode fed by one source mode: F_t(l) = gain * l_s, or fn(l_s) if given."""

    target: tuple
    source: tuple
    gain: complex = 1.0
    fn: object = None
    lipschitz: float | None = None

    def constant(self):
        if self.fn is None:
            return abs(self.gain)
        if self.lipschitz is None:
            raise ValueError("nonlinear Fourier entries need an explicit Lipschitz constant")
        return float(self.lipschitz)


@dataclass(frozen=True)
class FourierwiseMap(EnslavingMap):
    """Per-mode map; each entry also defines its mirror at -target by conjugation."""

    entries: tuple = ()
    kind = "fourierwise"
    _needs_leray = True

    def __post_init__(self):
        super().__post_init__()
        seen = set()
        for e in self.entries:
            t = tuple(int(x) for x in e.target)
            s = tuple(int(x) for x in e.source)
            if not 0 < sum(x * x for x in s) <= self.rank**2:
                raise ValueError(f"source {s} outside 0 < |k| <= {self.rank}")
            if sum(x * x for x in t) <= self.rank**2:
                raise ValueError(f"target {t} must satisfy |k| > {self.rank}")
            neg = tuple(-x for x in t)
            if t in seen or neg in seen:
                raise ValueError(f"target {t} (or its mirror) listed twice")
            seen.add(t)

    def is_linear(self):
        return all(e.fn is None for e in self.entries)

    def _triplets(self, grid):
        if not self.is_linear():
            raise ValueError("nonlinear Fourierwise map has no matrix form")
        src, tgt, coef = [], [], []
        for e in self.entries:
            if not _in_grid(grid, e.target):
                continue
            neg_t = tuple(-x for x in e.target)
            neg_s = tuple(-x for x in e.source)
            src += [_mode_index(grid, e.source), _mode_index(grid, neg_s)]
            tgt += [_mode_index(grid, e.target), _mode_index(grid, neg_t)]
            coef += [complex(e.gain), complex(np.conj(e.gain))]
        return np.array(src, dtype=int), np.array(tgt, dtype=int), np.array(coef, dtype=complex)

    def apply_coeffs(self, grid, coeffs):
        if self.is_linear():
            return EnslavingMap.apply_coeffs(self, grid, coeffs)
        out = np.zeros_like(coeffs)
        for e in self.entries:
            if not _in_grid(grid, e.target):
                continue
            ti = tuple(int(x) + grid.K for x in e.target)
            ni = tuple(-int(x) + grid.K for x in e.target)
            si = tuple(int(x) + grid.K for x in e.source)
            src = coeffs[(Ellipsis,) + si]
            val = e.gain * src if e.fn is None else np.vectorize(e.fn, otypes=[complex])(src)
            out[(Ellipsis,) + ti] = val
            out[(Ellipsis,) + ni] = np.conj(val)
        if coeffs.ndim > grid.dim:
            out = leray_coeffs(grid, out)
        return out

    def analytic_bound(self, grid, order=None):
        alpha, beta = self.order if order is None else order
        total = 0.0
        for e in self.entries:
            if not _in_grid(grid, e.target):
                continue
            ks = math.sqrt(sum(x * x for x in e.source))
            kt = math.sqrt(sum(x * x for x in e.target))
            # the entry and its mirror each contribute L^2 |s|^(-2 alpha) / 2
            total += e.constant() ** 2 * ks ** (-2 * alpha) * kt ** (2 * beta)
        return math.sqrt(total)

    def lipschitz(self, grid, order=None):
        if self.is_linear():
            return EnslavingMap.lipschitz(self, grid, order)
        return self.analytic_bound(grid, order)


@dataclass(frozen=True)
class RankRaisedMap(EnslavingMap):
    """F_M = Q_M o F o P_N for a base map F of rank N <= M."""

    base: EnslavingMap = None
    kind = "composed_rank_raised"

    def is_linear(self):
        return self.base.is_linear()

    def _triplets(self, grid):
        src, tgt, coef = self.base._triplets(grid)
        keep = grid.kmag.ravel()[tgt] > self.rank + 1e-12
        return src[keep], tgt[keep], coef[keep]

    def apply_coeffs(self, grid, coeffs):
        low = project_coeffs(grid, coeffs, self.base.rank, "low")
        return project_coeffs(grid, self.base.apply_coeffs(grid, low), self.rank, "high")

    def _dense(self, grid):
        A, kt, ks = EnslavingMap._dense(self, grid)
        # columns beyond the base rank are ignored by P_N, keep them as zeros
        return A, kt, ks

    def analytic_bound(self, grid, order=None):
        if self.base.is_linear():
            return EnslavingMap.analytic_bound(self, grid, order)
        return self.base.analytic_bound(grid, order)

    def lipschitz(self, grid, order=None):
        if self.base.is_linear():
            return EnslavingMap.lipschitz(self, grid, order)
        return self.base.lipschitz(grid, order)


# ------------------------------------------------------------------ operations


def raise_rank(fmap, M):
    """Rank-M member of the canonical family generated by ``fmap``."""
    if M < fmap.rank:
        raise ValueError(f"cannot lower rank from {fmap.rank} to {M}")
    if isinstance(fmap, ZeroMap):
        return ZeroMap(rank=M, order=fmap.order, declared_lipschitz=fmap.declared_lipschitz)
    base = fmap.base if isinstance(fmap, RankRaisedMap) else fmap
    return RankRaisedMap(rank=M, order=fmap.order, declared_lipschitz=fmap.declared_lipschitz, base=base)


def change_order(fmap, new_order):
    """Same map, Lipschitz constant rescaled by N^((alpha - a)_+ - (beta - b))."""
    alpha, beta = fmap.order
    a, b = float(new_order[0]), float(new_order[1])
    if b > beta:
        raise ValueError(f"new beta {b} exceeds current beta {beta}")
    if fmap.declared_lipschitz is None:
        raise ValueError("change_order needs a declared Lipschitz constant")
    if fmap.rank == 0:
        factor = 1.0 if fmap.declared_lipschitz == 0 else math.inf
    else:
        factor = float(fmap.rank) ** (max(alpha - a, 0.0) - (beta - b))
    new = dataclasses.replace(fmap, order=(a, b), declared_lipschitz=fmap.declared_lipschitz * factor)
    if isinstance(new, RankRaisedMap):
        new = dataclasses.replace(new, base=dataclasses.replace(new.base, order=(a, b)))
    return new


def evaluate_force(l, fmap):
    """Completion l + F(l)."""
    return l + fmap.evaluate(l)


@dataclass(frozen=True)
class QuasiFiniteForce:
    """Force whose tail is slaved to its low modes.

    ``low`` is a field or a callable ``t -> field`` for time-dependent forces.
    """

    low: object
    map: EnslavingMap

    def __post_init__(self):
        if not callable(self.low):
            _check_support(self.low.grid, self.low.coeffs, self.map.rank, "low part of the force")

    @property
    def time_dependent(self):
        return callable(self.low)

    def low_at(self, t=0.0):
        return self.low(t) if callable(self.low) else self.low

    def at(self, t=0.0):
        return evaluate_force(self.low_at(t), self.map)

    def full(self, t=0.0):
        return self.at(t)


@dataclass
class LipschitzEstimate:
    empirical: float
    analytic_bound: float | None = None

    def __float__(self):
        return self.empirical


def estimate_lipschitz(fmap, order, samples, radius, seed, grid, vector=False):
    """Empirical lower bound on the Lipschitz constant of ``fmap`` in ``order``.

    Random pairs of low-mode fields of size ``radius`` are complemented by single
    mode-pair probes (real and imaginary) along every low mode, which are exact
    maximisers for maps acting on one source at a time.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    alpha, beta = order
    rng = np.random.default_rng(seed)
    N = fmap.rank
    shape = ((grid.dim,) if vector else ()) + grid.shape

    def F(c):
        return fmap.apply_coeffs(grid, c)

    def ratio(c1, c2):
        den = seminorm_coeffs(grid, c1 - c2, alpha)
        if den <= 1e-300:
            return None
        return seminorm_coeffs(grid, F(c1) - F(c2), beta) / den

    def rand_low():
        comps = [random_scalar(grid, rng, N=N).coeffs for _ in range(grid.dim if vector else 1)]
        c = np.stack(comps) if vector else comps[0]
        if vector:
            c = leray_coeffs(grid, c)
        n = seminorm_coeffs(grid, c, alpha)
        return c * (radius / n) if n > 0 else c

    best, used = 0.0, 0
    for _ in range(samples):
        r = ratio(rand_low(), rand_low())
        if r is not None:
            best, used = max(best, r), used + 1
    kv = grid.kvec.reshape(grid.dim, -1)
    for s in grid.low_index(N):
        k = tuple(int(x) for x in kv[:, s])
        if k < tuple(-x for x in k):
            continue
        for phase in (1.0, 1j):
            probe = ScalarField.from_modes(grid, {k: phase}).coeffs
            if vector:
                e = np.zeros(grid.dim)
                e[int(np.argmin(np.abs(kv[:, s])))] = 1.0
                probe = leray_coeffs(grid, e.reshape((grid.dim,) + (1,) * grid.dim) * probe)
            n = seminorm_coeffs(grid, probe, alpha)
            if n == 0:
                continue
            probe = probe * (radius / n)
            r = ratio(probe, np.zeros(shape, dtype=complex))
            if r is not None:
                best, used = max(best, r), used + 1
    if used == 0:
        raise ValueError("all sampled pairs were degenerate")
    bound = None
    if isinstance(fmap, (FourierwiseMap, PowerLawTail, RankRaisedMap, ZeroMap)):
        bound = 0.0 if isinstance(fmap, ZeroMap) else fmap.analytic_bound(grid, order)
    return LipschitzEstimate(best, bound)


# ----------------------------------------------------------- descriptor files


def _parse_mode(text):
    return tuple(int(x) for x in text.replace("(", "").replace(")", "").split(","))


def _map_from_section(sec, parser):
    allowed = {
        "kind", "rank", "order", "declared_lipschitz", "exponent", "amplitude",
        "weights", "profile", "entries", "base",
    }
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown map keys: {sorted(unknown)}")
    kind = sec.get("kind")
    rank = sec.getint("rank")
    order = tuple(float(x) for x in sec.get("order", "-1, -1").split(","))
    declared = sec.get("declared_lipschitz")
    declared = None if declared in (None, "", "none") else float(declared)
    if kind == "zero":
        return ZeroMap(rank=rank, order=order, declared_lipschitz=0.0 if declared is None else declared)
    if kind == "power_law_tail":
        weights = {}
        for item in filter(None, (x.strip() for x in sec.get("weights", "").split(";"))):
            k, w = item.split(":")
            weights[_parse_mode(k)] = float(w)
        return PowerLawTail(
            rank=rank, order=order, declared_lipschitz=declared,
            exponent=sec.getfloat("exponent", 4.0), amplitude=sec.getfloat("amplitude", 1.0),
            weights=tuple(weights.items()), profile=sec.get("profile", "power"),
        )
    if kind == "fourierwise":
        entries = []
        for item in filter(None, (x.strip() for x in sec.get("entries", "").split(";"))):
            lhs, gain = item.split(":")
            t, s = lhs.split("<-")
            g = [float(x) for x in gain.split(",")]
            entries.append(FourierEntry(_parse_mode(t), _parse_mode(s), complex(g[0], g[1] if len(g) > 1 else 0.0)))
        return FourierwiseMap(rank=rank, order=order, declared_lipschitz=declared, entries=tuple(entries))
    if kind == "composed_rank_raised":
        base_name = sec.get("base", "base")
        if base_name not in parser:
            raise ConfigError(f"missing [{base_name}] section for composed map")
        base = _map_from_section(parser[base_name], parser)
        raised = raise_rank(base, rank)
        return dataclasses.replace(raised, declared_lipschitz=declared if declared is not None else base.declared_lipschitz)
    raise ConfigError(f"unknown map kind {kind!r}")


def read_map_descriptor(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        raise ConfigError(f"cannot read map descriptor {path}")
    return map_from_parser(parser)


def map_from_parser(parser):
    """Map described by the [map] (and optional [base]) sections of a parsed file."""
    if "map" not in parser:
        raise ConfigError("map descriptor needs a [map] section")
    return _map_from_section(parser["map"], parser)


def map_sections(fmap):
    """Section dicts that :func:`map_from_parser` turns back into ``fmap``."""
    out = {"map": _map_to_dict(fmap)}
    if isinstance(fmap, RankRaisedMap):
        out["base"] = _map_to_dict(fmap.base)
    return out


def _map_to_dict(fmap):
    d = {
        "kind": fmap.kind,
        "rank": str(fmap.rank),
        "order": f"{fmap.order[0]!r}, {fmap.order[1]!r}",
        "declared_lipschitz": "none" if fmap.declared_lipschitz is None else repr(fmap.declared_lipschitz),
    }
    if isinstance(fmap, PowerLawTail):
        d.update(exponent=repr(fmap.exponent), amplitude=repr(fmap.amplitude), profile=fmap.profile)
        d["weights"] = "; ".join(f"{','.join(map(str, k))}:{w!r}" for k, w in fmap.weights)
    elif isinstance(fmap, FourierwiseMap):
        if not fmap.is_linear():
            raise ValueError("nonlinear Fourier entries cannot be serialised")
        d["entries"] = "; ".join(
            f"{','.join(map(str, e.target))} <- {','.join(map(str, e.source))} : "
            f"{complex(e.gain).real!r},{complex(e.gain).imag!r}"
            for e in fmap.entries
        )
    elif isinstance(fmap, RankRaisedMap):
        d["base"] = "base"
    return d


def write_map_descriptor(fmap, path):
    parser = configparser.ConfigParser()
    parser.read_dict(map_sections(fmap))
    with open(path, "w") as fh:
        parser.write(fh)
