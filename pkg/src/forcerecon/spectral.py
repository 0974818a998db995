"""Fourier representation of real, mean-free fields on the torus [0, 2pi]^d.

Coefficients are stored on the full cube |k_i| <= K with index ``k + K`` along
each axis, so ``coeffs[K, K]`` is the mean mode in 2D.  They are the analytic
Fourier coefficients, i.e. ``f(x) = sum_k c_k exp(i k.x)``.  Physical samples
live on a uniform grid with ``2K + 2`` points per axis.

Nonlinear products follow the 2/3 rule: inputs and output are restricted to
the band ``|k_i| <= floor(2K/3)``, which makes every quadratic product an exact
Galerkin projection.  Skew-symmetry of the trilinear form therefore holds to
roundoff rather than to aliasing level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import GridMismatchError

_WORKERS = 1


def set_workers(n):
    """Number of threads used by the FFT backend (1 gives bit-reproducible runs)."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def get_workers():
    return _WORKERS


def _frozen(a):
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class WaveGrid:
    dim: int
    K: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")

    @property
    def dealias_cutoff(self):
        return (2 * self.K) // 3

    @property
    def shape(self):
        return (2 * self.K + 1,) * self.dim

    @property
    def n_phys(self):
        return 2 * self.K + 2

    @property
    def origin(self):
        return (self.K,) * self.dim

    @property
    def volume(self):
        return (2 * math.pi) ** self.dim

    @property
    def axes(self):
        return tuple(range(-self.dim, 0))

    @cached_property
    def kvec(self):
        """Integer wavenumbers as a float array of shape (dim, *shape)."""
        k1 = np.arange(-self.K, self.K + 1, dtype=float)
        return _frozen(np.stack(np.meshgrid(*([k1] * self.dim), indexing="ij")))

    @cached_property
    def k2(self):
        return _frozen(np.sum(self.kvec**2, axis=0))

    @cached_property
    def kmag(self):
        return _frozen(np.sqrt(self.k2))

    @cached_property
    def inv_k2(self):
        out = np.zeros(self.shape)
        nz = self.k2 > 0
        out[nz] = 1.0 / self.k2[nz]
        return _frozen(out)

    @cached_property
    def band_mask(self):
        c = self.dealias_cutoff
        return _frozen(np.all(np.abs(self.kvec) <= c, axis=0) & (self.k2 > 0))

    @cached_property
    def _cache(self):
        return {}

    def low_mask(self, N):
        """Boolean mask of 0 < |k| <= N."""
        key = ("low", float(N))
        if key not in self._cache:
            m = (self.k2 > 0) & (self.k2 <= float(N) ** 2 + 1e-9)
            self._cache[key] = _frozen(m)
        return self._cache[key]

    def low_index(self, N):
        """Flat indices of the modes 0 < |k| <= N, in storage order."""
        key = ("idx", float(N))
        if key not in self._cache:
            self._cache[key] = _frozen(np.flatnonzero(self.low_mask(N)))
        return self._cache[key]

    def weight(self, alpha):
        """|k|^(2 alpha) with the mean mode weighted by zero."""
        key = ("w", float(alpha))
        if key not in self._cache:
            w = np.zeros(self.shape)
            nz = self.k2 > 0
            w[nz] = self.k2[nz] ** alpha
            self._cache[key] = _frozen(w)
        return self._cache[key]

    def points(self, oversample=1):
        m = self.n_phys * oversample
        x = 2 * np.pi * np.arange(m) / m
        return np.meshgrid(*([x] * self.dim), indexing="ij")

    def to_physical(self, coeffs, oversample=1):
        """Sample the trigonometric polynomial on the uniform grid (batched over leading axes)."""
        m = self.n_phys * oversample
        d = self.dim
        lead = coeffs.shape[: coeffs.ndim - d]
        buf = np.zeros(lead + (m,) * d, dtype=complex)
        # centred layout: index j <-> wavenumber j - m//2
        sl = tuple(slice(m // 2 - self.K, m // 2 + self.K + 1) for _ in range(d))
        buf[(Ellipsis,) + sl] = coeffs
        buf = sfft.ifftshift(buf, axes=self.axes)
        vals = sfft.ifftn(buf, axes=self.axes, workers=_WORKERS)
        return vals.real * m**d

    def to_spectral(self, values):
        """Analytic Fourier coefficients of real samples, Hermitian-symmetrised."""
        m = values.shape[-1]
        d = self.dim
        spec = sfft.fftn(values, axes=self.axes, workers=_WORKERS) / m**d
        spec = sfft.fftshift(spec, axes=self.axes)
        sl = tuple(slice(m // 2 - self.K, m // 2 + self.K + 1) for _ in range(d))
        out = spec[(Ellipsis,) + sl]
        return hermitian(out, d)


def flip(coeffs, dim):
    """Coefficient array reindexed by k -> -k."""
    return coeffs[(Ellipsis,) + (slice(None, None, -1),) * dim]


def hermitian(coeffs, dim):
    return 0.5 * (coeffs + np.conj(flip(coeffs, dim)))


def _check_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError(f"grid mismatch: {g} vs {f.grid}")
    return g


class _Field:
    __slots__ = ("grid", "coeffs")
    _rank = 0

    def __init__(self, grid, coeffs, check=True):
        coeffs = np.array(coeffs, dtype=complex)
        expected = (grid.dim,) * self._rank + grid.shape
        if coeffs.shape != expected:
            raise ValueError(f"coefficient shape {coeffs.shape}, expected {expected}")
        coeffs[(Ellipsis,) + grid.origin] = 0.0
        if check:
            scale = np.max(np.abs(coeffs), initial=0.0)
            asym = np.max(np.abs(coeffs - np.conj(flip(coeffs, grid.dim))), initial=0.0)
            if asym > 1e-10 * max(scale, 1e-300):
                raise ValueError("coefficients violate the reality condition c_{-k} = conj(c_k)")
        coeffs.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "coeffs", coeffs)

    def __setattr__(self, name, value):
        raise AttributeError("fields are immutable")

    @classmethod
    def _raw(cls, grid, coeffs):
        obj = cls.__new__(cls)
        coeffs = np.asarray(coeffs, dtype=complex)
        coeffs.flags.writeable = False
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "coeffs", coeffs)
        return obj

    @classmethod
    def zeros(cls, grid):
        return cls._raw(grid, np.zeros((grid.dim,) * cls._rank + grid.shape, dtype=complex))

    def _like(self, coeffs):
        return type(self)._raw(self.grid, coeffs)

    def __add__(self, other):
        _check_grid(self, other)
        return self._like(self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_grid(self, other)
        return self._like(self.coeffs - other.coeffs)

    def __neg__(self):
        return self._like(-self.coeffs)

    def __mul__(self, a):
        if not np.isscalar(a) or np.iscomplexobj(a):
            return NotImplemented
        return self._like(self.coeffs * float(a))

    __rmul__ = __mul__

    def physical(self, oversample=1):
        return self.grid.to_physical(self.coeffs, oversample)

    def max_wavenumber(self, tol=0.0):
        """Largest |k| carrying a coefficient above tol (0 for the zero field)."""
        mag = np.abs(self.coeffs)
        if self._rank:
            mag = mag.max(axis=0)
        nz = mag > tol
        return float(self.grid.kmag[nz].max()) if nz.any() else 0.0

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.grid.dim}, K={self.grid.K})"


class ScalarField(_Field):
    """Real mean-free scalar field."""

    __slots__ = ()
    _rank = 0

    @classmethod
    def from_physical(cls, grid, values):
        return cls._raw(grid, _zero_mean(grid, grid.to_spectral(np.asarray(values, float))))

    @classmethod
    def from_function(cls, grid, fn):
        return cls.from_physical(grid, fn(*grid.points()))

    @classmethod
    def from_modes(cls, grid, modes):
        """Build from {k: amplitude}; the conjugate mode is filled in automatically."""
        c = np.zeros(grid.shape, dtype=complex)
        for k, amp in modes.items():
            idx = tuple(int(ki) + grid.K for ki in k)
            nidx = tuple(-int(ki) + grid.K for ki in k)
            c[idx] += amp
            c[nidx] += np.conj(amp)
        return cls(grid, c)


class VectorField(_Field):
    """Real mean-free vector field with ``dim`` components."""

    __slots__ = ()
    _rank = 1

    @property
    def components(self):
        return tuple(ScalarField._raw(self.grid, c) for c in self.coeffs)

    @classmethod
    def from_components(cls, comps):
        g = _check_grid(*comps)
        return cls._raw(g, np.stack([c.coeffs for c in comps]))

    @classmethod
    def from_physical(cls, grid, values):
        return cls._raw(grid, _zero_mean(grid, grid.to_spectral(np.asarray(values, float))))

    @classmethod
    def from_function(cls, grid, fn):
        return cls.from_physical(grid, np.stack(fn(*grid.points())))

    def divergence(self):
        return ScalarField._raw(self.grid, np.sum(1j * self.grid.kvec * self.coeffs, axis=0))

    def is_divergence_free(self, rtol=1e-13):
        div = np.abs(np.sum(self.grid.kvec * self.coeffs, axis=0)).max()
        scale = (self.grid.kmag * np.abs(self.coeffs)).max(initial=0.0)
        return div <= rtol * max(scale, 1e-300)


def _zero_mean(grid, c):
    c = np.array(c)
    c[(Ellipsis,) + grid.origin] = 0.0
    return c


def random_scalar(grid, rng, N=None, slope=0.0, amplitude=1.0):
    """Random real field with |c_k| ~ |k|^-slope, optionally limited to |k| <= N."""
    shape = grid.shape
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c *= grid.weight(-slope / 2.0)
    if N is not None:
        c *= grid.low_mask(N)
    c = hermitian(c, grid.dim)
    c[grid.origin] = 0.0
    return ScalarField._raw(grid, amplitude * c)


def random_vector(grid, rng, N=None, slope=0.0, amplitude=1.0, solenoidal=True):
    comps = [random_scalar(grid, rng, N, slope, amplitude).coeffs for _ in range(grid.dim)]
    v = VectorField._raw(grid, np.stack(comps))
    return leray_project(v) if solenoidal else v


# ---------------------------------------------------------------- projections


def project_coeffs(grid, coeffs, N, part):
    mask = grid.low_mask(N)
    if part == "low":
        return coeffs * mask
    if part == "high":
        return coeffs * ~mask
    raise ValueError(f"part must be 'low' or 'high', got {part!r}")


def project(field, N, part):
    """P_N (part='low', keeps 0 < |k| <= N) or Q_N = I - P_N (part='high')."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    return field._like(project_coeffs(field.grid, field.coeffs, N, part))


def seminorm_coeffs(grid, coeffs, alpha):
    w = grid.weight(alpha)
    s = np.sum(w * (coeffs.real**2 + coeffs.imag**2))
    return math.sqrt(grid.volume * float(s))


def seminorm(field, alpha):
    """(|T^d| sum_k |k|^(2 alpha) |c_k|^2)^(1/2); summed over components for vectors."""
    return seminorm_coeffs(field.grid, field.coeffs, alpha)


def inner(f, g):
    """L^2 pairing via Parseval."""
    _check_grid(f, g)
    return f.grid.volume * float(np.sum(f.coeffs * np.conj(g.coeffs)).real)


def laplacian(field):
    return field._like(-field.grid.k2 * field.coeffs)


def gradient(phi):
    return VectorField._raw(phi.grid, 1j * phi.grid.kvec * phi.coeffs)


def leray_coeffs(grid, v):
    kdotv = np.sum(grid.kvec * v, axis=0)
    return v - grid.kvec * (kdotv * grid.inv_k2)


def leray_project(v):
    """v_k - k (k.v_k)/|k|^2 on every mode."""
    return VectorField._raw(v.grid, leray_coeffs(v.grid, v.coeffs))


# ---------------------------------------------------------- nonlinear products


def band_physical(grid, coeffs):
    """Physical samples of the dealias-band part of a field (e.g. an advecting velocity)."""
    return grid.to_physical(coeffs * grid.band_mask)


def advect_coeffs(grid, v_phys, phi):
    """Coefficients of v.grad(phi) for band-limited physical velocity samples ``v_phys``.

    ``phi`` may be scalar (shape grid.shape) or carry leading component axes.
    """
    pb = phi * grid.band_mask
    lead = pb.ndim - grid.dim
    kv = grid.kvec.reshape((grid.dim,) + (1,) * lead + grid.shape)
    grads = grid.to_physical(1j * kv * pb)
    vp = v_phys.reshape((grid.dim,) + (1,) * lead + v_phys.shape[1:])
    prod = np.sum(vp * grads, axis=0)
    return grid.to_spectral(prod) * grid.band_mask


def advect(v, phi):
    """Dealiased v.grad(phi); vector phi is advected componentwise."""
    _check_grid(v, phi)
    g = v.grid
    out = advect_coeffs(g, band_physical(g, v.coeffs), phi.coeffs)
    return phi._like(out)


def trilinear_b(u, phi, psi):
    """b(u, phi, psi) = (u.grad phi, psi); vector arguments sum over components."""
    _check_grid(u, phi, psi)
    return inner(advect(u, phi), psi)


def nse_bilinear_coeffs(grid, u, w, u_phys=None):
    if u_phys is None:
        u_phys = band_physical(grid, u)
    return leray_coeffs(grid, advect_coeffs(grid, u_phys, w))


def nse_bilinear(u, w):
    """B(u, w) = Leray(u.grad w), dealiased."""
    _check_grid(u, w)
    return VectorField._raw(u.grid, nse_bilinear_coeffs(u.grid, u.coeffs, w.coeffs))


def stokes(field):
    """A u = -Laplacian u (fields here are mean-free)."""
    return field._like(field.grid.k2 * field.coeffs)


def pack_low(grid, coeffs, N):
    """Coefficients at 0 < |k| <= N as a compact array (leading axes kept)."""
    idx = grid.low_index(N)
    flat = coeffs.reshape(coeffs.shape[: coeffs.ndim - grid.dim] + (-1,))
    return flat[..., idx]


def unpack_low(grid, packed, N):
    idx = grid.low_index(N)
    lead = packed.shape[:-1]
    out = np.zeros(lead + (int(np.prod(grid.shape)),), dtype=complex)
    out[..., idx] = packed
    return out.reshape(lead + grid.shape)
