"""Time-dependent inlet profiles driven by a mean-velocity waveform.

A Waveform holds one period of samples of the cross-section mean velocity.
Its Fourier truncation (default 8 harmonics) drives either a quasi-steady
parabolic profile or the classical oscillatory pipe solution per harmonic,
flux-normalized so the emitted profile integrates to the reconstructed flow
rate at every instant.  Complex Bessel functions come from their power
series, which is why the unsteadiness parameter alpha is capped: beyond
alpha ~ 50 the series loses all precision to cancellation.
"""
from __future__ import annotations

import csv as _csv
from dataclasses import dataclass, field

import numpy as np

from .boxmesh import BoundaryTags
from .errors import InflowError
from .geometry import Cap

DEFAULT_HARMONICS = 8
ALPHA_MAX = 50.0
_SERIES_RTOL = 1e-12


@dataclass(frozen=True)
class Waveform:
    """One period of mean inlet velocity samples.

    times must be strictly increasing starting in [0, period); u_mean is the
    cross-section mean velocity (m/s) already including any scale factor.
    """

    times: np.ndarray
    u_mean: np.ndarray
    period: float
    n_harmonics: int = DEFAULT_HARMONICS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        u = np.asarray(self.u_mean, dtype=np.float64)
        if t.ndim != 1 or t.shape != u.shape:
            raise InflowError("waveform times and values must be 1-D and equal length")
        if len(t) < 8:
            raise InflowError(f"waveform needs at least 8 samples, got {len(t)}")
        if (np.diff(t) <= 0.0).any():
            raise InflowError("waveform times must be strictly increasing")
        span = t[-1] - t[0]
        if self.period < span * (1.0 - 1e-12):
            raise InflowError(
                f"period {self.period} does not cover the sample span {span:.6g}"
            )
        # A file that repeats the first sample at t0 + T is accepted; drop
        # the duplicate endpoint so the FFT sees one clean period.
        if abs(span - self.period) <= 1e-9 * self.period:
            t = t[:-1]
            u = u[:-1]
        if u.mean() <= 0.0:
            raise InflowError("waveform mean velocity must be positive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "u_mean", u)

    @property
    def coefficients(self) -> np.ndarray:
        """Complex harmonic coefficients c_0..c_K of the mean velocity:
        u_mean(t) ~ c_0 + sum_k 2 Re[c_k exp(2i pi k t / T)]."""
        if "coef" not in self._cache:
            dt = np.diff(self.times)
            uniform = (
                len(self.times) >= 2 * self.n_harmonics + 2
                and np.allclose(dt, dt[0], rtol=1e-9, atol=0.0)
                and np.isclose(len(self.times) * dt[0], self.period, rtol=1e-9)
            )
            if uniform:
                # Direct DFT of the given samples: exact for band-limited data.
                uu = self.u_mean
            else:
                n = max(8 * len(self.times), 512)
                tt = self.times[0] + np.arange(n) * (self.period / n)
                uu = self._interp_periodic(tt)
            spec = np.fft.rfft(uu) / len(uu)
            k = min(self.n_harmonics, len(spec) - 1)
            coef = spec[: k + 1].copy()
            # Sampling started at times[0], not 0: shift phases back.
            ks = np.arange(k + 1)
            coef *= np.exp(-2j * np.pi * ks * self.times[0] / self.period)
            self._cache["coef"] = coef
        return self._cache["coef"]

    def _interp_periodic(self, t: np.ndarray) -> np.ndarray:
        tm = np.mod(t - self.times[0], self.period) + self.times[0]
        tp = np.concatenate([self.times, [self.times[0] + self.period]])
        up = np.concatenate([self.u_mean, [self.u_mean[0]]])
        return np.interp(tm, tp, up)

    def mean_velocity(self, t) -> np.ndarray:
        """Harmonic-truncated mean velocity at time(s) t (periodic)."""
        t = np.asarray(t, dtype=np.float64)
        c = self.coefficients
        phase = 2.0 * np.pi * np.mod(t / self.period, 1.0)
        out = np.full(t.shape, float(c[0].real))
        for k in range(1, len(c)):
            out = out + 2.0 * (c[k] * np.exp(1j * k * phase)).real
        return out


def load_waveform(
    path, scale: float = 1.0, period: float | None = None,
    n_harmonics: int = DEFAULT_HARMONICS,
) -> Waveform:
    """Read a waveform CSV with header ``t,U_mean`` (SI units, one period).

    The period defaults to the last sample time plus the median sample
    spacing (treating the file as one full period sampled without the
    repeated endpoint); pass ``period`` to override.
    """
    times, values = [], []
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["t", "U_mean"]:
            raise InflowError(
                f"{path}: expected CSV header 't,U_mean', got {header!r}"
            )
        for ln, row in enumerate(reader, start=2):
            if not row or not row[0].strip():
                continue
            try:
                times.append(float(row[0]))
                values.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise InflowError(f"{path}:{ln}: bad waveform row {row!r}") from exc
    t = np.asarray(times)
    u = np.asarray(values) * scale
    if len(t) == 0:
        raise InflowError(f"{path}: waveform file has no samples")
    if period is None:
        if len(t) < 2:
            raise InflowError(f"{path}: cannot infer period from one sample")
        period = float(t[-1] - t[0] + np.median(np.diff(t)))
    return Waveform(times=t, u_mean=u, period=float(period),
                    n_harmonics=n_harmonics)


def synthetic_waveform(
    period: float = 0.885, u_mean: float = 0.25, n_samples: int = 128,
) -> Waveform:
    """Synthetic pulse-shaped waveform (systolic peak ~ 2x the mean).

    Built from three harmonics so the default truncation reproduces it
    exactly.  Not measured data.
    """
    t = np.arange(n_samples) * (period / n_samples)
    ph = 2.0 * np.pi * t / period
    shape = (
        1.0
        + 0.90 * np.sin(ph)
        + 0.20 * np.sin(2.0 * ph - 1.6)
        + 0.10 * np.sin(3.0 * ph)
    )
    return Waveform(times=t, u_mean=u_mean * shape, period=period)


def constant_waveform(u_mean: float, period: float = 1.0) -> Waveform:
    """Steady inflow expressed as a waveform (all harmonics vanish)."""
    t = np.arange(16) * (period / 16.0)
    return Waveform(times=t, u_mean=np.full(16, u_mean), period=period)


def _bessel_j01(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex J0(z) and J1(z) by power series, vectorized.

    Series terms alternate with ratio |z|^2/4 per order; beyond |z| ~ 50 the
    cancellation exceeds double precision, which callers must screen via
    ALPHA_MAX before getting here.
    """
    z = np.asarray(z, dtype=np.complex128)
    q = -(z * z) / 4.0
    j0 = np.ones_like(z)
    j1s = np.ones_like(z)  # J1(z)/(z/2)
    t0 = np.ones_like(z)
    t1 = np.ones_like(z)
    for m in range(1, 200):
        t0 = t0 * q / (m * m)
        t1 = t1 * q / (m * (m + 1))
        j0 += t0
        j1s += t1
        if (np.abs(t0) <= _SERIES_RTOL * np.abs(j0)).all() and (
            np.abs(t1) <= _SERIES_RTOL * np.abs(j1s)
        ).all():
            break
    else:
        raise InflowError("Bessel series failed to converge (argument too large)")
    return j0, (z / 2.0) * j1s


class WomersleyInlet:
    """Flux-normalized oscillatory profile for one circular inlet.

    Per harmonic k, the radial shape is
        (1 - J0(beta r/R) / J0(beta)) / (1 - 2 J1(beta) / (beta J0(beta)))
    with beta = i^{3/2} alpha_k and alpha_k = R sqrt(k omega / nu), so its
    disk integral is exactly the harmonic's flow-rate amplitude.  The k = 0
    term is the steady parabola carrying the mean flow.
    """

    def __init__(self, cap: Cap, waveform: Waveform, nu: float):
        if nu <= 0.0:
            raise InflowError(f"kinematic viscosity must be positive, got {nu!r}")
        self.cap = cap
        self.waveform = waveform
        self.nu = nu
        R = cap.radius
        omega = 2.0 * np.pi / waveform.period
        coeffs = waveform.coefficients
        ks = np.arange(1, len(coeffs))
        alpha = R * np.sqrt(ks * omega / nu)
        if (alpha > ALPHA_MAX).any():
            k_bad = int(ks[np.argmax(alpha > ALPHA_MAX)])
            raise InflowError(
                f"harmonic {k_bad} has alpha = {alpha.max():.1f} > {ALPHA_MAX}; "
                "the Bessel power series cannot evaluate it - reduce the "
                "harmonic count or the inlet radius/frequency ratio"
            )
        beta = alpha * np.exp(1j * 3.0 * np.pi / 4.0)  # i^{3/2} alpha
        j0_beta, j1_beta = _bessel_j01(beta)
        self._beta = beta
        self._j0_beta = j0_beta
        self._flux_factor = 1.0 - 2.0 * j1_beta / (beta * j0_beta)
        self._coeffs = coeffs

    def speed(self, r: np.ndarray, t: float) -> np.ndarray:
        """Axial speed at radii r (m) and time t; zero outside the disk."""
        r = np.asarray(r, dtype=np.float64)
        R = self.cap.radius
        x = np.clip(r / R, 0.0, None)
        inside = x <= 1.0 + 1e-12
        xs = np.where(inside, np.minimum(x, 1.0), 0.0)
        c = self._coeffs
        u = 2.0 * c[0].real * (1.0 - xs * xs)
        phase = 2.0 * np.pi * np.mod(t / self.waveform.period, 1.0)
        for i, k in enumerate(range(1, len(c))):
            j0_r, _ = _bessel_j01(self._beta[i] * xs)
            prof = (1.0 - j0_r / self._j0_beta[i]) / self._flux_factor[i]
            u = u + 2.0 * (c[k] * prof * np.exp(1j * k * phase)).real
        return np.where(inside, u, 0.0)

    def flow_rate(self, t) -> np.ndarray:
        """Reconstructed flow rate pi R^2 u_mean(t) the profile integrates to."""
        area = np.pi * self.cap.radius**2
        return area * self.waveform.mean_velocity(t)


def parabolic_profile(cap: Cap, u_max: float, r: np.ndarray) -> np.ndarray:
    """Parabolic velocity vectors u_max (1 - (r/R)^2) along the inward normal.

    Radii beyond the cap radius return zero vectors.
    """
    r = np.asarray(r, dtype=np.float64)
    x = r / cap.radius
    speed = np.where(x <= 1.0, u_max * (1.0 - x * x), 0.0)
    return speed[:, None] * (-cap.normal)[None, :]


def womersley_profile(
    cap: Cap, waveform: Waveform, nu: float, t: float, r: np.ndarray,
    inlet: WomersleyInlet | None = None,
) -> np.ndarray:
    """Pulsatile velocity vectors at radii r, directed along the inward normal."""
    if inlet is None:
        inlet = WomersleyInlet(cap, waveform, nu)
    speed = inlet.speed(np.asarray(r, dtype=np.float64), t)
    return speed[:, None] * (-cap.normal)[None, :]


@dataclass(frozen=True)
class BoundaryConditionSet:
    """Dirichlet data for one time instant plus the static node lists."""

    inlet_nodes: np.ndarray
    inlet_values: np.ndarray
    wall_nodes: np.ndarray
    outlet_nodes: np.ndarray
    t: float

    def apply(self, u: np.ndarray) -> None:
        """Impose the strong values on a nodal velocity array in place."""
        u[self.wall_nodes] = 0.0
        u[self.inlet_nodes] = self.inlet_values


class InletDriver:
    """Per-run cache of inlet profile machinery; evaluates BCs at any t."""

    def __init__(
        self,
        tags: BoundaryTags,
        caps: list[Cap],
        waveform: Waveform,
        nu: float,
        profile: str = "womersley",
    ):
        if profile not in ("womersley", "parabolic"):
            raise InflowError(f"unknown inlet profile {profile!r}")
        inlet_caps = [i for i, c in enumerate(caps) if c.role == "inlet"]
        if len(inlet_caps) != 1:
            raise InflowError(f"expected exactly one inlet cap, found {len(inlet_caps)}")
        self.cap = caps[inlet_caps[0]]
        self.tags = tags
        self.waveform = waveform
        self.profile = profile
        self.inlet_nodes = tags.inlet_nodes
        self.wall_nodes = tags.outer_wall_nodes
        self.outlet_nodes = tags.outlet_nodes
        r = tags.inlet_radius[self.inlet_nodes]
        if np.isnan(r).any():
            raise InflowError("inlet node without a radial coordinate (tagging bug)")
        over = r > self.cap.radius * (1.0 + 1e-9)
        if over.any():
            j = int(self.inlet_nodes[np.argmax(over)])
            raise InflowError(
                f"inlet node {j} lies at r = {r[over].max():.6e} m, outside "
                f"the cap disk R = {self.cap.radius:.6e} m"
            )
        self._radii = r
        self._womersley = (
            WomersleyInlet(self.cap, waveform, nu) if profile == "womersley" else None
        )

    def peak_mean_speed(self) -> float:
        t = np.linspace(0.0, self.waveform.period, 512, endpoint=False)
        return float(np.abs(self.waveform.mean_velocity(t)).max())

    def bcs_at(self, t: float) -> BoundaryConditionSet:
        if self.profile == "parabolic":
            u_max = 2.0 * float(self.waveform.mean_velocity(t))
            values = parabolic_profile(self.cap, u_max, self._radii)
        else:
            values = womersley_profile(
                self.cap, self.waveform, None, t, self._radii,
                inlet=self._womersley,
            )
        return BoundaryConditionSet(
            inlet_nodes=self.inlet_nodes,
            inlet_values=values,
            wall_nodes=self.wall_nodes,
            outlet_nodes=self.outlet_nodes,
            t=float(t),
        )


def assemble_bcs(
    tags: BoundaryTags,
    caps: list[Cap],
    waveform: Waveform,
    nu: float,
    t: float,
    profile: str = "womersley",
) -> BoundaryConditionSet:
    """One-shot Dirichlet assembly at time t (see InletDriver for runs)."""
    return InletDriver(tags, caps, waveform, nu, profile).bcs_at(t)
