"""Spectral characterization of trapped-particle trajectories.

The chain is: averaged periodogram of a channel, a damped-oscillator fit
around its dominant peak, a linear regression of the fitted damping against
pressure, and a sphere/anisotropic verdict built from two independent
signatures (a torsional resonance and the spread of CoM damping rates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, optimize, signal

from .errors import DomainError, InsufficientDataError, MissingChannelError, NoPeakError

PEAK_THRESHOLD_DB = 6.0
RATIO_THRESHOLD = 0.15
# fit window half-width, in initial-guess linewidths, and its floor in bins
FIT_HALF_WIDTHS = 8.0
MIN_FIT_BINS = 24
REWEIGHT_PASSES = 3
SMOOTH_BINS = 9
# spectral images on each side folded in when the sample rate is known; the
# position spectrum falls as f^-4, so farther images are below 1e-6 of the nearest
ALIAS_IMAGES = 8


@dataclass(frozen=True)
class PSDEstimate:
    frequencies: np.ndarray  # Hz
    power: np.ndarray  # channel units^2 / Hz
    segment_count: int
    resolution: float  # Hz
    channel: str = ""
    variance: float = float("nan")  # of the mean-removed input
    # mean over segments of the window-weighted variance about the segment mean,
    # the quantity the density integrates to exactly
    windowed_variance: float = float("nan")
    # equivalent number of independent averages, and the variance inflation
    # of smooth-model parameters from window-induced correlation of adjacent bins
    effective_segments: float = float("nan")
    bin_correlation: float = 1.0
    # of the sampled record; infinite for a continuous-time spectrum
    sample_rate: float = math.inf

    def __post_init__(self):
        if np.any(np.diff(self.frequencies) <= 0):
            raise DomainError("frequencies must be strictly increasing")

    @property
    def integral(self) -> float:
        """Total power, the rectangle rule over the one-sided bins."""
        return float(np.sum(self.power) * self.resolution)

    @property
    def parseval_error(self) -> float:
        """Relative mismatch between integrated PSD and windowed segment variance.

        This checks the density normalization and is exact up to rounding.
        The raw record ``variance`` differs from the integral by sampling
        scatter of order ``sqrt(2 / (gamma T))`` for a resonance of damping gamma.
        """
        ref = self.windowed_variance if np.isfinite(self.windowed_variance) else self.variance
        if not ref > 0:
            return 0.0 if self.integral == 0 else math.inf
        return abs(self.integral - ref) / ref

    def band(self, lo: float, hi: float) -> np.ndarray:
        return (self.frequencies >= lo) & (self.frequencies <= hi)


@dataclass(frozen=True)
class LorentzianFit:
    """Damped-oscillator spectrum ``A gamma / ((w0^2 - w^2)^2 + gamma^2 w^2) + floor``."""

    center_frequency: float  # Hz, f0 = w0 / 2 pi
    damping: float  # rad/s
    amplitude: float  # A, channel^2 s^-3 / Hz
    noise_floor: float  # channel^2 / Hz
    covariance: np.ndarray  # over (f0, gamma, A, floor)
    goodness: float  # reduced chi-square
    band: tuple[float, float] = (0.0, 0.0)
    peak_db: float = float("nan")  # peak height over the median spectrum level

    @property
    def center_error(self) -> float:
        return float(math.sqrt(max(self.covariance[0, 0], 0.0)))

    @property
    def damping_error(self) -> float:
        return float(math.sqrt(max(self.covariance[1, 1], 0.0)))

    @property
    def angular_frequency(self) -> float:
        return 2 * math.pi * self.center_frequency

    def __call__(self, f) -> np.ndarray:
        return lorentzian(f, self.center_frequency, self.damping, self.amplitude, self.noise_floor)


@dataclass(frozen=True)
class DampingRegression:
    slope: float  # rad/s per Pa
    intercept: float  # rad/s
    slope_error: float
    intercept_error: float
    r_squared: float
    reduced_chi2: float
    pressures: np.ndarray
    dampings: np.ndarray

    @property
    def intercept_sigmas(self) -> float:
        """|intercept| in units of its standard error."""
        if self.intercept_error == 0:
            return 0.0 if self.intercept == 0 else math.inf
        return abs(self.intercept) / self.intercept_error


@dataclass(frozen=True)
class ShapeReport:
    torsional_detected: bool
    gamma_ratios: tuple[float, float]  # (gamma_y / gamma_x, gamma_z / gamma_x)
    verdict: str  # "spherical" | "anisotropic"
    criteria_agree: bool
    confidence: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "torsional_detected": self.torsional_detected,
            "gamma_ratios": list(self.gamma_ratios),
            "criteria_agree": self.criteria_agree,
            "confidence": self.confidence,
        }


def lorentzian(f, f0: float, gamma: float, amplitude: float, floor: float = 0.0) -> np.ndarray:
    w = 2 * np.pi * np.asarray(f, dtype=float)
    w0 = 2 * np.pi * f0
    return amplitude * gamma / ((w0**2 - w**2) ** 2 + gamma**2 * w**2) + floor


def default_segment_length(n: int) -> int:
    """Largest power of two not above n / 8 (at least 256, at most n)."""
    if n < 1:
        raise InsufficientDataError("empty channel")
    target = max(n // 8, 256)
    return min(n, 1 << int(math.floor(math.log2(target))))


def _channel(trajectory, channel: str) -> np.ndarray:
    try:
        data = trajectory.channels[channel]
    except KeyError:
        raise MissingChannelError(f"trajectory has no channel {channel!r}; "
                                  f"available: {sorted(trajectory.channels)}") from None
    return np.asarray(data, dtype=float)


def estimate_psd(trajectory, channel: str = "x", segment_length: int | None = None,
                 overlap: float = 0.5) -> PSDEstimate:
    """Hann-windowed averaged periodogram, one-sided density.

    Segment means are removed, so the integral of the estimate matches the
    sample variance of a stationary channel.
    """
    data = _channel(trajectory, channel)
    return psd_of(data, trajectory.sample_rate, segment_length, overlap, channel)


def psd_of(data, sample_rate: float, segment_length: int | None = None, overlap: float = 0.5,
           channel: str = "") -> PSDEstimate:
    data = np.asarray(data, dtype=float)
    n = data.size
    if segment_length is None:
        segment_length = default_segment_length(n)
    if not 2 <= segment_length <= n:
        raise InsufficientDataError(f"segment length {segment_length} needs 2 <= L <= {n} samples")
    if not 0 <= overlap <= 0.9:
        raise DomainError("overlap must lie in [0, 0.9]")
    noverlap = int(round(overlap * segment_length))
    f, p = signal.welch(data, fs=sample_rate, window="hann", nperseg=segment_length,
                        noverlap=noverlap, detrend="constant", scaling="density")
    step = segment_length - noverlap
    count = 1 + (n - segment_length) // step
    k_eff, inflation = _window_statistics(segment_length, step, count)
    # the DC bin is kept: a Hann-weighted segment minus its plain mean leaves some power there
    w = signal.get_window("hann", segment_length)
    segs = np.lib.stride_tricks.sliding_window_view(data, segment_length)[::step][:count]
    dev = (segs - segs.mean(axis=1, keepdims=True)) * w
    windowed = float(np.mean(np.sum(dev * dev, axis=1)) / np.sum(w * w))
    return PSDEstimate(f, p, count, sample_rate / segment_length, channel,
                       float(np.var(data)), windowed, k_eff, inflation, float(sample_rate))


def _window_statistics(length: int, step: int, count: int) -> tuple[float, float]:
    """Effective averages of overlapped Hann segments and the adjacent-bin inflation.

    Overlap: Welch's variance factor ``1 + 2 sum_j (1 - j/K) c_j^2`` with c_j
    the window overlap correlation at a shift of j segments. Bin
    correlation: ``sum_k rho_k`` over frequency lags, with rho_k the squared
    normalized DFT of w^2 (4/9 at one bin for Hann), which is how much the
    covariance of a smooth fitted model grows over the independent-bin value.
    """
    w = signal.get_window("hann", length)
    w2 = w * w
    norm = w2.sum()
    factor = 1.0
    j = 1
    while j < count and j * step < length:
        c = np.dot(w[j * step:], w[:length - j * step]) / norm
        factor += 2.0 * (1.0 - j / count) * c * c
        j += 1
    spec = np.abs(np.fft.rfft(w2)) ** 2
    rho = spec / spec[0]
    inflation = 1.0 + 2.0 * float(np.sum(rho[1:][rho[1:] > 1e-12]))
    return count / factor, inflation


def _images(u, shifts):
    """Frequencies of every spectral image folding onto ``u``, shape (images, bins)."""
    return u[None, :] + np.asarray(shifts)[:, None]


def _model(u, a, u0, g, b, shifts=(0.0,)):
    v = _images(u, shifts)
    d = (u0 * u0 - v * v) ** 2 + g * g * v * v
    return a * g * np.sum(1.0 / d, axis=0) + b, d


def _jacobian(u, a, u0, g, shifts=(0.0,)):
    v = _images(u, shifts)
    d = (u0 * u0 - v * v) ** 2 + g * g * v * v
    jac = np.empty((u.size, 4))
    jac[:, 0] = np.sum(g / d, axis=0)
    jac[:, 1] = np.sum(-a * g / d**2 * 4.0 * u0 * (u0 * u0 - v * v), axis=0)
    jac[:, 2] = np.sum(a / d - 2.0 * a * g * g * v * v / d**2, axis=0)
    jac[:, 3] = 1.0
    return jac


def _median_level(psd: PSDEstimate) -> float:
    return float(np.median(psd.power))


def _find_peak(psd: PSDEstimate, search_band, threshold_db: float) -> tuple[int, float]:
    lo, hi = search_band if search_band is not None else (2.5 * psd.resolution, psd.frequencies[-1])
    mask = psd.band(lo, hi)
    if not mask.any():
        raise DomainError(f"search band {lo:g}-{hi:g} Hz holds no frequency bins")
    idx = np.flatnonzero(mask)
    k = int(idx[np.argmax(psd.power[idx])])
    peak = psd.power[k]
    level = _median_level(psd)
    if not peak > 0:
        raise NoPeakError("spectrum is identically zero")
    ratio_db = math.inf if level <= 0 else 10 * math.log10(peak / level)
    if ratio_db < threshold_db:
        raise NoPeakError(f"highest bin is {ratio_db:.1f} dB above the median, "
                          f"below the {threshold_db:g} dB threshold")
    if k == idx[0] or k == idx[-1]:
        raise NoPeakError("maximum sits on the edge of the search band, not a local peak")
    return k, ratio_db


def _half_width(f, p, k: int, resolution: float) -> float:
    """Full width at half maximum around bin k, interpolated, in Hz."""
    half = 0.5 * p[k]
    i = k
    while i > 0 and p[i] > half:
        i -= 1
    j = k
    while j < p.size - 1 and p[j] > half:
        j += 1

    def cross(a, b):
        if p[a] == p[b]:
            return f[a]
        return f[a] + (half - p[a]) * (f[b] - f[a]) / (p[b] - p[a])

    width = cross(j - 1, j) - cross(i, i + 1) if j > k and i < k else 0.0
    return max(width, resolution)


def _least_squares(u, y, p0, sigma, exact: bool, segments: int, shifts):
    result = None
    for _ in range(1 if exact else REWEIGHT_PASSES):
        def resid(p, sigma=sigma):
            return (_model(u, *p, shifts)[0] - y) / sigma

        def jac(p, sigma=sigma):
            return _jacobian(u, p[0], p[1], p[2], shifts) / sigma[:, None]

        result = optimize.least_squares(resid, p0, jac=jac, method="lm",
                                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        p0 = result.x
        if not exact:
            model = _model(u, *p0, shifts)[0]
            if np.any(model <= 0):
                break
            sigma = model / math.sqrt(segments)
    return result.x, sigma


def fit_lorentzian(psd: PSDEstimate, search_band: tuple[float, float] | None = None,
                   threshold_db: float = PEAK_THRESHOLD_DB, fit_band: tuple[float, float] | None = None,
                   exact: bool = False) -> LorentzianFit:
    """Weighted damped-oscillator fit around the strongest peak in ``search_band``.

    Bins are weighted by ``model / sqrt(K)`` with K the number of averaged
    segments, iterated so the weights come from the fitted model rather
    than the noisy data. Starting values come from the peak and half-width
    of a lightly smoothed spectrum; unless ``fit_band`` is given, the window
    is then re-centred on the first fit and spans a fixed number of fitted
    linewidths. ``exact=True`` fits noise-free model spectra with uniform
    relative weights. Raises :class:`NoPeakError` when the strongest bin is
    less than ``threshold_db`` above the median level.

    When the estimate carries a finite ``sample_rate`` the model includes
    the spectral images folded in by sampling, so broad peaks near the
    Nyquist frequency are not biased; the returned parameters always
    describe the continuous-time spectrum.
    """
    k, peak_db = _find_peak(psd, search_band, threshold_db)
    f = psd.frequencies
    segments = psd.effective_segments if psd.effective_segments > 0 else max(psd.segment_count, 1)
    smooth = psd.power if exact else ndimage.uniform_filter1d(psd.power, SMOOTH_BINS, mode="nearest")
    lo_k = max(k - SMOOTH_BINS, 0)
    k = lo_k + int(np.argmax(smooth[lo_k:k + SMOOTH_BINS + 1]))
    fc = float(f[k])
    scale = float(smooth[k])
    fwhm = _half_width(f, smooth, k, psd.resolution)
    g0 = fwhm / fc
    # a point-sampled record sees S(f + k fs) summed over k; the model does the same
    if math.isfinite(psd.sample_rate):
        shifts = np.arange(-ALIAS_IMAGES, ALIAS_IMAGES + 1) * (psd.sample_rate / fc)
    else:
        shifts = np.zeros(1)

    def window(center, width):
        span = max(FIT_HALF_WIDTHS * width, MIN_FIT_BINS * psd.resolution)
        return (max(center - span, psd.resolution), center + span)

    band = fit_band if fit_band is not None else window(fc, fwhm)
    p0 = None
    for attempt in range(1 if fit_band is not None or exact else 2):
        mask = psd.band(*band)
        if mask.sum() < 6:
            raise InsufficientDataError("fit band holds fewer than 6 bins")
        u = f[mask] / fc
        y = psd.power[mask] / scale
        if p0 is None:
            edge = float(min(y[0], y[-1]))
            # the peak of a g / D at u0 is a / (g u0^2)
            p0 = np.array([(1.0 - edge) * g0, 1.0, g0, max(edge * 0.5, 0.0)])
        sigma = y.copy() if exact else _model(u, *p0, shifts)[0] / math.sqrt(segments)
        if np.any(sigma <= 0):
            sigma = np.maximum(y, np.max(y) * 1e-12) / math.sqrt(segments)
        x, sigma = _least_squares(u, y, p0, sigma, exact, segments, shifts)
        p0 = x
        band = window(abs(x[1]) * fc, abs(x[2]) * fc)
    used_band = psd.frequencies[mask][[0, -1]]

    a, u0, g, b = p0
    # the model depends on (a g) and u0^2 only through these combinations
    if g < 0:
        a, g = -a, -g
    u0 = abs(u0)
    if not (g > 0 and u0 > 0 and a > 0 and np.isfinite(p0).all()):
        raise NoPeakError("fit did not converge to a resonance")

    jac = _jacobian(u, a, u0, g, shifts) / sigma[:, None]
    dof = max(u.size - 4, 1)
    chi2 = float(np.sum(((_model(u, a, u0, g, b, shifts)[0] - y) / sigma) ** 2))
    try:
        cov = np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((4, 4), np.inf)
    if not exact:
        cov = cov * max(chi2 / dof, 1.0) * psd.bin_correlation

    wc = 2 * math.pi * fc
    # physical = T @ (a, u0, g, b) reordered to (f0, gamma, A, floor)
    transform = np.zeros((4, 4))
    transform[0, 1] = fc
    transform[1, 2] = wc
    transform[2, 0] = scale * wc**3
    transform[3, 3] = scale
    cov_phys = transform @ cov @ transform.T
    return LorentzianFit(
        center_frequency=u0 * fc,
        damping=g * wc,
        amplitude=a * scale * wc**3,
        noise_floor=b * scale,
        covariance=cov_phys,
        goodness=chi2 / dof,
        band=(float(used_band[0]), float(used_band[1])),
        peak_db=peak_db,
    )


def damping_vs_pressure(fits: Iterable, absolute_sigma: bool = True) -> DampingRegression:
    """Weighted straight-line fit of damping against pressure.

    ``fits`` holds ``(pressure, LorentzianFit)`` or ``(pressure, gamma[, sigma])``
    entries. When every point carries a positive error the weights are
    inverse variances and, with ``absolute_sigma``, those errors are taken
    at face value; otherwise weights are uniform and parameter errors are
    scaled by the residual scatter.
    """
    p, y, s = [], [], []
    for item in fits:
        pressure, value = item[0], item[1]
        if isinstance(value, LorentzianFit):
            y.append(value.damping)
            s.append(value.damping_error)
        else:
            y.append(float(value))
            s.append(float(item[2]) if len(item) > 2 else 0.0)
        p.append(float(pressure))
    p, y, s = np.array(p), np.array(y), np.array(s)
    if np.unique(p).size < 3:
        raise InsufficientDataError(f"need >= 3 distinct pressures, got {np.unique(p).size}")
    weighted = bool(np.all(np.isfinite(s) & (s > 0)))
    w = 1.0 / s**2 if weighted else np.ones_like(p)
    design = np.column_stack([p, np.ones_like(p)])
    normal = design.T @ (design * w[:, None])
    coef = np.linalg.solve(normal, design.T @ (w * y))
    resid = y - design @ coef
    dof = p.size - 2
    chi2_red = float(np.sum(w * resid**2) / dof) if dof > 0 else 0.0
    cov = np.linalg.inv(normal)
    if not (weighted and absolute_sigma):
        cov = cov * chi2_red
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return DampingRegression(
        slope=float(coef[0]), intercept=float(coef[1]),
        slope_error=float(math.sqrt(max(cov[0, 0], 0.0))),
        intercept_error=float(math.sqrt(max(cov[1, 1], 0.0))),
        r_squared=r2, reduced_chi2=chi2_red, pressures=p, dampings=y)


def _pressure(trajectory) -> float:
    return float(trajectory.metadata["pressure_pa"])


def detect_torsion(trajectory, threshold_db: float = PEAK_THRESHOLD_DB,
                   segment_length: int | None = None) -> LorentzianFit | None:
    """Fitted torsional resonance, or None when no peak clears the threshold."""
    psd = estimate_psd(trajectory, "torsion", segment_length)
    try:
        return fit_lorentzian(psd, threshold_db=threshold_db)
    except NoPeakError:
        return None


def classify_shape(trajectories: Sequence, ratio_threshold: float = RATIO_THRESHOLD,
                   threshold_db: float = PEAK_THRESHOLD_DB,
                   segment_length: int | None = None) -> ShapeReport:
    """Sphere or anisotropic, from trajectories at three or more pressures.

    Two signatures are computed independently: whether any pressure shows a
    torsional peak, and whether the CoM damping rates along y and z differ
    from the one along x by more than ``ratio_threshold``. Each pressure
    gives its own ratios, combined by inverse variance. The verdict is
    spherical only when neither signature fires; ``criteria_agree`` records
    whether they tell the same story.
    """
    trajectories = list(trajectories)
    pressures = [_pressure(t) for t in trajectories]
    if len(set(pressures)) < 3:
        raise InsufficientDataError(f"need trajectories at >= 3 distinct pressures, got {len(set(pressures))}")
    for t in trajectories:
        pol = t.metadata.get("polarization", "linear_x")
        if pol != "linear_x":
            raise DomainError(f"shape classification needs linear_x polarization, got {pol}")
        _channel(t, "torsion")

    fits = {axis: [] for axis in "xyz"}
    for t in trajectories:
        for axis in "xyz":
            fit = fit_lorentzian(estimate_psd(t, axis, segment_length), threshold_db=threshold_db)
            fits[axis].append((_pressure(t), fit))
    reg = {axis: damping_vs_pressure(fits[axis]) for axis in "xyz"}
    # in the free-molecular regime every gamma is proportional to p, so each
    # pressure gives an independent estimate of the same ratio
    ratios, ratio_errors = [], []
    for axis in "yz":
        r = np.array([fa.damping / fx.damping for (_, fa), (_, fx) in zip(fits[axis], fits["x"])])
        rel = np.array([math.hypot(fa.damping_error / fa.damping, fx.damping_error / fx.damping)
                        for (_, fa), (_, fx) in zip(fits[axis], fits["x"])])
        w = 1.0 / (r * rel) ** 2
        ratios.append(float(np.sum(w * r) / np.sum(w)))
        ratio_errors.append(float(1.0 / math.sqrt(np.sum(w))))
    ratios_anisotropic = any(abs(r - 1.0) > ratio_threshold for r in ratios)

    torsion = [detect_torsion(t, threshold_db, segment_length) for t in trajectories]
    found = [f for f in torsion if f is not None]
    torsional = bool(found)

    verdict = "anisotropic" if (torsional or ratios_anisotropic) else "spherical"
    confidence = {
        "gamma_ratio_errors": [float(e) for e in ratio_errors],
        "ratio_threshold": ratio_threshold,
        "damping_slopes": {a: reg[a].slope for a in "xyz"},
        "damping_r_squared": {a: reg[a].r_squared for a in "xyz"},
        "trap_frequencies_hz": {a: float(np.mean([f.center_frequency for _, f in fits[a]])) for a in "xyz"},
        "torsion_pressures_detected": int(len(found)),
        "torsion_peak_db": max((f.peak_db for f in found), default=None),
        "torsion_frequency_hz": float(np.mean([f.center_frequency for f in found])) if found else None,
        "ratios_anisotropic": ratios_anisotropic,
    }
    return ShapeReport(torsional, (float(ratios[0]), float(ratios[1])), verdict,
                       torsional == ratios_anisotropic, confidence)
