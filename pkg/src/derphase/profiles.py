"""Synthetic residential load and PV production profiles.

These stand in for measured smart-meter and irradiance data. Both generators
are pure functions of their arguments and the supplied ``numpy`` Generator.
"""

from __future__ import annotations

import numpy as np

HOURS_PER_DAY = 24.0


def _time_axes(horizon: int, dt_hours: float, start_day: int) -> tuple[np.ndarray, np.ndarray]:
    hours = np.arange(horizon) * dt_hours
    day = start_day + np.floor(hours / HOURS_PER_DAY).astype(int)
    hour_of_day = np.mod(hours, HOURS_PER_DAY) + dt_hours / 2
    return day, hour_of_day


def _daily_shape(hour: np.ndarray) -> np.ndarray:
    return (
        0.45
        + 0.55 * np.exp(-0.5 * ((hour - 7.5) / 1.2) ** 2)
        + 0.25 * np.exp(-0.5 * ((hour - 13.0) / 2.0) ** 2)
        + 1.20 * np.exp(-0.5 * ((hour - 19.0) / 1.8) ** 2)
    )


def residential_load(
    horizon: int,
    dt_hours: float,
    start_day: int,
    rng: np.random.Generator,
    annual_kwh: float = 3500.0,
) -> np.ndarray:
    """Active power demand of one household in watts, shape ``(horizon,)``.

    Daily shape has a morning and an evening peak on top of a base load; winter
    days draw more than summer days. The yearly mean matches ``annual_kwh``.
    """
    day, hod = _time_axes(horizon, dt_hours, start_day)
    shape = _daily_shape(hod)
    mean_shape = float(np.mean(_daily_shape(np.arange(0.0, 24.0, 0.05))))
    seasonal = 1.0 + 0.25 * np.cos(2 * np.pi * (day - 15) / 365.0)
    n_days = int(day[-1] - day[0]) + 1 if horizon else 0
    daily_scale = rng.lognormal(0.0, 0.15, size=n_days)
    step_noise = rng.gamma(shape=8.0, scale=1 / 8.0, size=horizon)
    mean_w = annual_kwh * 1000.0 / 8760.0
    return mean_w * shape / mean_shape * seasonal * daily_scale[day - day[0]] * step_noise


def solar_elevation_sin(day: np.ndarray, hour: np.ndarray, latitude_deg: float) -> np.ndarray:
    """Sine of the solar elevation angle at solar time ``hour`` on day-of-year ``day``."""
    decl = np.deg2rad(23.44) * np.sin(2 * np.pi * (284 + day + 1) / 365.0)
    lat = np.deg2rad(latitude_deg)
    hour_angle = np.deg2rad(15.0 * (hour - 12.0))
    return np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)


def pv_profile(
    horizon: int,
    dt_hours: float,
    start_day: int,
    rng: np.random.Generator,
    latitude_deg: float = 50.6,
    clear_sky_peak: float = 0.9,
) -> np.ndarray:
    """Available PV output per unit of installed peak power, shape ``(horizon,)``.

    Values lie in ``[0, clear_sky_peak]``. A daily clearness index drawn from a
    Beta distribution scales a clear-sky curve; an AR(1) cloud term adds
    intra-day variability on partly cloudy days.
    """
    day, hod = _time_axes(horizon, dt_hours, start_day)
    elev = np.clip(solar_elevation_sin(day, hod, latitude_deg), 0.0, None)
    clear = clear_sky_peak * elev ** 1.15
    n_days = int(day[-1] - day[0]) + 1 if horizon else 0
    summer = 0.5 + 0.5 * np.cos(2 * np.pi * (np.arange(n_days) + day[0] - 172) / 365.0)
    clearness = rng.beta(2.0 + 4.0 * summer, 2.0, size=n_days)
    cloud = np.empty(horizon)
    state = 0.0
    shocks = rng.normal(0.0, 1.0, size=horizon)
    for t in range(horizon):
        state = 0.85 * state + 0.35 * shocks[t]
        cloud[t] = state
    k = clearness[day - day[0]]
    factor = np.clip(k + (1.0 - k) * 0.5 * cloud, 0.05, 1.0)
    return np.clip(clear * factor, 0.0, clear_sky_peak)
