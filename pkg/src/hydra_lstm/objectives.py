"""Quantile losses, the climatology baseline and forecast scores.

Conventions:

* ``L_tau(y, yhat) = (tau - 1)(y - yhat)`` when ``y < yhat`` and
  ``tau (y - yhat)`` otherwise; ties take the second branch.
* The cumulative loss averages the 0.1, 0.5 and 0.9 losses with equal weight.
* CQES = 1 - mean(L_tot) / mean(L_clim) over the scored dates, with the
  climatology loss computed from per-calendar-day empirical quantiles.
* Coverage of a threshold is the fraction of observations strictly above it,
  so a calibrated q10 is exceeded about 90% of the time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

QUANTILES = (0.1, 0.5, 0.9)


class InvalidDataError(ValueError):
    pass


class UndefinedScoreError(ArithmeticError):
    pass


class EmptySeriesError(ValueError):
    pass


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie strictly between 0 and 1, got {tau}")
    return tau


def _finite(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if np.isnan(a).any():
            raise InvalidDataError("NaN in quantile loss input")
        out.append(a)
    return out


def quantile_loss(tau: float, y, y_hat):
    """Pinball loss; elementwise over arrays, a float for scalar inputs."""
    tau = _check_tau(tau)
    y, y_hat = _finite(y, y_hat)
    diff = y - y_hat
    loss = np.where(diff < 0, (tau - 1.0) * diff, tau * diff)
    return float(loss) if loss.ndim == 0 else loss


def cumulative_quantile_loss(y, forecast):
    """Equal-weight mean of the 0.1/0.5/0.9 losses.

    ``forecast`` holds (q10, q50, q90) along its last axis.
    """
    y, forecast = _finite(y, forecast)
    if forecast.shape[-1] != 3:
        raise ValueError(f"forecast must have 3 quantiles on its last axis, got {forecast.shape}")
    total = sum(quantile_loss(tau, y, forecast[..., k]) for k, tau in enumerate(QUANTILES))
    out = np.asarray(total) / 3.0
    return float(out) if out.ndim == 0 else out


def quantile_loss_tensor(predictions: Tensor, targets: np.ndarray) -> Tensor:
    """Batch-mean cumulative quantile loss as a differentiable scalar.

    ``predictions`` is ``(B, 3)``; ``targets`` is ``(B,)`` and constant.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.data.ndim != 2 or predictions.shape != (targets.shape[0], 3):
        raise ad.DimensionError(
            f"predictions {predictions.shape} do not match targets {targets.shape}"
        )
    diff = ad.sub(Tensor(np.repeat(targets[:, None], 3, axis=1)), predictions)
    taus = Tensor(np.array(QUANTILES))
    under = ad.mul(ad.relu(diff), taus)
    over = ad.mul(ad.relu(ad.mul(diff, -1.0)), Tensor(1.0 - np.array(QUANTILES)))
    # mean over B*3 entries equals the batch mean of the 1/3-weighted sum
    return ad.mean(ad.add(under, over))


def empirical_quantile(values, tau: float) -> float:
    """Sorted-order linear interpolation (numpy's default estimator)."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), _check_tau(tau)))


def day_of_year(dates) -> np.ndarray:
    """0-based calendar day on a 365-day calendar; 29 February maps onto 28 February."""
    d = np.asarray(dates, dtype="datetime64[D]")
    months = d.astype("datetime64[M]")
    day = (d - months).astype(int)
    month = months.astype(int) % 12
    starts = np.array([0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334])
    doy = starts[month] + day
    leap_day = (month == 1) & (day == 28)
    return np.where(leap_day, 58, doy)


@dataclass
class Climatology:
    """Per-catchment, per-calendar-day empirical quantiles."""

    taus: tuple[float, ...]
    table: dict[str, np.ndarray]  # catchment -> (365, len(taus))
    filled_days: dict[str, list[int]] = field(default_factory=dict)

    def predict(self, catchment_id: str, dates) -> np.ndarray:
        if catchment_id not in self.table:
            raise KeyError(f"no climatology for catchment {catchment_id!r}")
        return self.table[catchment_id][day_of_year(dates)]


def climatology_fit(
    training_observations: Mapping[str, tuple[Sequence, Sequence]],
    taus: Sequence[float] = QUANTILES,
) -> Climatology:
    """Fit calendar-day quantiles from ``{catchment: (dates, values)}``.

    Days with no observations borrow the quantiles of the nearest observed
    calendar day (circular distance); borrowed days are listed in
    ``filled_days``.
    """
    taus = tuple(_check_tau(t) for t in taus)
    table, filled = {}, {}
    for cid, (dates, values) in training_observations.items():
        dates = np.asarray(dates, dtype="datetime64[D]")
        values = np.asarray(values, dtype=np.float64)
        ok = ~np.isnan(values)
        dates, values = dates[ok], values[ok]
        years = np.unique(dates.astype("datetime64[Y]"))
        if len(years) < 2:
            raise InvalidDataError(
                f"catchment {cid!r}: climatology needs at least 2 training years, got {len(years)}"
            )
        doy = day_of_year(dates)
        q = np.full((365, len(taus)), np.nan)
        for d in np.unique(doy):
            q[d] = np.quantile(values[doy == d], taus)
        have = np.flatnonzero(~np.isnan(q[:, 0]))
        missing = [int(d) for d in np.flatnonzero(np.isnan(q[:, 0]))]
        for d in missing:
            dist = np.abs(have - d)
            dist = np.minimum(dist, 365 - dist)
            q[d] = q[have[np.argmin(dist)]]
        table[cid] = q
        if missing:
            filled[cid] = missing
    return Climatology(taus, table, filled)


def cqes(observations, forecasts, climatology_forecasts) -> float:
    """1 - mean(L_tot(model)) / mean(L_tot(climatology)) over aligned dates."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.size == 0:
        raise EmptySeriesError("CQES needs at least one observation")
    l_model = float(np.mean(cumulative_quantile_loss(obs, forecasts)))
    l_clim = float(np.mean(cumulative_quantile_loss(obs, climatology_forecasts)))
    if l_clim == 0.0:
        raise UndefinedScoreError("climatology loss is zero; CQES is undefined")
    return 1.0 - l_model / l_clim


def empirical_coverage(observations, thresholds) -> float:
    """Fraction of observations strictly greater than their threshold."""
    obs = np.asarray(observations, dtype=np.float64)
    thr = np.asarray(thresholds, dtype=np.float64)
    if obs.size == 0:
        raise EmptySeriesError("coverage of an empty series is undefined")
    thr = np.broadcast_to(thr, obs.shape)
    return float(np.mean(obs > thr))


def crossing_fraction(forecasts) -> float:
    """Share of forecasts whose quantiles are out of order (q10 > q50 or q50 > q90)."""
    f = np.asarray(forecasts, dtype=np.float64)
    if f.shape[0] == 0:
        return 0.0
    return float(np.mean((f[:, 0] > f[:, 1]) | (f[:, 1] > f[:, 2])))
