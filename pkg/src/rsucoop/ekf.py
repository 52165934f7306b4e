"""Planar EKF fusing onboard and roadside pose measurements.

State is (x, y, yaw, v, omega) with a constant speed / turn-rate motion
model. Late measurements are applied at their sensing time from a snapshot
history and the filter is replayed forward. Smoothed measurements are split
into ``smooth_steps`` partial updates, each with covariance scaled by the
number of steps, applied on consecutive predict ticks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import PoseMeasurement, covariance_matrix, normalize_yaw

log = logging.getLogger(__name__)

N_STATE = 5
IX, IY, IYAW, IV, IW = range(N_STATE)

# Planar state index for each 6-DoF measurement axis; z, roll and pitch are not carried.
_AXIS_TO_STATE = (IX, IY, None, None, None, IYAW)


class FilterFault(RuntimeError):
    """Posterior covariance lost positive definiteness."""


@dataclass(frozen=True)
class EkfConfig:
    predict_rate: float = 50.0
    process_noise: tuple = (0.05, 0.05, 0.01, 0.5, 0.1)  # per sqrt(s)
    history_horizon: float = 1.0
    smooth_steps: int = 4
    initial_std: tuple = (0.1, 0.1, 0.05, 0.5, 0.1)

    def __post_init__(self):
        if not self.predict_rate > 0:
            raise ValueError("predict_rate must be > 0")
        if len(self.process_noise) != N_STATE or any(q < 0 for q in self.process_noise):
            raise ValueError("process_noise needs 5 non-negative entries")
        if len(self.initial_std) != N_STATE or any(q <= 0 for q in self.initial_std):
            raise ValueError("initial_std needs 5 positive entries")
        if not self.history_horizon >= 0:
            raise ValueError("history_horizon must be >= 0")
        if int(self.smooth_steps) != self.smooth_steps or self.smooth_steps < 1:
            raise ValueError("smooth_steps must be an integer >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.predict_rate


@dataclass(frozen=True)
class EkfState:
    t: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float)
        m[IYAW] = normalize_yaw(m[IYAW])
        P = np.array(self.cov, dtype=float)
        m.flags.writeable = False
        P.flags.writeable = False
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", P)


def motion(mean: np.ndarray, dt: float) -> np.ndarray:
    x, y, yaw, v, w = mean
    out = np.array([x + v * math.cos(yaw) * dt, y + v * math.sin(yaw) * dt, yaw + w * dt, v, w])
    out[IYAW] = normalize_yaw(out[IYAW])
    return out


def motion_jacobian(mean: np.ndarray, dt: float) -> np.ndarray:
    _, _, yaw, v, _ = mean
    c, s = math.cos(yaw), math.sin(yaw)
    F = np.eye(N_STATE)
    F[IX, IYAW] = -v * s * dt
    F[IX, IV] = c * dt
    F[IY, IYAW] = v * c * dt
    F[IY, IV] = s * dt
    F[IYAW, IW] = dt
    return F


def process_noise(dt: float, cfg: EkfConfig) -> np.ndarray:
    return np.diag(np.square(cfg.process_noise) * dt)


def predict(state: EkfState, dt: float, cfg: EkfConfig) -> EkfState:
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    F = motion_jacobian(state.mean, dt)
    P = F @ state.cov @ F.T + process_noise(dt, cfg)
    return EkfState(state.t + dt, motion(state.mean, dt), 0.5 * (P + P.T))


def observation(meas: PoseMeasurement):
    """(z, state indices, R) for the axes the planar filter can use."""
    R6, mask = covariance_matrix(meas.cov)
    sig2 = np.diag(R6)
    values = (meas.pose.x, meas.pose.y, None, None, None, meas.pose.yaw)
    z, idx, r = [], [], []
    k = 0
    for axis in range(6):
        if not mask[axis]:
            continue
        si = _AXIS_TO_STATE[axis]
        if si is not None:
            z.append(values[axis])
            idx.append(si)
            r.append(sig2[k])
        k += 1
    return np.array(z), idx, np.diag(r)


def update(state: EkfState, meas: PoseMeasurement, cfg: Optional[EkfConfig] = None,
           r_scale: float = 1.0) -> EkfState:
    """Kalman update on the observed axes; yaw innovation wrapped."""
    z, idx, R = observation(meas)
    if not idx:
        raise ValueError("measurement observes no planar state")
    n = len(idx)
    H = np.zeros((n, N_STATE))
    H[np.arange(n), idx] = 1.0
    P = state.cov
    innov = z - state.mean[idx]
    for j, si in enumerate(idx):
        if si == IYAW:
            innov[j] = normalize_yaw(innov[j])
    Rs = R * r_scale
    S = H @ P @ H.T + Rs
    K = np.linalg.solve(S, H @ P).T
    mean = state.mean + K @ innov
    A = np.eye(N_STATE) - K @ H
    P_post = A @ P @ A.T + K @ Rs @ K.T
    P_post = 0.5 * (P_post + P_post.T)
    try:
        np.linalg.cholesky(P_post)
    except np.linalg.LinAlgError:
        raise FilterFault(f"posterior covariance not SPD at t={state.t}") from None
    return EkfState(state.t, mean, P_post)


def update_smooth(state: EkfState, meas: PoseMeasurement, cfg: EkfConfig,
                  dt: Optional[float] = None) -> list:
    """Split one measurement into ``cfg.smooth_steps`` partial updates.

    Returns the state after each partial update. With ``dt`` a prediction of
    that length runs between partial updates; without it the state is held.
    """
    k = int(cfg.smooth_steps)
    out = []
    for i in range(k):
        if i and dt is not None:
            state = predict(state, dt, cfg)
        state = update(state, meas, cfg, r_scale=k)
        out.append(state)
    return out


@dataclass
class _Snapshot:
    tick: int
    prior: EkfState
    applied: list = field(default_factory=list)  # (stamp, seq, meas, r_scale)
    post: Optional[EkfState] = None

    def settle(self, cfg: EkfConfig) -> None:
        s = self.prior
        for _, _, meas, scale in self.applied:
            s = update(s, meas, cfg, r_scale=scale)
        self.post = s


class FusionFilter:
    """Tick-driven EKF with a snapshot history for late measurements."""

    def __init__(self, cfg: EkfConfig, initial: EkfState):
        self.cfg = cfg
        tick = int(round(initial.t * cfg.predict_rate))
        snap = _Snapshot(tick, initial)
        snap.post = initial
        self._history = [snap]
        self._keep = int(math.ceil(cfg.history_horizon * cfg.predict_rate - 1e-9)) + 1
        self._pending: list = []  # [meas, remaining partial updates]
        self._seq = 0
        self.rejected = 0

    @classmethod
    def from_measurement(cls, cfg: EkfConfig, meas: PoseMeasurement, speed: float = 0.0) -> "FusionFilter":
        mean = np.array([meas.pose.x, meas.pose.y, meas.pose.yaw, speed, 0.0])
        cov = np.diag(np.square(cfg.initial_std))
        return cls(cfg, EkfState(meas.stamp, mean, cov))

    @property
    def state(self) -> EkfState:
        return self._history[-1].post

    @property
    def tick(self) -> int:
        return self._history[-1].tick

    def _time(self, tick: int) -> float:
        return tick / self.cfg.predict_rate

    def advance(self) -> EkfState:
        """Predict one tick ahead, then apply due partial updates."""
        last = self._history[-1]
        tick = last.tick + 1
        prior = predict(last.post, self.cfg.dt, self.cfg)
        prior = EkfState(self._time(tick), prior.mean, prior.cov)
        snap = _Snapshot(tick, prior)
        snap.post = prior
        self._history.append(snap)
        if len(self._history) > self._keep:
            del self._history[: len(self._history) - self._keep]
        pending, self._pending = self._pending, []
        for item in pending:
            meas, remaining = item
            self.update_delayed(meas, r_scale=self.cfg.smooth_steps)
            if remaining > 1:
                self._pending.append([meas, remaining - 1])
        return self.state

    def update_delayed(self, meas: PoseMeasurement, r_scale: float = 1.0) -> bool:
        """Apply ``meas`` at the snapshot nearest its stamp and replay to now.

        Returns False (and counts a rejection) when the stamp is older than
        the history horizon.
        """
        now = self._time(self.tick)
        age = now - meas.stamp
        oldest = self._history[0].tick
        target = int(round(meas.stamp * self.cfg.predict_rate))
        if age > self.cfg.history_horizon + 1e-9 or target < oldest:
            self.rejected += 1
            log.debug("rejected measurement stamped %.3f at %.3f", meas.stamp, now)
            return False
        i = min(max(target - oldest, 0), len(self._history) - 1)
        snap = self._history[i]
        snap.applied.append((meas.stamp, self._seq, meas, r_scale))
        self._seq += 1
        snap.applied.sort(key=lambda a: (a[0], a[1]))
        snap.settle(self.cfg)
        for j in range(i + 1, len(self._history)):
            prev, cur = self._history[j - 1], self._history[j]
            p = predict(prev.post, self.cfg.dt, self.cfg)
            cur.prior = EkfState(self._time(cur.tick), p.mean, p.cov)
            cur.settle(self.cfg)
        return True

    def update(self, meas: PoseMeasurement) -> bool:
        return self.update_delayed(meas)

    def update_smooth(self, meas: PoseMeasurement) -> bool:
        """First partial update now, the rest on the following ticks."""
        k = int(self.cfg.smooth_steps)
        ok = self.update_delayed(meas, r_scale=k)
        if ok and k > 1:
            self._pending.append([meas, k - 1])
        return ok
