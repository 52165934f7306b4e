"""Constant-delay, Bernoulli-loss V2I channel."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import PoseMeasurement


@dataclass(frozen=True)
class ChannelConfig:
    delay: float = 0.0
    loss_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.delay >= 0:
            raise ValueError(f"delay must be >= 0, got {self.delay}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"loss_prob must be in [0, 1], got {self.loss_prob}")


@dataclass(frozen=True)
class ChannelEvent:
    payload: PoseMeasurement
    send_time: float
    deliver_time: float
    seq: int = 0


def send(cfg: ChannelConfig, msg: PoseMeasurement, now: float, rng: np.random.Generator,
         seq: int = 0) -> Optional[ChannelEvent]:
    """Pass one message through the channel; None when it is dropped.

    Exactly one uniform draw is consumed per call, dropped or not.
    """
    if not now >= 0:
        raise ValueError(f"send time must be >= 0, got {now}")
    u = rng.random()
    if u < cfg.loss_prob:
        return None
    return ChannelEvent(msg, now, now + cfg.delay, seq)


def drain(queue: list, now: float) -> list:
    """Remove and return payloads due by ``now`` in delivery order (send order on ties)."""
    due = [ev for ev in queue if ev.deliver_time <= now]
    if not due:
        return []
    keep = [ev for ev in queue if ev.deliver_time > now]
    queue[:] = keep
    due.sort(key=lambda ev: (ev.deliver_time, ev.send_time, ev.seq))
    return [ev.payload for ev in due]


class Channel:
    """Event queue owned by the simulation loop."""

    def __init__(self, cfg: ChannelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.queue: list[ChannelEvent] = []
        self.sent = 0
        self.dropped = 0

    def send(self, msg: PoseMeasurement, now: float) -> bool:
        ev = send(self.cfg, msg, now, self.rng, seq=self.sent)
        self.sent += 1
        if ev is None:
            self.dropped += 1
            return False
        self.queue.append(ev)
        return True

    def drain(self, now: float) -> list:
        return drain(self.queue, now)
