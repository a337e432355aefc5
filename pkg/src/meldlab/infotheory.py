"""Exact mutual information between sensor observations and event state.

Worlds here are fully discrete: a prior over the 2^C event vectors and one
conditional observation table per sensor (sensors are conditionally
independent given the event vector). Everything is computed by brute-force
enumeration in log2, so results are exact up to float rounding; a hard cap
on the joint alphabet keeps that honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthworld import WorldSpec

ENUMERATION_CAP = 2 ** 24
DEFAULT_ROLE_EPS = 0.01  # bits


class DiscreteWorld:
    """Event prior over {0,1}^C plus per-sensor conditional tables P(O_k | y)."""

    def __init__(self, event_prior, channels, cap: int = ENUMERATION_CAP):
        prior = np.asarray(event_prior, dtype=np.float64)
        if prior.ndim != 1:
            raise ValueError("DiscreteWorld: event_prior must be 1-d")
        n_states = prior.shape[0]
        c = int(round(np.log2(n_states))) if n_states > 0 else -1
        if n_states <= 0 or 2 ** c != n_states:
            raise ValueError(f"DiscreteWorld: prior length {n_states} is not a power of two")
        if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError("DiscreteWorld: event_prior must be a distribution (1e-12 tolerance)")
        tables = []
        for k, chan in enumerate(channels):
            t = np.asarray(chan, dtype=np.float64)
            if t.ndim != 2 or t.shape[0] != n_states or t.shape[1] < 1:
                raise ValueError(f"DiscreteWorld: channel {k} must be ({n_states}, A_k), got {t.shape}")
            if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-12:
                raise ValueError(f"DiscreteWorld: channel {k} rows must sum to 1 (1e-12 tolerance)")
            tables.append(t)
        if not tables:
            raise ValueError("DiscreteWorld: need at least one sensor channel")
        joint_size = n_states
        for t in tables:
            joint_size *= t.shape[1]
        if joint_size > cap:
            raise ValueError(
                f"DiscreteWorld: joint enumeration size {joint_size} exceeds cap {cap}")
        self.event_prior = prior
        self.channels = tables
        self.num_classes = c
        self.num_sensors = len(tables)


def mutual_information(world: DiscreteWorld, sensors=None) -> float:
    """I({O_k for k in sensors}; y) in bits by exact enumeration.

    ``sensors=None`` means all sensors; the empty set gives 0.
    """
    if sensors is None:
        ks = list(range(world.num_sensors))
    else:
        ks = sorted(set(int(k) for k in sensors))
        for k in ks:
            if not 0 <= k < world.num_sensors:
                raise ValueError(f"mutual_information: sensor {k} out of range")
    if not ks:
        return 0.0
    n_states = world.event_prior.shape[0]
    cond = np.ones((n_states, 1))
    for k in ks:
        chan = world.channels[k]
        cond = (cond[:, :, None] * chan[:, None, :]).reshape(n_states, -1)
    joint = world.event_prior[:, None] * cond
    p_obs = joint.sum(axis=0)
    nz = joint > 0.0
    obs = np.broadcast_to(p_obs, joint.shape)
    return float(np.sum(joint[nz] * (np.log2(cond[nz]) - np.log2(obs[nz]))))


def sensor_gain(world: DiscreteWorld, sensor: int) -> float:
    """Information lost by removing one sensor: I(all) - I(all minus sensor)."""
    rest = [k for k in range(world.num_sensors) if k != sensor]
    return mutual_information(world) - mutual_information(world, rest)


@dataclass
class SensorGainReport:
    total_information: float
    per_sensor_marginal: list[float]
    per_sensor_gain: list[float]
    role_labels: list[str]
    eps: float

    def to_dict(self) -> dict:
        return {
            "total_information": self.total_information,
            "per_sensor_marginal": self.per_sensor_marginal,
            "per_sensor_gain": self.per_sensor_gain,
            "role_labels": self.role_labels,
            "eps": self.eps,
        }


def classify_roles(world: DiscreteWorld, eps: float = DEFAULT_ROLE_EPS) -> SensorGainReport:
    """Label every sensor background, redundant, or unique.

    background: marginal information below eps.
    redundant:  informative alone, but removal costs less than eps.
    unique:     removal costs at least eps.
    """
    total = mutual_information(world)
    marginals = [mutual_information(world, [k]) for k in range(world.num_sensors)]
    gains = [sensor_gain(world, k) for k in range(world.num_sensors)]
    roles = []
    for marg, gain in zip(marginals, gains):
        if marg < eps:
            roles.append("background")
        elif gain < eps:
            roles.append("redundant")
        else:
            roles.append("unique")
    return SensorGainReport(
        total_information=total,
        per_sensor_marginal=marginals,
        per_sensor_gain=gains,
        role_labels=roles,
        eps=eps,
    )


def discretize_world(spec: WorldSpec) -> DiscreteWorld:
    """Bridge a continuous world to a discrete one for exact analysis.

    Per-frame event prior: classes activate independently with probability
    event_rate times the mean interval fraction. Each sensor collapses to a
    2-level activity symbol: 1 iff any class it covers is active (rendering
    noise is ignored; the symbol is deterministic given the event vector).
    """
    C, S = spec.num_classes, spec.num_sensors
    lo, hi = spec.event_len_range
    q = spec.event_rate * ((lo + hi) / 2.0) / spec.frames_per_clip
    q = float(np.clip(q, 1e-9, 1.0 - 1e-9))
    states = np.arange(2 ** C)
    bits = (states[:, None] >> np.arange(C)) & 1      # (2^C, C)
    prior = np.prod(np.where(bits == 1, q, 1.0 - q), axis=1)
    cov = np.asarray(spec.coverage)
    channels = []
    for s in range(S):
        active = (bits @ cov[:, s]) > 0
        chan = np.zeros((2 ** C, 2))
        chan[:, 1] = active
        chan[:, 0] = ~active
        channels.append(chan)
    return DiscreteWorld(prior, channels)
