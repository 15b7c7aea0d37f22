"""First-order update rules and the layer-wise adaptive learning-rate wrapper.

The wrapper rescales the global rate t(k) per layer to
t_l(k) = t(k) * (1 + ln(1 + 1/||g_l||)), computed fresh each iteration from
the current minibatch gradient of that layer only. Layers with small
gradient norms (shallow layers, low-curvature regions) get a larger step;
for large norms the multiplier tends to 1 and the base optimizer is
recovered. It composes with any rule that consumes a global learning rate:
SGD, classical momentum, Nesterov momentum, and AdaGrad are provided.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import group_norm

EPSILON_NORM = 1e-12
EPSILON_DIV = 1e-12

OPTIMIZER_KINDS = ("sgd", "momentum", "nag", "adagrad")
SCHEDULE_KINDS = ("constant", "inverse-time", "step-decay")


def layer_multiplier(norm: float, epsilon_norm: float = EPSILON_NORM) -> float:
    """Per-layer learning-rate multiplier 1 + ln(1 + 1/max(norm, eps)).

    Always > 1 for finite norm and strictly decreasing in norm; the epsilon
    floor keeps norm=0 finite.
    """
    if norm < 0:
        raise ValueError(f"gradient norm must be nonnegative, got {norm}")
    return 1.0 + math.log1p(1.0 / max(norm, epsilon_norm))


# ---------------------------------------------------------------------------
# Learning-rate schedules


@dataclass(frozen=True)
class LrSchedule:
    """Global learning rate as a pure function of the iteration index.

    kind "constant":     t0
    kind "inverse-time": t0 / (1 + gamma*k)^p
    kind "step-decay":   t0 * factor^(number of milestones <= k)
    """

    kind: str = "constant"
    t0: float = 0.01
    gamma: float = 0.0
    p: float = 1.0
    milestones: tuple = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.t0 <= 0:
            raise ConfigError(f"initial learning rate must be positive, got {self.t0}")
        if self.gamma < 0 or self.p < 0:
            raise ConfigError("inverse-time parameters gamma and p must be nonnegative")
        if self.factor <= 0:
            raise ConfigError(f"step-decay factor must be positive, got {self.factor}")
        object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))

    def rate(self, k: int) -> float:
        if k < 0:
            raise ValueError(f"iteration index must be nonnegative, got {k}")
        if self.kind == "constant":
            return self.t0
        if self.kind == "inverse-time":
            return self.t0 / (1.0 + self.gamma * k) ** self.p
        drops = sum(1 for m in self.milestones if m <= k)
        return self.t0 * self.factor ** drops


def schedule_rate(schedule: LrSchedule, k: int) -> float:
    """Global learning rate t(k) for iteration k."""
    return schedule.rate(k)


def constant(t0: float) -> LrSchedule:
    return LrSchedule(kind="constant", t0=t0)


# ---------------------------------------------------------------------------
# Optimizers


class Optimizer:
    """Base state-transition rule over per-layer parameter groups.

    `params` and `grads` passed to step() are parallel nested lists: one
    entry per layer, each a list of parameter tensors / their gradients.
    Parameters are updated in place; step() advances the iteration counter
    by exactly one.
    """

    kind = "base"
    needs_lookahead = False

    def __init__(self, schedule, layerwise: bool = False,
                 bias_separate: bool = False, weight_decay: float = 0.0,
                 epsilon_norm: float = EPSILON_NORM,
                 epsilon_div: float = EPSILON_DIV,
                 multiplier_fn=None):
        if isinstance(schedule, (int, float)):
            schedule = constant(float(schedule))
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {weight_decay}")
        if epsilon_norm <= 0 or epsilon_div <= 0:
            raise ConfigError("epsilon floors must be positive")
        self.schedule = schedule
        self.layerwise = layerwise
        self.bias_separate = bias_separate
        self.weight_decay = weight_decay
        self.epsilon_norm = epsilon_norm
        self.epsilon_div = epsilon_div
        # Test hook: forcing the multiplier to 1 must reproduce the
        # layerwise=False trajectory exactly.
        self.multiplier_fn = multiplier_fn if multiplier_fn is not None else layer_multiplier
        self.k = 0

    def rate(self) -> float:
        """Global learning rate for the upcoming step."""
        return self.schedule.rate(self.k)

    def step(self, params, grads):
        """Apply one update from per-layer gradients; returns the per-group
        multipliers actually used (1.0 entries when layerwise is off)."""
        if len(params) != len(grads):
            raise ConfigError(
                f"params have {len(params)} layers but grads have {len(grads)}"
            )
        t_k = self.schedule.rate(self.k)
        multipliers = []
        for li, (pgroup, ggroup) in enumerate(zip(params, grads)):
            if len(pgroup) != len(ggroup):
                raise ConfigError(f"layer {li}: parameter/gradient count mismatch")
            if not pgroup:
                continue
            effective = []
            for p, g in zip(pgroup, ggroup):
                if p.shape != g.shape:
                    raise ConfigError(
                        f"layer {li}: gradient shape {g.shape} != parameter shape {p.shape}"
                    )
                ge = g + self.weight_decay * p if self.weight_decay else g
                if not np.all(np.isfinite(ge)):
                    raise NumericError(
                        f"non-finite gradient in layer {li} at iteration {self.k}",
                        iteration=self.k,
                    )
                effective.append(ge)
            if self.bias_separate:
                subgroups = [((li, ti), [p], [ge])
                             for ti, (p, ge) in enumerate(zip(pgroup, effective))]
            else:
                subgroups = [((li,), pgroup, effective)]
            # Per-tensor state keys become group_key + (position,): (li, ti)
            # normally, (li, ti, 0) under bias_separate.
            for key, ps, ges in subgroups:
                if self.layerwise:
                    m = self.multiplier_fn(group_norm(ges), self.epsilon_norm)
                else:
                    m = 1.0
                multipliers.append(m)
                t_eff = t_k * m
                for ti, (p, ge) in enumerate(zip(ps, ges)):
                    self._update(key + (ti,), p, ge, t_eff)
        self.k += 1
        return multipliers

    def _update(self, key, p, g, t_eff):
        raise NotImplementedError

    def state_arrays(self):
        """Mutable state tensors (velocities, accumulators) for inspection
        and bitwise snapshots."""
        return {}


class SGD(Optimizer):
    """Plain gradient step x <- x - t_eff * g."""

    kind = "sgd"

    def _update(self, key, p, g, t_eff):
        p -= t_eff * g


class Momentum(Optimizer):
    """Classical momentum: v <- mu*v - t_eff*g; x <- x + v."""

    kind = "momentum"

    def __init__(self, schedule, mu: float = 0.9, **kwargs):
        super().__init__(schedule, **kwargs)
        if not 0.0 <= mu <= 1.0:
            raise ConfigError(f"momentum coefficient must lie in [0, 1], got {mu}")
        self.mu = mu
        self.velocity = {}

    def _update(self, key, p, g, t_eff):
        v = self.velocity.get(key)
        if v is None:
            v = np.zeros_like(p)
        v = self.mu * v - t_eff * g
        self.velocity[key] = v
        p += v

    def state_arrays(self):
        return dict(self.velocity)


class NAG(Momentum):
    """Nesterov momentum. The same recurrence as classical momentum, but the
    caller must supply gradients evaluated at the lookahead point
    x + mu * v_prev; use at_lookahead() to shift parameters for that
    evaluation. With layerwise=True the multiplier comes from the lookahead
    gradient norms and scales only the gradient term.
    """

    kind = "nag"
    needs_lookahead = True

    @contextmanager
    def at_lookahead(self, params):
        """Temporarily shift parameters to x + mu*v_prev, restoring the
        original values bit-for-bit on exit."""
        saved = [[p.copy() for p in group] for group in params]
        for li, group in enumerate(params):
            for ti, p in enumerate(group):
                key = self._key_for(li, ti)
                v = self.velocity.get(key)
                if v is not None:
                    p += self.mu * v
        try:
            yield
        finally:
            for group, sgroup in zip(params, saved):
                for p, s in zip(group, sgroup):
                    p[...] = s

    def _key_for(self, li, ti):
        # Mirrors the state keys produced by step(): (li, ti) normally,
        # (li, ti, 0) when each tensor forms its own group.
        return (li, ti, 0) if self.bias_separate else (li, ti)


class AdaGrad(Optimizer):
    """AdaGrad: per-parameter rates from accumulated squared gradients,
    x <- x - t_eff * g / (sqrt(sum g^2) + epsilon_div)."""

    kind = "adagrad"

    def __init__(self, schedule, **kwargs):
        super().__init__(schedule, **kwargs)
        self.accumulator = {}

    def _update(self, key, p, g, t_eff):
        acc = self.accumulator.get(key)
        if acc is None:
            acc = np.zeros_like(p)
        acc = acc + g * g
        self.accumulator[key] = acc
        p -= t_eff * g / (np.sqrt(acc) + self.epsilon_div)

    def state_arrays(self):
        return dict(self.accumulator)


_KIND_MAP = {"sgd": SGD, "momentum": Momentum, "nag": NAG, "adagrad": AdaGrad}


def make_optimizer(kind: str, schedule, layerwise: bool = False, mu: float = 0.9,
                   **kwargs) -> Optimizer:
    """Construct a fresh optimizer (k=0, zeroed buffers) by kind name."""
    if kind not in _KIND_MAP:
        raise ConfigError(f"unknown optimizer kind {kind!r}; expected one of {OPTIMIZER_KINDS}")
    cls = _KIND_MAP[kind]
    if kind in ("momentum", "nag"):
        return cls(schedule, mu=mu, layerwise=layerwise, **kwargs)
    return cls(schedule, layerwise=layerwise, **kwargs)
