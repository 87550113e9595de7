"""Recover rain factors from a target rain layer by gradient descent.

The objective is

    loss = mean((R(factors) - R_target)**2) + lam * rot_tv_loss(R, theta)

with R the clipped cascade of rain kernels over the thresholded rain map.
Gradients are analytic: reverse mode through the cascade and the L1 term,
forward mode (one tangent) through the rain-map net for theta.  Piecewise
linear points (ReLUs, the clip of R, |.|) use subgradient 0.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conv import (
    conv_input_grad,
    conv_kernel_grad,
    conv_same,
    depthwise_same,
    preactivation_signs,
    rot_resnet_jvp,
)
from .factors import RainFactorSample
from .rain_kernel import build_cascade, cascade_kernel_partials, dictionary_atoms
from .rot_tv import DiffFilterSpec, rot_tv_grads, rotated_diff_filter
from .scene import RainContext

__all__ = [
    "FREE_VARIABLES",
    "RecoveryProblem",
    "RecoveryTrace",
    "GradCheckReport",
    "recovery_loss",
    "recovery_grad",
    "grad_check",
    "fit_factors",
    "trace_to_csv",
]

logger = logging.getLogger(__name__)

FREE_VARIABLES = ("theta", "s_l", "s_w", "alpha", "tau")


@dataclass
class RecoveryProblem:
    """Target rain layer plus the fixed generator context and noise."""

    target: np.ndarray
    context: RainContext
    Z: np.ndarray
    free: tuple[str, ...] = ("theta", "s_l", "s_w")
    lam: float = 1.0
    step: float = 1e-2
    max_iter: int = 2000
    tol: float = 1e-10
    patience: int = 50
    diverge_at: float = 1e6
    tv_spec: DiffFilterSpec | None = None
    reference: RainFactorSample | None = None  # generating factors, when known
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.free = tuple(self.free)
        if not self.free:
            raise ValueError("at least one free variable is required")
        bad = set(self.free) - set(FREE_VARIABLES)
        if bad:
            raise ValueError(f"unknown free variables: {sorted(bad)}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.context.dictionary.per_atom_theta:
            raise ValueError("recovery supports scalar theta only")
        self.target = np.asarray(self.target, dtype=np.float64)
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.target.shape != self.Z.shape[:2] + (3,):
            raise ValueError(f"target {self.target.shape} does not match noise {self.Z.shape}")


@dataclass
class RecoveryTrace:
    losses: list[float] = field(default_factory=list)
    best_losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    factors: list[dict] = field(default_factory=list)
    status: str = "iteration-capped"


def _check_domain(v: RainFactorSample):
    if not (v.s_l > 0 and v.s_w > 0):
        raise ValueError("scales must be positive")


def _map_stage(problem: RecoveryProblem, v: RainFactorSample, want_tangent: bool):
    """Rain-map pre-activation (and its theta tangent), memoized on theta."""
    theta = math.radians(float(v.theta))
    key = ("map", theta, want_tangent)
    cache = problem._cache
    if cache.get("map_key") != key:
        out = rot_resnet_jvp(problem.Z, theta, problem.context.map_weights, tangent=want_tangent)
        cache["map_key"] = key
        cache["map_val"] = out if want_tangent else (out, None)
    return cache["map_val"]


def _forward(problem: RecoveryProblem, v: RainFactorSample, grads: bool):
    _check_domain(v)
    ctx = problem.context
    theta = math.radians(float(v.theta))
    pre, dpre = _map_stage(problem, v, grads and "theta" in problem.free)
    act = pre - v.tau
    rain_map = np.maximum(act, 0.0)

    key = ("cascade", theta, v.s_l, v.s_w, v.tau)
    cache = problem._cache
    stages = build_cascade(ctx.dictionary, v.alpha, v, ctx.stage_weights)
    if cache.get("cascade_key") != key:
        inputs = [rain_map]
        for st in stages[:-1]:
            inputs.append(conv_same(inputs[-1], st.tensor))
        cache["cascade_key"] = key
        cache["cascade_inputs"] = inputs
    inputs = cache["cascade_inputs"]
    r_pre = conv_same(inputs[-1], stages[-1].tensor)
    R = np.maximum(r_pre, 0.0)
    diff = R - problem.target
    loss = float(np.mean(diff * diff))
    state = dict(theta=theta, act=act, dpre=dpre, stages=stages, inputs=inputs, r_pre=r_pre, R=R, diff=diff)
    if problem.lam > 0:
        tv, g_tv, dtheta_tv = rot_tv_grads(R, theta, problem.tv_spec)
        loss += problem.lam * tv
        state.update(g_tv=g_tv, dtheta_tv=dtheta_tv)
    return loss, state


def recovery_loss(variables: RainFactorSample, problem: RecoveryProblem) -> float:
    return _forward(problem, variables, grads=False)[0]


def recovery_grad(variables: RainFactorSample, problem: RecoveryProblem) -> dict[str, np.ndarray | float]:
    """Gradient over the free variables; theta is per radian."""
    return _loss_and_grad(variables, problem)[1]


def _loss_and_grad(variables: RainFactorSample, problem: RecoveryProblem):
    loss, st = _forward(problem, variables, grads=True)
    ctx = problem.context
    g = 2.0 * st["diff"] / st["diff"].size
    if problem.lam > 0:
        g = g + problem.lam * st["g_tv"]
    g = np.where(st["r_pre"] > 0, g, 0.0)

    stages, inputs = st["stages"], st["inputs"]
    kernel_grads = [None] * len(stages)
    need_map = any(k in problem.free for k in ("theta", "tau"))
    for s in range(len(stages) - 1, -1, -1):
        kernel_grads[s] = conv_kernel_grad(inputs[s], g, stages[s].p)
        if s > 0 or need_map:
            g = conv_input_grad(g, stages[s].tensor)
    out: dict[str, np.ndarray | float] = {}
    if need_map:
        g_act = np.where(st["act"] > 0, g, 0.0)
        if "tau" in problem.free:
            out["tau"] = -float(g_act.sum())
    if any(k in problem.free for k in ("theta", "s_l", "s_w")):
        partials = cascade_kernel_partials(ctx.dictionary, variables.alpha, variables, ctx.stage_weights)
        for name in ("theta", "s_l", "s_w"):
            if name in problem.free:
                out[name] = float(sum(np.sum(kg * dk[name]) for kg, dk in zip(kernel_grads, partials)))
        if "theta" in problem.free:
            out["theta"] += float(np.sum(g_act * st["dpre"]))
            if problem.lam > 0:
                out["theta"] += problem.lam * st["dtheta_tv"]
    if "alpha" in problem.free:
        D = dictionary_atoms(ctx.dictionary, st["theta"], variables.s_l, variables.s_w)
        out["alpha"] = np.einsum("ijck,ijcm->mk", kernel_grads[-1], D)
    return loss, out


def kink_pattern(variables: RainFactorSample, problem: RecoveryProblem) -> np.ndarray:
    """Sign pattern of every piecewise-linear unit in the loss."""
    _, st = _forward(problem, variables, grads=False)
    cache = problem._cache
    if cache.get("signs_key") != st["theta"]:
        cache["signs_key"] = st["theta"]
        cache["signs"] = preactivation_signs(problem.Z, st["theta"], problem.context.map_weights)
    parts = [cache["signs"], _signs(st["act"]), _signs(st["r_pre"])]
    if problem.lam > 0:
        parts.append(_signs(depthwise_same(st["R"], rotated_diff_filter(st["theta"], problem.tv_spec))))
    return np.concatenate([p.astype(np.int8) for p in parts])


def _signs(x: np.ndarray, rel: float = 1e-12) -> np.ndarray:
    """Signs with a roundoff deadband: values within ``rel`` of the array's
    largest magnitude count as zero, so FFT residue does not read as a kink."""
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    return np.where(np.abs(x) > rel * scale, np.sign(x), 0.0).ravel()


# -- coordinates ---------------------------------------------------------------


def _coordinates(v: RainFactorSample, free, alpha_entries=None, rng=None):
    """Yield (name, index) for free scalar coordinates.

    ``alpha_entries`` limits alpha to that many randomly chosen entries.
    """
    for name in FREE_VARIABLES:
        if name not in free:
            continue
        if name == "alpha":
            idxs = list(np.ndindex(v.alpha.shape))
            if alpha_entries is not None and alpha_entries < len(idxs):
                pick = rng.choice(len(idxs), size=alpha_entries, replace=False)
                idxs = [idxs[i] for i in sorted(pick)]
            yield from ((name, idx) for idx in idxs)
        else:
            yield name, None


def _get(v: RainFactorSample, name, idx) -> float:
    if name == "theta":
        return math.radians(float(v.theta))
    if name == "alpha":
        return float(v.alpha[idx])
    return float(getattr(v, name))


def _shift(v: RainFactorSample, name, idx, delta) -> RainFactorSample:
    if name == "theta":
        return v.replace(theta=float(v.theta) + math.degrees(delta))
    if name == "alpha":
        a = v.alpha.copy()
        a[idx] += delta
        return v.replace(alpha=a)
    return v.replace(**{name: getattr(v, name) + delta})


@dataclass
class GradCheckReport:
    entries: list[dict] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def checked(self) -> list[dict]:
        return [e for e in self.entries if not e["excluded"] and not e["negligible"]]

    @property
    def excluded(self) -> list[dict]:
        return [e for e in self.entries if e["excluded"]]

    @property
    def max_rel_error(self) -> float:
        errs = [e["rel_error"] for e in self.checked]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checked) and all(e["rel_error"] <= self.tolerance for e in self.checked)

    @classmethod
    def combine(cls, reports) -> "GradCheckReport":
        """Pool several reports; entries gain a ``problem`` index."""
        reports = list(reports)
        if not reports:
            raise ValueError("nothing to combine")
        entries = [dict(e, problem=i) for i, r in enumerate(reports) for e in r.entries]
        return cls(entries, reports[0].tolerance)

    def summary(self) -> str:
        return (f"{'PASS' if self.passed else 'FAIL'}: {len(self.checked)} coordinates checked, "
                f"{len(self.excluded)} kink-adjacent excluded, max rel error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:g})")


def _perturbed(v: RainFactorSample, rng: np.random.Generator) -> RainFactorSample:
    return v.replace(
        theta=float(v.theta) + rng.normal(0.0, 5.0),
        s_l=v.s_l * math.exp(rng.normal(0.0, 0.1)),
        s_w=v.s_w * math.exp(rng.normal(0.0, 0.1)),
        tau=v.tau + rng.normal(0.0, 0.1),
        alpha=v.alpha * np.exp(rng.normal(0.0, 0.1, v.alpha.shape)),
    )


def grad_check(problem: RecoveryProblem, points, h: float = 1e-4, tolerance: float = 1e-4,
               margin: float = 1e-3, seed: int = 0, floor: float = 1e-10,
               alpha_entries: int | None = None) -> GradCheckReport:
    """Compare :func:`recovery_grad` with central differences.

    ``points`` is a list of factor samples or a count of random
    perturbations of ``problem.reference``.  A coordinate is kink-adjacent
    when moving it by ``margin`` either way flips any ReLU/|.| unit; such
    coordinates are reported but not judged.  ``margin = h`` excludes only
    coordinates whose difference stencil actually straddles a kink.  ``alpha_entries`` checks
    only a random subset of the mixing weights.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    if isinstance(points, int):
        ref = getattr(problem, "reference", None)
        if ref is None:
            raise ValueError("integer sample count needs problem.reference")
        rng = np.random.default_rng(seed)
        points = [_perturbed(ref, rng) for _ in range(points)]
    report = GradCheckReport(tolerance=tolerance)
    pick_rng = np.random.default_rng([seed, 1])
    for k, v in enumerate(points):
        grad = recovery_grad(v, problem)
        base = kink_pattern(v, problem)
        for name, idx in _coordinates(v, problem.free, alpha_entries, pick_rng):
            analytic = float(grad[name] if idx is None else grad[name][idx])
            fd = (recovery_loss(_shift(v, name, idx, h), problem)
                  - recovery_loss(_shift(v, name, idx, -h), problem)) / (2 * h)
            near = any(
                not np.array_equal(kink_pattern(_shift(v, name, idx, s * margin), problem), base)
                for s in (1, -1)
            )
            scale = max(abs(analytic), abs(fd))
            report.entries.append(dict(
                sample=k, name=name, index=idx, analytic=analytic, fd=fd,
                rel_error=abs(analytic - fd) / scale if scale > 0 else 0.0,
                excluded=near, negligible=scale < floor,
            ))
    return report


# -- optimizer -----------------------------------------------------------------


def _pack(v: RainFactorSample, free) -> np.ndarray:
    parts = []
    for name in FREE_VARIABLES:
        if name not in free:
            continue
        if name == "theta":
            parts.append([math.radians(float(v.theta))])
        elif name in ("s_l", "s_w"):
            parts.append([math.log(getattr(v, name))])
        elif name == "tau":
            parts.append([v.tau])
        else:
            parts.append(v.alpha.ravel())
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def _log_slots(free) -> list[int]:
    slots, pos = [], 0
    for name in FREE_VARIABLES:
        if name in free:
            if name in ("s_l", "s_w"):
                slots.append(pos)
            pos += 1 if name != "alpha" else 0
    return slots


def _unpack(x: np.ndarray, v: RainFactorSample, free) -> RainFactorSample:
    changes, pos = {}, 0
    for name in FREE_VARIABLES:
        if name not in free:
            continue
        if name == "alpha":
            n = v.alpha.size
            changes["alpha"] = x[pos : pos + n].reshape(v.alpha.shape).copy()
            pos += n
            continue
        val = float(x[pos])
        pos += 1
        if name == "theta":
            changes["theta"] = math.degrees(val)
        elif name in ("s_l", "s_w"):
            changes[name] = math.exp(val)
        else:
            changes["tau"] = val
    return v.replace(**changes)


def _packed_grad(grad, v: RainFactorSample, free) -> np.ndarray:
    parts = []
    for name in FREE_VARIABLES:
        if name not in free:
            continue
        if name in ("s_l", "s_w"):
            parts.append([grad[name] * getattr(v, name)])  # chain rule for log-scale
        elif name == "alpha":
            parts.append(np.ravel(grad["alpha"]))
        else:
            parts.append([grad[name]])
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def _snapshot(v: RainFactorSample) -> dict:
    return {"theta_deg": float(v.theta), "s_l": float(v.s_l), "s_w": float(v.s_w), "tau": float(v.tau)}


def fit_factors(problem: RecoveryProblem, initial: RainFactorSample):
    """Fixed-step gradient descent on (theta, log s_l, log s_w, alpha, tau).

    Returns the best iterate seen and the trace.  Stops when the best loss
    has improved by less than ``problem.tol`` over ``problem.patience``
    iterations, at ``problem.max_iter``, or when the loss exceeds
    ``problem.diverge_at`` (reported as "diverged").
    """
    _check_domain(initial)
    free = problem.free
    x = _pack(initial, free)
    current = initial
    best, best_loss = initial, math.inf
    trace = RecoveryTrace()
    for it in range(problem.max_iter):
        loss, grad = _loss_and_grad(current, problem)
        if not math.isfinite(loss) or loss > problem.diverge_at:
            trace.status = "diverged"
            logger.warning("recovery diverged at iteration %d (loss %.3g)", it, loss)
            break
        if loss < best_loss:
            best, best_loss = current, loss
        g = _packed_grad(grad, current, free)
        trace.losses.append(loss)
        trace.best_losses.append(best_loss)
        trace.grad_norms.append(float(np.linalg.norm(g)))
        trace.factors.append(_snapshot(current))
        if it >= problem.patience and trace.best_losses[-1 - problem.patience] - best_loss < problem.tol:
            trace.status = "converged"
            break
        x = x - problem.step * g
        # log-scales beyond this range mean the iterate has run away
        if not np.all(np.isfinite(x)) or np.any(np.abs(x[_log_slots(free)]) > 50):
            trace.status = "diverged"
            logger.warning("recovery diverged at iteration %d (parameters left the domain)", it)
            break
        current = _unpack(x, current, free)
    return best, trace


def trace_to_csv(trace: RecoveryTrace) -> str:
    buf = io.StringIO()
    buf.write("iteration,loss,best_loss,grad_norm,theta_deg,s_l,s_w,tau\n")
    for i, (l, b, g, f) in enumerate(zip(trace.losses, trace.best_losses, trace.grad_norms, trace.factors)):
        buf.write(f"{i},{l!r},{b!r},{g!r},{f['theta_deg']!r},{f['s_l']!r},{f['s_w']!r},{f['tau']!r}\n")
    return buf.getvalue()
