"""Joint reverse process: guidance, first/third-order data-prediction solvers.

Solver convention: for a step from timestep ``s`` to ``t < s``,
``h = lambda_t - lambda_s > 0`` and the clean-data coefficient uses the
*target* step's sqrt(alpha_bar). With the exact clean-data prediction this
reproduces the closed-form noised point at ``t`` exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import numerics as nx
from .bitcodec import decode_map, encode_map
from .model import ModelConfig, condition_tokens, empty_condition, forward, forward_given_map
from .numerics import NamedTensors, Rng, Tensor
from .schedule import NoiseSchedule


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 50
    order: int = 1
    gamma: float = 1.0
    map_init_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise SamplerError(f"need at least one sampling step, got {self.steps}")
        if self.order not in (1, 3):
            raise SamplerError(f"solver order must be 1 or 3, got {self.order}")
        if self.order == 3 and self.steps < 2:
            raise SamplerError("order 3 needs >= 2 steps (the final step to t=0 is first order)")


@dataclass
class SolverState:
    x: Tensor
    m: Tensor | None
    t: float
    schedule: NoiseSchedule


def predict_x0(x_t: Tensor, eps_pred: Tensor, t: float, schedule: NoiseSchedule) -> Tensor:
    a, s, _ = schedule.coeffs(t)
    return (x_t - s * eps_pred) / a


def cfg_combine(out_cond: Tensor, out_uncond: Tensor, gamma: float) -> Tensor:
    if out_cond.shape != out_uncond.shape:
        raise nx.ShapeError(f"cfg_combine: shapes {tuple(out_cond.shape)} vs {tuple(out_uncond.shape)}")
    if gamma == 0:
        return out_cond
    return out_cond + gamma * (out_cond - out_uncond)


def _exp_neg_h(sched: NoiseSchedule, s: float, t: float) -> float:
    """exp(-(lambda_t - lambda_s)) as a ratio, so t = 0 (sigma = 0) gives 0."""
    a_s, sig_s, _ = sched.coeffs(s)
    a_t, sig_t, _ = sched.coeffs(t)
    return (a_s * sig_t) / (sig_s * a_t)


def first_order_coeffs(sched: NoiseSchedule, s: float, t: float) -> tuple[float, float]:
    """(state coefficient, clean-prediction coefficient) for one step s -> t."""
    _, sig_s, _ = sched.coeffs(s)
    a_t, sig_t, _ = sched.coeffs(t)
    return sig_t / sig_s, a_t * (1.0 - _exp_neg_h(sched, s, t))


def _check_direction(s: float, t: float) -> None:
    if t > s:
        raise SamplerError(f"solver target {t} must not exceed current timestep {s}")


def dpm_first_step(state: SolverState, x0_pred: Tensor, m0_pred: Tensor | None, t_target: float) -> SolverState:
    _check_direction(state.t, t_target)
    if t_target == state.t:
        return state
    cx, c0 = first_order_coeffs(state.schedule, state.t, t_target)
    x = cx * state.x + c0 * x0_pred
    m = state.m if state.m is None or m0_pred is None else cx * state.m + c0 * m0_pred
    return SolverState(x, m, t_target, state.schedule)


def third_order_coeffs(sched: NoiseSchedule, s: float, t: float, r1: float = 1 / 3, r2: float = 2 / 3) -> dict:
    """Intermediate timesteps and every coefficient of one singlestep third-order update."""
    _, sig_s, lam_s = sched.coeffs(s)
    a_t, sig_t, lam_t = sched.coeffs(t)
    h = lam_t - lam_s
    lam_s1, lam_s2 = lam_s + r1 * h, lam_s + r2 * h
    s1, s2 = sched.timestep_for_lambda(lam_s1), sched.timestep_for_lambda(lam_s2)
    # alpha/sigma at the intermediate points from lambda directly (VP: alpha^2 + sigma^2 = 1)
    a_s1, sig_s1 = math.sqrt(_sigmoid(2 * lam_s1)), math.sqrt(_sigmoid(-2 * lam_s1))
    a_s2, sig_s2 = math.sqrt(_sigmoid(2 * lam_s2)), math.sqrt(_sigmoid(-2 * lam_s2))
    phi_11 = -math.expm1(-r1 * h)
    phi_12 = -math.expm1(-r2 * h)
    phi_1 = -math.expm1(-h)
    phi_22 = 1.0 + math.expm1(-r2 * h) / (r2 * h)
    phi_2 = 1.0 + math.expm1(-h) / h
    return {
        "s1": s1, "s2": s2,
        "x_s1": (sig_s1 / sig_s, a_s1 * phi_11),
        "x_s2": (sig_s2 / sig_s, a_s2 * phi_12, (r2 / r1) * a_s2 * phi_22),
        "x_t": (sig_t / sig_s, a_t * phi_1, (1.0 / r2) * a_t * phi_2),
    }


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def dpm_third_step(state: SolverState, model_fn, t_target: float) -> SolverState:
    """One singlestep third-order update; ``model_fn(x, m, t) -> (x0_pred, m0_pred)``.

    Three model calls at s, s1 (r=1/3) and s2 (r=2/3) in log-SNR. Image and
    map are advanced with identical coefficients.
    """
    _check_direction(state.t, t_target)
    if t_target == state.t:
        return state
    if t_target <= 0:
        raise SamplerError("third-order step cannot target t=0 (infinite log-SNR); use a first-order step")
    c = third_order_coeffs(state.schedule, state.t, t_target)
    x, m = state.x, state.m

    def lin(a, terms):
        if a is None:
            return None
        out = terms[0][0] * a
        for coef, v in terms[1:]:
            out = out + coef * v
        return out

    x0, m0 = model_fn(x, m, state.t)
    k1, k2 = c["x_s1"]
    x_s1 = lin(x, [(k1, None), (k2, x0)])
    m_s1 = lin(m, [(k1, None), (k2, m0)])

    x02, m02 = model_fn(x_s1, m_s1, c["s1"])
    k1, k2, k3 = c["x_s2"]
    x_s2 = lin(x, [(k1, None), (k2, x0), (k3, x02 - x0)])
    m_s2 = lin(m, [(k1, None), (k2, m0), (k3, _diff(m02, m0))])

    x03, m03 = model_fn(x_s2, m_s2, c["s2"])
    k1, k2, k3 = c["x_t"]
    x_new = lin(x, [(k1, None), (k2, x0), (k3, x03 - x0)])
    m_new = lin(m, [(k1, None), (k2, m0), (k3, _diff(m03, m0))])
    return SolverState(x_new, m_new, t_target, state.schedule)


def _diff(a, b):
    return None if a is None or b is None else a - b


def timestep_grid(schedule: NoiseSchedule, steps: int) -> list[float]:
    """``steps + 1`` timesteps: uniform in log-SNR from T down to 1, then 0 (clean)."""
    lam_hi, lam_lo = schedule.lambda_at(schedule.T), schedule.lambda_at(1)
    if steps == 1:
        return [float(schedule.T), 0.0]
    lams = np.linspace(lam_hi, lam_lo, steps)
    ts = [schedule.timestep_for_lambda(float(v)) for v in lams]
    ts[0], ts[-1] = float(schedule.T), 1.0
    return ts + [0.0]


def postprocess_map(m_final) -> np.ndarray:
    return decode_map(m_final)


# full samplers --------------------------------------------------------------------

def guided_model(params: NamedTensors, cfg: ModelConfig, cond: Tensor, uncond: Tensor,
                 gamma: float, schedule: NoiseSchedule, given_map: Tensor | None = None):
    """Wrap the network as ``(x, m, t) -> (x0_pred, m0_pred)`` with guidance."""

    def call(x, m, t, c):
        tt = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        if given_map is not None:
            return forward_given_map(x, given_map, c, tt, params, cfg), None
        return forward(x, m, c, tt, params, cfg)

    def model_fn(x, m, t):
        with torch.no_grad():
            eps_c, m_c = call(x, m, t, cond)
            if gamma != 0:
                eps_u, m_u = call(x, m, t, uncond)
                eps = cfg_combine(eps_c, eps_u, gamma)
                m_pred = None if m_c is None else cfg_combine(m_c, m_u, gamma)
            else:
                eps, m_pred = eps_c, m_c
        return predict_x0(x, eps, t, schedule), m_pred

    return model_fn


def _solve(model_fn, x, m, schedule: NoiseSchedule, scfg: SamplerConfig, trace=None):
    grid = timestep_grid(schedule, scfg.steps)
    state = SolverState(x, m, grid[0], schedule)
    for t_next in grid[1:]:
        if scfg.order == 3 and t_next > 0:
            state = dpm_third_step(state, model_fn, t_next)
        else:
            x0, m0 = model_fn(state.x, state.m, state.t)
            state = dpm_first_step(state, x0, m0, t_next)
        if trace is not None:
            trace.append(state.t)
    return state


def _conditions(captions, cfg: ModelConfig, n: int):
    if captions and not isinstance(captions[0], (list, tuple, np.ndarray)):
        captions = [captions] * n
    if len(captions) != n:
        raise SamplerError(f"{len(captions)} captions for {n} samples")
    cond = torch.tensor([condition_tokens(c, cfg.cond_tokens) for c in captions])
    uncond = torch.tensor([empty_condition(cfg.cond_tokens)] * n)
    return cond, uncond


def _init_noise(shape, n: int, scfg: SamplerConfig, rng: Rng | None, first_index: int,
                stream: str, std: float, dtype):
    """Sample i starts from Rng(seed + i) (or ``rng.child(i)``), independent of batching."""
    rows = []
    for i in range(first_index, first_index + n):
        r = rng.child(i) if rng is not None else Rng(scfg.seed + i)
        rows.append(r.child(stream).normal(shape, std=std, dtype=dtype))
    return torch.stack(rows)


def sample(params: NamedTensors, cfg: ModelConfig, captions, scfg: SamplerConfig,
           schedule: NoiseSchedule, rng: Rng | None = None, n: int = 1, first_index: int = 0,
           trace=None):
    """Co-generate ``n`` images (B, H, W, C) and maps (B, fH, fW) uint8 ids.

    ``captions`` is one id list shared by all samples or one list per sample.
    """
    if cfg.mode == "given-map":
        raise SamplerError("given-map models need sample_given_map")
    dtype = next(iter(params.values())).dtype
    x = _init_noise(cfg.image_shape, n, scfg, rng, first_index, "x_init", 1.0, dtype)
    m = _init_noise(cfg.map_shape, n, scfg, rng, first_index, "m_init", scfg.map_init_std, dtype)
    cond, uncond = _conditions(captions, cfg, n)
    model_fn = guided_model(params, cfg, cond, uncond, scfg.gamma, schedule)
    state = _solve(model_fn, x, m, schedule, scfg, trace)
    return state.x, postprocess_map(state.m)


def sample_given_map(params: NamedTensors, cfg: ModelConfig, m0_gt, captions, scfg: SamplerConfig,
                     schedule: NoiseSchedule, rng: Rng | None = None) -> Tensor:
    """Generate images with the map branch pinned to the clean encoded ``m0_gt``.

    Works with given-map models and, by feeding the clean bits as the map
    input, with one-stream models.
    """
    ids = np.asarray(m0_gt)
    if ids.ndim == 2:
        ids = ids[None]
    if tuple(ids.shape[1:]) != cfg.map_hw:
        raise SamplerError(f"given map {ids.shape[1:]} does not match model map size {cfg.map_hw}")
    n = ids.shape[0]
    dtype = next(iter(params.values())).dtype
    bits = encode_map(ids, dtype)
    x = _init_noise(cfg.image_shape, n, scfg, rng, 0, "x_init", 1.0, dtype)
    cond, uncond = _conditions(captions, cfg, n)
    if cfg.mode == "given-map":
        model_fn = guided_model(params, cfg, cond, uncond, scfg.gamma, schedule, given_map=bits)
    else:
        inner = guided_model(params, cfg, cond, uncond, scfg.gamma, schedule)

        def model_fn(x, m, t):
            return inner(x, bits, t)[0], None
    state = _solve(model_fn, x, None, schedule, scfg)
    return state.x
