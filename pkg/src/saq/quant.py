"""Sampling-aware quantization of the noise network.

Holds the fake-quantized model wrapper, dual-order calibration sampling,
layer-wise soft-rounding reconstruction (SA-PTQ and its same-point
baseline) and low-rank adapter fine-tuning with the cosine + mixed-order
alignment losses (SA-QLoRA).

Pairing direction. ``"first_to_second"`` (default) evaluates the quantized model
at first-order points (x_{t_{i-1}}, t_{i-1}) and aligns it to the
full-precision output at the second-order intermediate point (u_i, s_i);
this is the only arrangement whose quantized inputs exist at first-order
inference time. ``"second_to_first"`` swaps the two (quantized at (u_i, s_i),
full precision at (x_{t_{i-1}}, t_{i-1})). ``"same"`` feeds both branches
the first-order point and is the naive baseline.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import noisenet as nn
from .diffusion import NoiseSchedule
from .noisenet import Adam, LoRAAdapter, NetConfig, Parameters
from .samplers import TimeGrid, make_grid, sample
from .tensorq import QuantSpec, fit_qparams_minmax, quantize, read_tensor, write_tensor

log = logging.getLogger(__name__)

PAIRINGS = ("first_to_second", "second_to_first", "same")
ZETA, GAMMA = 1.1, -0.1


class QuantError(RuntimeError):
    pass


# -- learnable quantizer ---------------------------------------------------

@dataclass
class Quantizer:
    """Per-tensor affine quantizer with a log-parameterized scale.

    ``zero`` is kept real-valued for gradient updates and rounded on use.
    """

    log_scale: float
    zero: float
    bits: int

    @classmethod
    def from_spec(cls, spec: QuantSpec) -> "Quantizer":
        return cls(math.log(spec.scale), float(spec.zero_point), spec.bit_width)

    @classmethod
    def fit(cls, x, bits: int) -> "Quantizer":
        return cls.from_spec(fit_qparams_minmax(x, bits))

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    @property
    def zero_int(self) -> int:
        return int(np.clip(np.rint(self.zero), 0, self.qmax))

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.scale, self.zero_int, self.bits)


def fq_forward(x, q: Quantizer):
    """Fake-quantize with nearest rounding; returns (value, cache for STE)."""
    s, z, N = q.scale, q.zero_int, q.qmax
    u = x / s
    r = np.rint(u)
    v = r + z
    c = np.clip(v, 0, N)
    return s * (c - z), (u, r, v, c, s, z, N)


def fq_backward(g, cache):
    """Straight-through gradients: (d input, d log_scale, d zero)."""
    u, r, v, c, s, z, N = cache
    inside = (v >= 0) & (v <= N)
    dx = np.where(inside, g, 0.0)
    ds = np.sum(g * np.where(inside, r - u, c - z))
    dz = np.sum(np.where(inside, 0.0, -s * g))
    return dx, s * ds, dz


def rectified_sigmoid(alpha):
    return np.clip(expit(alpha) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def rectified_sigmoid_grad(alpha):
    sg = expit(alpha)
    raw = sg * (ZETA - GAMMA) + GAMMA
    return np.where((raw > 0) & (raw < 1), (ZETA - GAMMA) * sg * (1 - sg), 0.0)


def alpha_init(W, q: Quantizer):
    """Soft-rounding variables with h(alpha) equal to the fractional part."""
    frac = W / q.scale - np.floor(W / q.scale)
    return -np.log((ZETA - GAMMA) / (frac - GAMMA) - 1.0)


def nearest_mask(W, q: Quantizer):
    u = W / q.scale
    return np.rint(u) - np.floor(u)


def rounded_weight(W, q: Quantizer, h):
    """s * (clamp(floor(W/s) + h + z, 0, 2^b - 1) - z)."""
    s, z, N = q.scale, q.zero_int, q.qmax
    v = np.floor(W / s) + h + z
    return s * (np.clip(v, 0, N) - z), v


# -- quantized model -------------------------------------------------------

@dataclass
class QuantModel:
    config: NetConfig
    params: Parameters
    w_quant: list
    a_quant: list
    masks: list
    adapter: Optional[LoRAAdapter] = None
    weights_quantized: bool = True
    acts_quantized: bool = True
    alpha: list = field(default_factory=list)
    a_bits: Optional[list] = None

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def copy(self) -> "QuantModel":
        def cp(q):
            return None if q is None else Quantizer(q.log_scale, q.zero, q.bits)
        return QuantModel(
            self.config, self.params.copy(),
            [cp(q) for q in self.w_quant], [cp(q) for q in self.a_quant],
            [None if m is None else m.copy() for m in self.masks],
            None if self.adapter is None else self.adapter.copy(),
            self.weights_quantized, self.acts_quantized,
            [None if a is None else a.copy() for a in self.alpha],
            None if self.a_bits is None else list(self.a_bits),
        )

    def __call__(self, x, t):
        return fake_quant_forward(self, x, t)


def layer_bits(n_layers: int, target: int, edge_bits: int = 8) -> list[int]:
    """First and last layers stay at ``edge_bits``."""
    return [edge_bits if i in (0, n_layers - 1) else target for i in range(n_layers)]


def make_quant_model(config: NetConfig, params: Parameters, w_bits: int = 8, a_bits: int = 8,
                     adapter: Optional[LoRAAdapter] = None) -> QuantModel:
    """Min-max weight quantizers; activation quantizers are fitted later."""
    L = config.n_layers
    wb = layer_bits(L, w_bits)
    w_quant = [Quantizer.fit(params.weights[i], wb[i]) for i in range(L)]
    a_quant = [None] * L
    return QuantModel(config, params.copy(), w_quant, a_quant, [None] * L, adapter,
                      a_bits=layer_bits(L, a_bits))


def act_quantized(qm: QuantModel, i: int) -> bool:
    """Activations are quantized after each nonlinearity, so the raw network
    input of layer 0 stays in full precision."""
    return qm.acts_quantized and i > 0


def _a_bits(qm: QuantModel, i: int) -> int:
    return qm.a_bits[i] if qm.a_bits is not None else 8


def effective_weight(qm: QuantModel, i: int):
    """Quantized weight of layer i and the STE cache (None if unquantized)."""
    W = qm.params.weights[i]
    merged = qm.adapter is not None and qm.adapter.ranks[i] > 0
    if merged:
        W = W + qm.adapter.delta(i)
    q = qm.w_quant[i]
    if qm.masks[i] is not None:
        Wq, v = rounded_weight(W, q, qm.masks[i])
        u = W / q.scale
        cache = (u, np.floor(u) + qm.masks[i], v, np.clip(v, 0, q.qmax), q.scale, q.zero_int, q.qmax)
        return Wq, cache, merged
    Wq, cache = fq_forward(W, q)
    return Wq, cache, merged


def fit_activation_quantizers(qm: QuantModel, x, t, layers: Optional[Sequence[int]] = None) -> None:
    """Min-max activation ranges from the inputs seen by each layer.

    Inputs are produced by the model as currently configured, so earlier
    quantized layers shape later ranges.
    """
    layers = range(1, qm.n_layers) if layers is None else [i for i in layers if i > 0]
    for i in layers:
        a = layer_input(qm, i, x, t)
        qm.a_quant[i] = Quantizer.fit(a, _a_bits(qm, i))


def _forward(qm: QuantModel, x, t, upto: Optional[int] = None, keep_cache: bool = False):
    cfg = qm.config
    a = nn.network_input(cfg, x, t)
    last = cfg.n_layers - 1
    caches = []
    stop = last if upto is None else upto - 1
    for i in range(stop + 1):
        a_cache = None
        if act_quantized(qm, i):
            if qm.a_quant[i] is None:
                raise QuantError(f"activation quantizer of layer{i} is not fitted")
            a_in, a_cache = fq_forward(a, qm.a_quant[i])
        else:
            a_in = a
        if qm.weights_quantized:
            Wq, w_cache, merged = effective_weight(qm, i)
            z = a_in @ Wq.T + qm.params.biases[i]
        else:
            Wq, w_cache, merged = None, None, False
            z = nn.linear(a_in, qm.params.weights[i], qm.params.biases[i], qm.adapter, i)
        if keep_cache:
            caches.append(dict(a=a, a_in=a_in, a_cache=a_cache, Wq=Wq, w_cache=w_cache, merged=merged, z=z))
        a = nn.silu(z) if i < last else z
    if upto is not None:
        return a, caches
    return a, caches


def layer_input(qm: QuantModel, i: int, x, t):
    """Input of layer i (before its activation quantizer)."""
    if i == 0:
        return nn.network_input(qm.config, x, t)
    a, _ = _forward(qm, x, t, upto=i)
    return a


def fake_quant_forward(qm: QuantModel, x, t) -> np.ndarray:
    if not qm.weights_quantized and not qm.acts_quantized:
        return nn.forward(qm.config, qm.params, qm.adapter, x, t)
    out, _ = _forward(qm, x, t)
    return out


@dataclass
class QuantGrads:
    A: list
    B: list
    w_log_scale: np.ndarray
    w_zero: np.ndarray
    a_log_scale: np.ndarray
    a_zero: np.ndarray
    x: np.ndarray


def fake_quant_backward(qm: QuantModel, x, t, upstream) -> QuantGrads:
    """STE gradients of <eps_hat(x, t), upstream>."""
    out, caches = _forward(qm, x, t, keep_cache=True)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    L = qm.n_layers
    ad = qm.adapter
    gA = [np.zeros_like(a) for a in ad.A] if ad is not None else []
    gB = [np.zeros_like(b) for b in ad.B] if ad is not None else []
    w_ls, w_z, a_ls, a_z = np.zeros(L), np.zeros(L), np.zeros(L), np.zeros(L)
    g = upstream
    for i in reversed(range(L)):
        c = caches[i]
        if i < L - 1:
            g = g * nn.silu_grad(c["z"])
        a_in = c["a_in"]
        if qm.weights_quantized:
            dWq = g.T @ a_in
            g_in = g @ c["Wq"]
            dW, w_ls[i], w_z[i] = fq_backward(dWq, c["w_cache"])
            if c["merged"]:
                sc = ad.scales[i]
                gB[i] = sc * (dW @ ad.A[i].T)
                gA[i] = sc * (ad.B[i].T @ dW)
        else:
            g_in = g @ qm.params.weights[i]
            if ad is not None and ad.ranks[i] > 0:
                sc = ad.scales[i]
                gB[i] = sc * (g.T @ (a_in @ ad.A[i].T))
                gBr = g @ ad.B[i]
                gA[i] = sc * (gBr.T @ a_in)
                g_in = g_in + sc * (gBr @ ad.A[i])
        if c["a_cache"] is not None:
            g_in, a_ls[i], a_z[i] = fq_backward(g_in, c["a_cache"])
        g = g_in
    return QuantGrads(gA, gB, w_ls, w_z, a_ls, a_z, g[:, : qm.config.input_dim])


def harden(qm: QuantModel) -> None:
    """Freeze any soft-rounding variables into {0, 1} masks."""
    for i, a in enumerate(qm.alpha):
        if a is not None:
            qm.masks[i] = (rectified_sigmoid(a) >= 0.5).astype(np.float64)
            qm.alpha[i] = None


def quantization_residue(qm: QuantModel, fp_eval, x, t) -> float:
    """Sup-norm of eps_hat - eps over the given points (an empirical delta)."""
    return float(np.max(np.abs(qm(x, t) - fp_eval(x, t))))


# -- calibration -------------------------------------------------------------

@dataclass
class CalibrationSet:
    """One pair per sampler step and seed; each record holds ``n`` chains.

    ``first_*`` is the first-order point (x_{t_{i-1}}, t_{i-1}); ``second_*``
    the second-order intermediate point (u_i, s_i) of the same interval.
    """

    first_x: np.ndarray
    first_t: np.ndarray
    second_x: np.ndarray
    second_t: np.ndarray
    t_next: np.ndarray
    seeds: np.ndarray
    steps: np.ndarray
    skipped_seeds: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.first_t)

    @property
    def n_chains(self) -> int:
        return self.first_x.shape[1]

    def points(self, which: str, idx=None):
        """Flattened (x, t) rows for the ``first`` or ``second`` records."""
        xs = getattr(self, f"{which}_x")
        ts = getattr(self, f"{which}_t")
        if idx is not None:
            xs, ts = xs[idx], ts[idx]
        n = xs.shape[1]
        return xs.reshape(-1, xs.shape[-1]), np.repeat(ts, n)

    def same_point(self) -> "CalibrationSet":
        """Degenerate set whose second record repeats the first."""
        return CalibrationSet(self.first_x, self.first_t, self.first_x, self.first_t,
                              self.t_next, self.seeds, self.steps, list(self.skipped_seeds))


def collect_dual_trajectories(fp_eval, schedule: NoiseSchedule, grid: TimeGrid, seeds: Sequence[int],
                              n_chains: int = 64, dim: int = 2) -> CalibrationSet:
    """First- and second-order trajectories from identical x_T per seed."""
    fx, ft, sx, st, tn, sd, stp, skipped = [], [], [], [], [], [], [], []
    for seed in seeds:
        x_T = np.random.default_rng(seed).standard_normal((n_chains, dim))
        t1 = sample(fp_eval, schedule, grid, x_T, "dpm1")
        t2 = sample(fp_eval, schedule, grid, x_T, "dpm2")
        if t1.diverged or t2.diverged:
            log.warning("calibration seed %d diverged; skipped", seed)
            skipped.append(seed)
            continue
        for i in range(grid.steps):
            fx.append(t1.eval_inputs[i])
            ft.append(grid.times[i])
            sx.append(t2.mid_states[i])
            st.append(t2.mid_times[i])
            tn.append(grid.times[i + 1])
            sd.append(seed)
            stp.append(i + 1)
    if not fx:
        raise QuantError("every calibration seed diverged")
    return CalibrationSet(np.stack(fx), np.array(ft), np.stack(sx), np.array(st),
                          np.array(tn), np.array(sd), np.array(stp), skipped)


def branch_points(calib: CalibrationSet, pairing: str, idx=None):
    """((x_q, t_q), (x_fp, t_fp)) for the quantized and full-precision branches."""
    if pairing not in PAIRINGS:
        raise ValueError(f"unknown pairing {pairing!r}")
    first = calib.points("first", idx)
    if pairing == "same":
        return first, first
    second = calib.points("second", idx)
    if pairing == "first_to_second":
        return first, second
    return second, first


def collect_plms_pairs(fp_eval, schedule: NoiseSchedule, grid: TimeGrid, seeds: Sequence[int],
                       high_order: int = 4, low_order: int = 3, n_chains: int = 64, dim: int = 2):
    """Inputs along a PLMS trajectory with gradient parts of two multistep orders."""
    from .samplers import plms_combine
    xs, ts, lo, hi = [], [], [], []
    for seed in seeds:
        x_T = np.random.default_rng(seed).standard_normal((n_chains, dim))
        traj = sample(fp_eval, schedule, grid, x_T, "plms", plms_order=high_order)
        hist = []
        for i, (x, eps) in enumerate(zip(traj.eval_inputs, traj.eval_outputs)):
            xs.append(x)
            ts.append(np.full(len(x), traj.times[i]))
            hi.append(plms_combine(eps, hist[-3:], high_order))
            lo.append(plms_combine(eps, hist[-3:], low_order))
            hist.append(eps)
    return np.concatenate(xs), np.concatenate(ts), np.concatenate(lo), np.concatenate(hi)


# -- layer-wise reconstruction ------------------------------------------------

@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 1000
    batch_pairs: int = 8
    lr_alpha: float = 1e-2
    lr_act: float = 1e-3
    reg_weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    learn_act: bool = True


def _beta(it: int, cfg: ReconConfig) -> Optional[float]:
    start = cfg.warmup * cfg.iterations
    if it < start:
        return None
    frac = (it - start) / max(cfg.iterations - start, 1)
    return cfg.beta_end + (cfg.beta_start - cfg.beta_end) * (1 - frac)


def _layer_loss(qm, i, a, target, h, need_grad=False):
    """Reconstruction loss of layer i given its raw input ``a`` and soft mask ``h``."""
    if act_quantized(qm, i):
        a_in, a_cache = fq_forward(a, qm.a_quant[i])
    else:
        a_in, a_cache = a, None
    Wq, v = rounded_weight(qm.params.weights[i], qm.w_quant[i], h)
    z = a_in @ Wq.T + qm.params.biases[i]
    diff = z - target
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    if not need_grad:
        return loss
    g = 2.0 * diff / diff.shape[0]
    dWq = g.T @ a_in
    inside = (v >= 0) & (v <= qm.w_quant[i].qmax)
    dh = np.where(inside, dWq * qm.w_quant[i].scale, 0.0)
    da_ls = da_z = 0.0
    if a_cache is not None:
        _, da_ls, da_z = fq_backward(g @ Wq, a_cache)
    return loss, dh, da_ls, da_z


def reconstruction_targets(fp_params: Parameters, config: NetConfig, i: int, x, t):
    _, (acts, pre) = nn.forward_with_cache(config, fp_params, None, x, t)
    return pre[i]


def sa_ptq_reconstruct(qm: QuantModel, layer_index: int, calib: CalibrationSet,
                       cfg: ReconConfig = ReconConfig(), pairing: str = "first_to_second",
                       fp_params: Optional[Parameters] = None, seed: int = 0,
                       history: Optional[list] = None) -> QuantModel:
    """Soft-rounding reconstruction of one linear layer under mixed-order pairing.

    Layers before ``layer_index`` must already be reconstructed. Returns a
    new model; the input is left untouched.
    """
    qm = qm.copy()
    i = layer_index
    fp_params = qm.params if fp_params is None else fp_params
    (xq, tq), (xf, tf) = branch_points(calib, pairing)
    target = reconstruction_targets(fp_params, qm.config, i, xf, tf)
    a = layer_input(qm, i, xq, tq)
    if act_quantized(qm, i) and qm.a_quant[i] is None:
        qm.a_quant[i] = Quantizer.fit(a, _a_bits(qm, i))
    W, q = qm.params.weights[i], qm.w_quant[i]
    near = nearest_mask(W, q)
    if cfg.iterations == 0:
        qm.masks[i] = near
        return qm
    saved_act = None if qm.a_quant[i] is None else Quantizer(qm.a_quant[i].log_scale, qm.a_quant[i].zero,
                                                             qm.a_quant[i].bits)
    alpha = alpha_init(W, q)
    learn_act = cfg.learn_act and act_quantized(qm, i)
    act_params = np.array([qm.a_quant[i].log_scale, qm.a_quant[i].zero]) if learn_act else None
    opt_a = Adam([alpha.shape], lr=cfg.lr_alpha)
    opt_q = Adam([(2,)], lr=cfg.lr_act)
    rng = np.random.default_rng(seed)
    n_chains = calib.n_chains
    rows = len(calib) * n_chains
    batch = min(cfg.batch_pairs * n_chains, rows)
    for it in range(cfg.iterations):
        sel = rng.choice(rows, size=batch, replace=False)
        h = rectified_sigmoid(alpha)
        rec, dh, da_ls, da_z = _layer_loss(qm, i, a[sel], target[sel], h, need_grad=True)
        beta = _beta(it, cfg)
        grad_alpha = dh * rectified_sigmoid_grad(alpha)
        reg = 0.0
        if beta is not None:
            m = 2 * h - 1
            reg = cfg.reg_weight * float(np.sum(1 - np.abs(m) ** beta))
            dreg_dh = -cfg.reg_weight * beta * np.abs(m) ** (beta - 1) * np.sign(m) * 2
            grad_alpha = grad_alpha + dreg_dh * rectified_sigmoid_grad(alpha)
        if not np.isfinite(rec + reg):
            raise QuantError(f"reconstruction loss non-finite at layer{i}, iteration {it}")
        opt_a.step([alpha], [grad_alpha])
        if learn_act:
            opt_q.step([act_params], [np.array([da_ls, da_z])])
            qm.a_quant[i].log_scale, qm.a_quant[i].zero = float(act_params[0]), float(act_params[1])
        if history is not None:
            history.append((i, it, rec, reg))
    hard = (rectified_sigmoid(alpha) >= 0.5).astype(np.float64)
    # a learned solution that is worse than nearest rounding on the full set is discarded
    learned = _layer_loss(qm, i, a, target, hard)
    baseline_q = qm.copy()
    if saved_act is not None:
        baseline_q.a_quant[i] = saved_act
    baseline = _layer_loss(baseline_q, i, a, target, near)
    if learned <= baseline:
        qm.masks[i] = hard
    else:
        qm.masks[i] = near
        qm.a_quant[i] = saved_act
    return qm


def naive_ptq_reconstruct(qm: QuantModel, layer_index: int, same_point_calib: CalibrationSet,
                          cfg: ReconConfig = ReconConfig(), fp_params: Optional[Parameters] = None,
                          seed: int = 0, history: Optional[list] = None) -> QuantModel:
    """Baseline: both branches see the same first-order inputs."""
    return sa_ptq_reconstruct(qm, layer_index, same_point_calib.same_point(), cfg, "same",
                              fp_params, seed, history)


def calibrate_ptq(config: NetConfig, params: Parameters, calib: CalibrationSet, w_bits: int = 8,
                  a_bits: int = 8, cfg: ReconConfig = ReconConfig(), pairing: str = "first_to_second",
                  seed: int = 0) -> QuantModel:
    """Quantize every layer in order with soft-rounding reconstruction."""
    qm = make_quant_model(config, params, w_bits, a_bits)
    for i in range(config.n_layers):
        qm = sa_ptq_reconstruct(qm, i, calib, cfg, pairing, fp_params=params, seed=seed + i)
    return qm


# -- SA-QLoRA ----------------------------------------------------------------

@dataclass(frozen=True)
class SAQLoRAConfig:
    steps: tuple = (100, 50, 20)
    batch_size: int = 4
    rank: int = 32
    # sized for the 2-D toy problems
    epochs: int = 40
    w_cos: float = 1.0
    w_mota: float = 1.0
    pairing: str = "first_to_second"
    lr: float = 1e-3
    lr_quant: float = 1e-3
    n_chains: int = 64
    seeds_per_cycle: int = 1

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps or min(steps) < 1 or any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("steps must be a strictly decreasing list of positive integers")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing {self.pairing!r}")


def cosine_loss(e, e_hat, need_grad=False, tiny=1e-12):
    """Mean over rows of 1 - cos(e, e_hat); gradient w.r.t. e_hat."""
    ne = np.linalg.norm(e, axis=1, keepdims=True)
    nh = np.linalg.norm(e_hat, axis=1, keepdims=True)
    denom = np.maximum(ne * nh, tiny)
    cos = np.sum(e * e_hat, axis=1, keepdims=True) / denom
    loss = float(np.mean(1.0 - cos))
    if not need_grad:
        return loss
    grad = -(e / denom - cos * e_hat / np.maximum(nh**2, tiny)) / e.shape[0]
    return loss, grad


def mota_loss(e, e_hat, need_grad=False):
    """Mean over rows of ||e_hat - e||^2."""
    diff = e_hat - e
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    if not need_grad:
        return loss
    return loss, 2.0 * diff / e.shape[0]


@dataclass
class QLoRALog:
    rows: list = field(default_factory=list)

    def add(self, steps, epoch, it, cos, mota, total):
        self.rows.append((steps, epoch, it, cos, mota, total))


class QLoRADiverged(QuantError):
    def __init__(self, epoch: int):
        super().__init__(f"QLoRA loss non-finite in epoch {epoch}")
        self.epoch = epoch


def init_qlora_model(config: NetConfig, params: Parameters, fp_eval, schedule: NoiseSchedule,
                     w_bits: int, a_bits: int, rank: int, seed: int, init_steps: int = 20,
                     n_chains: int = 256) -> QuantModel:
    """Quantized model with a fresh adapter; activation ranges come from a
    full-precision first-order trajectory."""
    rng = np.random.default_rng(seed)
    adapter = nn.make_adapter(config, rank, rng)
    qm = make_quant_model(config, params, w_bits, a_bits, adapter)
    grid = make_grid(schedule, init_steps)
    x_T = rng.standard_normal((n_chains, config.input_dim))
    traj = sample(fp_eval, schedule, grid, x_T, "dpm1")
    x = np.concatenate(traj.eval_inputs)
    t = np.repeat(traj.times[:-1], n_chains)
    qm.acts_quantized = False
    a_in = [layer_input(qm, i, x, t) for i in range(config.n_layers)]
    qm.acts_quantized = True
    for i, a in enumerate(a_in[1:], start=1):
        qm.a_quant[i] = Quantizer.fit(a, _a_bits(qm, i))
    return qm


def sa_qlora_train(qm: QuantModel, fp_eval, schedule: NoiseSchedule, cfg: SAQLoRAConfig = SAQLoRAConfig(),
                   seed: int = 0, log_out: Optional[QLoRALog] = None) -> QuantModel:
    """Fine-tune adapter and quantizer parameters with the mixstep schedule."""
    if qm.adapter is None:
        raise QuantError("SA-QLoRA needs a model with an attached adapter")
    qm = qm.copy()
    ad = qm.adapter
    L = qm.n_layers
    quant_params = np.zeros(4 * L)

    def pack():
        for i in range(L):
            a = qm.a_quant[i]
            quant_params[4 * i: 4 * i + 4] = (qm.w_quant[i].log_scale, qm.w_quant[i].zero,
                                              0.0 if a is None else a.log_scale, 0.0 if a is None else a.zero)

    def unpack():
        for i in range(L):
            w, a = qm.w_quant[i], qm.a_quant[i]
            w.log_scale, w.zero = float(quant_params[4 * i]), float(quant_params[4 * i + 1])
            if a is not None:
                a.log_scale, a.zero = float(quant_params[4 * i + 2]), float(quant_params[4 * i + 3])

    pack()
    opt_ad = Adam([a.shape for a in ad.A] + [b.shape for b in ad.B], lr=cfg.lr)
    opt_q = Adam([quant_params.shape], lr=cfg.lr_quant)
    rng = np.random.default_rng(seed)
    it = 0
    for cycle, steps in enumerate(cfg.steps):
        grid = make_grid(schedule, steps)
        cyc_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=cfg.seeds_per_cycle)]
        calib = collect_dual_trajectories(fp_eval, schedule, grid, cyc_seeds, cfg.n_chains,
                                          qm.config.input_dim)
        (xq, tq), (xf, tf) = branch_points(calib, cfg.pairing)
        target = fp_eval(xf, tf)
        n = calib.n_chains
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(calib))
            for b0 in range(0, len(order), cfg.batch_size):
                pairs = order[b0: b0 + cfg.batch_size]
                rows = (pairs[:, None] * n + np.arange(n)[None, :]).ravel()
                x, t, e = xq[rows], tq[rows], target[rows]
                e_hat = fake_quant_forward(qm, x, t)
                up = np.zeros_like(e_hat)
                l_cos = l_mota = 0.0
                if cfg.w_cos:
                    l_cos, g = cosine_loss(e, e_hat, need_grad=True)
                    up += cfg.w_cos * g
                else:
                    l_cos = cosine_loss(e, e_hat)
                if cfg.w_mota:
                    l_mota, g = mota_loss(e, e_hat, need_grad=True)
                    up += cfg.w_mota * g
                else:
                    l_mota = mota_loss(e, e_hat)
                total = cfg.w_cos * l_cos + cfg.w_mota * l_mota
                if not np.isfinite(total):
                    raise QLoRADiverged(epoch)
                if log_out is not None:
                    log_out.add(steps, epoch, it, l_cos, l_mota, total)
                it += 1
                if not (cfg.w_cos or cfg.w_mota):
                    continue
                gr = fake_quant_backward(qm, x, t, up)
                opt_ad.step(ad.A + ad.B, gr.A + gr.B)
                gq = np.zeros_like(quant_params)
                gq[0::4], gq[1::4], gq[2::4], gq[3::4] = gr.w_log_scale, gr.w_zero, gr.a_log_scale, gr.a_zero
                opt_q.step([quant_params], [gq])
                unpack()
    return qm


# -- persistence ---------------------------------------------------------------

def save_quant_model(prefix, qm: QuantModel) -> list[Path]:
    """Base checkpoint plus a JSON sidecar, packed rounding masks and adapter tensors."""
    prefix = Path(prefix)
    paths = nn.save_checkpoint(prefix.with_name(prefix.name + "_base"), qm.config, qm.params)
    side = {"layers": [], "weights_quantized": qm.weights_quantized, "acts_quantized": qm.acts_quantized,
            "a_bits": qm.a_bits}
    mask_path = prefix.with_name(prefix.name + "_masks.bin")
    with open(mask_path, "wb") as fh:
        for i in range(qm.n_layers):
            entry = {}
            for key, q in (("weight", qm.w_quant[i]), ("act", qm.a_quant[i])):
                entry[key] = None if q is None else {
                    "s": q.scale, "z": q.zero_int, "b": q.bits, "log_scale": q.log_scale, "zero_param": q.zero}
            m = qm.masks[i]
            if m is not None:
                packed = np.packbits(m.astype(np.uint8).ravel())
                entry["mask"] = {"offset": fh.tell(), "nbytes": int(packed.size), "shape": list(m.shape)}
                fh.write(packed.tobytes())
            else:
                entry["mask"] = None
            side["layers"].append(entry)
    paths.append(mask_path)
    if qm.adapter is not None:
        ad_path = prefix.with_name(prefix.name + "_adapter.bin")
        index = {}
        with open(ad_path, "wb") as fh:
            for i in range(qm.n_layers):
                for key, arr in (("A", qm.adapter.A[i]), ("B", qm.adapter.B[i])):
                    index[f"layer{i}.{key}"] = fh.tell()
                    write_tensor(fh, arr)
        side["adapter"] = {"ranks": qm.adapter.ranks, "c": qm.adapter.c, "arrays": index}
        paths.append(ad_path)
    side_path = prefix.with_name(prefix.name + "_quant.json")
    side_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    paths.append(side_path)
    return paths


def load_quant_model(prefix) -> QuantModel:
    prefix = Path(prefix)
    config, params = nn.load_checkpoint(prefix.with_name(prefix.name + "_base"))
    side = json.loads(prefix.with_name(prefix.name + "_quant.json").read_text())
    raw = prefix.with_name(prefix.name + "_masks.bin").read_bytes()
    w_quant, a_quant, masks = [], [], []
    for entry in side["layers"]:
        for key, dest in (("weight", w_quant), ("act", a_quant)):
            e = entry[key]
            dest.append(None if e is None else Quantizer(e["log_scale"], e["zero_param"], e["b"]))
        m = entry["mask"]
        if m is None:
            masks.append(None)
        else:
            bits = np.unpackbits(np.frombuffer(raw[m["offset"]: m["offset"] + m["nbytes"]], dtype=np.uint8))
            size = int(np.prod(m["shape"]))
            masks.append(bits[:size].reshape(m["shape"]).astype(np.float64))
    adapter = None
    if "adapter" in side:
        a = side["adapter"]
        A, B = [], []
        with open(prefix.with_name(prefix.name + "_adapter.bin"), "rb") as fh:
            for i in range(config.n_layers):
                fh.seek(a["arrays"][f"layer{i}.A"])
                A.append(read_tensor(fh))
                fh.seek(a["arrays"][f"layer{i}.B"])
                B.append(read_tensor(fh))
        adapter = LoRAAdapter(A, B, a["ranks"], a["c"])
    return QuantModel(config, params, w_quant, a_quant, masks, adapter,
                      side["weights_quantized"], side["acts_quantized"], a_bits=side.get("a_bits"))


def quantized_weight_codes(qm: QuantModel, i: int):
    """Integer codes of layer i's deployed weight (for export/inspection)."""
    Wq, _, _ = effective_weight(qm, i)
    return quantize(Wq, qm.w_quant[i].spec)
