"""Small MLP noise predictor eps(x, t) with hand-written reverse-mode gradients.

Layer ``i`` computes ``z_i = a_i @ W_i.T + b_i`` (+ a low-rank term when an
adapter is attached); hidden layers apply SiLU. The network input ``a_0`` is
``x`` concatenated with a sinusoidal embedding of ``t / T``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .tensorq import read_tensor, write_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 2
    hidden_widths: tuple = (64, 64)
    time_embed_dim: int = 16
    max_frequency: float = 1e4
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a positive even integer")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) per linear layer."""
        widths = [self.input_dim + self.time_embed_dim, *self.hidden_widths, self.input_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1


@dataclass
class Parameters:
    weights: list
    biases: list

    def copy(self) -> "Parameters":
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        return out


@dataclass
class LoRAAdapter:
    """Per-layer low-rank update ``scale_i * B_i @ A_i``; B starts at zero."""

    A: list
    B: list
    ranks: list
    c: float = 1.0

    @property
    def scales(self) -> list:
        return [self.c / r if r > 0 else 0.0 for r in self.ranks]

    def delta(self, i: int) -> np.ndarray:
        return self.scales[i] * (self.B[i] @ self.A[i])

    def copy(self) -> "LoRAAdapter":
        return LoRAAdapter([a.copy() for a in self.A], [b.copy() for b in self.B], list(self.ranks), self.c)


@dataclass
class GradientBundle:
    weights: list
    biases: list
    x: np.ndarray
    A: Optional[list] = None
    B: Optional[list] = None


def init_params(config: NetConfig, rng: np.random.Generator) -> Parameters:
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return Parameters(weights, biases)


def zero_params(config: NetConfig) -> Parameters:
    return Parameters([np.zeros((o, i)) for i, o in config.layer_dims],
                      [np.zeros(o) for _, o in config.layer_dims])


def make_adapter(config: NetConfig, rank: int, rng: np.random.Generator, c: float = 1.0) -> LoRAAdapter:
    """Adapter on every weight matrix; rank is capped at the layer's smaller side."""
    A, B, ranks = [], [], []
    for fan_in, fan_out in config.layer_dims:
        r = min(rank, fan_in, fan_out)
        if r < rank:
            log.warning("LoRA rank %d exceeds layer width (%d->%d); clamped to %d", rank, fan_in, fan_out, r)
        A.append(rng.standard_normal((r, fan_in)) / np.sqrt(fan_in))
        B.append(np.zeros((fan_out, r)))
        ranks.append(r)
    return LoRAAdapter(A, B, ranks, c)


def time_embedding(config: NetConfig, t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    half = config.time_embed_dim // 2
    freqs = np.geomspace(1.0, config.max_frequency, half)
    args = (t / config.T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def network_input(config: NetConfig, x, t) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"expected x of shape (n, {config.input_dim}), got {x.shape}")
    return np.concatenate([x, time_embedding(config, t, x.shape[0])], axis=1)


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s + z * s * (1.0 - s)


def linear(a, W, b, adapter: Optional[LoRAAdapter] = None, i: int = 0):
    z = a @ W.T + b
    if adapter is not None and adapter.ranks[i] > 0:
        z = z + adapter.scales[i] * ((a @ adapter.A[i].T) @ adapter.B[i].T)
    return z


def forward_with_cache(config: NetConfig, params: Parameters, adapter, x, t):
    a = network_input(config, x, t)
    acts, pre = [a], []
    last = config.n_layers - 1
    for i in range(config.n_layers):
        z = linear(a, params.weights[i], params.biases[i], adapter, i)
        pre.append(z)
        if i < last:
            a = silu(z)
            acts.append(a)
    return pre[-1], (acts, pre)


def forward(config: NetConfig, params: Parameters, adapter: Optional[LoRAAdapter], x, t) -> np.ndarray:
    out, _ = forward_with_cache(config, params, adapter, x, t)
    return out


def backward(config: NetConfig, params: Parameters, adapter: Optional[LoRAAdapter], x, t,
             upstream) -> GradientBundle:
    """Gradients of <forward(x, t), upstream> w.r.t. parameters, adapter and x."""
    out, (acts, pre) = forward_with_cache(config, params, adapter, x, t)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    L = config.n_layers
    gW, gb = [None] * L, [None] * L
    gA = [None] * L if adapter is not None else None
    gB = [None] * L if adapter is not None else None
    g = upstream
    for i in reversed(range(L)):
        if i < L - 1:
            g = g * silu_grad(pre[i])
        a = acts[i]
        gW[i] = g.T @ a
        gb[i] = g.sum(axis=0)
        g_in = g @ params.weights[i]
        if adapter is not None:
            sc = adapter.scales[i]
            if adapter.ranks[i] > 0:
                aA = a @ adapter.A[i].T
                gB[i] = sc * (g.T @ aA)
                gBr = g @ adapter.B[i]
                gA[i] = sc * (gBr.T @ a)
                g_in = g_in + sc * (gBr @ adapter.A[i])
            else:
                gA[i] = np.zeros_like(adapter.A[i])
                gB[i] = np.zeros_like(adapter.B[i])
        g = g_in
    return GradientBundle(gW, gb, g[:, : config.input_dim], gA, gB)


@dataclass
class NetEvaluator:
    """Binds a network to the ``(x, t) -> eps`` evaluator contract."""

    config: NetConfig
    params: Parameters
    adapter: Optional[LoRAAdapter] = None

    def __call__(self, x, t):
        return forward(self.config, self.params, self.adapter, x, t)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 5000
    batch_size: int = 256


class Adam:
    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list, grads: list) -> None:
        """In-place update of each array in ``params``."""
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainResult:
    params: Parameters
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final_loss(self) -> float:
        if len(self.losses) == 0:
            return float("nan")
        return float(np.mean(self.losses[-100:]))


def denoising_batch(data_source, schedule, n: int, rng: np.random.Generator):
    x0 = data_source.sample(n, rng)
    t = rng.uniform(schedule.t_min, schedule.T, size=n)
    noise = rng.standard_normal(x0.shape)
    xt = schedule.alpha(t)[:, None] * x0 + schedule.sigma(t)[:, None] * noise
    return xt, t, noise


def train_denoiser(config: NetConfig, data_source, schedule, opt: OptimizerConfig = OptimizerConfig(),
                   seed: int = 0, init: Optional[Parameters] = None) -> TrainResult:
    """Minimize the per-coordinate mean of ||noise - eps(alpha x0 + sigma noise, t)||^2."""
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_params(config, rng)
    arrays = params.weights + params.biases
    adam = Adam([a.shape for a in arrays], opt.lr, opt.beta1, opt.beta2, opt.eps)
    losses = np.empty(opt.steps)
    for step in range(opt.steps):
        xt, t, noise = denoising_batch(data_source, schedule, opt.batch_size, rng)
        pred = forward(config, params, None, xt, t)
        resid = pred - noise
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        losses[step] = loss
        grads = backward(config, params, None, xt, t, 2.0 * resid / resid.size)
        adam.step(arrays, grads.weights + grads.biases)
    return TrainResult(params, losses)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(prefix, config: NetConfig, params: Parameters, extra: Optional[dict] = None) -> list[Path]:
    """Write ``<prefix>.bin`` (SAQT containers) and ``<prefix>.json`` (manifest)."""
    prefix = Path(prefix)
    bin_path, json_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    index = {}
    with open(bin_path, "wb") as fh:
        for name, arr in params.arrays().items():
            offset = fh.tell()
            write_tensor(fh, arr)
            index[name] = offset
    manifest = {"config": asdict(config), "arrays": index}
    if extra:
        manifest.update(extra)
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [bin_path, json_path]


def load_checkpoint(prefix) -> tuple[NetConfig, Parameters]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    config = NetConfig(**manifest["config"])
    arrays = {}
    with open(prefix.with_suffix(".bin"), "rb") as fh:
        for name, offset in manifest["arrays"].items():
            fh.seek(offset)
            arrays[name] = read_tensor(fh)
    L = config.n_layers
    params = Parameters([arrays[f"layer{i}.weight"] for i in range(L)],
                        [arrays[f"layer{i}.bias"] for i in range(L)])
    return config, params
