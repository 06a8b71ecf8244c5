"""Deterministic experiment orchestration.

All randomness comes from sub-seeds derived from the root seed with
64-bit FNV-1a over the UTF-8 bytes of ``f"{root}:{stage}:{index}"``
(offset basis 0xcbf29ce484222325, prime 0x100000001b3), reduced modulo
2**63 so the value fits numpy's seed range.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import errorlab as E
from . import noisenet as nn
from . import quant as Q
from .config import RunConfig
from .diffusion import AnalyticEvaluator, NoiseSchedule, ToyDistribution, analytic_epsilon
from .metrics import energy_distance, trajectory_mse
from .samplers import make_grid, sample, write_trajectories_csv

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    return fnv1a64(f"{root}:{stage}:{index}".encode()) % (1 << 63)


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class Divergence(StageFailure):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def model_hash(paths) -> str:
    """Hash of checkpoint contents, independent of file names."""
    h = hashlib.sha256()
    for p in sorted(paths, key=lambda p: Path(p).name.split("_")[-1]):
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def build_id() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"saq-{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    config: dict
    build: str
    status: str = "running"
    wall_clock_s: float = 0.0
    stages: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    subseeds: list = field(default_factory=list)
    model_hashes: dict = field(default_factory=dict)
    failure: Optional[dict] = None

    def write(self, path) -> None:
        """Atomic write via rename."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)


def make_distribution(cfg: RunConfig) -> ToyDistribution:
    d = cfg.distribution
    if d.kind == "ring":
        return ToyDistribution.ring(d.n_modes, d.radius, d.std)
    return ToyDistribution.gaussian(d.mean, d.std)


class Runner:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.schedule = NoiseSchedule(**asdict(cfg.schedule))
        self.dist = make_distribution(cfg)
        self.net_config = nn.NetConfig(input_dim=self.dist.dim, hidden_widths=tuple(cfg.net.hidden_widths),
                                       time_embed_dim=cfg.net.time_embed_dim,
                                       max_frequency=cfg.net.max_frequency, T=cfg.schedule.T)
        self.grid = make_grid(self.schedule, cfg.grid.steps, cfg.grid.spacing)
        self.manifest = RunManifest(cfg.to_dict(), build_id())
        self.metrics: list[tuple[str, str, float]] = []
        self._fp = None
        self._dumped = []

    # -- plumbing -----------------------------------------------------------

    def seed(self, stage: str, index: int = 0) -> int:
        s = derive_seed(self.cfg.seed, stage, index)
        log.info("sub-seed %s[%d] = fnv1a64('%d:%s:%d') mod 2^63 = %d", stage, index, self.cfg.seed, stage, index, s)
        self.manifest.subseeds.append({"stage": stage, "index": index, "seed": s})
        return s

    def rng(self, stage: str, index: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed(stage, index))

    def metric(self, stage: str, name: str, value) -> None:
        self.metrics.append((stage, name, float(value)))

    def _stage(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        entry = {"name": name, "status": "running"}
        self.manifest.stages.append(entry)
        try:
            result = fn(*args, **kwargs)
        except (nn.TrainingDiverged, Q.QLoRADiverged) as exc:
            entry["status"] = "diverged"
            raise Divergence(name, str(exc)) from exc
        except StageFailure:
            entry["status"] = "failed"
            raise
        except Exception as exc:
            entry["status"] = "failed"
            raise StageFailure(name, f"{type(exc).__name__}: {exc}") from exc
        entry["status"] = "ok"
        entry["seconds"] = round(time.perf_counter() - t0, 3)
        return result

    def _write_metrics(self) -> None:
        with open(self.out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "name", "value"])
            for stage, name, value in self.metrics:
                w.writerow([stage, name, repr(value)])

    def run(self) -> RunManifest:
        self.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        pipeline = getattr(self, "_run_" + self.cfg.kind.replace("-", "_"))
        try:
            pipeline()
            self.manifest.status = "ok"
        except StageFailure as exc:
            self.manifest.status = "diverged" if isinstance(exc, Divergence) else "failed"
            self.manifest.failure = {"stage": exc.stage, "error": str(exc)}
            raise
        finally:
            self._write_metrics()
            if self._dumped:
                write_trajectories_csv(self.out / "trajectories.csv", self._dumped)
            self.manifest.wall_clock_s = round(time.perf_counter() - t0, 3)
            self.manifest.artifacts = {
                p.relative_to(self.out).as_posix(): sha256_file(p)
                for p in sorted(self.out.rglob("*")) if p.is_file() and p.name != "manifest.json"
                and not p.name.endswith(".tmp")}
            self.manifest.write(self.out / "manifest.json")
        return self.manifest

    # -- shared stages ------------------------------------------------------

    def fp_model(self) -> nn.NetEvaluator:
        if self._fp is not None:
            return self._fp
        if self.cfg.model_checkpoint:
            config, params = self._stage("load-model", nn.load_checkpoint, self.cfg.model_checkpoint)
        else:
            config, params = self.net_config, self._stage("train", self._train)
        self._fp = nn.NetEvaluator(config, params)
        return self._fp

    def _train(self) -> nn.Parameters:
        c = self.cfg.net
        opt = nn.OptimizerConfig(lr=c.lr, steps=c.train_steps, batch_size=c.batch_size)
        res = nn.train_denoiser(self.net_config, self.dist, self.schedule, opt, seed=self.seed("train"))
        nn.save_checkpoint(self.out / "model", self.net_config, res.params)
        self.metric("train", "final_loss", res.final_loss)
        xt, t, noise = nn.denoising_batch(self.dist, self.schedule, 4096, self.rng("heldout"))
        pred = nn.forward(self.net_config, res.params, None, xt, t)
        self.metric("train", "heldout_loss", np.mean((pred - noise) ** 2))
        floor = analytic_epsilon(self.dist, self.schedule, xt, t)
        self.metric("train", "analytic_floor_loss", np.mean((floor - noise) ** 2))
        return res.params

    def x_T(self, stage: str, n: int) -> np.ndarray:
        return self.rng(stage).standard_normal((n, self.dist.dim))

    def reference(self, n: int, index: int = 0) -> np.ndarray:
        return self.dist.sample(n, self.rng("reference", index))

    def _sample(self, evaluator, x_T, stage: str):
        g = self.cfg.grid
        traj = sample(evaluator, self.schedule, self.grid, x_T, g.sampler, g.plms_order)
        if traj.diverged:
            raise Divergence(stage, f"trajectory diverged at step {traj.diverged_step}")
        return traj

    def _dump(self, trajectories) -> None:
        n = self.cfg.eval.dump_chains
        cut = self._dumped
        for tr in trajectories:
            sub = type(tr)(tr.kind, tr.times, [s[:n] for s in tr.states], [], [], list(tr.mid_times),
                           [m[:n] for m in tr.mid_states], [], tr.diverged, tr.diverged_step)
            cut.append(sub)

    def evaluate_quant(self, stage: str, qm: Q.QuantModel) -> None:
        """Endpoint trajectory MSE vs full precision and energy distance vs data."""
        fp = self.fp_model()
        x_T = self.x_T("eval-x_T", self.cfg.eval.chains)
        ref = self._stage(f"{stage}:sample-fp", self._sample, fp, x_T, "sample-fp")
        qt = self._stage(f"{stage}:sample-quant", self._sample, qm, x_T, "sample-quant")
        per_step, end = trajectory_mse(ref, qt)
        self.metric(stage, "endpoint_trajectory_mse", end)
        for i, v in enumerate(per_step):
            self.metric(stage, f"trajectory_mse_step{i}", v)
        data = self.reference(self.cfg.eval.reference)
        self.metric(stage, "energy_distance_quant", energy_distance(qt.final, data))
        self.metric(stage, "energy_distance_fp", energy_distance(ref.final, data))
        self._dump([ref, qt])

    def calibration(self, fp, steps: Optional[int] = None) -> Q.CalibrationSet:
        q = self.cfg.quant
        grid = self.grid if steps is None else make_grid(self.schedule, steps, self.cfg.grid.spacing)
        seeds = [self.seed("calibration", i) for i in range(q.calib_seeds)]
        return Q.collect_dual_trajectories(fp, self.schedule, grid, seeds, q.calib_chains, self.dist.dim)

    def ptq(self, method: str) -> Q.QuantModel:
        fp = self.fp_model()
        q = self.cfg.quant
        calib = self._stage("calibration", self.calibration, fp)
        rc = Q.ReconConfig(iterations=q.recon_iterations, batch_pairs=q.recon_batch_pairs)
        seed = self.seed("reconstruction")
        if method == "none":
            qm = Q.make_quant_model(fp.config, fp.params, q.w_bits, q.a_bits)
            Q.fit_activation_quantizers(qm, *calib.points("first"))
        elif method == "naive":
            qm = self._stage("reconstruct", Q.calibrate_ptq, fp.config, fp.params, calib.same_point(),
                             q.w_bits, q.a_bits, rc, "same", seed)
        else:
            qm = self._stage("reconstruct", Q.calibrate_ptq, fp.config, fp.params, calib,
                             q.w_bits, q.a_bits, rc, q.pairing, seed)
        xq, tq = calib.points("first")
        self.metric("ptq", "empirical_delta", Q.quantization_residue(qm, fp, xq, tq))
        return qm

    def qlora_cfg(self, **changes) -> Q.SAQLoRAConfig:
        c = self.cfg.qlora
        kw = dict(steps=tuple(c.steps), batch_size=c.batch_size, rank=c.rank, epochs=c.epochs, w_cos=c.w_cos,
                  w_mota=c.w_mota, pairing=c.pairing, lr=c.lr, lr_quant=c.lr_quant, n_chains=c.n_chains)
        kw.update(changes)
        return Q.SAQLoRAConfig(**kw)

    def qlora_init(self) -> Q.QuantModel:
        fp = self.fp_model()
        q = self.cfg.quant
        return self._stage("qlora-init", Q.init_qlora_model, fp.config, fp.params, fp, self.schedule,
                           q.w_bits, q.a_bits, self.cfg.qlora.rank, self.seed("qlora-init"))

    def qlora_train(self, init: Q.QuantModel, qcfg: Q.SAQLoRAConfig, label: str) -> Q.QuantModel:
        lg = Q.QLoRALog()
        qm = self._stage(label, Q.sa_qlora_train, init, self.fp_model(), self.schedule, qcfg,
                         self.seed(label), lg)
        with open(self.out / f"{label}_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["steps", "epoch", "iteration", "l_cos", "l_mota", "total"])
            for row in lg.rows:
                w.writerow([row[0], row[1], row[2]] + [repr(float(v)) for v in row[3:]])
        return qm

    def save_quant(self, name: str, qm: Q.QuantModel) -> str:
        paths = Q.save_quant_model(self.out / name, qm)
        h = model_hash(paths)
        self.manifest.model_hashes[name] = h
        return h

    # -- pipelines ----------------------------------------------------------

    def _run_train(self) -> None:
        self._fp = None
        self.cfg.model_checkpoint = None
        self.fp_model()

    def _run_calibrate_ptq(self) -> None:
        qm = self.ptq(self.cfg.quant.method)
        self.save_quant("quant", qm)
        self.evaluate_quant("ptq", qm)

    def _run_finetune_qlora(self) -> None:
        init = self.qlora_init()
        qm = self.qlora_train(init, self.qlora_cfg(), "qlora")
        self.save_quant("quant", qm)
        self.evaluate_quant("qlora", qm)

    def _load_model_for_sampling(self):
        if self.cfg.quant_checkpoint:
            return self._stage("load-quant", Q.load_quant_model, self.cfg.quant_checkpoint)
        return self.fp_model()

    def _run_sample(self) -> None:
        model = self._load_model_for_sampling()
        x_T = self.x_T("sample-x_T", self.cfg.eval.chains)
        traj = self._stage("sample", self._sample, model, x_T, "sample")
        self._dump([traj])
        data = self.reference(self.cfg.eval.reference)
        self.metric("sample", "energy_distance", energy_distance(traj.final, data))
        self.metric("sample", "endpoint_mean_norm", np.mean(np.linalg.norm(traj.final, axis=1)))

    def _run_evaluate(self) -> None:
        fp = self.fp_model()
        model = self._load_model_for_sampling()
        n = self.cfg.eval.chains
        x_T = self.x_T("eval-x_T", n)
        ref = self._stage("sample-fp", self._sample, fp, x_T, "sample-fp")
        other = self._stage("sample-model", self._sample, model, x_T, "sample-model")
        per_step, end = trajectory_mse(ref, other)
        self.metric("evaluate", "endpoint_trajectory_mse", end)
        for i, v in enumerate(per_step):
            self.metric("evaluate", f"trajectory_mse_step{i}", v)
        data = self.reference(self.cfg.eval.reference)
        self.metric("evaluate", "energy_distance_model", energy_distance(other.final, data))
        # self-consistency: two independent batches from the evaluated model
        second = self._stage("sample-model-2", self._sample, model, self.x_T("eval-x_T-2", n), "sample-model-2")
        self.metric("evaluate", "energy_distance_self", energy_distance(other.final, second.final))
        floor = [energy_distance(self.reference(n, 2 * k + 1), self.reference(n, 2 * k + 2))
                 for k in range(self.cfg.eval.floor_pairs)]
        # floor: mean + 3 sd of the distance between independent data batches of the same size
        self.metric("evaluate", "self_distance_noise_floor", np.mean(floor) + 3 * np.std(floor, ddof=1))
        self.metric("evaluate", "self_distance_noise_mean", np.mean(floor))
        self._dump([ref, other])

    def _run_analyze_error(self) -> None:
        e = self.cfg.error
        base = AnalyticEvaluator(self.dist, self.schedule)
        x_T = self.x_T("error-x_T", e.chains)
        report = self._stage("scaling-laws", E.fit_scaling_laws, self.schedule, base, e.deltas, self.cfg.grid.steps,
                             e.h_values, e.h_delta, x_T, e.lam_start, self.seed("error-noise"))
        report.to_json(self.out / "error_report.json")
        report.to_csv(self.out / "error_curves.csv")
        for kind in report.delta_slopes:
            self.metric("analyze-error", f"{kind}_delta_slope", report.delta_slopes[kind].slope)
            self.metric("analyze-error", f"{kind}_h_slope", report.h_slopes[kind].slope)
            self.metric("analyze-error", f"{kind}_bound_constant", max(report.bound_constant[kind].values()))
            self.metric("analyze-error", f"{kind}_bound_constant_ratio", report.bound_constant_stability(kind))
        rich = E.richardson_slope(base, self.schedule, x_T[:64], e.lam_start)
        self.metric("analyze-error", "midpoint_taylor_slope", rich.slope)
        seeds = [self.seed("sensitivity", i) for i in range(e.sensitivity_seeds)]
        sens = E.high_order_sensitivity(base, self.schedule, e.sensitivity_delta, seeds, self.cfg.grid.steps,
                                        e.chains, self.dist.dim)
        for i, (d1, d2) in enumerate(sens):
            self.metric("analyze-error", f"sensitivity_dpm1_seed{i}", d1)
            self.metric("analyze-error", f"sensitivity_dpm2_seed{i}", d2)

    def _run_ablate(self) -> None:
        a = self.cfg.ablate
        if a.compare == "naive-ptq":
            for method in ("sa", "naive"):
                qm = self.ptq(method)
                self.save_quant(f"{method}_ptq", qm)
                self.evaluate_quant(f"{method}-ptq", qm)
            return
        init = self.qlora_init()
        self.save_quant("init_quant", init)
        qm = self.qlora_train(init, self.qlora_cfg(), "qlora")
        self.save_quant("ablated_quant", qm)
        self.evaluate_quant("ablated", qm)
        if a.compare == "plain-qlora":
            plain = self.qlora_train(init, self.qlora_cfg(w_cos=0.0, w_mota=1.0, pairing="same"), "plain_qlora")
            self.save_quant("plain_quant", plain)
            self.evaluate_quant("plain", plain)


def run(cfg: RunConfig) -> RunManifest:
    return Runner(cfg).run()
