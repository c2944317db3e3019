"""End-to-end training, the cached-vs-recompute gradient audit and the memory sweep."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import build_config, config_hash, emit_config, parse_config
from .cs_operator import SamplingOperator, back_project, build_operator, sample
from .datasets import PatchDataset, build_dataset, validation_patches
from .engine import CACHED, RECOMPUTE, Rng, Tape, Tensor, backward, no_grad, precision
from .errors import CheckpointError, NonFiniteError, ShapeError, TrainingDivergedError
from .estimator import EstimatorGraph
from .functional import absolute, square
from .metrics import psnr
from .metrics_log import TRAIN_LOG_FIELDS, CsvLog, format_psnr
from .sampler import WiredFramework
from .schedule import DiffusionSchedule, forward_noising
from .schemas import AuditGroup, AuditReport, SweepReport, SweepRow, TrainConfig
from .utils import derive_seed

logger = logging.getLogger(__name__)

SWEEP_STEPS = (1, 2, 4, 8, 12)
AUDIT_TOLERANCE = {"float64": 1e-10, "float32": 1e-4}


# ==================== losses / optimiser ====================

def l1_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at zero is 0."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"l1_loss shapes differ: {x_hat.shape} vs {x.shape}")
    return absolute(x_hat - x).mean()


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    return square(pred - target).mean()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """In-place bias-corrected Adam update; a missing gradient counts as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Learning rate for 0-based ``iteration``: halved every ``lr_halving`` iterations."""
    return config.lr * 0.5 ** (iteration // config.lr_halving)


# ==================== model assembly ====================

@dataclass
class Model:
    config: TrainConfig
    operator: SamplingOperator
    framework: WiredFramework

    @property
    def tape_mode(self) -> str:
        return RECOMPUTE if self.config.invertible else CACHED

    @property
    def dtype(self) -> np.dtype:
        return self.framework.w_T.dtype

    def trainable(self) -> List[Tuple[str, Tensor]]:
        """E2E trains everything; noise regression trains the estimator only."""
        named = list(self.framework.named_parameters())
        if self.config.e2e:
            return named
        return [(n, p) for n, p in named if n.startswith("estimator.")]


def build_model(config: TrainConfig) -> Model:
    with precision(config.precision):
        rng = Rng(config.seed)
        op = build_operator(config.block_size, config.ratio, derive_seed(config.seed, "operator"))
        schedule = DiffusionSchedule(config.steps)
        estimator = EstimatorGraph(
            image_channels=config.image_channels,
            channels=config.channels,
            blocks_per_group=config.blocks_per_group,
            expansion=config.expansion,
            injectors=config.injectors,
            attention=config.attention,
            wired=config.invertible and config.wiring_levels == 2,
            rng=rng.derive("estimator"),
        )
        framework = WiredFramework(schedule, estimator, wired=config.invertible)
    return Model(config=config, operator=op, framework=framework)


def save_model(path: Union[str, Path], model: Model, iteration: int) -> Path:
    return save_checkpoint(path, model.framework.state_dict(), emit_config(model.config), iteration)


def load_model(path: Union[str, Path]) -> Tuple[Model, int]:
    ckpt = load_checkpoint(path)
    config = parse_config(ckpt.config_text, f"{path} (embedded config)")
    model = build_model(config)
    model.framework.load_state_dict(ckpt.tensors)
    if config_hash(config) != ckpt.config_hash:
        raise CheckpointError(f"{path}: embedded config does not re-emit to the same text")
    return model, ckpt.iteration


def parameter_summary(model: Model) -> Dict[str, float]:
    est = model.framework.estimator
    total = est.parameter_count()
    inj = est.injector_parameter_count()
    return {
        "estimator_parameters": total,
        "injector_parameters": inj,
        "injector_ratio": inj / total if total else 0.0,
        "framework_parameters": model.framework.parameter_count(),
    }


# ==================== one item ====================

def _noise_regression_loss(model: Model, x: Tensor, y, rng: Rng) -> Tensor:
    fw = model.framework
    t = int(rng.integers(1, fw.steps + 1))
    eps = rng.normal(x.shape, dtype=x.dtype.type)
    with no_grad():
        noisy = forward_noising(fw.schedule, x, t, eps=eps)
    pred = fw.estimator(Tensor(noisy.data), t, fw.physics(model.operator, y))
    return mse_loss(pred, Tensor(eps))


def item_gradients(model: Model, image: np.ndarray, rng: Rng,
                   mode: Optional[str] = None) -> Tuple[float, Dict[str, np.ndarray], int]:
    """Loss, per-parameter gradients and peak ledger bytes for one image, on its own tape."""
    cfg = model.config
    mode = mode or model.tape_mode
    x = Tensor(np.asarray(image, dtype=model.dtype))
    y = sample(model.operator, x)
    with Tape(mode) as tape:
        if cfg.e2e:
            recon = model.framework.reconstruct(model.operator, y, init=cfg.init, rng=rng.derive("init"))
            loss = l1_loss(recon.image, x)
        else:
            loss = _noise_regression_loss(model, x, y, rng)
    grads = backward(loss, mode=mode, accumulate=False)
    out: Dict[str, np.ndarray] = {}
    for name, p in model.framework.named_parameters():
        g = grads.get(p)
        if g is not None:
            out[name] = g
    return loss.item(), out, tape.ledger.peak_bytes


def _batch_gradients(model: Model, batch: Sequence[np.ndarray], rngs: Sequence[Rng],
                     workers: int) -> Tuple[float, Dict[str, np.ndarray], int]:
    def run(i: int):
        return item_gradients(model, batch[i], rngs[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(batch))))
    else:
        results = [run(i) for i in range(len(batch))]
    n = len(results)
    loss = sum(r[0] for r in results) / n
    grads: Dict[str, np.ndarray] = {}
    # fixed index order keeps the reduction bit-reproducible
    for _, item, _ in results:
        for name, g in item.items():
            grads[name] = g.copy() if name not in grads else grads[name] + g
    grads = {k: g / n for k, g in grads.items()}
    return loss, grads, max(r[2] for r in results)


# ==================== validation ====================

def reconstruct_image(model: Model, image: np.ndarray, rng: Optional[Rng] = None) -> np.ndarray:
    x = Tensor(np.asarray(image, dtype=model.dtype))
    y = sample(model.operator, x)
    with no_grad():
        result = model.framework.reconstruct(model.operator, y, init=model.config.init,
                                             rng=rng or Rng(model.config.seed).derive("val-init"))
    return np.clip(result.image.data, 0.0, 1.0)


def validation_psnr(model: Model, patches: Sequence[np.ndarray]) -> float:
    return float(np.mean([min(psnr(reconstruct_image(model, p), p), 99.99) for p in patches]))


def backprojection_psnr(model: Model, patches: Sequence[np.ndarray]) -> float:
    scores = []
    for p in patches:
        y = sample(model.operator, Tensor(np.asarray(p, dtype=model.dtype)))
        scores.append(min(psnr(np.clip(back_project(model.operator, y).data, 0.0, 1.0), p), 99.99))
    return float(np.mean(scores))


# ==================== training ====================

@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    iterations: int
    losses: List[float]
    final_psnr: float
    baseline_psnr: float


def train(config: TrainConfig, dataset: Optional[PatchDataset] = None,
          val: Optional[Sequence[np.ndarray]] = None, out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """Optimise every trainable parameter; writes ``train_log.csv`` and ``model.rcsc`` to ``out_dir``."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(config.seed)
    with precision(config.precision):
        model = build_model(config)
        if dataset is None:
            dataset = build_dataset(config.patch_size, config.image_channels, config.train_images,
                                    root.derive("data"), config.data_dir)
        if val is None:
            val = validation_patches(config.patch_size, config.image_channels, config.val_patches,
                                     root.derive("data"))
        summary = parameter_summary(model)
        logger.info("estimator %d params, injectors %d (%.2f%%), mode=%s",
                    summary["estimator_parameters"], summary["injector_parameters"],
                    100 * summary["injector_ratio"], model.tape_mode)
        baseline = backprojection_psnr(model, val)
        logger.info("back-projection baseline %.2f dB on %d held-out patches", baseline, len(val))
        log = CsvLog(out / "train_log.csv", TRAIN_LOG_FIELDS)
        params = model.trainable()
        state = AdamState()
        losses: List[float] = []
        final_psnr = math.nan
        for it in range(1, config.iterations + 1):
            lr = lr_at(config, it - 1)
            batch = dataset.batch(root.derive(f"batch/{it}"), config.batch_size)
            rngs = [root.derive(f"item/{it}/{i}") for i in range(len(batch))]
            try:
                loss, grads, peak = _batch_gradients(model, batch, rngs, config.workers)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"iteration {it}: {exc.detail}", iteration=it) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"iteration {it}: loss is {loss}", iteration=it)
            grads, norm = clip_grad_norm(grads, config.grad_clip)
            adam_step(params, grads, state, lr)
            losses.append(loss)
            psnr_val: Optional[float] = None
            if it % config.val_every == 0 or it == config.iterations:
                psnr_val = final_psnr = validation_psnr(model, val)
            log.append({"iter": it, "loss": loss, "psnr_val": format_psnr(psnr_val), "lr": lr, "peak_bytes": peak})
            if it % config.log_every == 0 or it == config.iterations:
                logger.info("iter %d loss %.5f lr %.3g |g| %.3g peak %d B%s", it, loss, lr, norm, peak,
                            "" if psnr_val is None else f" val {psnr_val:.2f} dB")
        ckpt = save_model(out / "model.rcsc", model, config.iterations)
    return TrainResult(checkpoint_path=ckpt, log_path=log.path, iterations=config.iterations,
                       losses=losses, final_psnr=final_psnr, baseline_psnr=baseline)


# ==================== audit ====================

def parameter_group(name: str) -> str:
    if name.startswith("schedule."):
        return "schedule"
    if name.startswith("couplings."):
        return "step_couplings"
    if name in ("w_T", "w_0"):
        return "boundary"
    if ".injector." in name:
        return "injectors"
    if ".coupling." in name or name.endswith(".w_in") or name.endswith(".w_out"):
        return "group_couplings"
    return "estimator"


def jitter_parameters(model: Model, rng: Rng, scale: float = 0.05) -> None:
    """Perturb every estimator tensor so zero-initialised layers carry gradient."""
    for name, p in model.framework.estimator.named_parameters():
        if ".coupling." in name:
            continue
        p.data = (p.data + scale * rng.derive(name).normal(p.shape, dtype=p.dtype.type)).astype(p.dtype)


def grad_equivalence_audit(config: TrainConfig, image: Optional[np.ndarray] = None) -> AuditReport:
    """One forward/backward per tape mode from identical parameters; per-group max relative deviation."""
    cfg = build_config({**config.model_dump(), "e2e": True, "invertible": True}, "audit")
    with precision(cfg.precision):
        model = build_model(cfg)
        jitter_parameters(model, Rng(cfg.seed).derive("audit-jitter"))
        if image is None:
            image = validation_patches(cfg.patch_size, cfg.image_channels, 1, Rng(cfg.seed).derive("audit"))[0]
        item_rng = Rng(cfg.seed).derive("audit-item")
        loss_c, grads_c, _ = item_gradients(model, image, item_rng, mode=CACHED)
        loss_r, grads_r, _ = item_gradients(model, image, item_rng, mode=RECOMPUTE)
    deltas: Dict[str, List[float]] = {}
    scales: Dict[str, List[float]] = {}
    counts: Dict[str, int] = {}
    for name, _ in model.framework.named_parameters():
        group = parameter_group(name)
        gc, gr = grads_c.get(name), grads_r.get(name)
        if gc is None and gr is None:
            continue
        gc = np.zeros_like(gr) if gc is None else gc
        gr = np.zeros_like(gc) if gr is None else gr
        deltas.setdefault(group, []).append(float(np.abs(gr.astype(np.float64) - gc).max()))
        scales.setdefault(group, []).append(float(np.abs(gc.astype(np.float64)).max()))
        counts[group] = counts.get(group, 0) + 1
    tolerance = AUDIT_TOLERANCE[cfg.precision]
    groups = []
    for group in sorted(deltas):
        rel = max(deltas[group]) / max(max(scales[group]), 1e-30)
        groups.append(AuditGroup(group=group, parameters=counts[group], max_rel_deviation=rel))
    passed = all(g.max_rel_deviation < tolerance for g in groups)
    report = AuditReport(precision=cfg.precision, steps=cfg.steps, tolerance=tolerance, passed=passed,
                         groups=groups, loss_cached=loss_c, loss_recompute=loss_r)
    logger.info("gradient audit %s: %s", "passed" if passed else "FAILED",
                ", ".join(f"{g.group}={g.max_rel_deviation:.2e}" for g in groups))
    return report


# ==================== memory sweep ====================

def measure_memory(model: Model, image: np.ndarray, mode: str) -> Tuple[int, int]:
    """(bytes retained after forward, peak bytes over forward + backward)."""
    x = Tensor(np.asarray(image, dtype=model.dtype))
    y = sample(model.operator, x)
    with Tape(mode) as tape:
        recon = model.framework.reconstruct(model.operator, y, init=model.config.init,
                                            rng=Rng(model.config.seed).derive("sweep-init"))
        loss = l1_loss(recon.image, x)
    retained = tape.ledger.live_bytes
    backward(loss, mode=mode, accumulate=False)
    return retained, tape.ledger.peak_bytes


def affine_fit(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def memory_sweep(config: TrainConfig, steps_list: Sequence[int] = SWEEP_STEPS,
                 wiring_levels: Optional[int] = None) -> SweepReport:
    """Peak ledger bytes per T for cached and recompute tapes on the same wired graph."""
    levels = wiring_levels or config.wiring_levels
    image = validation_patches(config.patch_size, config.image_channels, 1, Rng(config.seed).derive("sweep"))[0]
    rows: List[SweepRow] = []
    for steps in steps_list:
        cfg = build_config({**config.model_dump(), "steps": steps, "e2e": True, "invertible": True,
                            "wiring_levels": levels}, "sweep")
        with precision(cfg.precision):
            model = build_model(cfg)
            kept_c, peak_c = measure_memory(model, image, CACHED)
            kept_r, peak_r = measure_memory(model, image, RECOMPUTE)
        reduction = 100.0 * (1.0 - peak_r / peak_c) if peak_c else 0.0
        rows.append(SweepRow(T=steps, cached_peak_bytes=peak_c, recompute_peak_bytes=peak_r,
                             reduction_pct=reduction, cached_retained_bytes=kept_c,
                             recompute_retained_bytes=kept_r))
        logger.info("T=%d cached=%d recompute=%d reduction=%.1f%%", steps, peak_c, peak_r, reduction)
    ts = [r.T for r in rows]
    if len(rows) >= 2:
        slope, intercept, r2 = affine_fit(ts, [r.cached_peak_bytes for r in rows])
        slope_r, _, _ = affine_fit(ts, [r.recompute_peak_bytes for r in rows])
        step_reduction = 100.0 * (1.0 - max(slope_r, 0.0) / slope) if slope > 0 else None
    else:
        slope, intercept, r2, step_reduction = 0.0, float(rows[0].cached_peak_bytes), 1.0, None
    peaks_r = [r.recompute_peak_bytes for r in rows]
    spread = 100.0 * (max(peaks_r) - min(peaks_r)) / min(peaks_r) if min(peaks_r) else 0.0
    return SweepReport(wiring_levels=levels, rows=rows, slope=slope, intercept=intercept, r_squared=r2,
                       step_component_reduction_pct=step_reduction, recompute_spread_pct=spread)
