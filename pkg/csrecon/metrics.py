"""PSNR / SSIM and whole-directory reconstruction evaluation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.signal import convolve2d

from .cs_operator import SamplingOperator, back_project, sample
from .datasets import crop_to_multiple
from .engine import Rng, Tensor, no_grad
from .errors import ShapeError
from .metrics_log import PSNR_CAP, format_psnr, write_rows
from .netpbm import to_luma, write_image
from .utils import slugify

try:
    from openpyxl import Workbook
except Exception:  # pragma: no cover
    Workbook = None

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EVAL_MODES = ("luma", "rgb")


def _pair(x_hat: Any, x: Any) -> tuple:
    a = np.asarray(x_hat.data if isinstance(x_hat, Tensor) else x_hat, dtype=np.float64)
    b = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(x_hat: Any, x: Any, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` when the images are identical."""
    a, b = _pair(x_hat, x)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, window: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(img: np.ndarray) -> np.ndarray:
        return convolve2d(img, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x_hat: Any, x: Any, data_range: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(x_hat, x)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[1]}x{a.shape[2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = gaussian_window()
    return float(np.mean([_ssim_plane(pa, pb, window, data_range) for pa, pb in zip(a, b)]))


def score_pair(x_hat: np.ndarray, x: np.ndarray, mode: str = "luma") -> tuple:
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "luma":
        x_hat, x = to_luma(x_hat), to_luma(x)
    return psnr(x_hat, x), ssim(x_hat, x)


@dataclass
class ImageScore:
    name: str
    psnr_db: float
    ssim: float
    baseline_psnr_db: Optional[float] = None
    baseline_ssim: Optional[float] = None
    nfe: int = 0
    seconds: float = 0.0


@dataclass
class EvalReport:
    mode: str
    scores: List[ImageScore] = field(default_factory=list)

    def _stats(self, values: Sequence[float]) -> tuple:
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            return math.nan, math.nan
        return float(arr.mean()), float(arr.std())

    @property
    def psnr_mean(self) -> float:
        return self._stats([min(s.psnr_db, PSNR_CAP) for s in self.scores])[0]

    @property
    def psnr_std(self) -> float:
        return self._stats([min(s.psnr_db, PSNR_CAP) for s in self.scores])[1]

    @property
    def ssim_mean(self) -> float:
        return self._stats([s.ssim for s in self.scores])[0]

    @property
    def ssim_std(self) -> float:
        return self._stats([s.ssim for s in self.scores])[1]

    @property
    def has_baseline(self) -> bool:
        return any(s.baseline_psnr_db is not None for s in self.scores)

    def fields(self) -> List[str]:
        names = ["name", "psnr_db", "ssim"]
        if self.has_baseline:
            names += ["baseline_psnr_db", "baseline_ssim"]
        return names + ["nfe", "seconds"]

    def rows(self) -> List[Dict[str, Any]]:
        rows = []
        for score in self.scores:
            row = asdict(score)
            row["psnr_db"] = format_psnr(score.psnr_db)
            if score.baseline_psnr_db is not None:
                row["baseline_psnr_db"] = format_psnr(score.baseline_psnr_db)
            rows.append(row)
        return rows

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "count": len(self.scores),
            "mode": self.mode,
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
        }
        if self.has_baseline:
            base = [min(s.baseline_psnr_db, PSNR_CAP) for s in self.scores if s.baseline_psnr_db is not None]
            out["baseline_psnr_mean"] = self._stats(base)[0]
        return out

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_rows(path, self.fields(), self.rows())

    def write_xlsx(self, path: Union[str, Path]) -> Path:
        if Workbook is None:
            raise RuntimeError("openpyxl이 설치되어 있지 않습니다. requirements.txt에 openpyxl을 추가하세요.")
        wb = Workbook()
        ws = wb.active
        ws.title = "reconstruction"
        fields = self.fields()
        ws.append(fields)
        for score in self.scores:
            ws.append([_capped(k, getattr(score, k)) for k in fields])
        summary = wb.create_sheet("summary")
        for key, value in self.summary().items():
            summary.append([key, value])
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        wb.save(path)
        return path

    def format_table(self) -> str:
        fields = self.fields()
        rows = [[_table_cell(k, getattr(s, k)) for k in fields] for s in self.scores]
        widths = [max([len(k)] + [len(r[i]) for r in rows]) for i, k in enumerate(fields)]
        line = "  ".join(k.ljust(w) for k, w in zip(fields, widths))
        out = [line, "-" * len(line)]
        out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        out.append(
            f"mean PSNR {self.psnr_mean:.2f} dB (std {self.psnr_std:.2f}), "
            f"mean SSIM {self.ssim_mean:.4f} (std {self.ssim_std:.4f}), n={len(self.scores)}"
        )
        return "\n".join(out)


def _capped(key: str, value: Any) -> Any:
    if key.endswith("psnr_db") and isinstance(value, float):
        return min(value, PSNR_CAP)
    return value


def _table_cell(key: str, value: Any) -> str:
    if value is None:
        return "-"
    if key.endswith("psnr_db"):
        return f"{min(value, PSNR_CAP):.2f}"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _evaluate_one(framework: Any, op: SamplingOperator, name: str, image: np.ndarray, mode: str,
                  baseline: bool, multiple: int, init: str, rng: Rng,
                  save_dir: Optional[Path] = None) -> ImageScore:
    image = crop_to_multiple(image, multiple)
    dtype = framework.w_T.dtype
    y = sample(op, Tensor(image.astype(dtype)))
    with no_grad():
        result = framework.reconstruct(op, y, init=init, rng=rng)
    x_hat = np.clip(result.image.data, 0.0, 1.0)
    if save_dir is not None:
        suffix = ".pgm" if x_hat.shape[0] == 1 else ".ppm"
        write_image(save_dir / f"{slugify(Path(name).stem)}{suffix}", x_hat)
    p, s = score_pair(x_hat, image, mode)
    score = ImageScore(name=name, psnr_db=p, ssim=s, nfe=result.nfe, seconds=result.seconds)
    if baseline:
        bp = np.clip(back_project(op, y).data, 0.0, 1.0)
        score.baseline_psnr_db, score.baseline_ssim = score_pair(bp, image, mode)
    logger.debug("%s: psnr=%.3f ssim=%.4f nfe=%d", name, p, s, result.nfe)
    return score


def evaluate(framework: Any, op: SamplingOperator, names: Sequence[str], images: Sequence[np.ndarray],
             mode: str = "luma", baseline: bool = False, workers: int = 1,
             save_dir: Optional[Union[str, Path]] = None, init: str = "backproj",
             seed: int = 0) -> EvalReport:
    """Reconstruct every image from its own measurements and score it.

    Images are cropped to a multiple of the operator block and the estimator
    stride. Scores come back in input order whatever ``workers`` is. With
    ``save_dir`` each reconstruction is also written there as PGM/PPM.
    ``init`` should be the checkpoint's own setting; with ``"noise"`` image ``i``
    draws its x_T from ``Rng(seed).derive(f"eval/{i}")``.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    out_dir = Path(save_dir) if save_dir else None
    multiple = int(np.lcm(op.block, 2 ** (framework.estimator.scales - 1)))
    root = Rng(seed)

    def run(i: int) -> ImageScore:
        return _evaluate_one(framework, op, names[i], images[i], mode, baseline, multiple, init,
                             root.derive(f"eval/{i}"), out_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, range(len(images))))
    else:
        scores = [run(i) for i in range(len(images))]
    return EvalReport(mode=mode, scores=scores)
