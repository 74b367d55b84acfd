"""Sample generation, joint training, scoring and thresholding."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .core import Config
from .dfm import DfmModel, dfm_loss, dual_stream_forward
from .rem import RemModel, rem_loss_terms

log = logging.getLogger(__name__)

FORMAT_VERSION = "redf-checkpoint/1"


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class DataError(ValueError):
    """Input series unusable for the requested operation."""


@dataclass
class MspSampleSet:
    inputs: list[np.ndarray]  # X_0..X_n, each (C, L)
    targets: list[np.ndarray]  # Y_0..Y_n, each (C, H)


@dataclass
class AnomalyScoreSeries:
    scores: np.ndarray  # (T_scored,) >= 0
    index: np.ndarray  # absolute timestep of each score

    def dense(self, length: int) -> np.ndarray:
        """Scores placed on a length-``length`` grid, zero where unscored."""
        out = np.zeros(length)
        out[self.index] = self.scores
        return out


@dataclass(frozen=True)
class Threshold:
    delta: float
    r_pct: float

    def apply(self, scores: np.ndarray) -> np.ndarray:
        return (np.asarray(scores) > self.delta).astype(np.int8)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,L_rem,L_pred,L_contra,total"]
        for r in self.rows:
            lines.append(f"{r['epoch']},{r['L_rem']!r},{r['L_pred']!r},{r['L_contra']!r},{r['total']!r}")
        return "\n".join(lines) + "\n"


def generate_samples(series: np.ndarray, t_start: int, lookback: int, horizon: int,
                     n: int) -> MspSampleSet:
    """Input/target windows for the main path (k=0) and the n MSP modules."""
    series = np.asarray(series)
    total = series.shape[-1]
    if t_start < 0 or t_start + n * horizon + lookback + horizon > total:
        raise IndexError(
            f"start {t_start} with L={lookback}, H={horizon}, n={n} overruns series of length {total}"
        )
    inputs, targets = [], []
    for k in range(n + 1):
        start = t_start + k * horizon
        end = start + lookback
        inputs.append(series[:, start:end])
        targets.append(series[:, end:end + horizon])
    return MspSampleSet(inputs, targets)


def split_train_val(series: np.ndarray, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    cut = series.shape[-1] - int(round(series.shape[-1] * val_fraction))
    return series[:, :cut], series[:, cut:]


class RedF(nn.Module):
    """REM and DFM trained together; the purified stream is the REM output."""

    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        self.rem = RemModel(config)
        self.dfm = DfmModel(config)

    def purify(self, x: Tensor) -> Tensor:
        return self.rem(x).recon

    def losses(self, inputs: Sequence[Tensor], targets: Sequence[Tensor]) -> dict[str, Tensor]:
        cfg = self.config
        rem_out = self.rem(inputs[0])
        purified = rem_out.recon.detach() if cfg.detach_purified else rem_out.recon
        y0, hidden0 = self.dfm(inputs[0])
        y_pure, _ = self.dfm(purified)
        preds = [y0] + self.dfm.msp_chain(inputs[1:], hidden0)
        loss_rem = rem_loss_terms(rem_out, cfg)
        loss_dfm = dfm_loss(preds, targets, y_pure, cfg.lambda_main, cfg.lambda_msp,
                            cfg.lambda_contra)
        loss_contra = torch.mean((y0 - y_pure) ** 2)
        return {
            "L_rem": loss_rem,
            "L_pred": loss_dfm - cfg.lambda_contra * loss_contra,
            "L_contra": loss_contra,
            "total": loss_rem + loss_dfm,
        }


def build_model(config: Config, dtype: torch.dtype = torch.float32) -> RedF:
    torch.manual_seed(config.seed)
    return RedF(config).to(dtype)


def _windows(series: Tensor, length: int) -> Tensor:
    # (C, T) -> (T - length + 1, C, length)
    return series.unfold(1, length, 1).transpose(0, 1)


def _batch(series: Tensor, starts: Tensor, cfg: Config, n: int) -> tuple[list[Tensor], list[Tensor]]:
    xw = _windows(series, cfg.lookback)
    yw = _windows(series, cfg.horizon)
    inputs = [xw[starts + k * cfg.horizon] for k in range(n + 1)]
    targets = [yw[starts + k * cfg.horizon + cfg.lookback] for k in range(n + 1)]
    return inputs, targets


def train(series: np.ndarray, config: Config, rem_only: bool = False,
          dtype: torch.dtype = torch.float32,
          on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[RedF, TrainLog]:
    """Jointly optimize REM and DFM on an unlabeled, assumed-normal series.

    ``series`` is the training part only (validation already removed). With
    ``rem_only`` the DFM is left untouched and only the reconstruction loss is used.
    """
    cfg = config
    series_t = torch.as_tensor(np.asarray(series), dtype=dtype)
    if series_t.dim() != 2 or series_t.shape[0] != cfg.num_channels:
        raise DataError(f"expected a ({cfg.num_channels}, T) series, got {tuple(series_t.shape)}")
    n = 0 if rem_only else cfg.msp_count
    span = cfg.lookback + (n + 1) * cfg.horizon
    if series_t.shape[1] < span:
        raise DataError(f"training series of length {series_t.shape[1]} shorter than {span}")
    if not torch.isfinite(series_t).all():
        raise DataError("training series contains non-finite values")

    model = build_model(cfg, dtype)
    params = list(model.rem.parameters()) if rem_only else list(model.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    starts_all = torch.arange(0, series_t.shape[1] - span + 1, cfg.train_stride)
    gen = torch.Generator().manual_seed(cfg.seed)
    train_log = TrainLog()
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = starts_all[torch.randperm(len(starts_all), generator=gen)]
        sums = {"L_rem": 0.0, "L_pred": 0.0, "L_contra": 0.0, "total": 0.0}
        batches = 0
        for i in range(0, len(order), cfg.batch_size):
            inputs, targets = _batch(series_t, order[i:i + cfg.batch_size], cfg, n)
            if rem_only:
                loss_rem = rem_loss_terms(model.rem(inputs[0]), cfg)
                terms = {"L_rem": loss_rem, "total": loss_rem}
            else:
                terms = model.losses(inputs, targets)
            loss = terms["total"]
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {batches}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            for key, value in terms.items():
                sums[key] += float(value.detach())
            batches += 1
        row = {"epoch": epoch, **{k: v / max(batches, 1) for k, v in sums.items()}}
        train_log.rows.append(row)
        log.info("epoch %d  total %.6f  rem %.6f  pred %.6f  contra %.6f", epoch,
                 row["total"], row["L_rem"], row["L_pred"], row["L_contra"])
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return model, train_log


def _window_starts(length: int, span: int, stride: int) -> np.ndarray:
    if length < span:
        raise DataError(f"series of length {length} shorter than required {span}")
    return np.arange(0, length - span + 1, stride)


def _overlap_average(values: np.ndarray, starts: np.ndarray, offset: int, width: int,
                     length: int) -> AnomalyScoreSeries:
    # values: (num_windows, width) placed at [start + offset, start + offset + width)
    total = np.zeros(length)
    count = np.zeros(length)
    for s, v in zip(starts, values):
        total[s + offset:s + offset + width] += v
        count[s + offset:s + offset + width] += 1
    index = np.nonzero(count)[0]
    return AnomalyScoreSeries(total[index] / count[index], index)


@torch.no_grad()
def forecast_pairs(model: RedF, series: np.ndarray, stride: Optional[int] = None,
                   batch_size: int = 256, purified: Optional[Callable[[Tensor], Tensor]] = None
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Original/purified forecasts for windows every ``stride`` steps.

    Returns (starts, y_orig, y_pure) with forecasts shaped (W, C, H). ``purified``
    overrides the REM (used to force the purified stream in tests).
    """
    cfg = model.config
    model.eval()
    dtype = next(model.parameters()).dtype
    series_t = torch.as_tensor(np.asarray(series), dtype=dtype)
    stride = stride or cfg.stride_for_scoring
    starts = _window_starts(series_t.shape[1], cfg.lookback + cfg.horizon, stride)
    windows = _windows(series_t, cfg.lookback)
    purify = purified or model.purify
    y_orig, y_pure = [], []
    for i in range(0, len(starts), batch_size):
        x0 = windows[torch.as_tensor(starts[i:i + batch_size])]
        pair = dual_stream_forward(model.dfm, x0, purify(x0))
        y_orig.append(pair.y_orig)
        y_pure.append(pair.y_pure)
    return starts, torch.cat(y_orig).double().numpy(), torch.cat(y_pure).double().numpy()


def pointwise_score(y_orig: np.ndarray, y_pure: np.ndarray) -> np.ndarray:
    """(..., C, H) stream pair -> (..., H) channel-mean squared difference."""
    return ((np.asarray(y_orig) - np.asarray(y_pure)) ** 2).mean(axis=-2)


def score(model: RedF, series: np.ndarray, stride: Optional[int] = None,
          purified: Optional[Callable[[Tensor], Tensor]] = None) -> AnomalyScoreSeries:
    """Per-timestep anomaly score: channel-mean squared gap between the two streams."""
    cfg = model.config
    starts, y_orig, y_pure = forecast_pairs(model, series, stride, purified=purified)
    pointwise = pointwise_score(y_orig, y_pure)  # (W, H)
    return _overlap_average(pointwise, starts, cfg.lookback, cfg.horizon, np.asarray(series).shape[-1])


def threshold(scores_val: np.ndarray, scores_test: np.ndarray, r_pct: float) -> Threshold:
    """Nearest-rank threshold on the pooled scores.

    delta is the k-th largest pooled score with k = ceil(r_pct/100 * N); points with a
    score strictly above delta are anomalies.
    """
    pooled = np.concatenate([np.ravel(scores_val), np.ravel(scores_test)])
    if pooled.size == 0:
        raise ValueError("cannot threshold an empty score pool")
    if not 0 < r_pct < 100:
        raise ValueError("r_pct must lie in (0, 100)")
    k = max(1, math.ceil(round(r_pct * pooled.size / 100.0, 9)))
    delta = float(np.sort(pooled)[::-1][k - 1])
    return Threshold(delta, r_pct)


@torch.no_grad()
def rem_ad_score(model: RedF, series: np.ndarray, window: Optional[int] = None) -> AnomalyScoreSeries:
    """REM-only detection score: normalized-space squared reconstruction error.

    Windows of the REM lookback are taken with stride equal to their length; each
    timestep scores the channel mean of its squared error.
    """
    cfg = model.config
    window = window or cfg.lookback
    if window != cfg.lookback:
        raise ValueError(f"REM was built for windows of {cfg.lookback}, not {window}")
    model.eval()
    dtype = next(model.parameters()).dtype
    series_t = torch.as_tensor(np.asarray(series), dtype=dtype)
    length = series_t.shape[1]
    starts = _window_starts(length, window, window)
    # cover the tail with one extra right-aligned window
    if starts[-1] + window < length:
        starts = np.append(starts, length - window)
    x = _windows(series_t, window)[torch.as_tensor(starts)]
    out = model.rem(x)
    err = ((out.recon_norm - out.x_norm) ** 2).mean(dim=1).double().numpy()
    return _overlap_average(err, starts, 0, window, length)


def forecast_only(model: RedF, series: np.ndarray, stride: Optional[int] = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Single-stream forecasts Y_0 for each window; returns (starts, forecasts (W, C, H))."""
    cfg = model.config
    model.eval()
    dtype = next(model.parameters()).dtype
    series_t = torch.as_tensor(np.asarray(series), dtype=dtype)
    starts = _window_starts(series_t.shape[1], cfg.lookback + cfg.horizon,
                            stride or cfg.stride_for_scoring)
    windows = _windows(series_t, cfg.lookback)
    with torch.no_grad():
        preds = [model.dfm(windows[torch.as_tensor(starts[i:i + 256])])[0]
                 for i in range(0, len(starts), 256)]
    return starts, torch.cat(preds).double().numpy()


def forecast_errors(series: np.ndarray, starts: np.ndarray, forecasts: np.ndarray,
                    lookback: int) -> dict[str, float]:
    """MSE and MAE of forecasts against the series, in data units."""
    series = np.asarray(series, dtype=np.float64)
    horizon = forecasts.shape[-1]
    truth = np.stack([series[:, s + lookback:s + lookback + horizon] for s in starts])
    diff = forecasts - truth
    return {"mse": float(np.mean(diff ** 2)), "mae": float(np.mean(np.abs(diff)))}


# checkpoints ---------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(model: RedF, path: str | Path, extra: Optional[dict] = None) -> None:
    """Write config, format tag and every parameter as a named .npy entry.

    Entry timestamps are fixed so identical models give byte-identical files.
    """
    meta = {"format_version": FORMAT_VERSION, "config": model.config.to_dict(),
            "revin": "per-window instance normalization, population std clamped at eps",
            **(extra or {})}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[RedF, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        config = Config.from_dict(meta["config"])
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                state[name[len("params/"):-len(".npy")]] = torch.from_numpy(arr)
    dtype = next(iter(state.values())).dtype
    model = RedF(config).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta
