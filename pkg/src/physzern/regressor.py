"""Image -> Zernike regressor trained with coefficient, physics and map losses.

The combined objective is::

    total = lz * coeff + lpw * wave + lpp * psf + lm * (map_wave + map_psf)

``coeff`` is the MSE of z-scored coefficients.  ``wave`` and ``psf`` run the
denormalized prediction through the differentiable optics layer
(:mod:`physzern.grad`) and compare against the lens's true wavefront and PSF.
``map_*`` are pixel MSEs of two auxiliary decoder heads.  The physics and
map terms are divided by fixed reference scales taken from the training
lenses (their error when predicting the mean lens), so every term is a
dimensionless fraction of unexplained variance like the coefficient term.
"""

from __future__ import annotations

import ast
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import grad as physics
from . import io
from .nn import Conv2d, GlobalAvgPool, Linear, ReLU, Sequential, SGDMomentum
from .optics import PsfGeometry
from .simulate import read_lens_set
from .zernike import N_COEFFS, PupilGrid

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_z: float = 1.0
    lambda_p_wave: float = 1.0
    lambda_p_psf: float = 1.0
    lambda_m: float = 0.5

    def __post_init__(self):
        vals = astuple_weights(self)
        if any(v < 0 for v in vals):
            raise ConfigurationError(f"loss weights must be >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigurationError("at least one loss weight must be positive")


def astuple_weights(w: LossWeights) -> tuple[float, float, float, float]:
    return (w.lambda_z, w.lambda_p_wave, w.lambda_p_psf, w.lambda_m)


# Ablation variants: coefficient only, + wavefront, + PSF, + both, + map heads.
LOSS_VARIANTS = {
    "z": LossWeights(1.0, 0.0, 0.0, 0.0),
    "zpw": LossWeights(1.0, 1.0, 0.0, 0.0),
    "zpp": LossWeights(1.0, 0.0, 1.0, 0.0),
    "zp": LossWeights(1.0, 1.0, 1.0, 0.0),
    "zpm": LossWeights(1.0, 1.0, 1.0, 0.5),
}


@dataclass
class CoeffNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, coeffs: np.ndarray) -> "CoeffNormalizer":
        coeffs = np.asarray(coeffs, dtype=np.float64)
        std = coeffs.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(coeffs.mean(axis=0), std)

    def normalize(self, a):
        return (np.asarray(a) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    channels: tuple = (16, 32, 64, 128)
    bias: bool = True
    map_size: int = 32
    map_heads: bool | None = None
    grad_clip: float = 5.0
    normalize_terms: bool = True
    eval_every: int = 1

    def save(self, path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                values[key] = raw
        return cls(**values)


@dataclass
class LossBreakdown:
    coeff: float = 0.0
    wave: float = 0.0
    psf: float = 0.0
    map_wave: float = 0.0
    map_psf: float = 0.0
    total: float = 0.0

    @staticmethod
    def combine(parts: dict, w: LossWeights) -> "LossBreakdown":
        total = (
            w.lambda_z * parts["coeff"]
            + w.lambda_p_wave * parts["wave"]
            + w.lambda_p_psf * parts["psf"]
            + w.lambda_m * (parts["map_wave"] + parts["map_psf"])
        )
        return LossBreakdown(total=total, **parts)


@dataclass
class Metrics:
    mae: float
    mse: float
    per_coefficient_mae: np.ndarray
    n_samples: int

    def to_json(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "per_coefficient_mae": [float(v) for v in self.per_coefficient_mae],
            "n_samples": self.n_samples,
        }


def downsample(maps: np.ndarray, size: int, reduce: str = "mean") -> np.ndarray:
    """Block-reduce the last two axes to ``size`` (must divide evenly)."""
    n = maps.shape[-1]
    if n % size:
        raise ValueError(f"map size {n} is not a multiple of {size}")
    f = n // size
    blocks = maps.reshape(maps.shape[:-2] + (size, f, size, f))
    return blocks.sum(axis=(-3, -1)) if reduce == "sum" else blocks.mean(axis=(-3, -1))


@dataclass
class LensTargets:
    """Per-lens ground truth used by the loss terms."""

    lens_ids: list[str]
    coeffs: np.ndarray
    wavefronts: np.ndarray
    psfs: np.ndarray
    geom: PsfGeometry
    map_size: int = 32

    def __post_init__(self):
        self.index = {lid: i for i, lid in enumerate(self.lens_ids)}
        self.wave_maps = downsample(self.wavefronts, self.map_size)
        self.psf_maps = downsample(self.psfs, self.map_size, "sum") * self.map_size**2

    def subset(self, lens_ids) -> np.ndarray:
        return np.array([self.index[lid] for lid in lens_ids], dtype=int)


@dataclass
class DatasetArrays:
    """A generated dataset loaded into memory."""

    root: Path
    sample_ids: list[str]
    images: np.ndarray
    lens_of_sample: list[str]
    targets: LensTargets
    records: list[dict] = field(repr=False, default_factory=list)

    def samples_for(self, lens_ids) -> np.ndarray:
        wanted = set(lens_ids)
        return np.array([i for i, lid in enumerate(self.lens_of_sample) if lid in wanted], dtype=int)


def load_dataset(root, map_size: int = 32) -> DatasetArrays:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())["sim_config"]
    geom = PsfGeometry(PupilGrid(meta["n_samples"], meta["aperture_fraction"]), meta["pad_factor"], meta["psf_crop"])
    lenses = read_lens_set(root / "lenses.csv")
    ids = [lens.lens_id for lens in lenses]
    coeffs = np.stack([lens.coeffs for lens in lenses])
    waves = np.stack([io.read_grid(root / "wavefront" / f"{lid}.abr") for lid in ids])
    psfs = np.stack([io.read_grid(root / "psf" / f"{lid}.abr") for lid in ids])
    records = io.read_jsonl(root / "manifest.jsonl")
    images = np.stack([io.read_pgm(root / r["blurred_path"]) for r in records])
    targets = LensTargets(ids, coeffs, waves, psfs, geom, map_size)
    return DatasetArrays(root, [r["sample_id"] for r in records], images, [r["lens_id"] for r in records], targets, records)


def standardize(images: np.ndarray) -> np.ndarray:
    x = images - images.mean(axis=(-2, -1), keepdims=True)
    return x / (x.std(axis=(-2, -1), keepdims=True) + 1e-6)


class Regressor:
    """Strided-conv encoder, global pooling, coefficient head, optional map heads."""

    def __init__(self, cfg: TrainConfig, patch: int, map_heads: bool = False, seed: int | None = None):
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng([seed, 0])
        layers = []
        c_in = 1
        size = patch
        for c_out in cfg.channels:
            conv = Conv2d(c_in, c_out, rng, bias=cfg.bias)
            layers += [conv, ReLU()]
            size = conv.out_size(size)
            c_in = c_out
        layers.append(GlobalAvgPool())
        self.patch = patch
        self.encoder = Sequential(layers)
        self.coeff_head = Linear(c_in, N_COEFFS, rng, bias=cfg.bias)
        self.map_size = cfg.map_size
        self.map_heads = map_heads
        if map_heads:
            # separate stream: enabling the heads leaves encoder/coeff init untouched
            head_rng = np.random.default_rng([seed, 1])
            self.wave_head = Linear(c_in, cfg.map_size**2, head_rng, bias=cfg.bias, scale=0.01)
            self.psf_head = Linear(c_in, cfg.map_size**2, head_rng, bias=cfg.bias, scale=0.01)

    def modules(self):
        yield from self.encoder.named_layers("enc")
        yield "coeff", self.coeff_head
        if self.map_heads:
            yield "wave", self.wave_head
            yield "psf", self.psf_head

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for prefix, layer in self.modules() for k, v in layer.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for prefix, layer in self.modules() for k, v in layer.grads.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, images: np.ndarray):
        """Return ``(coeffs_normalized, wave_map, psf_map)``; maps are None without heads."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[-2:] != (self.patch, self.patch):
            raise ValueError(f"expected {self.patch}x{self.patch} images, got {images.shape[-2:]}")
        h = self.encoder.forward(standardize(images)[:, None])
        coeffs = self.coeff_head.forward(h)
        if not self.map_heads:
            return coeffs, None, None
        b = h.shape[0]
        s = self.map_size
        return coeffs, self.wave_head.forward(h).reshape(b, s, s), self.psf_head.forward(h).reshape(b, s, s)

    def backward(self, d_coeffs, d_wave=None, d_psf=None) -> dict[str, np.ndarray]:
        dh = self.coeff_head.backward(d_coeffs)
        if self.map_heads:
            b = d_coeffs.shape[0]
            dw = np.zeros((b, self.map_size**2)) if d_wave is None else d_wave.reshape(b, -1)
            dp = np.zeros((b, self.map_size**2)) if d_psf is None else d_psf.reshape(b, -1)
            dh = dh + self.wave_head.backward(dw) + self.psf_head.backward(dp)
        self.encoder.backward(dh)
        return self.grads


@dataclass
class TermScales:
    wave: float = 1.0
    psf: float = 1.0
    map_wave: float = 1.0
    map_psf: float = 1.0

    @classmethod
    def from_training(cls, targets: LensTargets, idx: np.ndarray, normalizer: CoeffNormalizer) -> "TermScales":
        geom = targets.geom
        mean = normalizer.mean
        wave = float(np.mean(physics.wave_loss(np.broadcast_to(mean, (len(idx), N_COEFFS)), targets.wavefronts[idx], geom.grid)))
        psf = float(np.mean(physics.psf_loss(np.broadcast_to(mean, (len(idx), N_COEFFS)), targets.psfs[idx], geom)))
        wm = targets.wave_maps[idx]
        pm = targets.psf_maps[idx]
        return cls(
            wave=wave,
            psf=psf,
            map_wave=float(np.mean((wm - wm.mean(axis=0)) ** 2)),
            map_psf=float(np.mean((pm - pm.mean(axis=0)) ** 2)),
        )


def total_loss(outputs, lens_idx: np.ndarray, targets: LensTargets, weights: LossWeights, normalizer: CoeffNormalizer, scales: TermScales | None = None, need_grad: bool = True):
    """Evaluate the combined loss for a batch.

    Returns the :class:`LossBreakdown` (batch means) and, if ``need_grad``,
    the gradients with respect to the three model outputs.
    """
    scales = scales or TermScales()
    coeffs_n, wave_map, psf_map = outputs
    b = coeffs_n.shape[0]
    true = targets.coeffs[lens_idx]
    parts = dict.fromkeys(("coeff", "wave", "psf", "map_wave", "map_psf"), 0.0)
    d_coeffs = np.zeros_like(coeffs_n)
    d_wave = d_psf = None

    if weights.lambda_z > 0:
        r = coeffs_n - normalizer.normalize(true)
        parts["coeff"] = float(np.mean(r**2))
        d_coeffs += weights.lambda_z * 2.0 * r / r.size
    pred = normalizer.denormalize(coeffs_n)
    if weights.lambda_p_wave > 0:
        loss, g = physics.wave_loss_and_grad(pred, targets.wavefronts[lens_idx], targets.geom.grid)
        parts["wave"] = float(np.mean(loss)) / scales.wave
        d_coeffs += weights.lambda_p_wave * g * normalizer.std / (b * scales.wave)
    if weights.lambda_p_psf > 0:
        if need_grad:
            loss, g = physics.psf_loss_and_grad(pred, targets.psfs[lens_idx], targets.geom)
            d_coeffs += weights.lambda_p_psf * g * normalizer.std / (b * scales.psf)
        else:
            loss = physics.psf_loss(pred, targets.psfs[lens_idx], targets.geom)
        parts["psf"] = float(np.mean(loss)) / scales.psf
    if weights.lambda_m > 0:
        if wave_map is None or psf_map is None:
            raise ConfigurationError("map loss enabled but the model has no map heads")
        rw = wave_map - targets.wave_maps[lens_idx]
        rp = psf_map - targets.psf_maps[lens_idx]
        parts["map_wave"] = float(np.mean(rw**2)) / scales.map_wave
        parts["map_psf"] = float(np.mean(rp**2)) / scales.map_psf
        d_wave = weights.lambda_m * 2.0 * rw / (rw.size * scales.map_wave)
        d_psf = weights.lambda_m * 2.0 * rp / (rp.size * scales.map_psf)
    breakdown = LossBreakdown.combine(parts, weights)
    if not need_grad:
        return breakdown, None
    return breakdown, (d_coeffs, d_wave, d_psf)


def _mean_breakdown(rows: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(k for _, k in rows)
    out = {f.name: sum(getattr(b, f.name) * k for b, k in rows) / n for f in fields(LossBreakdown)}
    return LossBreakdown(**out)


def cosine_lr(lr0: float, step: int, total: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / max(total, 1)))


@dataclass
class TrainResult:
    model: Regressor
    normalizer: CoeffNormalizer
    scales: TermScales
    weights: LossWeights
    config: TrainConfig
    train_lens_ids: list[str]
    test_lens_ids: list[str]
    history: list[dict]


def breakdown_on(model, data: DatasetArrays, sample_idx, weights, normalizer, scales, batch: int = 64) -> LossBreakdown:
    rows = []
    t = data.targets
    for start in range(0, len(sample_idx), batch):
        idx = sample_idx[start : start + batch]
        out = model.forward(data.images[idx])
        lens_idx = t.subset([data.lens_of_sample[i] for i in idx])
        bd, _ = total_loss(out, lens_idx, t, weights, normalizer, scales, need_grad=False)
        rows.append((bd, len(idx)))
    return _mean_breakdown(rows)


def train(data: DatasetArrays, folds: list[list[str]], fold_index: int, weights: LossWeights, cfg: TrainConfig | None = None) -> TrainResult:
    """Mini-batch SGD with momentum and cosine decay on the combined loss.

    Lenses in ``folds[fold_index]`` are held out; everything else trains.
    """
    from .simulate import train_test_lenses

    cfg = cfg or TrainConfig()
    train_ids, test_ids = train_test_lenses(folds, fold_index)
    t = data.targets
    if t.map_size != cfg.map_size:
        raise ConfigurationError(f"dataset map size {t.map_size} != config {cfg.map_size}")
    train_idx = data.samples_for(train_ids)
    test_idx = data.samples_for(test_ids)
    if len(train_idx) == 0:
        raise ConfigurationError("no training samples for this fold")
    normalizer = CoeffNormalizer.fit(t.coeffs[t.subset(train_ids)])
    scales = TermScales.from_training(t, t.subset(train_ids), normalizer) if cfg.normalize_terms else TermScales()
    use_maps = weights.lambda_m > 0 if cfg.map_heads is None else bool(cfg.map_heads)
    model = Regressor(cfg, data.images.shape[-1], map_heads=use_maps)
    opt = SGDMomentum(cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 2])
    n_batches = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        rows = []
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            lens_idx = t.subset([data.lens_of_sample[i] for i in idx])
            out = model.forward(data.images[idx])
            bd, d_out = total_loss(out, lens_idx, t, weights, normalizer, scales)
            if not math.isfinite(bd.total):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = model.backward(*d_out)
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not math.isfinite(gnorm):
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}, batch {bi}")
            if cfg.grad_clip and gnorm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / gnorm) for k, g in grads.items()}
            opt.step(model.params, grads, cosine_lr(cfg.lr, step, total_steps))
            step += 1
            rows.append((bd, len(idx)))
        entry = {"epoch": epoch, "train": asdict(_mean_breakdown(rows))}
        last = epoch == cfg.epochs - 1
        if len(test_idx) and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            entry["test"] = asdict(breakdown_on(model, data, test_idx, weights, normalizer, scales))
            entry["test_mae"] = evaluate(model, data, test_ids, normalizer).mae
        history.append(entry)
        log.info("epoch %d train %.4f test_mae %s", epoch, entry["train"]["total"], entry.get("test_mae"))
    return TrainResult(model, normalizer, scales, weights, cfg, train_ids, test_ids, history)


def predict(model: Regressor, images: np.ndarray, normalizer: CoeffNormalizer, batch: int = 64) -> np.ndarray:
    out = [normalizer.denormalize(model.forward(images[s : s + batch])[0]) for s in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, N_COEFFS))


def coefficient_metrics(pred: np.ndarray, true: np.ndarray) -> Metrics:
    if len(pred) == 0:
        raise ValueError("empty test set")
    err = pred - true
    return Metrics(float(np.mean(np.abs(err))), float(np.mean(err**2)), np.mean(np.abs(err), axis=0), len(pred))


def evaluate(model: Regressor, data: DatasetArrays, test_lens_ids, normalizer: CoeffNormalizer) -> Metrics:
    """MAE / MSE in waves over every sample of the given lenses."""
    idx = data.samples_for(test_lens_ids)
    if len(idx) == 0:
        raise ValueError("empty test set")
    pred = predict(model, data.images[idx], normalizer)
    true = data.targets.coeffs[data.targets.subset([data.lens_of_sample[i] for i in idx])]
    return coefficient_metrics(pred, true)


def save_checkpoint(result: TrainResult, out_dir) -> None:
    """``params.bin`` (little-endian float64 blobs) plus ``checkpoint.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = result.model.params
    layout = []
    offset = 0
    with open(out / "params.bin", "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            fh.write(arr.tobytes())
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    meta = {
        "params": layout,
        "patch": result.model.patch,
        "map_heads": result.model.map_heads,
        "config": asdict(result.config),
        "weights": asdict(result.weights),
        "normalizer": {"mean": result.normalizer.mean.tolist(), "std": result.normalizer.std.tolist()},
        "scales": asdict(result.scales),
        "train_lens_ids": result.train_lens_ids,
        "test_lens_ids": result.test_lens_ids,
    }
    (out / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(ckpt_dir):
    """Return ``(model, normalizer, meta)``."""
    ckpt = Path(ckpt_dir)
    meta = json.loads((ckpt / "checkpoint.json").read_text())
    raw = meta["config"]
    raw["channels"] = tuple(raw["channels"])
    cfg = TrainConfig(**raw)
    model = Regressor(cfg, meta["patch"], map_heads=meta["map_heads"])
    flat = np.fromfile(ckpt / "params.bin", dtype="<f8")
    params = model.params
    for entry in meta["params"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]][...] = flat[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
    norm = CoeffNormalizer(np.array(meta["normalizer"]["mean"]), np.array(meta["normalizer"]["std"]))
    return model, norm, meta


def zero_predictor_metrics(data: DatasetArrays, test_lens_ids) -> Metrics:
    idx = data.samples_for(test_lens_ids)
    true = data.targets.coeffs[data.targets.subset([data.lens_of_sample[i] for i in idx])]
    return coefficient_metrics(np.zeros_like(true), true)

