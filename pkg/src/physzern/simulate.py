"""Synthetic lens populations, blurred-patch datasets and lens-held-out folds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .optics import PsfGeometry, blur_image, psf_from_coeffs, wavefront_from_coeffs
from .zernike import NOLL_INDICES, N_COEFFS, PupilGrid, check_coeffs, noll_to_nm

RADIAL_ORDERS = np.array([noll_to_nm(j)[0] for j in NOLL_INDICES])


@dataclass(frozen=True)
class LensRecord:
    lens_id: str
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", check_coeffs(self.coeffs))


@dataclass(frozen=True)
class AmplitudeProfile:
    """Zero-mean Gaussian coefficients with ``sigma_n = sigma0 / decay**(n - 1)``."""

    sigma0: float = 0.08
    decay: float = 2.0

    def sigmas(self) -> np.ndarray:
        return self.sigma0 / self.decay ** (RADIAL_ORDERS - 1.0)


def sample_lens_population(count: int, profile: AmplitudeProfile | None = None, seed: int = 0) -> list[LensRecord]:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    profile = profile or AmplitudeProfile()
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((count, N_COEFFS)) * profile.sigmas()
    width = max(3, len(str(count - 1)))
    return [LensRecord(f"lens{i:0{width}d}", coeffs[i]) for i in range(count)]


def read_lens_set(path) -> list[LensRecord]:
    lenses = [LensRecord(lid, c) for lid, c in io.read_lens_rows(path)]
    ids = [lens.lens_id for lens in lenses]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate lens ids")
    return lenses


def write_lens_set(path, lenses: list[LensRecord]) -> None:
    io.write_lens_csv(path, lenses)


def derived_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; order of generation is irrelevant."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def procedural_texture(size: int, seed: int) -> np.ndarray:
    """Cell-like test texture in [0, 1]: band-limited noise, ellipses, filaments."""
    if size < 32:
        raise ValueError(f"texture size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((size, size))
    img = 0.6 * ndimage.gaussian_filter(noise, 3.0, mode="wrap") + 0.25 * ndimage.gaussian_filter(noise, 0.7, mode="wrap")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_cells = max(4, size * size // 600)
    for _ in range(n_cells):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(2.0, size / 12 + 3.0, 2)
        ang = rng.uniform(0, np.pi)
        c, s = np.cos(ang), np.sin(ang)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        r = (u / rx) ** 2 + (v / ry) ** 2
        amp = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        img += amp * (r <= 1.0)
        img += 0.5 * amp * ((r > 0.75) & (r <= 1.0))  # membrane
    for _ in range(max(2, size // 32)):
        pts = np.cumsum(rng.normal(0, 1.5, (4 * size, 2)), axis=0) + rng.uniform(0, size, 2)
        iy = np.mod(pts[:, 0].astype(int), size)
        ix = np.mod(pts[:, 1].astype(int), size)
        img[iy, ix] += rng.uniform(0.5, 1.0)
    lo, hi = np.percentile(img, [1.0, 99.0])
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def quantize16(image: np.ndarray) -> np.ndarray:
    """Round to the 16-bit grid used by the PGM writer."""
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


@dataclass
class NoiseSpec:
    gaussian_sigma: float = 0.005
    clip: bool = True

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.gaussian_sigma > 0:
            image = image + rng.normal(0.0, self.gaussian_sigma, image.shape)
        if self.clip:
            image = np.clip(image, 0.0, 1.0)
        return image


@dataclass
class SimConfig:
    patch: int = 64
    patches_per_lens: int = 50
    n_samples: int = 128
    aperture_fraction: float = 0.5
    pad_factor: int = 2
    psf_crop: int = 64
    noise_sigma: float = 0.005
    clip: bool = True
    boundary: str = "edge"
    seed: int = 0
    texture_size: int = 256
    n_textures: int = 16

    def geometry(self) -> PsfGeometry:
        return PsfGeometry(PupilGrid(self.n_samples, self.aperture_fraction), self.pad_factor, self.psf_crop)

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.noise_sigma, self.clip)


def load_clean_images(source) -> list[tuple[str, np.ndarray]]:
    """Grayscale images from a directory (PGM or anything Pillow opens)."""
    src = Path(source)
    if not src.is_dir():
        raise FileNotFoundError(f"clean image directory not found: {src}")
    out = []
    for p in sorted(src.iterdir()):
        if not p.is_file() or p.name.startswith("."):
            continue
        try:
            if p.suffix.lower() == ".pgm":
                img = io.read_pgm(p)
            else:
                from PIL import Image

                with Image.open(p) as im:
                    arr = np.asarray(im.convert("I;16") if im.mode.startswith("I;16") else im.convert("L"))
                img = arr.astype(np.float64) / (65535.0 if arr.dtype == np.uint16 else 255.0)
        except Exception as exc:  # noqa: BLE001 - report which file is unreadable
            raise OSError(f"cannot read image {p}: {exc}") from exc
        out.append((p.stem, img))
    if not out:
        raise FileNotFoundError(f"no images in {src}")
    return out


def procedural_sources(cfg: SimConfig) -> list[tuple[str, np.ndarray]]:
    return [
        (f"texture{i:03d}", procedural_texture(cfg.texture_size, int(derived_rng(cfg.seed, "texture", i).integers(2**31))))
        for i in range(cfg.n_textures)
    ]


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]

    def __len__(self):
        return len(self.records)


def generate_dataset(lenses: list[LensRecord], clean_images, cfg: SimConfig, out_dir) -> DatasetManifest:
    """Blur random clean patches with each lens's PSF and write the dataset.

    Layout under ``out_dir``::

        lenses.csv  dataset.json  manifest.jsonl
        psf/<lens>.abr  wavefront/<lens>.abr
        blurred/<sample>.pgm  clean/<sample>.pgm

    ``clean_images`` is a list of ``(name, image)`` pairs.  Every sample draws
    its patch and noise from a stream derived from
    ``(seed, lens_id, patch_index)``.
    """
    out = Path(out_dir)
    p = cfg.patch
    if not clean_images:
        raise ValueError("need at least one clean image")
    for name, img in clean_images:
        if img.ndim != 2:
            raise ValueError(f"clean image {name} is not single-channel")
        if img.shape[0] < p or img.shape[1] < p:
            raise ValueError(f"patch {p} larger than clean image {name} {img.shape}")
    if cfg.psf_crop > p:
        raise ValueError(f"PSF crop {cfg.psf_crop} larger than patch {p}")
    ids = [lens.lens_id for lens in lenses]
    if len(set(ids)) != len(ids):
        raise ValueError("lens ids must be unique")
    geom = cfg.geometry()
    noise = cfg.noise()
    for sub in ("psf", "wavefront", "blurred", "clean"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_lens_set(out / "lenses.csv", lenses)
    records = []
    psfs = {}
    for lens in lenses:
        psfs[lens.lens_id] = psf = psf_from_coeffs(lens.coeffs, geom)
        io.write_grid(out / "psf" / f"{lens.lens_id}.abr", psf)
        io.write_grid(out / "wavefront" / f"{lens.lens_id}.abr", wavefront_from_coeffs(lens.coeffs, geom.grid).values)
    for lens_id, k, sid in sample_plan(lenses, cfg.patches_per_lens):
        psf = psfs[lens_id]
        rng = derived_rng(cfg.seed, lens_id, k)
        src_idx = int(rng.integers(len(clean_images)))
        name, img = clean_images[src_idx]
        y0 = int(rng.integers(img.shape[0] - p + 1))
        x0 = int(rng.integers(img.shape[1] - p + 1))
        clean = quantize16(img[y0 : y0 + p, x0 : x0 + p])
        blurred = noise.apply(blur_image(clean, psf, cfg.boundary), rng)
        blurred_path = f"blurred/{sid}.pgm"
        clean_path = f"clean/{sid}.pgm"
        io.write_pgm16(out / blurred_path, blurred)
        io.write_pgm16(out / clean_path, clean)
        records.append(
            {
                "sample_id": sid,
                "lens_id": lens_id,
                "blurred_path": blurred_path,
                "clean_path": clean_path,
                "noise_sigma": noise.gaussian_sigma,
                "source": name,
                "origin": [y0, x0],
            }
        )
    io.write_jsonl(out / "manifest.jsonl", records)
    meta = {"sim_config": asdict(cfg), "n_lenses": len(lenses), "n_samples": len(records)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return DatasetManifest(out, records)


def sample_plan(lenses: list[LensRecord], patches_per_lens: int) -> list[tuple[str, int, str]]:
    """``(lens_id, patch_index, sample_id)`` for every sample, in generation order."""
    return [(lens.lens_id, k, f"{lens.lens_id}_{k:05d}") for lens in lenses for k in range(patches_per_lens)]


def split_lens_folds(lens_ids, k: int, seed: int) -> list[list[str]]:
    """Partition lens ids into ``k`` disjoint folds whose sizes differ by at most one."""
    ids = sorted(str(i) for i in lens_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("lens ids must be unique")
    if not 2 <= k <= len(ids):
        raise ValueError(f"k must be in 2..{len(ids)}, got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [sorted(ids[i] for i in order[f::k]) for f in range(k)]
    return folds


def write_folds(path, folds: list[list[str]]) -> None:
    Path(path).write_text(json.dumps({str(i): f for i, f in enumerate(folds)}, indent=2) + "\n")


def read_folds(path) -> list[list[str]]:
    raw = json.loads(Path(path).read_text())
    folds = [raw[str(i)] for i in range(len(raw))]
    seen = set()
    for f in folds:
        if seen.intersection(f):
            raise ValueError(f"{path}: folds overlap")
        seen.update(f)
    return folds


def train_test_lenses(folds: list[list[str]], fold_index: int) -> tuple[list[str], list[str]]:
    if not 0 <= fold_index < len(folds):
        raise IndexError(f"fold index {fold_index} out of range for {len(folds)} folds")
    test = list(folds[fold_index])
    train = sorted(lid for i, f in enumerate(folds) if i != fold_index for lid in f)
    return train, test


def verify_manifest(root) -> list[str]:
    """Return a list of integrity problems (empty when the dataset is consistent)."""
    root = Path(root)
    problems = []
    lens_ids = {lens.lens_id for lens in read_lens_set(root / "lenses.csv")}
    records = io.read_jsonl(root / "manifest.jsonl")
    for rec in records:
        if rec["lens_id"] not in lens_ids:
            problems.append(f"{rec['sample_id']}: unknown lens {rec['lens_id']}")
        for key in ("blurred_path", "clean_path"):
            if not (root / rec[key]).is_file():
                problems.append(f"{rec['sample_id']}: missing {rec[key]}")
    on_disk = len(list((root / "blurred").glob("*.pgm")))
    if on_disk != len(records):
        problems.append(f"manifest lists {len(records)} samples, blurred/ holds {on_disk}")
    for lid in lens_ids:
        for sub in ("psf", "wavefront"):
            if not (root / sub / f"{lid}.abr").is_file():
                problems.append(f"missing {sub}/{lid}.abr")
    return problems
