"""Dataset bundles, spectral PCA, normalisation, patch extraction, synthetic scenes."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor

# default class colours, 1..8
AUGSBURG_PALETTE = [
    (0x1A, 0xA3, 0x19), (0xD8, 0xD8, 0xD8), (0xD8, 0x59, 0x59), (0x00, 0xCC, 0x33),
    (0xCC, 0x99, 0x34), (0xF4, 0xE7, 0x01), (0xCC, 0x66, 0xCC), (0x00, 0x35, 0xFF),
]
# Houston 2018 colour column, classes 1..20
HOUSTON_PALETTE = [
    (0x32, 0xCD, 0x33), (0xAD, 0xFF, 0x30), (0x00, 0x80, 0x81), (0x22, 0x8B, 0x22),
    (0x2E, 0x4F, 0x4E), (0x8B, 0x45, 0x12), (0x00, 0xFF, 0xFF), (0xFF, 0xFF, 0xFF),
    (0xD3, 0xD3, 0xD3), (0xFE, 0x00, 0x00), (0xA9, 0xA9, 0xA9), (0x69, 0x69, 0x69),
    (0x8B, 0x00, 0x01), (0xC8, 0x64, 0x00), (0xFE, 0xA5, 0x00), (0xFF, 0xFF, 0x00),
    (0xDA, 0xA5, 0x21), (0xFF, 0x00, 0xFE), (0x00, 0x00, 0xFE), (0x3F, 0xE0, 0xD0),
]

_META_KEYS = ("bands", "height", "width", "aux_channels", "classes", "palette", "dtype")


@dataclass
class DatasetBundle:
    """Co-registered rasters. Labels use 0 for unlabeled and 1..K for classes."""

    hsi: np.ndarray  # float32 [bands, H, W]
    aux: np.ndarray  # float32 [c_aux, H, W]
    labels_train: np.ndarray  # int32 [H, W]
    labels_test: np.ndarray  # int32 [H, W]
    classes: list[str]
    palette: list[tuple[int, int, int]]
    extra: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.hsi.shape[1], self.hsi.shape[2]

    def labels(self, split: str) -> np.ndarray:
        if split == "train":
            return self.labels_train
        if split == "test":
            return self.labels_test
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")

    def validate(self) -> None:
        if self.hsi.ndim != 3 or self.aux.ndim != 3:
            raise DataError(f"hsi/aux must be [C,H,W]; got {self.hsi.shape} and {self.aux.shape}")
        hw = self.shape
        if self.aux.shape[1:] != hw:
            raise DataError(f"aux grid {self.aux.shape[1:]} does not match hsi grid {hw}")
        for name in ("labels_train", "labels_test"):
            lab = getattr(self, name)
            if lab.shape != hw:
                raise DataError(f"{name}: shape {lab.shape} does not match hsi grid {hw}")
            if lab.size and (lab.min() < 0 or lab.max() > self.n_classes):
                raise DataError(f"{name}: label values must lie in [0, {self.n_classes}], found max {lab.max()}")
        if np.any((self.labels_train > 0) & (self.labels_test > 0)):
            raise DataError("labels_train and labels_test overlap on labeled pixels")
        if len(self.palette) < self.n_classes:
            raise DataError(f"palette has {len(self.palette)} colours for {self.n_classes} classes")


def save_bundle(bundle: DatasetBundle, path) -> None:
    bundle.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "bands": int(bundle.hsi.shape[0]),
        "height": int(bundle.shape[0]),
        "width": int(bundle.shape[1]),
        "aux_channels": int(bundle.aux.shape[0]),
        "classes": list(bundle.classes),
        "palette": [list(map(int, c)) for c in bundle.palette],
        "dtype": "f32",
    }
    meta.update(bundle.extra)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    bundle.hsi.astype("<f4").tofile(path / "hsi.bin")
    bundle.aux.astype("<f4").tofile(path / "aux.bin")
    bundle.labels_train.astype("<i4").tofile(path / "labels_train.bin")
    bundle.labels_test.astype("<i4").tofile(path / "labels_test.bin")


def _read_raw(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file {path}")
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path.name}: expected {int(np.prod(shape))} values for shape {shape}, found {arr.size}")
    return arr.reshape(shape)


def load_bundle(path) -> DatasetBundle:
    """Read a bundle directory; aux rasters on a different grid are resampled."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in _META_KEYS:
        if key not in meta:
            raise DataError(f"{meta_path}: missing field {key!r}")
    if meta["dtype"] != "f32":
        raise DataError(f"{meta_path}: field 'dtype' must be 'f32', got {meta['dtype']!r}")
    h, w = int(meta["height"]), int(meta["width"])
    ah, aw = int(meta.get("aux_height", h)), int(meta.get("aux_width", w))
    hsi = _read_raw(path / "hsi.bin", "<f4", (int(meta["bands"]), h, w)).astype(np.float32)
    aux = _read_raw(path / "aux.bin", "<f4", (int(meta["aux_channels"]), ah, aw)).astype(np.float32)
    if (ah, aw) != (h, w):
        aux = resample_nn(aux, h, w)
    extra = {k: v for k, v in meta.items() if k not in _META_KEYS and k not in ("aux_height", "aux_width")}
    bundle = DatasetBundle(
        hsi=hsi,
        aux=aux,
        labels_train=_read_raw(path / "labels_train.bin", "<i4", (h, w)).astype(np.int32),
        labels_test=_read_raw(path / "labels_test.bin", "<i4", (h, w)).astype(np.int32),
        classes=list(meta["classes"]),
        palette=[tuple(int(v) for v in c) for c in meta["palette"]],
        extra=extra,
    )
    try:
        bundle.validate()
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return bundle


def resample_nn(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a [C,h,w] raster; sample i reads floor((i+0.5)*h/out_h)."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resample targets must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    rows = np.minimum((2 * np.arange(out_h) + 1) * h // (2 * out_h), h - 1)
    cols = np.minimum((2 * np.arange(out_w) + 1) * w // (2 * out_w), w - 1)
    return x[:, rows][:, :, cols]


# ---------------------------------------------------------------------------
# spectral reduction and scaling
# ---------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray  # [bands]
    components: np.ndarray  # [n, bands], orthonormal rows
    eigenvalues: np.ndarray  # [n], descending


def pca_fit(hsi: np.ndarray, n_components: int) -> PcaModel:
    bands = hsi.shape[0]
    if not 1 <= n_components <= bands:
        raise ConfigError(f"n_components must lie in [1, {bands}], got {n_components}")
    x = hsi.reshape(bands, -1).T.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(x.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    comps = vecs[:, order].T.copy()
    # sign convention: the largest-magnitude entry of each component is positive
    pivots = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(n_components), pivots])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean=mean, components=comps, eigenvalues=np.maximum(vals[order], 0.0))


def pca_apply(hsi: np.ndarray, model: PcaModel) -> np.ndarray:
    bands, h, w = hsi.shape
    x = hsi.reshape(bands, -1).T.astype(np.float64) - model.mean
    return (x @ model.components.T).T.reshape(-1, h, w)


def pca_inverse(reduced: np.ndarray, model: PcaModel) -> np.ndarray:
    n, h, w = reduced.shape
    x = reduced.reshape(n, -1).T @ model.components + model.mean
    return x.T.reshape(-1, h, w)


def minmax_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return flat.min(axis=1), flat.max(axis=1)


def minmax_apply(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    shape = (-1,) + (1,) * (x.ndim - 1)
    out = (x.astype(np.float64) - lo.reshape(shape)) / safe.reshape(shape)
    return np.where((span > 0).reshape(shape), out, 0.0)


def normalize(x: np.ndarray) -> np.ndarray:
    """Per-channel min-max scaling to [0, 1]; constant channels become 0."""
    lo, hi = minmax_fit(x)
    return minmax_apply(x, lo, hi)


@dataclass
class Preprocessor:
    pca: PcaModel
    hsi_lo: np.ndarray
    hsi_hi: np.ndarray
    aux_lo: np.ndarray
    aux_hi: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "pca.mean": self.pca.mean,
            "pca.components": self.pca.components,
            "pca.eigenvalues": self.pca.eigenvalues,
            "norm.hsi_lo": self.hsi_lo,
            "norm.hsi_hi": self.hsi_hi,
            "norm.aux_lo": self.aux_lo,
            "norm.aux_hi": self.aux_hi,
        }

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "Preprocessor":
        pca = PcaModel(a["pca.mean"], a["pca.components"], a["pca.eigenvalues"])
        return cls(pca, a["norm.hsi_lo"], a["norm.hsi_hi"], a["norm.aux_lo"], a["norm.aux_hi"])


def fit_preprocessor(bundle: DatasetBundle, n_pca: int) -> Preprocessor:
    """PCA over every pixel of the scene (labels unused), then min-max ranges."""
    pca = pca_fit(bundle.hsi, n_pca)
    hlo, hhi = minmax_fit(pca_apply(bundle.hsi, pca))
    alo, ahi = minmax_fit(bundle.aux)
    return Preprocessor(pca, hlo, hhi, alo, ahi)


@dataclass
class Scene:
    """Model-ready features for one bundle."""

    hsi: np.ndarray  # [n_pca, H, W] in [0, 1]
    aux: np.ndarray  # [c_aux, H, W] in [0, 1]
    labels_train: np.ndarray
    labels_test: np.ndarray

    def labels(self, split: str) -> np.ndarray:
        if split == "train":
            return self.labels_train
        if split == "test":
            return self.labels_test
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")


def prepare_scene(bundle: DatasetBundle, prep: Preprocessor) -> Scene:
    if prep.pca.mean.shape[0] != bundle.hsi.shape[0]:
        raise DataError(f"preprocessor expects {prep.pca.mean.shape[0]} bands, bundle has {bundle.hsi.shape[0]}")
    if prep.aux_lo.shape[0] != bundle.aux.shape[0]:
        raise DataError(f"preprocessor expects {prep.aux_lo.shape[0]} aux channels, bundle has {bundle.aux.shape[0]}")
    hsi = minmax_apply(pca_apply(bundle.hsi, prep.pca), prep.hsi_lo, prep.hsi_hi)
    aux = minmax_apply(bundle.aux, prep.aux_lo, prep.aux_hi)
    return Scene(hsi, aux, bundle.labels_train, bundle.labels_test)


def ablate_modality(bundle: DatasetBundle, modality: str) -> DatasetBundle:
    """Copy of ``bundle`` with one modality zeroed at the input."""
    if modality not in ("hsi", "aux"):
        raise ConfigError(f"modality must be 'hsi' or 'aux', got {modality!r}")
    hsi = np.zeros_like(bundle.hsi) if modality == "hsi" else bundle.hsi
    aux = np.zeros_like(bundle.aux) if modality == "aux" else bundle.aux
    return DatasetBundle(hsi, aux, bundle.labels_train, bundle.labels_test, list(bundle.classes),
                         list(bundle.palette), dict(bundle.extra))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


@dataclass
class PatchBatch:
    x_h: Tensor  # [B, 1, n_pca, k, k]
    x_aux: Tensor  # [B, c_aux, k, k]
    labels: list[int]  # 0-based class index of each centre pixel
    coords: np.ndarray  # [B, 2] (row, col) of each centre


def _mirror(x: np.ndarray, k: int) -> np.ndarray:
    half = k // 2
    return np.pad(x, [(0, 0), (half, half), (half, half)], mode="reflect")


def patches_at(scene: Scene, coords: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather k x k windows whose centre (index k//2) sits on each coordinate."""
    h, w = scene.hsi.shape[1:]
    if k > min(h, w):
        raise ConfigError(f"patch size {k} exceeds raster {h}x{w}")
    hp, ap = _mirror(scene.hsi, k), _mirror(scene.aux, k)
    off = np.arange(k)
    rows = coords[:, 0][:, None] + off[None, :]
    cols = coords[:, 1][:, None] + off[None, :]
    ri, ci = rows[:, :, None], cols[:, None, :]
    xh = hp[:, ri, ci].transpose(1, 0, 2, 3)
    xa = ap[:, ri, ci].transpose(1, 0, 2, 3)
    return xh[:, None], xa


def labeled_coords(labels: np.ndarray) -> np.ndarray:
    return np.argwhere(labels > 0)


def extract_patches(scene: Scene, split: str, k: int, batch: int, shuffle_seed=None) -> Iterator[PatchBatch]:
    """Yield one patch per labeled pixel of ``split``.

    ``shuffle_seed`` may be None (raster order), an int, or a numpy Generator
    whose state advances by one permutation.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    labels = scene.labels(split)
    coords = labeled_coords(labels)
    if len(coords) == 0:
        raise DataError(f"split {split!r} has no labeled pixels")
    if shuffle_seed is not None:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) else np.random.default_rng(shuffle_seed)
        coords = coords[rng.permutation(len(coords))]
    for start in range(0, len(coords), batch):
        c = coords[start:start + batch]
        xh, xa = patches_at(scene, c, k)
        yield PatchBatch(Tensor(xh), Tensor(xa), [int(v) - 1 for v in labels[c[:, 0], c[:, 1]]], c)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

DIFFICULTIES = ("easy", "complementary")


def _voronoi_cells(rng: np.random.Generator, n_classes: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell index raster and the 1-based class of every cell.

    Sites sit on a jittered g x g grid so cell areas stay comparable, and each
    class owns the same number of cells (up to one), at least two.
    """
    g = max(2, int(np.ceil(np.sqrt(4 * n_classes))))
    gr, gc = np.mgrid[0:g, 0:g]
    jitter = rng.uniform(-0.25, 0.25, size=(2, g, g))
    sites = np.stack([(gr + 0.5 + jitter[0]) * h / g, (gc + 0.5 + jitter[1]) * w / g], axis=-1).reshape(-1, 2)
    cell_class = rng.permutation(np.arange(g * g) % n_classes).astype(np.int32) + 1
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    return d2.argmin(axis=-1), cell_class


def _interior(cmap: np.ndarray, margin: int) -> np.ndarray:
    h, w = cmap.shape
    # the raster edge counts as a boundary: mirrored patches would otherwise
    # carry a position cue
    padded = np.pad(cmap, margin, mode="constant", constant_values=0)
    ok = np.ones((h, w), dtype=bool)
    for dr in range(2 * margin + 1):
        for dc in range(2 * margin + 1):
            ok &= padded[dr:dr + h, dc:dc + w] == cmap
    return ok


def _spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    u = np.linspace(0.0, 1.0, bands)
    s = np.full(bands, rng.uniform(0.1, 0.3))
    for _ in range(3):
        s += rng.uniform(0.3, 1.0) * np.exp(-((u - rng.uniform(0, 1)) ** 2) / (2 * rng.uniform(0.05, 0.2) ** 2))
    return s


def hidden_pairs(n_classes: int, difficulty: str) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Class pairs (1-based) indistinguishable in HSI, and those indistinguishable in aux."""
    if difficulty != "complementary":
        return [], []
    in_hsi, in_aux = [], []
    for p in range(n_classes // 2):
        pair = (2 * p + 1, 2 * p + 2)
        (in_hsi if p % 2 == 0 else in_aux).append(pair)
    return in_hsi, in_aux


def synth_generate(seed: int, n_classes: int, height: int, width: int, bands: int, c_aux: int,
                   difficulty: str = "easy", train_per_class: int = 100, test_per_class: int = 100,
                   margin: int = 4, noise: float | None = None) -> DatasetBundle:
    """Blob-structured two-modality scene.

    Each class has a Gaussian-mixture spectrum in the HSI cube and a level plus
    oriented stripe texture in every aux channel.  With ``difficulty ==
    "complementary"`` class pairs (1,2), (5,6), ... share their spectrum and
    pairs (3,4), (7,8), ... share their aux signature, so neither modality
    alone separates every class.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    if bands < 1 or c_aux < 1 or height < 2 or width < 2:
        raise ConfigError("bands, aux channels must be >= 1 and raster sides >= 2")
    rng = np.random.default_rng(seed)
    cells, cell_class = _voronoi_cells(rng, n_classes, height, width)
    cmap = cell_class[cells]

    spectra = np.stack([_spectrum(rng, bands) for _ in range(n_classes)])
    levels = np.linspace(0.15, 0.85, n_classes)[rng.permutation(n_classes)]
    freqs = rng.uniform(0.12, 0.4, n_classes)
    angles = rng.uniform(0, np.pi, n_classes)
    amps = rng.uniform(0.1, 0.25, n_classes)
    in_hsi, in_aux = hidden_pairs(n_classes, difficulty)
    for a, b in in_hsi:
        spectra[b - 1] = spectra[a - 1]
    for a, b in in_aux:
        levels[b - 1], freqs[b - 1], angles[b - 1], amps[b - 1] = levels[a - 1], freqs[a - 1], angles[a - 1], amps[a - 1]
    if noise is None:
        noise = 0.02 if difficulty == "easy" else 0.06

    idx = cmap - 1
    hsi = spectra[idx].transpose(2, 0, 1) + rng.normal(0, noise, (bands, height, width))
    rr, cc = np.mgrid[0:height, 0:width]
    phase_arg = rr * np.sin(angles[idx]) + cc * np.cos(angles[idx])
    aux = np.empty((c_aux, height, width))
    for ch in range(c_aux):
        phase = 0.7 * ch
        aux[ch] = levels[idx] + amps[idx] * np.sin(2 * np.pi * freqs[idx] * phase_arg + phase)
    aux += rng.normal(0, noise, aux.shape)

    # train and test pixels come from disjoint cells of each class and keep
    # `margin` pixels off every cell edge, so no test patch shares pixels (or
    # noise) with a training patch
    interior = _interior(cells + 1, margin)
    labels_train = np.zeros((height, width), dtype=np.int32)
    labels_test = np.zeros((height, width), dtype=np.int32)
    for c in range(1, n_classes + 1):
        owned = rng.permutation(np.flatnonzero(cell_class == c))
        half = (len(owned) + 1) // 2
        for target, group, want in ((labels_train, owned[:half], train_per_class),
                                    (labels_test, owned[half:], test_per_class)):
            region = np.isin(cells, group)
            pool = np.flatnonzero(region & interior)
            if len(pool) == 0:
                pool = np.flatnonzero(region)
            target.flat[rng.permutation(pool)[:want]] = c

    palette = (AUGSBURG_PALETTE + HOUSTON_PALETTE)
    palette = [palette[i % len(palette)] for i in range(n_classes)]
    extra = {
        "synthetic": {
            "seed": int(seed),
            "difficulty": difficulty,
            "hidden_in_hsi": [list(p) for p in in_hsi],
            "hidden_in_aux": [list(p) for p in in_aux],
        }
    }
    bundle = DatasetBundle(
        hsi=hsi.astype(np.float32),
        aux=aux.astype(np.float32),
        labels_train=labels_train,
        labels_test=labels_test,
        classes=[f"class_{i}" for i in range(1, n_classes + 1)],
        palette=palette,
        extra=extra,
    )
    bundle.validate()
    return bundle


def bundle_stats(bundle: DatasetBundle) -> dict:
    stats = {
        "height": bundle.shape[0],
        "width": bundle.shape[1],
        "bands": int(bundle.hsi.shape[0]),
        "aux_channels": int(bundle.aux.shape[0]),
        "classes": bundle.n_classes,
    }
    for split in ("train", "test"):
        lab = bundle.labels(split)
        counts = np.bincount(lab.reshape(-1), minlength=bundle.n_classes + 1)[1:]
        stats[f"{split}_labeled"] = int(counts.sum())
        stats[f"{split}_histogram"] = {name: int(n) for name, n in zip(bundle.classes, counts)}
    return stats


def path_writable(path) -> bool:
    path = Path(path)
    probe = path if path.exists() else path.parent
    while not probe.exists() and probe != probe.parent:
        probe = probe.parent
    return os.access(probe, os.W_OK)
