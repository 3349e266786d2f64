"""Training loop, evaluation, prediction maps and checkpoint files."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from . import tensor as T
from .data import DatasetBundle, Preprocessor, Scene, extract_patches, fit_preprocessor, patches_at, prepare_scene
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, PicnetModel
from .tensor import AdamState, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PICNET01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch: int = 64
    seed: int = 0
    lambda1: float | None = None
    lambda2: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def resolve(self, model_cfg: ModelConfig) -> ModelConfig:
        """Apply lambda overrides to the model configuration."""
        changes = {}
        if self.lambda1 is not None:
            changes["lambda1"] = self.lambda1
        if self.lambda2 is not None:
            changes["lambda2"] = self.lambda2
        return dataclasses.replace(model_cfg, **changes) if changes else model_cfg


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    params: dict[str, np.ndarray]
    preprocessor: Preprocessor
    adam: AdamState
    rng_state: dict
    history: list[dict] = field(default_factory=list)

    def build_model(self) -> PicnetModel:
        model = PicnetModel(self.model_config)
        model.load_arrays(self.params)
        model.preprocessor = self.preprocessor
        return model


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def _checkpoint_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    arrays = {f"param.{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"prep.{k}": v for k, v in ckpt.preprocessor.arrays().items()})
    arrays.update({f"adam.m.{k}": v for k, v in ckpt.adam.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in ckpt.adam.v.items()})
    return arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = _checkpoint_arrays(ckpt)
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "step": ckpt.adam.step},
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(raw)[12 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        if start + 8 * n > len(payload):
            raise DataError(f"{path}: tensor {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(payload[start:start + 8 * n], dtype="<f8").astype(np.float64).reshape(e["shape"])

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    a = header["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                     m=group("adam.m."), v=group("adam.v."))
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        epoch=header["epoch"],
        params=group("param."),
        preprocessor=Preprocessor.from_arrays(group("prep.")),
        adam=adam,
        rng_state=header["rng_state"],
        history=header["history"],
    )


def write_history(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_history(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _check_compatible(cfg: ModelConfig, bundle: DatasetBundle) -> None:
    if cfg.n_classes != bundle.n_classes:
        raise ConfigError(f"model has {cfg.n_classes} classes, bundle has {bundle.n_classes}")
    if cfg.c_aux != bundle.aux.shape[0]:
        raise ConfigError(f"model expects {cfg.c_aux} aux channels, bundle has {bundle.aux.shape[0]}")
    if cfg.n_pca > bundle.hsi.shape[0]:
        raise ConfigError(f"n_pca={cfg.n_pca} exceeds the bundle's {bundle.hsi.shape[0]} bands")
    if cfg.patch > min(bundle.shape):
        raise ConfigError(f"patch size {cfg.patch} exceeds raster {bundle.shape}")


def _init_state(bundle: DatasetBundle, model_cfg: ModelConfig, train_cfg: TrainConfig) -> Checkpoint:
    init_seed, shuffle_seed = np.random.SeedSequence(train_cfg.seed).spawn(2)
    model = PicnetModel(model_cfg, seed=int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seed)
    return Checkpoint(
        model_config=model_cfg,
        train_config=train_cfg,
        epoch=0,
        params=model.state_arrays(),
        preprocessor=fit_preprocessor(bundle, model_cfg.n_pca),
        adam=AdamState(lr=train_cfg.lr),
        rng_state=rng.bit_generator.state,
    )


def train(bundle: DatasetBundle, model_cfg: ModelConfig, train_cfg: TrainConfig, *,
          resume: Checkpoint | None = None, checkpoint_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[PicnetModel, list[dict]]:
    """Minimise cross-entropy plus weighted consistency terms with Adam.

    Runs epochs ``resume.epoch + 1 .. train_cfg.epochs`` when resuming.
    Each epoch visits every train-labeled pixel once in seeded random order;
    the last partial batch is kept.
    """
    model_cfg = train_cfg.resolve(model_cfg)
    _check_compatible(model_cfg, bundle)
    if resume is None:
        state = _init_state(bundle, model_cfg, train_cfg)
    else:
        if resume.model_config != model_cfg:
            raise ConfigError(f"checkpoint model config {resume.model_config} differs from {model_cfg}")
        state = resume
        state.adam.lr = train_cfg.lr
    model = state.build_model()
    scene = prepare_scene(bundle, state.preprocessor)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    history = list(state.history)
    adam = state.adam

    for epoch in range(state.epoch + 1, train_cfg.epochs + 1):
        sums = np.zeros(4)
        correct = seen = 0
        for step, pb in enumerate(extract_patches(scene, "train", model_cfg.patch, train_cfg.batch, rng)):
            try:
                out = model.forward(pb.x_h, pb.x_aux)
                terms = model.losses(out, pb.labels)
                T.backward(terms.total)
                T.adam_step(model.params, adam)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
            n = len(pb.labels)
            sums += n * np.array([terms.ce.item(), terms.cyc_x.item(), terms.cyc_h.item(), terms.total.item()])
            correct += int((out.logits.data.argmax(axis=1) == np.asarray(pb.labels)).sum())
            seen += n
        means = sums / seen
        rec = {"epoch": epoch, "l_ce": means[0], "l_cyc_x": means[1], "l_cyc_h": means[2], "total": means[3],
               "train_oa": correct / seen}
        history.append({k: float(v) if k != "epoch" else v for k, v in rec.items()})
        log.info("epoch %d  total %.5f  ce %.5f  oa %.4f", epoch, means[3], means[0], correct / seen)
        if on_epoch is not None:
            on_epoch(history[-1])
        state.epoch = epoch
        if checkpoint_path is not None and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            _snapshot(state, model, rng, history, checkpoint_path)

    state.params = model.state_arrays()
    state.rng_state = rng.bit_generator.state
    state.history = history
    model.checkpoint = state
    return model, history


def _snapshot(state: Checkpoint, model: PicnetModel, rng, history, path) -> None:
    state.params = {k: v.copy() for k, v in model.state_arrays().items()}
    state.rng_state = rng.bit_generator.state
    state.history = list(history)
    save_checkpoint(state, path)


def checkpoint_of(model: PicnetModel) -> Checkpoint:
    """The resumable training state attached to a model returned by :func:`train`."""
    ckpt = getattr(model, "checkpoint", None)
    if ckpt is None:
        raise ConfigError("model carries no training state")
    ckpt.params = model.state_arrays()
    return ckpt


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray


def _scene_for(model: PicnetModel, bundle: DatasetBundle) -> Scene:
    prep = getattr(model, "preprocessor", None)
    if prep is None:
        raise ConfigError("model has no fitted preprocessor; train it or load it from a checkpoint")
    _check_compatible(model.config, bundle)
    return prepare_scene(bundle, prep)


def predict_logits(model: PicnetModel, scene: Scene, coords: np.ndarray, batch: int = 256) -> np.ndarray:
    k = model.config.patch
    out = np.empty((len(coords), model.config.n_classes))
    with T.no_grad():
        for start in range(0, len(coords), batch):
            c = coords[start:start + batch]
            xh, xa = patches_at(scene, c, k)
            out[start:start + len(c)] = model.forward(Tensor(xh), Tensor(xa)).logits.data
    return out


def evaluate(model: PicnetModel, bundle: DatasetBundle, split: str = "test") -> EvalResult:
    scene = _scene_for(model, bundle)
    labels = scene.labels(split)
    coords = np.argwhere(labels > 0)
    if len(coords) == 0:
        raise DataError(f"split {split!r} has no labeled pixels")
    pred = predict_logits(model, scene, coords).argmax(axis=1)
    truth = labels[coords[:, 0], coords[:, 1]] - 1
    cm = metrics.confusion_matrix(truth, pred, model.config.n_classes)
    return EvalResult(cm, metrics.overall_accuracy(cm), metrics.average_accuracy(cm), metrics.kappa(cm),
                      metrics.per_class_accuracy(cm))


def predict_map(model: PicnetModel, bundle: DatasetBundle, labeled_only: bool = False) -> np.ndarray:
    """Class raster (1..K); with ``labeled_only`` unlabeled pixels stay 0.

    argmax ties resolve to the lower class index.
    """
    scene = _scene_for(model, bundle)
    h, w = bundle.shape
    if labeled_only:
        coords = np.argwhere((scene.labels_train > 0) | (scene.labels_test > 0))
    else:
        coords = np.argwhere(np.ones((h, w), dtype=bool))
    raster = np.zeros((h, w), dtype=np.int32)
    if len(coords):
        raster[coords[:, 0], coords[:, 1]] = predict_logits(model, scene, coords).argmax(axis=1) + 1
    return raster


def render_map(labels: np.ndarray, palette) -> bytes:
    """Binary PPM (P6, maxval 255); class 0 is black, class c uses palette[c-1]."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ConfigError(f"label raster must be 2-D, got shape {labels.shape}")
    top = int(labels.max()) if labels.size else 0
    if len(palette) < top:
        raise ConfigError(f"palette has {len(palette)} colours but raster uses class {top}")
    lut = np.zeros((max(top, len(palette)) + 1, 3), dtype=np.uint8)
    if len(palette):
        lut[1:len(palette) + 1] = np.asarray(palette, dtype=np.uint8).reshape(-1, 3)
    h, w = labels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + lut[labels].tobytes()
