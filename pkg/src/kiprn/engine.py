"""Joint training of resizer and classifier, evaluation, ablations, timing."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .checkpoint import Checkpoint
from .classifier import Backbone, BackboneConfig, cam, multiscale_predict
from .config import build
from .optim import AdamW
from .resizer import ConfigError, ImagePyramid, Kiprn, KiprnConfig, kernel_assignment, resize_pyramid
from .synthpave import ImageCache, batches
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MODES = ("kiprn", "bilinear-multiscale", "single-scale")
METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "wall_seconds"]


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    mode: str = "kiprn"
    kiprn: KiprnConfig = field(default_factory=KiprnConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.kiprn, dict):
            self.kiprn = build(KiprnConfig, self.kiprn, "kiprn")
        if isinstance(self.backbone, dict):
            self.backbone = build(BackboneConfig, self.backbone, "backbone")

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not float(self.lr) > 0 or len(self.betas) != 2:
            raise ConfigError("lr must be positive and betas a pair")
        if int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.kiprn.validate()
        self.backbone.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["kiprn"] = self.kiprn.to_dict()
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return build(cls, d, "train")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_seconds: float

    def values(self) -> list:
        return [self.epoch, self.train_loss, self.train_acc, self.test_acc, self.wall_seconds]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, epoch]).generate_state(1, np.uint64)[0])


class PdrModel:
    """Resizer (kiprn mode only) feeding the shared-weight backbone.

    Backbone and resizer draw their initial weights from separate RNG
    streams, so the backbone starts identical across modes for one seed.
    """

    def __init__(self, cfg: TrainConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.mode = cfg.mode
        self.backbone = Backbone(cfg.backbone, _rng(cfg.seed, 1), dtype=dtype)
        self.resizer = Kiprn(cfg.kiprn, _rng(cfg.seed, 2), dtype=dtype) if cfg.mode == "kiprn" else None

    def named_parameters(self) -> dict:
        out = {}
        if self.resizer is not None:
            out.update(self.resizer.named_parameters("resizer."))
        out.update(self.backbone.named_parameters("backbone."))
        return out

    def pyramid(self, x: Tensor) -> ImagePyramid:
        if self.mode == "kiprn":
            return self.resizer(x)
        if self.mode == "bilinear-multiscale":
            return resize_pyramid(x, self.cfg.kiprn)
        h, w = self.cfg.kiprn.level_sizes[-1]
        return ImagePyramid([ops.bilinear_resize(x, h, w)], [(h, w)])

    def __call__(self, x: Tensor):
        """Returns ``(probabilities, summed logits)``."""
        return multiscale_predict(self.backbone, self.pyramid(x))

    def load_params(self, params: dict) -> None:
        mine = self.named_parameters()
        missing = sorted(set(mine) - set(params))
        extra = sorted(set(params) - set(mine))
        if missing or extra:
            raise ConfigError(f"checkpoint parameters do not match model: missing {missing[:3]}, extra {extra[:3]}")
        for name, p in mine.items():
            if params[name].shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {params[name].shape} vs model {p.shape}")
            p.data = np.array(params[name], dtype=p.dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PdrModel":
        model = cls(TrainConfig.from_dict(ckpt.config))
        model.load_params(ckpt.params)
        return model


def decayed(names) -> set:
    """Conv and linear weights get weight decay; biases and norm affines do not."""
    return {n for n in names if n.endswith(".weight")}


def make_optimizer(model: PdrModel, cfg: TrainConfig) -> AdamW:
    params = model.named_parameters()
    return AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
                 decay=decayed(params))


def snapshot(model: PdrModel, opt: AdamW, epoch: int) -> Checkpoint:
    return Checkpoint(
        params={k: p.data.copy() for k, p in model.named_parameters().items()},
        adam_m={k: s.m.copy() for k, s in opt.states.items()},
        adam_v={k: s.v.copy() for k, s in opt.states.items()},
        step=opt.t, epoch=epoch, seed=model.cfg.seed, config=model.cfg.to_dict())


def restore_optimizer(opt: AdamW, ckpt: Checkpoint) -> None:
    for name, st in opt.states.items():
        st.m = np.array(ckpt.adam_m[name], dtype=st.m.dtype)
        st.v = np.array(ckpt.adam_v[name], dtype=st.v.dtype)
        st.t = ckpt.step


def _check_classes(model: PdrModel, manifest) -> None:
    n = manifest.spec.get("num_classes", 7)
    if n != model.cfg.backbone.num_classes:
        raise ConfigError(f"model predicts {model.cfg.backbone.num_classes} classes, dataset has {n}")


def train(cfg: TrainConfig, manifest, resume: Checkpoint | None = None, cache: ImageCache | None = None,
          on_epoch=None):
    """Optimize resizer and classifier jointly on the train split.

    Returns ``(checkpoint, metrics rows)``.  With ``resume`` the run continues
    from the checkpoint's epoch up to ``cfg.epochs``.  ``on_epoch(row, model,
    optimizer)`` runs after every epoch; a truthy return stops training early.
    """
    model = PdrModel(cfg)
    _check_classes(model, manifest)
    if not manifest.split("train") or not manifest.split("test"):
        raise ConfigError("manifest needs both train and test records")
    opt = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        model.load_params(resume.params)
        restore_optimizer(opt, resume)
        start = resume.epoch
    cache = cache or ImageCache()
    params = list(model.named_parameters().values())
    rows = []
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        stream = batches(manifest, "train", cfg.batch_size, epoch_seed(cfg.seed, epoch), cache)
        while True:
            try:
                batch = next(stream, None)
                if batch is None:
                    break
                xb, yb = batch
                with Tape() as tape:
                    probs, logits = model(Tensor(xb))
                    loss = ops.softmax_cross_entropy(logits, yb)
                grads = tape.backward(loss, wrt=params)
                opt.step(grads)
            except (ValueError, ConfigError) as exc:
                raise TrainError(f"step {opt.t + 1}: {exc}") from exc
            loss_sum += float(loss.data) * len(yb)
            correct += int((probs.argmax(axis=1) == yb).sum())
            seen += len(yb)
        wall = time.perf_counter() - t0
        test_acc = evaluate(model, manifest, "test", cache=cache)
        row = MetricsRow(epoch + 1, loss_sum / seen, correct / seen, test_acc, wall)
        log.info("epoch %d loss %.4f train %.3f test %.3f (%.1fs)", *row.values())
        rows.append(row)
        if on_epoch is not None and on_epoch(row, model, opt):
            return snapshot(model, opt, epoch + 1), rows
    return snapshot(model, opt, max(start, cfg.epochs)), rows


def predict(model, manifest, split: str, cache: ImageCache | None = None, batch_size: int = 32):
    """Per-sample ``(path, label, predicted)`` in manifest order."""
    if isinstance(model, Checkpoint):
        model = PdrModel.from_checkpoint(model)
    _check_classes(model, manifest)
    recs = manifest.split(split)
    out = []
    pos = 0
    for xb, yb in batches(manifest, split, batch_size, None, cache):
        probs, _ = model(Tensor(xb))
        # argmax ties resolve to the lowest class index
        for pred, label in zip(probs.argmax(axis=1), yb):
            out.append((recs[pos].path, int(label), int(pred)))
            pos += 1
    return out


def evaluate(model, manifest, split: str = "test", cache: ImageCache | None = None, batch_size: int = 32) -> float:
    preds = predict(model, manifest, split, cache, batch_size)
    if not preds:
        return 0.0
    return sum(p == y for _, y, p in preds) / len(preds)


def model_cam(model: PdrModel, x: np.ndarray, class_index: int | None = None):
    """CAM of a single normalized image through its largest pyramid level.

    Returns ``(heatmap [H, W] in [0, 1], class index)``; the class defaults to
    the full model's prediction.
    """
    x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"model_cam takes one image shaped 1 x 3 x H x W, got {x.shape}")
    pyr = model.pyramid(x)
    if class_index is None:
        probs, _ = multiscale_predict(model.backbone, pyr)
        class_index = int(np.argmax(probs[0]))
    heat = cam(model.backbone, pyr.levels[-1], class_index)
    if heat.shape != tuple(x.shape[2:]):
        heat = np.clip(ops.bilinear_resize(Tensor(heat[None, None]), *x.shape[2:]).data[0, 0], 0.0, 1.0)
    return heat, class_index


def write_predictions_csv(preds, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "predicted"])
        w.writerows(preds)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.test_acc), repr(r.wall_seconds)])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [MetricsRow(int(d["epoch"]), float(d["train_loss"]), float(d["train_acc"]),
                           float(d["test_acc"]), float(d["wall_seconds"])) for d in rd]


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_PRESETS = {
    # residual-block kernel rows (pyramidal conv stays on the extraction layers)
    "3x3": ("Resblocks", "uniform:3", "first"),
    "5x5": ("Resblocks", "uniform:5", "first"),
    "7x7": ("Resblocks", "uniform:7", "first"),
    "Forward": ("Resblocks", "forward", "first"),
    "Inversed": ("Resblocks", "inversed", "first"),
    # pyramidal-conv placement rows (kernel-inversed blocks)
    "All": ("Pyconv", "inversed", "all"),
    "None": ("Pyconv", "inversed", "none"),
    "Resblock": ("Pyconv", "inversed", "resblock"),
    "Last": ("Pyconv", "inversed", "last"),
    "First": ("Pyconv", "inversed", "first"),
}


def _preset_key(name: str) -> str:
    key = name.replace("×", "x").strip()
    for k in ABLATION_PRESETS:
        if k.lower() == key.lower():
            return k
    raise ValueError(f"unknown preset {name!r}; valid: {', '.join(ABLATION_PRESETS)} or 'all'")


def preset_config(base: TrainConfig, name: str) -> TrainConfig:
    _, mode, placement = ABLATION_PRESETS[_preset_key(name)]
    cfg = copy.deepcopy(base)
    cfg.mode = "kiprn"
    cfg.kiprn.kernel_mode = mode
    cfg.kiprn.pyconv_placement = placement
    return cfg.validate()


@dataclass
class AblationRow:
    preset: str
    module: str
    kernel_mode: str
    pyconv_placement: str
    kernels: list
    train_loss: float
    train_acc: float
    test_acc: float
    wall_seconds: float


ABLATION_HEADER = ["preset", "module", "kernel_mode", "pyconv_placement", "kernels",
                   "train_loss", "train_acc", "test_acc", "wall_seconds"]


def ablate(base: TrainConfig, preset_name: str, manifest, cache: ImageCache | None = None) -> list:
    names = list(ABLATION_PRESETS) if preset_name.lower() == "all" else [_preset_key(preset_name)]
    cache = cache or ImageCache()
    rows = []
    for name in names:
        cfg = preset_config(base, name)
        t0 = time.perf_counter()
        ckpt, metrics = train(cfg, manifest, cache=cache)
        last = metrics[-1] if metrics else None
        test_acc = last.test_acc if last else evaluate(ckpt, manifest, "test", cache)
        rows.append(AblationRow(
            name, ABLATION_PRESETS[name][0], cfg.kiprn.kernel_mode, cfg.kiprn.pyconv_placement,
            kernel_assignment(cfg.kiprn.level_sizes, cfg.kiprn.kernel_mode),
            last.train_loss if last else float("nan"), last.train_acc if last else float("nan"),
            test_acc, time.perf_counter() - t0))
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r.preset, r.module, r.kernel_mode, r.pyconv_placement, "/".join(map(str, r.kernels)),
                        repr(r.train_loss), repr(r.train_acc), repr(r.test_acc), repr(r.wall_seconds)])


# ---------------------------------------------------------------------------
# timing benchmark


@dataclass
class BenchRow:
    name: str
    mode: str
    epochs: int
    epoch_seconds: list
    mean_seconds: float
    std_seconds: float


BENCH_HEADER = ["name", "mode", "epochs", "mean_seconds", "std_seconds", "epoch_seconds"]


def epoch_stats(samples) -> tuple:
    arr = np.asarray(samples, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def benchmark(configs, manifest, epochs: int = 1, cache: ImageCache | None = None) -> list:
    """Train each ``(name, TrainConfig)`` for ``epochs`` epochs, sequentially, and time them."""
    if not configs:
        raise ValueError("benchmark needs at least one config")
    cache = cache or ImageCache()
    rows = []
    for name, cfg in configs:
        cfg = copy.deepcopy(cfg)
        cfg.epochs = epochs
        _, metrics = train(cfg, manifest, cache=cache)
        secs = [m.wall_seconds for m in metrics]
        mean, std = epoch_stats(secs)
        rows.append(BenchRow(name, cfg.mode, epochs, secs, mean, std))
    return rows


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for r in rows:
            w.writerow([r.name, r.mode, r.epochs, repr(r.mean_seconds), repr(r.std_seconds),
                        ";".join(repr(s) for s in r.epoch_seconds)])
