"""Joint training of the encoder and the intrinsic-feature manifold."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .datasets import AugmentConfig, Dataset, augment, write_csv
from .encoder import AdamState, EncoderModel
from .evaluation import map_score
from .lmr import lmr_loss_and_grads
from .manifold import ManifoldState, init_from_projection, load_manifold, save_manifold

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message if checkpoint is None else f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lam: float = 1.0
    k: int = 20
    r_steps: int = 20
    batch_size: int = 100
    latent_dim: int = 256
    hidden: tuple[int, ...] = (1000, 1000)
    lr: float = 1e-4
    epochs: int = 300
    seed: int = 0
    normalize_output: bool = True
    augment: bool = True
    aug_prob: float = 0.8
    aug_std: float = 0.01
    clamp_weights: bool = False
    exclude_self: bool = False
    eval_every: int = 50
    snapshot_every: int = 0
    snapshot_epochs: tuple[int, ...] = ()
    checkpoint_every: int = 0
    keep_best: bool = True

    def validate(self, n: int | None = None) -> None:
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        for name in ("k", "batch_size", "latent_dim", "r_steps"):
            if getattr(self, name) < (0 if name == "r_steps" else 1):
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "eval_every", "snapshot_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.aug_prob <= 1 or self.aug_std < 0:
            raise ConfigError("aug_prob must lie in [0, 1] and aug_std be >= 0")
        if n is not None:
            if self.k > n:
                raise ConfigError(f"k={self.k} exceeds the training set size {n}")
            if self.batch_size > n:
                raise ConfigError(f"batch_size={self.batch_size} exceeds the training set size {n}")

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.aug_std, self.aug_prob, self.augment)

    def layer_dims(self, in_dim: int) -> list[int]:
        return [in_dim, *self.hidden, self.latent_dim]

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = (val, lineno)
        return cls.from_mapping({k: v for k, (v, _) in values.items()}, source)

    @classmethod
    def from_mapping(cls, values: dict, source: str = "<config>") -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")
        cfg = cls()
        for key, val in values.items():
            setattr(cfg, key, _coerce(getattr(cls(), key), val, f"{source}: {key}"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), str(path))


def _coerce(default, val, where: str):
    if not isinstance(val, str):
        return tuple(val) if isinstance(default, tuple) else val
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(val)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return tuple(int(v) for v in val.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"{where}: invalid value {val!r}") from None
    return val


@dataclass
class EpochLog:
    epoch: int
    fit: float
    smooth: float
    total: float
    seconds: float


@dataclass
class EvalLog:
    epoch: int
    map: float
    diameter: float


@dataclass
class TrainReport:
    lam: float
    epochs: list[EpochLog] = field(default_factory=list)
    evals: list[EvalLog] = field(default_factory=list)
    best_map: float | None = None
    best_epoch: int | None = None

    def record_eval(self, e: EvalLog) -> bool:
        self.evals.append(e)
        if self.best_map is None or e.map > self.best_map:
            self.best_map, self.best_epoch = e.map, e.epoch
            return True
        return False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(
            d["lam"],
            [EpochLog(**e) for e in d["epochs"]],
            [EvalLog(**e) for e in d["evals"]],
            d.get("best_map"),
            d.get("best_epoch"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TrainReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def latent_diameter(z: np.ndarray, chunk: int = 512) -> float:
    """Largest pairwise Euclidean distance between rows of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    sq = (z * z).sum(1)
    best = 0.0
    for s in range(0, z.shape[0], chunk):
        d = sq[s : s + chunk, None] - 2.0 * z[s : s + chunk] @ z.T + sq[None, :]
        best = max(best, float(d.max()))
    return float(np.sqrt(max(best, 0.0)))


@dataclass
class TrainingState:
    """Everything needed to resume training bit-for-bit."""

    encoder: EncoderModel
    manifold: ManifoldState
    adam_theta: AdamState
    adam_m: AdamState
    epoch: int = 0

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        enc.save_checkpoint(self.encoder, d / "encoder.ckpt")
        save_manifold(self.manifold, d / "manifold.txt")
        arrays = {}
        for tag, st in (("theta", self.adam_theta), ("m", self.adam_m)):
            for i, (a, b) in enumerate(zip(st.first_moment, st.second_moment)):
                arrays[f"{tag}_m{i}"] = a
                arrays[f"{tag}_v{i}"] = b
        np.savez(d / "adam.npz", **arrays)
        meta = {
            "epoch": self.epoch,
            "theta": _adam_meta(self.adam_theta),
            "m": _adam_meta(self.adam_m),
        }
        (d / "state.json").write_text(json.dumps(meta, indent=1))
        return d

    @classmethod
    def load(cls, directory) -> "TrainingState":
        d = Path(directory)
        model = enc.load_checkpoint(d / "encoder.ckpt")
        manifold = load_manifold(d / "manifold.txt")
        meta = json.loads((d / "state.json").read_text())
        with np.load(d / "adam.npz") as z:
            states = []
            for tag, count in (("theta", 2 * model.n_layers), ("m", 1)):
                st = AdamState(
                    [z[f"{tag}_m{i}"].copy() for i in range(count)],
                    [z[f"{tag}_v{i}"].copy() for i in range(count)],
                    **meta[tag],
                )
                states.append(st)
        return cls(model, manifold, states[0], states[1], meta["epoch"])


def _adam_meta(st: AdamState) -> dict:
    return {"step_count": st.step_count, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}


def new_state(dataset: Dataset, encoder: EncoderModel, config: TrainConfig) -> TrainingState:
    manifold = init_from_projection(encoder, dataset.x)
    return TrainingState(
        encoder,
        manifold,
        AdamState.zeros_like(encoder.params(), lr=config.lr),
        AdamState.zeros_like([manifold.m], lr=config.lr),
    )


def epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Shuffle and augmentation streams for one epoch, independent of earlier epochs."""
    ss = np.random.SeedSequence([seed, epoch])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def train_step(ts: TrainingState, x: np.ndarray, ids: np.ndarray, config: TrainConfig):
    """One joint Adam update of theta and M on a mini-batch; returns the loss breakdown."""
    f, cache = enc.forward(ts.encoder, x)
    loss, df, dm = lmr_loss_and_grads(
        f, ids, ts.manifold, config.lam, config.k, config.clamp_weights, config.exclude_self
    )
    grads = enc.backward(ts.encoder, cache, df)
    enc.adam_update(ts.encoder.params(), grads.params(), ts.adam_theta)
    enc.adam_update([ts.manifold.m], [dm], ts.adam_m)
    return loss


def evaluate(encoder: EncoderModel, eval_set: Dataset, epoch: int) -> EvalLog:
    z = enc.embed(encoder, eval_set.x)
    return EvalLog(epoch, map_score(z, eval_set.labels, eval_set.ids), latent_diameter(z))


def write_snapshot(encoder: EncoderModel, dataset: Dataset, path) -> Path:
    """CSV ``id,label,z1,z2,...`` of every sample's embedded feature."""
    z = enc.embed(encoder, dataset.x)
    write_csv(Dataset(dataset.ids, z, list(dataset.labels)), path, value_prefix="z")
    return Path(path)


def train(dataset: Dataset, encoder: EncoderModel, config: TrainConfig, eval_set: Dataset | None = None,
          out_dir=None, state: TrainingState | None = None,
          report: TrainReport | None = None) -> tuple[EncoderModel, ManifoldState, TrainReport]:
    """Run the configured number of epochs (continuing from ``state`` if given).

    Training IDs are row positions (1-based) in ``dataset``. With an
    evaluation set and ``keep_best``, the returned encoder and manifold are
    the ones with the highest MAP seen at an evaluation point.
    """
    n = len(dataset)
    config.validate(n)
    if encoder.in_dim != dataset.dim:
        raise ConfigError(f"encoder input dim {encoder.in_dim} != data dim {dataset.dim}")
    ts = state if state is not None else new_state(dataset, encoder, config)
    report = report if report is not None else TrainReport(config.lam)
    out = Path(out_dir) if out_dir is not None else None
    snap_epochs = set(config.snapshot_epochs)
    ids = np.arange(1, n + 1)
    if eval_set is not None and not eval_set.has_labels:
        eval_set = None

    best = None
    last_good = None

    def checkpoint() -> str | None:
        if out is None:
            return None
        return str(ts.save(out / "checkpoint"))

    def at_epoch_end(epoch: int) -> None:
        nonlocal best, last_good
        if eval_set is not None and config.eval_every and (epoch % config.eval_every == 0 or epoch == end):
            e = evaluate(ts.encoder, eval_set, epoch)
            log.info("epoch %d MAP %.2f diameter %.4g", epoch, e.map, e.diameter)
            if report.record_eval(e) and config.keep_best:
                best = (ts.encoder.copy(), ts.manifold.copy())
        if out is not None and (
            epoch in snap_epochs or (config.snapshot_every and epoch % config.snapshot_every == 0)
        ):
            write_snapshot(ts.encoder, eval_set or dataset, out / "snapshots" / f"epoch_{epoch}.csv")
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            last_good = checkpoint()

    start = ts.epoch
    end = start + config.epochs
    if out is not None:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
    if start == 0 and config.epochs > 0:
        at_epoch_end(0)
    for epoch in range(start + 1, end + 1):
        t0 = time.perf_counter()
        shuffle_rng, aug_rng = epoch_rngs(config.seed, epoch)
        order = shuffle_rng.permutation(n)
        acc = np.zeros(3)
        try:
            for s in range(0, n, config.batch_size):
                rows = order[s : s + config.batch_size]
                xb = dataset.x[rows]
                if config.augment:
                    xb = augment(xb, config.augment_config, aug_rng)
                loss = train_step(ts, xb, ids[rows], config)
                acc += (loss.fit, loss.smooth, loss.total)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good) from exc
        ts.epoch = epoch
        dt = time.perf_counter() - t0
        report.epochs.append(EpochLog(epoch, float(acc[0]), float(acc[1]), float(acc[2]), dt))
        log.debug("epoch %d loss %.6g (fit %.6g smooth %.6g) %.2fs", epoch, acc[2], acc[0], acc[1], dt)
        at_epoch_end(epoch)

    if best is not None:
        return best[0], best[1], report
    return ts.encoder, ts.manifold, report
