"""2-D three-arm spiral experiment: identity-pretrained MLP, then joint training per k."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import encoder as enc
from .manifold import save_manifold
from .datasets import SpiralShape, gen_spiral, gen_uniform, write_csv
from .trainer import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    seed: int = 0
    ks: tuple[int, ...] = (5, 20, 200)
    lam: float = 1.0
    epochs: int = 6000
    n_spiral: int = 1000
    arms: int = 3
    jitter: float = 0.01
    sweep: float = SpiralShape.sweep
    hidden: tuple[int, ...] = (1000, 1000)
    n_pretrain: int = 10000
    pretrain_epochs: int = 1000
    pretrain_threshold: float = 1e-3
    lr: float = 1e-4
    batch_size: int = 100
    eval_every: int = 50
    snapshot_epochs: tuple[int, ...] = (0, 2000, 4000, 6000)

    def train_config(self, k: int) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            k=k,
            batch_size=self.batch_size,
            latent_dim=2,
            hidden=tuple(self.hidden),
            lr=self.lr,
            epochs=self.epochs,
            seed=self.seed,
            normalize_output=False,
            augment=False,
            eval_every=self.eval_every,
            snapshot_epochs=tuple(self.snapshot_epochs),
            keep_best=False,
        )

    def pretrain_key(self) -> dict:
        keys = ("seed", "hidden", "n_pretrain", "pretrain_epochs", "pretrain_threshold", "lr")
        return {k: _jsonable(getattr(self, k)) for k in keys}

    def run_key(self, k: int) -> dict:
        d = {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}
        d.pop("ks")
        d["k"] = k
        return d


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


@dataclass
class ToyRun:
    k: int
    lam: float
    report: TrainReport

    @property
    def initial_map(self) -> float:
        return self.report.evals[0].map

    @property
    def final_map(self) -> float:
        return self.report.evals[-1].map

    @property
    def initial_diameter(self) -> float:
        return self.report.evals[0].diameter

    @property
    def final_diameter(self) -> float:
        return self.report.evals[-1].diameter


def run_dir(out_dir, k: int, lam: float) -> Path:
    return Path(out_dir) / f"k{k}_lam{lam:g}"


def pretrained_encoder(cfg: ToyConfig, out_dir) -> enc.EncoderModel:
    """Identity-pretrained 2 -> hidden -> 2 encoder, cached in ``out_dir``."""
    out = Path(out_dir)
    ckpt, meta = out / "pretrained.ckpt", out / "pretrained.json"
    if ckpt.exists() and meta.exists():
        saved = json.loads(meta.read_text())
        if saved.get("key") == cfg.pretrain_key():
            return enc.load_checkpoint(ckpt)
    uniform = gen_uniform(cfg.n_pretrain, cfg.seed)
    model = enc.init_he([2, *cfg.hidden, 2], cfg.seed, normalize_output=False)
    model, err = enc.pretrain_identity(
        model, uniform.x, cfg.pretrain_epochs, cfg.lr, cfg.seed, threshold=cfg.pretrain_threshold
    )
    out.mkdir(parents=True, exist_ok=True)
    enc.save_checkpoint(model, ckpt)
    meta.write_text(json.dumps({"key": cfg.pretrain_key(), "mse": err}, indent=1))
    return model


def cached_run(cfg: ToyConfig, k: int, out_dir) -> ToyRun | None:
    d = run_dir(out_dir, k, cfg.lam)
    if not (d / "report.json").exists() or not (d / "run.json").exists():
        return None
    if json.loads((d / "run.json").read_text()).get("key") != cfg.run_key(k):
        return None
    return ToyRun(k, cfg.lam, TrainReport.load(d / "report.json"))


def toy_repro(cfg: ToyConfig, out_dir, reuse: bool = True) -> list[ToyRun]:
    """Run (or reload) one training run per k. Results land in ``out_dir/k<k>_lam<lam>/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spiral = gen_spiral(cfg.n_spiral, cfg.arms, cfg.seed, cfg.jitter, SpiralShape(sweep=cfg.sweep))
    write_csv(spiral, out / "spiral.csv")
    runs = []
    for k in cfg.ks:
        if reuse and (hit := cached_run(cfg, k, out)) is not None:
            log.info("k=%d lam=%g: reusing %s", k, cfg.lam, run_dir(out, k, cfg.lam))
            runs.append(hit)
            continue
        model = pretrained_encoder(cfg, out)
        d = run_dir(out, k, cfg.lam)
        d.mkdir(parents=True, exist_ok=True)
        log.info("k=%d lam=%g: training %d epochs", k, cfg.lam, cfg.epochs)
        model, manifold, report = train(spiral, model, cfg.train_config(k), eval_set=spiral, out_dir=d)
        enc.save_checkpoint(model, d / "encoder.ckpt")
        save_manifold(manifold, d / "manifold.txt")
        report.save(d / "report.json")
        with open(d / "map_trajectory.csv", "w") as fh:
            fh.write("epoch,map,diameter\n")
            for e in report.evals:
                fh.write(f"{e.epoch},{e.map!r},{e.diameter!r}\n")
        (d / "run.json").write_text(json.dumps({"key": cfg.run_key(k)}, indent=1))
        runs.append(ToyRun(k, cfg.lam, report))
    return runs


def summarize(runs: list[ToyRun]) -> str:
    lines = ["k    lam   MAP@0    MAP@end  diam@0   diam@end"]
    for r in runs:
        lines.append(
            f"{r.k:<4d} {r.lam:<5g} {r.initial_map:7.2f}  {r.final_map:7.2f}  "
            f"{r.initial_diameter:7.4f}  {r.final_diameter:7.4f}"
        )
    return "\n".join(lines)
