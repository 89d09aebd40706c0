"""Training harness: one run trains a model per deviation spec and writes metrics.

Output directory layout::

    metrics.csv                         spec,epoch,train_loss,test_error_pct,seconds,sparsity
    metrics_repeat<r>.csv               same schema, one file per extra repeat (r >= 1)
    status.json                         per-spec outcome ("ok" or "nan_loss")
    <spec>_epoch<k>.ckpt                parameter checkpoints
    <spec>_layer<i>_feat<j>_{pre,post}.csv   activation histograms around a GBN layer
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, batches, load_mnist, synth_dataset
from .deviation import parse_spec
from .gbn import GbnState, gbn_forward
from .nn import Model, build_lenet_small, build_mlp_small, evaluate_error_rate, sgd_step
from .tensor import Tape, Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)

METRICS_HEADER = ["spec", "epoch", "train_loss", "test_error_pct", "seconds", "sparsity"]
HIST_BINS = 64
ARCHS = ("mlp_small", "lenet_small")
DEFAULT_SPECS = ["sd", "mad", "rsd", "sqd1", "sqd2", "sqd3", "rbd"]


@dataclass
class TrainConfig:
    arch: str = "mlp_small"
    specs: list = field(default_factory=lambda: list(DEFAULT_SPECS))
    lr: float = 0.01
    batch_size: int = 100
    epochs: int = 5
    seed: int = 0
    epsilon: float = 1e-5
    momentum: float = 0.1
    data_dir: Optional[str] = None
    synth: bool = False
    train_size: Optional[int] = 2000
    test_size: Optional[int] = 1000
    out_dir: str = "runs/latest"
    repeats: int = 1
    workers: int = 1
    checkpoint_every: int = 0  # 0: final epoch only; -1: never
    hist_layer: Optional[int] = None
    hist_feature: int = 0

    def validate(self) -> "TrainConfig":
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if isinstance(self.specs, str):
            self.specs = [s for s in self.specs.split(",") if s.strip()]
        if not self.specs:
            raise ValueError("specs must be non-empty")
        self.specs = [parse_spec(s).name for s in self.specs]
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (GBN needs two values per channel)")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.synth and not self.data_dir:
            raise ValueError("give data_dir or set synth")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        clean = {}
        for k, v in d.items():
            key = k.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown config key {k!r}")
            clean[key] = v
        return cls(**clean)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


@dataclass
class MetricsRecord:
    spec: str
    epoch: int
    train_loss: float
    test_error_pct: float
    seconds: float
    sparsity: float

    def row(self) -> list:
        return [self.spec, str(self.epoch), _fmt(self.train_loss), _fmt(self.test_error_pct),
                _fmt(self.seconds), _fmt(self.sparsity)]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def build_model(cfg: TrainConfig, spec: str, classes: int = 10) -> Model:
    if cfg.arch == "mlp_small":
        return build_mlp_small(spec, cfg.seed, classes=classes, epsilon=cfg.epsilon, momentum=cfg.momentum)
    return build_lenet_small(classes, spec, cfg.seed, epsilon=cfg.epsilon, momentum=cfg.momentum)


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    if cfg.data_dir:
        return load_mnist(cfg.data_dir, cfg.train_size, cfg.test_size)
    return (synth_dataset(cfg.train_size or 2000, seed=cfg.seed, split="train"),
            synth_dataset(cfg.test_size or 1000, seed=cfg.seed, split="test"))


def train_spec(cfg: TrainConfig, spec: str, train: Dataset, test: Dataset, out_dir: Path,
               repeat: int = 0) -> tuple[list[MetricsRecord], str]:
    """Train one model; returns its per-epoch records and a status string."""
    model = build_model(cfg, spec)
    shuffle_seed = cfg.seed if repeat == 0 else int(np.random.SeedSequence([cfg.seed, repeat]).generate_state(1)[0])
    records = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        loss_sum, seen, zero_fracs = 0.0, 0, []
        for xb, yb in batches(train, cfg.batch_size, shuffle_seed, epoch):
            if len(yb) < 2 and cfg.arch == "mlp_small":
                continue  # dense GBN cannot normalize a single example
            with Tape() as tape:
                loss = softmax_cross_entropy(model(Tensor(xb)), yb)
                value = loss.item()
                if not np.isfinite(value):
                    log.warning("%s: non-finite loss at epoch %d, aborting this spec", spec, epoch)
                    return records, "nan_loss"
                tape.backward(loss)
            sgd_step(model, cfg.lr)
            if not all(np.all(np.isfinite(p.data)) for p in model.parameters().values()):
                log.warning("%s: parameters diverged at epoch %d, aborting this spec", spec, epoch)
                return records, "nan_loss"
            loss_sum += value * len(yb)
            seen += len(yb)
            zero_fracs.append(np.mean([l.last_zero_fraction for l in model.gbn_layers()]))
        err = evaluate_error_rate(model, test)
        rec = MetricsRecord(spec, epoch, loss_sum / seen, err, time.perf_counter() - start,
                            float(np.mean(zero_fracs)))
        records.append(rec)
        log.info("%s epoch %d: loss %.4f  test error %.2f%%", spec, epoch, rec.train_loss, err)
        if repeat == 0 and _want_checkpoint(cfg, epoch):
            save_checkpoint(out_dir / f"{spec}_epoch{epoch}.ckpt", model)
    if repeat == 0 and cfg.hist_layer is not None:
        histogram_dump(model, cfg.hist_layer, cfg.hist_feature, test.images[: cfg.batch_size], out_dir, spec)
    return records, "ok"


def _want_checkpoint(cfg: TrainConfig, epoch: int) -> bool:
    if cfg.checkpoint_every < 0:
        return False
    if cfg.checkpoint_every == 0:
        return epoch == cfg.epochs
    return epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs


def write_metrics(path: Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())


def run(cfg: TrainConfig) -> dict:
    """Train every spec in ``cfg``; returns ``{repeat: [MetricsRecord, ...]}``."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    log.info("training on %d examples, testing on %d", len(train), len(test))

    results, status = {}, {}
    for repeat in range(cfg.repeats):
        def job(spec, repeat=repeat):
            return train_spec(cfg, spec, train, test, out_dir, repeat)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                outcomes = list(pool.map(job, cfg.specs))
        else:
            outcomes = [job(s) for s in cfg.specs]
        records = [r for recs, _ in outcomes for r in recs]  # spec-then-epoch order
        for spec, (recs, st) in zip(cfg.specs, outcomes):
            status.setdefault(spec, []).append({"repeat": repeat, "status": st, "epochs": len(recs)})
        name = "metrics.csv" if repeat == 0 else f"metrics_repeat{repeat}.csv"
        write_metrics(out_dir / name, records)
        results[repeat] = records
    with open(out_dir / "status.json", "w") as fh:
        json.dump(status, fh, indent=2, sort_keys=True)
    return results


def save_checkpoint(path, model: Model) -> None:
    """One line per array: ``name<TAB>comma-separated shape<TAB>space-separated values``."""
    lines = []
    for name, arr in model.state_dict().items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(n) for n in arr.shape)
        values = " ".join(repr(float(v)) for v in arr.reshape(-1))
        lines.append(f"{name}\t{shape}\t{values}\n")
    Path(path).write_text("".join(lines))


def load_checkpoint(path) -> dict:
    state = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, shape, values = line.split("\t")
            dims = tuple(int(n) for n in shape.split(",")) if shape else ()
            flat = np.array([float(v) for v in values.split()], dtype=np.float64)
            state[name] = flat.reshape(dims)
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: malformed checkpoint line") from e
    return state


def histogram(values: np.ndarray, bins: int = HIST_BINS):
    """Equal-width bins over [min, max]; returns ``(edges, counts)``."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return np.histogram(values, bins=bins, range=(values.min(), values.max()))[::-1]


def _write_hist(path: Path, values: np.ndarray) -> None:
    edges, counts = histogram(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([_fmt(lo), _fmt(hi), int(c)])


def histogram_dump(model: Model, layer_index: int, feature_index: int, batch, out_dir, prefix: str):
    """Histogram one channel just before and just after a GBN layer.

    Every GBN layer uses batch statistics and leaves its running averages
    untouched. Returns the paths of the ``pre`` and ``post`` CSV files.
    """
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer index {layer_index} out of range (model has {len(model.layers)} layers)")
    target = model.layers[layer_index]
    if not isinstance(target, GbnState):
        raise ValueError(f"layer {layer_index} is {target!r}, not a GBN layer")
    if not 0 <= feature_index < target.channels:
        raise IndexError(f"feature index {feature_index} out of range ({target.channels} channels)")

    saved = [(l, l.mode, l.track_running) for l in model.gbn_layers()]
    try:
        for l in model.gbn_layers():
            l.mode, l.track_running = "train", False
        x = Tensor(np.asarray(batch, dtype=np.float64))
        for layer in model.layers[:layer_index]:
            x = layer(x)
        pre = x.data
        post, _ = gbn_forward(target, pre, track=False)
    finally:
        for l, mode, track in saved:
            l.mode, l.track_running = mode, track

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for tag, arr in (("pre", pre), ("post", post)):
        path = out_dir / f"{prefix}_layer{layer_index}_feat{feature_index}_{tag}.csv"
        _write_hist(path, np.take(arr, feature_index, axis=1))
        paths.append(path)
    return tuple(paths)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gbn-experiment",
        description="Train small networks with generalized batch normalization and compare deviation measures.",
    )
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--specs", help="comma-separated: sd,mad,rsd,sqd1,sqd2,sqd3,rbd,wcd or sqd:<alpha>")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--data-dir", help="directory holding MNIST IDX files (optionally .gz)")
    p.add_argument("--synth", action="store_true", default=None, help="use a synthetic dataset instead of MNIST")
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int, help="train specs on this many threads")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--hist-layer", type=int, help="model layer index of a GBN layer to histogram")
    p.add_argument("--hist-feature", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
        overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose") and v is not None}
        cfg = dataclasses.replace(cfg, **overrides).validate()
    except (OSError, ValueError, TypeError) as e:
        print(f"gbn-experiment: error: {e}", file=sys.stderr)
        return 2
    run(cfg)
    print(Path(cfg.out_dir) / "metrics.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
