"""Experiment orchestration: partition, local training, server pipeline,
evaluation, baselines and on-disk artifacts.

Seed derivation (all through ``numpy.random.SeedSequence``):

* ``seed``                      Dirichlet partition
* ``seed, spawn_key=(3,)``      shared initial classifier weights
* ``seed, spawn_key=(0, k)``    client ``k``: init (CVAE), shuffling, noise
* ``seed, spawn_key=(1, k)``    latent draws of generator ``k`` on the server
* ``seed, spawn_key=(2,)``      global-model batch order during fusion
"""

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError
from .client import (
    STREAM_INIT,
    ClientConfig,
    ClientKind,
    derive_rng,
    train_classifier_local,
    train_cvae_local,
)
from .data import (
    dirichlet_partition,
    label_histogram,
    load_idx,
    make_blobs,
    train_test_split_per_class,
)
from .metrics import top1_accuracy
from .models import ConditionalVAE, MLPClassifier
from .server import (
    FusionConfig,
    GlobalModel,
    Variant,
    fuse,
    generate_samples,
    init_global,
    optimize_samples,
)

log = logging.getLogger(__name__)

BASELINE_FEDAVG = "fedavg_oneshot"
BASELINE_SYNTHETIC = "synthetic_only"


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "blobs"
    num_classes: int = 10
    dim: int = 16
    per_class: int = 600
    test_per_class: int = 200
    spread: float = 1.0
    center_scale: float = 1.0
    modes_per_class: int = 1
    mode_scale: float = 1.0
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # federation
    num_clients: int = 10
    num_classifier_clients: int = 5
    alpha: float = 0.5
    seeds: tuple = (0, 1, 2)
    variants: tuple = ("fedmho", "md", "sd")
    # local models
    hidden: tuple = (128, 64)
    batch_size: int = 64
    classifier_epochs: int = 50
    classifier_lr: float = 1e-3
    momentum: float = 0.9
    cvae_epochs: int = 30
    cvae_lr: float = 1e-2
    cvae_hidden: int = 64
    latent_dim: int = 8
    # server
    lam: float = 0.5
    global_epochs: int = 20
    global_lr: float = 1e-3
    num_synthetic: int = 2000
    retention_ratio: float = 0.8
    quota: str = "equal"
    # baselines / output
    fedavg_oneshot: bool = True
    synthetic_only: bool = True
    write_samples: bool = False
    out: str = "runs"

    def validate(self):
        if self.dataset not in ("blobs", "idx"):
            raise ValidationError(f"dataset must be 'blobs' or 'idx', got {self.dataset!r}")
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if not 1 <= self.num_classifier_clients <= self.num_clients:
            raise ValidationError("need 1 <= num_classifier_clients <= num_clients")
        generators = self.num_clients - self.num_classifier_clients
        if (self.variants or self.synthetic_only) and generators < 1:
            raise ValidationError("fusion variants and synthetic_only need >= 1 generative client")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")
        known = [v.value for v in Variant]
        for v in self.variants:
            if v not in known:
                raise ValidationError(f"unknown variant {v!r}; expected one of {known}")
        if self.num_synthetic < self.num_classes:
            raise ValidationError("num_synthetic must be >= num_classes")
        FusionConfig(lam=self.lam, global_epochs=self.global_epochs,
                     total_synthetic=self.num_synthetic,
                     retention_ratio=self.retention_ratio)
        if self.dataset == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ValidationError(f"dataset=idx needs {name}")
        return self

    def fusion_config(self, variant, seed, **overrides):
        kw = dict(variant=variant, lam=self.lam, global_epochs=self.global_epochs,
                  learning_rate=self.global_lr, batch_size=self.batch_size,
                  total_synthetic=self.num_synthetic,
                  retention_ratio=self.retention_ratio, seed=seed)
        kw.update(overrides)
        return FusionConfig(**kw)


# --------------------------------------------------------------------------
# Config files: ``key = value`` lines, ``#`` starts a comment.

_TUPLE_ITEM = {"seeds": int, "variants": str, "hidden": int}


def _convert(name, default, text):
    text = text.strip()
    if name in _TUPLE_ITEM:
        return tuple(_TUPLE_ITEM[name](t.strip()) for t in text.split(",") if t.strip())
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{name}: cannot read {text!r} as a boolean")
    try:
        return type(default)(text)
    except ValueError:
        raise ValidationError(f"{name}: cannot read {text!r} as {type(default).__name__}") from None


def apply_overrides(config, pairs):
    """Return a copy of ``config`` with ``{key: text}`` overrides converted."""
    defaults = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    updates = {}
    for key, text in pairs.items():
        if key not in defaults:
            raise ValidationError(f"unknown config key {key!r}")
        updates[key] = _convert(key, defaults[key], text)
    return dataclasses.replace(config, **updates)


def parse_config(text, base=None):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------------
# Results


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    seed: int
    alpha: float
    top1: float


@dataclass
class RunSummary:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    # (seed, phase, client_id or variant, kind, split) for every data access
    events: list = field(default_factory=list)

    def add(self, variant, seed, report):
        self.rows.append(SummaryRow(variant, seed, self.config.alpha, report.top1))
        self.reports[(variant, seed)] = report

    def mean_std(self):
        by_variant = {}
        for r in self.rows:
            by_variant.setdefault(r.variant, []).append(r.top1)
        return {v: (float(np.mean(a)), float(np.std(a))) for v, a in by_variant.items()}

    def format_table(self):
        lines = [f"{'variant':<18} {'top1 (%)':>16}  seeds"]
        for v, (m, s) in self.mean_std().items():
            n = sum(r.variant == v for r in self.rows)
            lines.append(f"{v:<18} {100 * m:7.2f} ± {100 * s:5.2f}  {n}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# Pipeline pieces


def load_datasets(config):
    if config.dataset == "idx":
        train = load_idx(config.train_images, config.train_labels, config.num_classes)
        test = load_idx(config.test_images, config.test_labels, config.num_classes)
        return train, test
    full = make_blobs(config.num_classes, config.per_class + config.test_per_class,
                      config.dim, config.spread, config.data_seed, config.center_scale,
                      config.modes_per_class, config.mode_scale)
    return train_test_split_per_class(full, config.test_per_class, config.data_seed)


def classifier_template(config, n_features):
    return MLPClassifier(hidden_layer_sizes=tuple(config.hidden), n_classes=config.num_classes)


def shared_init(config, n_features, seed):
    """Initial classifier weights broadcast to every classifier client."""
    est = classifier_template(config, n_features)
    return est.initialize(n_features, config.num_classes, derive_rng(seed, STREAM_INIT)).get_weights()


@dataclass
class ClientRound:
    partition: object
    classifier_updates: list
    generative_updates: list


def train_clients(config, train, seed, events=None):
    """Partition ``train`` and run local training on every client.

    Clients ``0 .. num_classifier_clients - 1`` train classifiers, the rest
    train CVAEs.
    """
    events = events if events is not None else []
    partition = dirichlet_partition(train, config.num_clients, config.alpha, seed)
    init = shared_init(config, train.n_features, seed)
    cls_model = classifier_template(config, train.n_features)
    gen_model = ConditionalVAE(latent_dim=config.latent_dim, hidden_size=config.cvae_hidden,
                               n_classes=config.num_classes)
    cls_updates, gen_updates = [], []
    for k, idx in enumerate(partition.client_indices):
        local = train.subset(idx)
        if k < config.num_classifier_clients:
            cc = ClientConfig(k, ClientKind.CLASSIFIER, config.classifier_epochs,
                              config.batch_size, config.classifier_lr, config.momentum, seed)
            events.append((seed, "train", k, "classifier", "train"))
            cls_updates.append(train_classifier_local(cc, cls_model, local.images,
                                                      local.labels, init_params=init))
        else:
            cc = ClientConfig(k, ClientKind.GENERATIVE, config.cvae_epochs,
                              config.batch_size, config.cvae_lr, seed=seed)
            events.append((seed, "train", k, "generative", "train"))
            gen_updates.append(train_cvae_local(cc, gen_model, local.images, local.labels))
        log.debug("seed %d client %d trained on %d samples, histogram %s", seed, k,
                  len(idx), label_histogram(train, idx).tolist())
    return ClientRound(partition, cls_updates, gen_updates)


def synthesize(config, generative_updates, seed, num_synthetic=None, retention_ratio=None):
    """Generate and filter the server-side synthetic set. Returns ``(raw, filtered)``."""
    m = config.num_synthetic if num_synthetic is None else num_synthetic
    r = config.retention_ratio if retention_ratio is None else retention_ratio
    raw = generate_samples(generative_updates, m, seed, quota=config.quota)
    return raw, optimize_samples(raw, r)


def baseline_fedavg_oneshot(classifier_updates, test):
    """Single-round parameter average of the classifiers, evaluated as is."""
    g = init_global(classifier_updates)
    return top1_accuracy(g.model, test.images, test.labels, test.num_classes)


def baseline_synthetic_only(generative_updates, config, test, seed, ds=None, evaluate=None):
    """Global classifier trained from random weights on synthetic data only.

    Returns ``(EvalReport, per-epoch metrics)``.
    """
    if not generative_updates:
        raise ValidationError("synthetic_only needs at least one generative update")
    if ds is None:
        ds = synthesize(config, generative_updates, seed)[1]
    start = GlobalModel.from_params(shared_init(config, test.n_features, seed))
    fcfg = config.fusion_config(Variant.FEDMHO, seed)
    trained, curve = fuse(start, ds, [], fcfg, evaluate)
    return top1_accuracy(trained.model, test.images, test.labels, test.num_classes), curve


def run_experiment(config, progress=None):
    """Run every seed of ``config``; see :class:`RunSummary` for the result."""
    config.validate()
    train, test = load_datasets(config)
    summary = RunSummary(config)

    for seed in config.seeds:
        rnd = train_clients(config, train, seed, summary.events)

        def evaluate(model, _tag=None):
            summary.events.append((seed, "evaluate", _tag, "global", "test"))
            return top1_accuracy(model, test.images, test.labels, test.num_classes).top1

        ds = None
        if rnd.generative_updates:
            raw, ds = synthesize(config, rnd.generative_updates, seed)
            if config.write_samples:
                summary.samples[("raw", seed)] = raw
                summary.samples[("filtered", seed)] = ds

        g0 = init_global(rnd.classifier_updates)
        for name in config.variants:
            variant = Variant(name)
            fused, curve = fuse(g0, ds, rnd.classifier_updates,
                                config.fusion_config(variant, seed),
                                lambda m: evaluate(m, variant.label))
            summary.curves[(variant.label, seed)] = curve
            summary.add(variant.label, seed, top1_accuracy(
                fused.model, test.images, test.labels, test.num_classes))
            if progress:
                progress(f"seed {seed} {variant.label}: {summary.rows[-1].top1:.4f}")

        if config.fedavg_oneshot:
            summary.events.append((seed, "evaluate", BASELINE_FEDAVG, "global", "test"))
            summary.add(BASELINE_FEDAVG, seed,
                        baseline_fedavg_oneshot(rnd.classifier_updates, test))
        if config.synthetic_only:
            report, curve = baseline_synthetic_only(
                rnd.generative_updates, config, test, seed, ds=ds,
                evaluate=lambda m: evaluate(m, BASELINE_SYNTHETIC))
            summary.curves[(BASELINE_SYNTHETIC, seed)] = curve
            summary.add(BASELINE_SYNTHETIC, seed, report)
    return summary


# --------------------------------------------------------------------------
# Artifacts

SUMMARY_HEADER = ["variant", "seed", "alpha", "top1"]
CURVE_HEADER = ["epoch", "L_CE", "L_KL", "test_acc"]


def _fmt(x):
    return repr(float(x))


def write_summary_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.variant, r.seed, _fmt(r.alpha), _fmt(r.top1)])


def read_summary_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [SummaryRow(r["variant"], int(r["seed"]), float(r["alpha"]), float(r["top1"]))
                for r in reader]


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for m in curve:
            w.writerow([m.epoch, _fmt(m.ce), _fmt(m.kl), _fmt(m.test_acc)])


def write_pgm_grid(samples, path, image_shape=None, columns=10, max_images=100):
    """Tile flattened [0, 1] images into one binary (P5) 8-bit PGM."""
    samples = np.asarray(samples, dtype=np.float64)[:max_images]
    d = samples.shape[1]
    if image_shape is None:
        side = int(round(np.sqrt(d)))
        image_shape = (side, side) if side * side == d else (1, d)
    h, w = image_shape
    n = max(len(samples), 1)
    cols = min(columns, n)
    rows = -(-n // cols)
    grid = np.zeros((rows * (h + 1) + 1, cols * (w + 1) + 1), dtype=np.uint8)
    for i, img in enumerate(samples):
        r, c = divmod(i, cols)
        pix = np.clip(np.rint(img.reshape(h, w) * 255.0), 0, 255).astype(np.uint8)
        grid[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + c * (w + 1): 1 + c * (w + 1) + w] = pix
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())
    return grid


def _class_ordered(ds, per_class=10):
    picks = []
    for c in np.unique(ds.labels):
        picks.extend(np.flatnonzero(ds.labels == c)[:per_class].tolist())
    return ds.samples[picks]


def emit_artifacts(summary, out_dir):
    """Write ``summary.csv``, one ``fusion_curve_<variant>_<seed>.csv`` per run
    and, when samples were kept, ``samples_<stage>.pgm`` grids."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, "summary.csv")]
        write_summary_csv(summary.rows, paths[0])
        for (variant, seed), curve in sorted(summary.curves.items()):
            p = os.path.join(out_dir, f"fusion_curve_{variant}_{seed}.csv")
            write_curve_csv(curve, p)
            paths.append(p)
        for (stage, seed), ds in sorted(summary.samples.items()):
            p = os.path.join(out_dir, f"samples_{stage}_seed{seed}.pgm")
            write_pgm_grid(_class_ordered(ds), p)
            paths.append(p)
    except OSError as exc:
        raise OSError(f"cannot write artifacts under {out_dir!r}: {exc}") from exc
    return paths
