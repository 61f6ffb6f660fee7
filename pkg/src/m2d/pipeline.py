"""Stages behind the ``m2d`` subcommands.

Each stage is a function of (config, input artifacts) and writes its outputs
atomically, so re-running a stage reproduces its files byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from m2d import autodiff as ad
from m2d import baselines, data, detector, evaluation, io, nets
from m2d.config import ConfigError, RunConfig
from m2d.data import Dataset

logger = logging.getLogger("m2d")

SPLIT_FILES = ("train", "fit", "test", "detector_subset", "ood")


def _log(event: str, **fields) -> None:
    logger.info(" ".join([f"event={event}"] + [f"{k}={v}" for k, v in fields.items()]))


# ---------------------------------------------------------------------------
# data


def _require(cfg: RunConfig, key: str, value) -> Path:
    if value is None:
        raise ConfigError(f"dataset: missing path {key!r}")
    path = cfg.resolve(value)
    if not path.exists():
        raise ConfigError(f"dataset: {key} path does not exist: {path}")
    return path


def check_inputs(cfg: RunConfig) -> None:
    """Fail before any work if a referenced input path is missing."""
    opts, ood = cfg.dataset.options, cfg.dataset.ood
    if cfg.dataset.source == "idx":
        _require(cfg, "idx.images", opts.get("images"))
        _require(cfg, "idx.labels", opts.get("labels"))
        _require(cfg, "ood.images", ood.get("images"))
    elif cfg.dataset.source == "csv":
        _require(cfg, "csv.path", opts.get("path"))
        _require(cfg, "ood.path", ood.get("path"))


def source_datasets(cfg: RunConfig, scratch: Path) -> tuple[Dataset, Dataset]:
    """In-distribution and OOD datasets named by the config."""
    dc = cfg.dataset
    opts, ood = dc.options, dc.ood
    if dc.source == "blobs":
        centers = opts.get("centers", [[0.0, 0.0], [4.0, 0.0], [2.0, 3.5]])
        d_in = data.gen_blobs(
            int(opts.get("num_classes", len(centers))), int(opts.get("n_per_class", 300)),
            centers, float(opts.get("spread", 0.7)), dc.seed,
        )
        d_out = data.gen_ood_blob(
            ood.get("center", [12.0, 12.0]), int(ood.get("n", 300)), float(ood.get("spread", 0.7)),
            dc.seed + 1, in_centers=centers,
        )
        return d_in, d_out
    if dc.source == "digits":
        paths = data.write_image_corpora(scratch, n_ood=int(ood.get("n", 600)), seed=dc.seed)
        d_in = data.load_idx(paths["in_images"], paths["in_labels"], name="digits")
        d_out = data.load_idx(paths["ood_images"], None, name="photos")
        return d_in, d_out
    if dc.source == "idx":
        d_in = data.load_idx(cfg.resolve(opts["images"]), cfg.resolve(opts["labels"]), opts.get("name", "idx_in"))
        d_out = data.load_idx(cfg.resolve(ood["images"]), None, ood.get("name", "idx_out"))
        return d_in, d_out
    d_in = data.load_csv(cfg.resolve(opts["path"]), labelled=True, name=opts.get("name", "csv_in"))
    d_out = data.load_csv(cfg.resolve(ood["path"]), labelled=bool(ood.get("labelled", False)), name=ood.get("name", "csv_out"))
    return d_in, d_out


def generate_data(cfg: RunConfig, out: Path) -> dict[str, Path]:
    check_inputs(cfg)
    ddir = out / cfg.dataset.dir
    d_in, d_out = source_datasets(cfg, out / "raw")
    parts = data.split(d_in, cfg.dataset.split, cfg.dataset.seed)
    ordered = [parts[k] for k in SPLIT_FILES[:-1]] + [data.with_name(d_out, d_out.name)]
    ood_nolabel = Dataset(ordered[-1].features, None, ordered[-1].provenance)
    ordered[-1] = ood_nolabel
    clamped: list[int] = []
    if cfg.dataset.normalize:
        norm = data.fit_normalization(parts["train"])
        ordered = [norm.apply(d) for d in ordered]
        clamped = list(norm.clamped)
    written = {}
    for name, d in zip(SPLIT_FILES, ordered):
        path = ddir / f"{name}.csv"
        io.atomic_write(path, data.to_csv(d))
        written[name] = path
    prov = {
        "in_name": d_in.name,
        "ood_name": d_out.name,
        "seed": cfg.dataset.seed,
        "input_shape": list(d_in.features.shape[1:]),
        "num_classes": d_in.num_classes,
        "sizes": {k: len(d) for k, d in zip(SPLIT_FILES, ordered)},
        "normalized": cfg.dataset.normalize,
        "normalization_fitted_on": "train" if cfg.dataset.normalize else None,
        "clamped_dims": clamped,
    }
    io.atomic_write(ddir / "provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")
    _log("gen_data", dir=ddir, **{f"n_{k}": v for k, v in prov["sizes"].items()})
    return written


def load_splits(cfg: RunConfig, out: Path) -> tuple[dict[str, Dataset], dict]:
    ddir = out / cfg.dataset.dir
    prov_path = ddir / "provenance.json"
    if not prov_path.exists():
        raise ConfigError(f"data directory {ddir} has no provenance.json; run gen-data first")
    prov = json.loads(prov_path.read_text(encoding="utf-8"))
    splits = {}
    for name in SPLIT_FILES:
        splits[name] = data.load_csv(ddir / f"{name}.csv", labelled=(name != "ood"), name=name)
    return splits, prov


# ---------------------------------------------------------------------------
# classifier


def train_classifier(spec: nets.ModelSpec, x: np.ndarray, y: np.ndarray, epochs: int, lr: float, batch_size: int, seed: int) -> tuple[nets.Network, list[float]]:
    """Mini-batch SGD on softmax cross-entropy; returns the net and per-epoch mean loss."""
    net = nets.build(spec, seed)
    params = net.parameters()
    state = ad.OptimizerState(lr)
    rng = ad.make_rng(seed + 1)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = perm[start : start + batch_size]
            loss = ad.cross_entropy_loss(net.forward(x[idx]), y[idx])
            ad.sgd_step(params, ad.backward(loss, params), state)
            total += loss.item() * len(idx)
        history.append(total / len(x))
        _log("train_epoch", epoch=epoch + 1, loss=f"{history[-1]:.10g}")
    return net, history


def accuracy(net: nets.Network, d: Dataset) -> float:
    return float(np.mean(net.predict(d.features) == d.labels)) if len(d) else math.nan


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    splits, _ = load_splits(cfg, out)
    mc = cfg.model
    net, history = train_classifier(
        mc.spec, splits["train"].features, splits["train"].labels, mc.epochs, mc.learning_rate, mc.batch_size, mc.seed
    )
    metrics = {
        "train_accuracy": accuracy(net, splits["train"]),
        "test_accuracy": accuracy(net, splits["test"]),
        "epochs": mc.epochs,
        "loss_history": history,
        "seed": mc.seed,
    }
    io.save(net, out / "classifier.m2d")
    io.atomic_write(out / "train_metrics.json", json.dumps(metrics, indent=2) + "\n")
    _log("train_done", train_acc=f"{metrics['train_accuracy']:.6f}", test_acc=f"{metrics['test_accuracy']:.6f}")
    return metrics


# ---------------------------------------------------------------------------
# detector


def build_bundle(cfg: RunConfig, classifier: nets.Network, splits: dict[str, Dataset], mode: str = "retrain", steps: int | None = None):
    dc = cfg.detector
    rc = dc.retrain
    if steps is not None:
        rc = detector.RetrainConfig(steps, rc.learning_rate, rc.batch_size, rc.sever_at, rc.seed, rc.loss)
    sub = splits["detector_subset"]
    return detector.convert(
        classifier, sub.features, sub.labels, rc,
        taps=dc.taps or None, mode=mode, ridge=dc.ridge, weights=dc.weights, epsilon=dc.epsilon,
        validation=splits["fit"].features if len(splits["fit"]) else None,
    )


def cmd_convert(cfg: RunConfig, out: Path, model_path: Path, mode: str = "retrain") -> Path:
    classifier = io.load(model_path)
    splits, _ = load_splits(cfg, out)
    bundle, losses = build_bundle(cfg, classifier, splits, mode)
    for i, loss in enumerate(losses, 1):
        _log("retrain_step", step=i, loss=f"{loss:.10g}")
    path = out / "bundle.m2db"
    io.save_bundle(bundle, path)
    trace = "step,loss\n" + "".join(f"{i},{loss!r}\n" for i, loss in enumerate(losses, 1))
    io.atomic_write(out / "loss_trace.csv", trace)
    _log("convert_done", mode=mode, heads=len(bundle.heads), threshold=bundle.threshold)
    return path


def grid_cells(cfg: RunConfig, classifier, splits, prov, bundle=None) -> list[evaluation.GridCell]:
    pair = f"{prov.get('in_name', 'in')}/{prov.get('ood_name', 'ood')}"
    x_in, x_out = splits["test"].features, splits["ood"].features
    ec = cfg.eval
    taps_label = "+".join(cfg.detector.taps) if cfg.detector.taps else f"pos{cfg.detector.retrain.sever_at}"
    seed = cfg.detector.retrain.seed
    cells = []

    def m2d_cell(method: str, mode: str, steps: int | None, given=None):
        def run():
            b = given if given is not None else build_bundle(cfg, classifier, splits, mode, steps)[0]
            return evaluation.evaluate(lambda x: detector.score(b, x), x_in, x_out, method, pair, steps, taps_label, seed)

        return evaluation.GridCell(pair, method, run, steps, taps_label, seed)

    for method in ec.methods:
        if method == "m2d":
            if bundle is not None:
                cells.append(m2d_cell("m2d", "retrain", bundle.info.get("steps"), bundle))
            else:
                cells += [m2d_cell("m2d", "retrain", s) for s in ec.steps_grid]
        elif method == "vanilla-ae":
            cells += [m2d_cell("vanilla-ae", "vanilla-ae", s) for s in ec.steps_grid]
        elif method == "m2d-no-retrain":
            cells.append(m2d_cell("m2d-no-retrain", "no-retrain", None))
        elif method == "msp":
            t = ec.msp_temperature
            cells.append(
                evaluation.GridCell(
                    pair, "msp",
                    lambda t=t: evaluation.evaluate(lambda x: baselines.msp_score(classifier, x, t), x_in, x_out, "msp", pair, None, "", seed),
                )
            )
        elif method == "odin":
            bc = baselines.BaselineConfig(ec.temperature, ec.odin_epsilon)
            cells.append(
                evaluation.GridCell(
                    pair, "odin",
                    lambda: evaluation.evaluate(lambda x: baselines.odin_score(classifier, x, bc), x_in, x_out, "odin", pair, None, "", seed),
                )
            )
    return cells


def cmd_evaluate(cfg: RunConfig, out: Path, model_path: Path, bundle_path: Path | None = None) -> list[evaluation.EvalReport]:
    classifier = io.load(model_path)
    bundle = io.load_bundle(bundle_path) if bundle_path is not None else None
    splits, prov = load_splits(cfg, out)
    cells = grid_cells(cfg, classifier, splits, prov, bundle)
    reports = evaluation.ablation_grid(cells, workers=cfg.eval.workers)
    io.atomic_write(out / "report.csv", evaluation.reports_to_csv(reports, cfg.eval.timing))
    io.atomic_write(out / "report.json", evaluation.reports_to_json(reports, cfg.eval.timing))
    io.atomic_write(out / "table.csv", evaluation.table_to_csv(reports))
    failed = [r for r in reports if not r.ok]
    _log("evaluate_done", cells=len(reports), failed=len(failed))
    return reports


def parallel_score(bundle: detector.DetectorBundle, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classifier prediction and detector score as two independent branches."""
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=2) as pool:
        pred = pool.submit(bundle.frozen_classifier.predict, x)
        conf = pool.submit(detector.score, bundle, x)
        return pred.result(), conf.result()


def score_lines(bundle: detector.DetectorBundle, x: np.ndarray, threshold: float) -> list[str]:
    if len(x) == 0:
        return []
    pred, conf = parallel_score(bundle, x)
    return [
        f"{i},{c!r},{'in' if c > threshold else 'out'},{int(p)}"
        for i, (c, p) in enumerate(zip(conf.tolist(), pred.tolist()))
    ]


def read_inputs(path: Path, bundle: detector.DetectorBundle) -> np.ndarray:
    """Rows of a CSV input; a trailing label column is ignored if present."""
    want = math.prod(bundle.encoder.spec.input_shape)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return np.zeros((0, want))
    header = text.splitlines()[0].split(",")
    if len(header) == want + 1:
        d = data.load_csv(path, labelled=True)
    elif len(header) == want:
        d = data.load_csv(path, labelled=False)
    else:
        raise ValueError(f"input has {len(header)} columns but the bundle expects {want} features")
    return d.features
