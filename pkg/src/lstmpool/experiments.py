"""Experiment runners: pooling-approximation study, scaled classification
comparison, and the two analysis probes.

Every run directory gets: resolved_config.json, metrics.csv (deterministic
for a fixed config+seed), timing.csv (wall clock, intentionally separate
from the deterministic metrics), summary.json, a checkpoint where
applicable, and rendered figures.

A completed run is reused when the output directory already holds a
summary whose config hash matches the resolved config; results are
deterministic in (config, seed), so re-running would reproduce the same
bytes.  Pass force=True (CLI: --force) to retrain.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import subprocess
import time

import numpy as np

from . import data as D
from . import report as R
from .autodiff import NonFiniteError, Tensor
from .layers import Model, NetworkSpec, PoolSpec, build_network, conv_preset, loss_mae, loss_xent, vgg16_preset
from .optim import NesterovSGD, PlateauSchedule, StepSchedule
from .pooling import PARAM_NAMES, avg_pool_oracle, init_pool_params, lstm_pool_fused, lstm_sequence_eval, max_pool_oracle

DATA_ROOT_ENV = "LSTMPOOL_DATA_ROOT"


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


# -- configuration -------------------------------------------------------------

DEFAULTS = {
    "approx": {
        "kind": "approx",
        "seed": 0,
        "length": 9,
        "target": "max",           # max | avg
        "psi": "relu",
        "lr0": 0.1,
        "momentum": 0.9,
        "clip_norm": 1.0,
        "batch": 128,
        "batches_per_epoch": 10000,
        "epochs": 50,
        "patience": 1,
        "lr_factor": 0.1,
        "min_lr": 1e-6,
        "stop_mae": None,          # stop early when validation MAE <= this
        "value_range": [0.0, 300.0],
    },
    "classify": {
        "kind": "classify",
        "seed": 0,
        "network": "conv8",        # convN / vgg16 / inline spec dict
        "pool": {"kind": "max", "sharing": "per_layer", "psi": None, "psi_alpha": None},
        "leak": 0.3,
        "lr0": 0.01,
        "momentum": 0.9,
        "clip_norm": 10.0,
        "batch": 100,
        "iterations": 15000,
        # lr drops at the same fractions of the budget as a full-scale
        # 122k-iteration run with drops at 50k and 90k
        "milestone_fracs": [50.0 / 122.0, 90.0 / 122.0],
        "lr_factor": 0.1,
        "eval_every": 500,
        "data": {
            "root": None,          # falls back to $LSTMPOOL_DATA_ROOT
            "classes": 10,
            "train_subset": 5000,
            "test_subset": 1000,
            "subset_seed": 0,
            "zca_lambda": 0.1,
            "augment": True,
        },
    },
}


def resolve_config(cfg: dict) -> dict:
    kind = cfg.get("kind")
    if kind not in ("approx", "classify"):
        raise ConfigError(f"config kind must be approx|classify, got {kind!r}")
    base = copy.deepcopy(DEFAULTS[kind])
    merged = _merge(base, cfg)
    if kind == "classify":
        root = merged["data"].get("root") or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"no dataset root: set data.root or ${DATA_ROOT_ENV}")
        merged["data"]["root"] = root
    return merged


def _merge(base, override):
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def apply_overrides(cfg: dict, overrides: list) -> dict:
    """Apply 'dotted.path=value' strings; values parsed as JSON when possible."""
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must be key=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return cfg


def approx_study_config(target: str, length: int, seed: int = 0) -> dict:
    """Canonical config for the approximation-study runs (one per target x L)."""
    stop = 0.6 if target == "max" else 0.3
    return {"kind": "approx", "seed": seed, "length": length,
            "target": target, "stop_mae": stop}


def classify_study_config(pool_kind: str, sharing: str, seed: int,
                          data_root: str) -> dict:
    """Canonical config for the desk-scale classification comparison."""
    return {"kind": "classify", "seed": seed,
            "pool": {"kind": pool_kind, "sharing": sharing},
            "data": {"root": data_root}}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "lstmpool-0.1.0"


def _reuse(out_dir, cfg):
    path = os.path.join(out_dir, "summary.json")
    if os.path.exists(path):
        with open(path) as fh:
            summary = json.load(fh)
        if summary.get("config_hash") == config_hash(cfg):
            return summary
    return None


def _finish(out_dir, cfg, summary_extra, metrics_rows, timing_rows, metric_label):
    R.write_csv(os.path.join(out_dir, "metrics.csv"),
                ["iteration", "epoch", "train_loss", "val_metric", "lr"],
                metrics_rows, schema="metrics")
    R.write_csv(os.path.join(out_dir, "timing.csv"),
                ["iteration", "wall_clock_s"], timing_rows, schema="timing")
    R.plot_metrics(os.path.join(out_dir, "metrics.csv"),
                   os.path.join(out_dir, "metrics.png"), metric_label)
    summary = {"config_hash": config_hash(cfg), "build": build_id(), **summary_extra}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


# -- approximation study ---------------------------------------------------------

def _eval_unit_mae(pv, length, regime, target, seed, psi, n_batches=10000,
                   batch=128, chunk=200):
    """Mean absolute error over one epoch (n_batches) of fresh test data."""
    total, count = 0.0, 0
    for start in range(0, n_batches, chunk):
        take = min(chunk, n_batches - start)
        rngs = [D.batch_rng(seed, 0, start + j) for j in range(take)]
        xs, ys = [], []
        for rg in rngs:
            x, y = D.gen_pool_batch(length, regime, batch, rg, target)
            xs.append(x)
            ys.append(y)
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        pred = lstm_sequence_eval(pv, x, psi)
        total += float(np.abs(pred - y).sum())
        count += x.shape[0]
    return total / count


def run_approx(cfg: dict, out_dir: str, force: bool = False, log=print) -> dict:
    cfg = resolve_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    cached = None if force else _reuse(out_dir, cfg)
    if cached is not None:
        return cached
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2)

    L = cfg["length"]
    k = int(round(np.sqrt(L)))
    if k * k != L:
        raise ConfigError(f"length must be a square pool size, got {L}")
    psi = cfg["psi"]
    target = cfg["target"]
    seed = cfg["seed"]
    rng = np.random.default_rng(seed)
    unit = init_pool_params(rng, dtype=np.float32)
    opt = NesterovSGD(unit.tensors(), lr=cfg["lr0"], momentum=cfg["momentum"],
                      clip_norm=cfg["clip_norm"], constrained_units=[unit])
    sched = PlateauSchedule(cfg["lr0"], patience=cfg["patience"],
                            factor=cfg["lr_factor"], min_lr=cfg["min_lr"], mode="min")
    bpe = cfg["batches_per_epoch"]
    metrics_rows, timing_rows = [], []
    t0 = time.time()
    stop = False
    val_mae = float("inf")
    for epoch in range(cfg["epochs"]):
        loss_sum = 0.0
        for b in range(bpe):
            x, y = D.gen_pool_batch(L, "T1", cfg["batch"],
                                    D.batch_rng(seed, epoch + 1, b), target)
            feat = Tensor(x.reshape(-1, 1, k, k))
            try:
                out = lstm_pool_fused(feat, k, k, unit, psi).reshape((-1,))
                loss = loss_mae(out, y)
                lv = loss.item()
            except NonFiniteError:
                lv = float("nan")
            if not np.isfinite(lv):
                snap = {n: float(v) for n, v in unit.values().items()}
                raise DivergenceError(
                    f"approx run diverged at epoch {epoch} batch {b}", snapshot=snap)
            loss_sum += lv
            opt.zero_grad()
            loss.backward()
            opt.step()
        # validation: one epoch of fresh data from a stream disjoint from training
        val_mae = _eval_unit_mae(unit.values(), L, "T1", target,
                                 seed + 777, psi, n_batches=bpe, batch=cfg["batch"])
        opt.lr = sched.update(val_mae)
        it = (epoch + 1) * bpe
        metrics_rows.append([it, epoch + 1, loss_sum / bpe, val_mae, opt.lr])
        timing_rows.append([it, time.time() - t0])
        log(f"[approx L={L} {target}] epoch {epoch + 1}: "
            f"train MAE {loss_sum / bpe:.4g}, val MAE {val_mae:.4g}, lr {opt.lr:.2g}")
        if cfg["stop_mae"] is not None and val_mae <= cfg["stop_mae"]:
            stop = True
        if stop:
            break

    pv = unit.values()
    test_rows = []
    final = {}
    for regime in ("T1", "T2", "T3"):
        mae = _eval_unit_mae(pv, L, regime, target, seed + 999, psi,
                             n_batches=bpe, batch=cfg["batch"])
        test_rows.append([regime, mae])
        final[regime] = mae
    R.write_csv(os.path.join(out_dir, "mae_table.csv"), ["regime", "mae"],
                test_rows, schema="approx-mae")
    params_path = os.path.join(out_dir, "unit_params.json")
    with open(params_path, "w") as fh:
        json.dump({n: float(v) for n, v in pv.items()}, fh, indent=2)
    return _finish(out_dir, cfg, {
        "kind": "approx", "length": L, "target": target,
        "final_mae": final, "val_mae": val_mae,
        "epochs_run": len(metrics_rows),
        "unit_params": os.path.basename(params_path),
    }, metrics_rows, timing_rows, metric_label="validation MAE")


# -- classification ---------------------------------------------------------------

def _build_from_config(cfg: dict) -> Model:
    net = cfg["network"]
    pool = cfg["pool"]
    if isinstance(net, dict):
        spec = NetworkSpec.from_json(json.dumps(net))
    elif isinstance(net, str) and net.startswith("conv"):
        spec = conv_preset(int(net[4:]), pool_kind=pool["kind"],
                           sharing=pool.get("sharing", "per_layer"),
                           leak=cfg["leak"], classes=cfg["data"]["classes"])
    elif net == "vgg16":
        spec = vgg16_preset(pool_kind=pool["kind"],
                            sharing=pool.get("sharing", "per_layer"),
                            classes=cfg["data"]["classes"],
                            channel_mult=cfg.get("channel_mult", 1.0))
    else:
        raise ConfigError(f"unknown network {net!r}")
    model = build_network(spec, seed=cfg["seed"])
    if pool.get("psi"):
        model.set_pool_activation(pool["psi"], pool.get("psi_alpha") or 0.0)
    return model


def load_classification_data(dcfg: dict):
    """Load, subset and preprocess train/test splits.

    The subset is drawn with subset_seed (independent of the run seed) so
    every compared run sees identical data.  Whitening is fit on the
    training subset only and cached on disk next to the dataset.
    """
    root = dcfg["root"]
    classes = dcfg["classes"]
    train_labels, train_images = D.load_cifar(root, "train", classes)
    test_labels, test_images = D.load_cifar(root, "test", classes)
    srng = np.random.default_rng(dcfg["subset_seed"])
    if dcfg["train_subset"] and dcfg["train_subset"] < len(train_labels):
        idx = srng.permutation(len(train_labels))[:dcfg["train_subset"]]
        train_labels, train_images = train_labels[idx], train_images[idx]
    if dcfg["test_subset"] and dcfg["test_subset"] < len(test_labels):
        idx = srng.permutation(len(test_labels))[:dcfg["test_subset"]]
        test_labels, test_images = test_labels[idx], test_images[idx]
    train_images = D.global_contrast_normalize(train_images)
    test_images = D.global_contrast_normalize(test_images)
    files = [os.path.join(root, f) for f in
             (D.CIFAR10_TRAIN_FILES if classes == 10 else ["train.bin"])]
    key_extra = f"{dcfg['train_subset']}_{dcfg['subset_seed']}"
    cache_dir = os.path.join(root, "zca_cache", key_extra)
    tr = D.fit_whitening_cached(train_images, files, dcfg["zca_lambda"], cache_dir)
    train_images = tr.apply(train_images)
    test_images = tr.apply(test_images)
    return (train_labels, train_images), (test_labels, test_images)


def _test_accuracy(model: Model, labels, images, batch=200):
    correct = 0
    for s in range(0, len(labels), batch):
        logits = model.forward(images[s:s + batch], train_mode=False)
        correct += int((logits.data.argmax(axis=1) == labels[s:s + batch]).sum())
    return correct / len(labels)


def run_classify(cfg: dict, out_dir: str, force: bool = False, log=print) -> dict:
    cfg = resolve_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    cached = None if force else _reuse(out_dir, cfg)
    if cached is not None:
        return cached
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2)

    (train_labels, train_images), (test_labels, test_images) = \
        load_classification_data(cfg["data"])
    model = _build_from_config(cfg)
    seed = cfg["seed"]
    iters = cfg["iterations"]
    batch = cfg["batch"]
    milestones = [int(round(f * iters)) for f in cfg["milestone_fracs"]]
    sched = StepSchedule(cfg["lr0"], milestones, cfg["lr_factor"])
    opt = NesterovSGD(model.parameters(), lr=cfg["lr0"], momentum=cfg["momentum"],
                      clip_norm=cfg["clip_norm"],
                      constrained_units=model.pooling_units())

    n = len(train_labels)
    per_epoch = n // batch
    metrics_rows, timing_rows = [], []
    t0 = time.time()
    order = None
    last_loss = float("nan")
    for it in range(iters):
        epoch = it // per_epoch
        bi = it % per_epoch
        if bi == 0:
            order = np.random.default_rng(
                np.random.SeedSequence([seed, 31337, epoch])).permutation(n)
        sel = order[bi * batch:(bi + 1) * batch]
        rng_b = D.batch_rng(seed, epoch, bi)
        xb = train_images[sel]
        if cfg["data"]["augment"]:
            xb = D.augment(xb, rng_b)
        try:
            logits = model.forward(xb, train_mode=True, rng=rng_b)
            loss = loss_xent(logits, train_labels[sel])
            last_loss = loss.item()
        except NonFiniteError:
            last_loss = float("nan")
        if not np.isfinite(last_loss):
            try:
                model.forward(xb, train_mode=True, rng=D.batch_rng(seed, epoch, bi),
                              check_finite=True)
            except Exception as exc:  # noqa: BLE001 - diagnostic path
                detail = str(exc)
            else:
                detail = "loss"
            snap = {}
            for u_idx, unit in enumerate(model.pooling_units()):
                snap[f"unit{u_idx}"] = {nm: v.tolist() for nm, v in unit.values().items()}
            raise DivergenceError(
                f"classify run diverged at iteration {it} ({detail})", snapshot=snap)
        model.zero_grad()
        loss.backward()
        opt.lr = sched.lr_at(it)
        opt.step()
        if (it + 1) % cfg["eval_every"] == 0 or it + 1 == iters:
            acc = _test_accuracy(model, test_labels, test_images)
            metrics_rows.append([it + 1, epoch, last_loss, acc, opt.lr])
            timing_rows.append([it + 1, time.time() - t0])
            log(f"[classify {os.path.basename(out_dir)}] iter {it + 1}/{iters}: "
                f"loss {last_loss:.4f}, test acc {acc:.4f}, lr {opt.lr:.2g}")

    final_acc = _test_accuracy(model, test_labels, test_images)
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    model.save(ckpt)
    return _finish(out_dir, cfg, {
        "kind": "classify",
        "test_error_pct": 100.0 * (1.0 - final_acc),
        "test_accuracy": final_acc,
        "param_count": model.param_count(),
        "checkpoint": os.path.basename(ckpt),
    }, metrics_rows, timing_rows, metric_label="test accuracy")


# -- analyses ----------------------------------------------------------------------

def _first_pool_layer(model: Model, kind: str):
    for idx, l in enumerate(model.spec.layers):
        if isinstance(l, PoolSpec) and l.kind == kind:
            return idx, l
    raise ConfigError(f"checkpoint has no {kind!r} pooling layer")


def _features_before(model: Model, layer_idx: int, batch: np.ndarray) -> np.ndarray:
    sub = NetworkSpec(layers=model.spec.layers[:layer_idx],
                      input_shape=model.spec.input_shape)
    saved_spec = model.spec
    model.spec = sub
    try:
        out = model.forward(batch, train_mode=False)
    finally:
        model.spec = saved_spec
    return out.data


def analyze_locations(checkpoint_path: str, data_cfg: dict, out_dir: str,
                      n_patches: int = 5000, seed: int = 0, log=print) -> dict:
    """Histogram of how many in-region locations are the argmax of at least
    one channel, over randomly sampled pooling regions of a max-pool net."""
    os.makedirs(out_dir, exist_ok=True)
    model = Model.load(checkpoint_path)
    idx, pool = _first_pool_layer(model, "max")
    dcfg = _merge(copy.deepcopy(DEFAULTS["classify"]["data"]), data_cfg)
    if not dcfg.get("root"):
        dcfg["root"] = os.environ.get(DATA_ROOT_ENV)
    _, (test_labels, test_images) = load_classification_data(dcfg)
    rng = np.random.default_rng(seed)
    k, stride = pool.k, pool.stride
    counts = []
    chunk = 100
    while len(counts) < n_patches:
        sel = rng.integers(0, len(test_images), size=chunk)
        feats = _features_before(model, idx, test_images[sel])  # [B,C,H,W]
        b, c, h, w = feats.shape
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        for j in range(b):
            ri = rng.integers(0, oh)
            rj = rng.integers(0, ow)
            region = feats[j, :, ri * stride:ri * stride + k, rj * stride:rj * stride + k]
            arg = region.reshape(c, -1).argmax(axis=1)  # first index wins ties
            counts.append(len(np.unique(arg)))
            if len(counts) >= n_patches:
                break
    hist = np.bincount(counts, minlength=k * k + 1)[1:]
    rows = [[loc + 1, int(hist[loc])] for loc in range(k * k)]
    csv_path = os.path.join(out_dir, "location_histogram.csv")
    R.write_csv(csv_path, ["locations_selected", "regions"], rows,
                schema="location-histogram")
    R.plot_histogram(csv_path, os.path.join(out_dir, "location_histogram.png"),
                     "locations selected by >=1 channel")
    counts = np.array(counts)
    summary = {
        "kind": "analyze_locations",
        "n_patches": int(n_patches),
        "median": float(np.median(counts)),
        "max": int(counts.max()),
        "channels": int((model.layer_shapes[idx - 1] if idx
                         else model.spec.input_shape)[0]),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    log(f"[analyze-locations] median {summary['median']}, max {summary['max']}")
    return summary


def analyze_response(source, out_dir: str, n: int = 1000, fixed_max: float = 1.5,
                     seed: int = 0, log=print) -> dict:
    """Probe pooling units with random regions whose maximum is pinned.

    `source` is either a checkpoint path (probes every LSTM pooling layer)
    or a dict {params: {...}, length: L, psi: kind[, psi_alpha]} for a
    standalone unit.  Rows are sorted by the avg-pool oracle.
    """
    os.makedirs(out_dir, exist_ok=True)
    units = []
    if isinstance(source, str):
        model = Model.load(source)
        seen = set()
        for idx, l in enumerate(model.spec.layers):
            if isinstance(l, PoolSpec) and l.kind == "lstm":
                unit = model.pool_units[idx]
                if id(unit) in seen:
                    continue
                seen.add(id(unit))
                kind, alpha = model._psi[idx]
                units.append((f"pool_layer{idx}", unit.values(), l.k * l.k, kind, alpha))
    else:
        pv = {nm: np.asarray(v, dtype=np.float64) for nm, v in source["params"].items()}
        units.append(("unit", pv, source["length"], source["psi"],
                      source.get("psi_alpha", 0.0)))
    if not units:
        raise ConfigError("no LSTM pooling layers to probe")

    rng = np.random.default_rng(seed)
    summary = {"kind": "analyze_response", "files": [], "correlation": {}}
    for name, pv, length, psi, alpha in units:
        x = rng.uniform(0.0, fixed_max, size=(n, length))
        pos = rng.integers(0, length, size=n)
        x[np.arange(n), pos] = fixed_max
        avg = x.mean(axis=1)
        lstm = lstm_sequence_eval(pv, x, psi, alpha)
        order = np.argsort(avg, kind="stable")
        rows = [[float(avg[j]), fixed_max, float(lstm[j])] for j in order]
        csv_path = os.path.join(out_dir, f"response_{name}.csv")
        R.write_csv(csv_path, ["avg", "max", "lstm"], rows, schema="response")
        R.plot_response(csv_path, os.path.join(out_dir, f"response_{name}.png"))
        corr = float(np.corrcoef(avg, lstm)[0, 1])
        summary["files"].append(os.path.basename(csv_path))
        summary["correlation"][name] = corr
        log(f"[analyze-response] {name}: corr(lstm, avg) = {corr:.4f}")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary
