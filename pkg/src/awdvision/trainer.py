"""MSE training loop with Adam, metrics, and the ablation harness.

All randomness (shuffling) derives from the run seed, so two runs with the
same seed produce byte-identical loss traces and checkpoints. Validation
data is only ever used for reporting and best-epoch selection, never for
updates; the model object is left at its final-epoch parameters and the
best-validation snapshot is what gets checkpointed and test-evaluated.
"""

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from awdvision import imgio, imgproc
from awdvision.backbone import build_model
from awdvision.engine import save_checkpoint
from awdvision.errors import ConfigError, NumericalError

SIDECAR_SUFFIX = ".json"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mse(y, y_pred):
    """Mean squared error, 64-bit accumulation."""
    y = np.asarray(y, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_pred.shape}")
    if y.size == 0:
        raise ValueError("mse of empty vectors")
    return float(np.mean((y - y_pred) ** 2))


def r2(y, y_pred):
    """Coefficient of determination: 1 - SS_res / SS_tot."""
    y = np.asarray(y, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_pred.shape}")
    if y.size < 2:
        raise ValueError("r2 needs at least 2 observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise NumericalError("r2 undefined: targets are all identical "
                             "(zero total sum of squares)")
    ss_res = float(np.sum((y - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (value, m, v)."""
    if grad.shape != value.shape:
        raise ValueError(f"grad shape {grad.shape} != value shape {value.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return value, m, v


class Adam:
    """Adam state over a list of Parameters."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            p.value, self.m[i], self.v[i] = adam_step(
                p.value, p.grad, self.m[i], self.v[i], self.t,
                self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# configs and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    test_mse: float
    test_r2: float
    wall_time_s: float
    best_epoch: int
    config: dict
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


DEVIATION_NOTES = [
    "backbone trained from random initialization; no pretrained weights",
    "augmentation restricted to the training split to prevent leakage",
]


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def load_split_arrays(manifest, pipeline_cfg):
    """Preprocess every manifest image into {split: (X, y)} float32 arrays."""
    out = {}
    for split in ("train", "val", "test"):
        samples = manifest.split(split)
        if samples:
            xs = [imgproc.preprocess(imgio.load_image(s.path), pipeline_cfg)
                  for s in samples]
            x = np.concatenate(xs, axis=0)
            y = np.array([s.height_cm for s in samples], dtype=np.float32)
        else:
            x = np.zeros((0,), dtype=np.float32)
            y = np.zeros((0,), dtype=np.float32)
        out[split] = (x, y)
    return out


def predict_batched(model, x, batch_size=32):
    preds = [model.forward(x[i:i + batch_size], train=False)
             for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(preds, axis=0)[:, 0]


def evaluate(model, x, y, batch_size=32):
    preds = predict_batched(model, x, batch_size)
    return mse(y, preds.astype(np.float64)), r2(y, preds.astype(np.float64)), preds


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(model, manifest, tcfg, pipeline_cfg, out_dir=None,
          checkpoint_name="model.ckpt"):
    """Train on the manifest's train split; returns a TrainReport.

    Writes (when out_dir is given): best-validation checkpoint + JSON
    sidecar, report.json, and loss_trace.csv.
    """
    for split in ("train", "val", "test"):
        if not manifest.split(split):
            raise ConfigError(f"manifest has an empty {split} split")

    start = time.perf_counter()
    arrays = load_split_arrays(manifest, pipeline_cfg)
    x_train, y_train = arrays["train"]
    x_val, y_val = arrays["val"]
    x_test, y_test = arrays["test"]

    optimizer = Adam(model.parameters(), tcfg.learning_rate, tcfg.beta1,
                     tcfg.beta2, tcfg.eps)
    n = x_train.shape[0]
    train_trace, val_trace = [], []
    best_epoch = -1
    best_val = np.inf
    best_state = None

    for epoch in range(tcfg.epochs):
        order = np.random.default_rng((tcfg.seed, epoch)).permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            model.zero_grad()
            pred = model.forward(xb, train=True)
            diff = pred[:, 0] - yb
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch} batch {bi}")
            dy = (2.0 * diff / diff.shape[0]).astype(pred.dtype)[:, None]
            model.backward(dy)
            optimizer.step()
            epoch_loss += loss * len(idx)
        train_trace.append(epoch_loss / n)

        val_mse = mse(y_val, predict_batched(model, x_val).astype(np.float64))
        if not np.isfinite(val_mse):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        val_trace.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = {p.name: p.value.copy() for p in model.parameters()}

    # test metrics come from the best-validation snapshot; the live model
    # keeps its final-epoch parameters
    final_state = {p.name: p.value.copy() for p in model.parameters()}
    model.load_state(best_state)
    test_mse, test_r2, _ = evaluate(model, x_test, y_test)
    model.load_state(final_state)

    report = TrainReport(
        train_loss=train_trace,
        val_loss=val_trace,
        test_mse=test_mse,
        test_r2=test_r2,
        wall_time_s=time.perf_counter() - start,
        best_epoch=best_epoch,
        config={"train": asdict(tcfg), "model": model.cfg.to_dict(),
                "pipeline": pipeline_config_to_dict(pipeline_cfg)},
        notes=list(DEVIATION_NOTES),
    )

    if out_dir is not None:
        from pathlib import Path
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / checkpoint_name
        save_checkpoint(ckpt, [(name, best_state[name]) for name in
                               sorted(best_state)])
        sidecar = {
            "model": model.cfg.to_dict(),
            "pipeline": pipeline_config_to_dict(pipeline_cfg),
            "best_epoch": best_epoch,
        }
        with open(str(ckpt) + SIDECAR_SUFFIX, "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")
        report.save(out_dir / "report.json")
        with open(out_dir / "loss_trace.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_mse", "val_mse"])
            for e, (tl, vl) in enumerate(zip(train_trace, val_trace)):
                writer.writerow([e, repr(tl), repr(vl)])
    return report


def pipeline_config_to_dict(cfg):
    d = asdict(cfg)
    d["target_size"] = list(d["target_size"])
    d["brightness_range"] = list(d["brightness_range"])
    return d


def pipeline_config_from_dict(d):
    d = dict(d)
    for k in ("target_size", "brightness_range"):
        if k in d:
            d[k] = tuple(d[k])
    return imgproc.PipelineConfig(**d)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = [("convnext", "none"), ("convnext_cbam", "cbam"),
                     ("convnext_se", "se")]


def ablation_run(manifest, tcfg, pipeline_cfg, base_model_cfg, out_path=None):
    """Train each attention variant with preprocessing on and off.

    Returns one row per (variant, preprocessing) pair; a failing variant
    yields an error row instead of aborting the table.
    """
    rows = []
    for name, attention in ABLATION_VARIANTS:
        for enabled in (True, False):
            row = {"model": name, "preprocessing": "yes" if enabled else "no",
                   "mse": "", "r2": "", "status": "ok"}
            try:
                mcfg = replace(base_model_cfg, attention=attention)
                pcfg = replace(pipeline_cfg, enabled=enabled)
                model = build_model(mcfg, tcfg.seed)
                report = train(model, manifest, tcfg, pcfg)
                row["mse"] = report.test_mse
                row["r2"] = report.test_r2
            except Exception as exc:  # one bad variant must not kill the table
                row["status"] = f"error: {exc}"
            rows.append(row)
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["model", "preprocessing",
                                                   "mse", "r2", "status"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
