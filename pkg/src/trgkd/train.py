"""Teacher pretraining, the token-graph distillation loop, diagnostics and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import LabeledDataset
from .errors import DataParseError, NumericError, UsageError
from .graph import build_token_graph
from .losses import (
    LossBreakdown,
    Projection,
    contextual_similarity,
    global_loss,
    inner_loss,
    local_loss,
    logit_loss,
    token_similarity,
    total_loss,
)
from .models import NetSpec, ToyNet
from .schedule import graph_temperature, learning_rate
from .tensor import Tensor, backward, cross_entropy, reshape
from .tokens import TokenBatch, apply_plan, make_sampling_plan

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TGCK"
CKPT_VERSION = 1

# definitions written next to every metrics stream
METRICS_HEADER = {
    "mean_kld": "per instance, softmax over the flattened penultimate token map of each net "
                "(student tokens after projection), KL(student || teacher), averaged over instances",
    "mul": "sum over ordered token pairs of squared Euclidean distance, divided by the token count",
    "loss": "per-epoch sample-weighted means of the training loss parts",
}


# -- optimizer -------------------------------------------------------------


class NesterovSGD:
    """SGD with (Nesterov) momentum and L2 weight decay folded into the gradient.

    A parameter without a gradient is treated as having a zero gradient, so
    weight decay and momentum still apply to it.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 5e-4,
                 nesterov: bool = True):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers = {name: np.zeros(p.shape) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        mu, wd = self.momentum, self.weight_decay
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            g = g + wd * p.data
            buf = mu * self.buffers[name] + g
            self.buffers[name] = buf
            update = g + mu * buf if self.nesterov else buf
            p.assign(p.data - lr * update)


# -- records and state -----------------------------------------------------


@dataclass
class MetricRecord:
    epoch: int
    split: str
    accuracy: float
    loss: dict | None
    mean_kld: float
    mul: float
    tau_g: float
    lr: float
    seconds: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainState:
    epoch: int
    step: int
    student: dict[str, np.ndarray]
    projection: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)
    best_accuracy: float = 0.0
    config_hash: str = ""


def save_checkpoint(path, blobs: dict[str, np.ndarray], meta: dict, config_hash: str) -> None:
    """Binary checkpoint: magic, version, config hash, JSON metadata, then named float64 blobs."""
    h = config_hash.encode("ascii")
    if len(h) != 64:
        raise UsageError("config hash must be a 64-character hex digest")
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), h,
             struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        raw_name = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataParseError(f"{path} is not a TGCK checkpoint")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise DataParseError(f"unsupported checkpoint version {version}")
        config_hash = raw[8:72].decode("ascii")
        (mlen,) = struct.unpack_from("<I", raw, 72)
        off = 76
        meta = json.loads(raw[off:off + mlen])
        off += mlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = math.prod(shape)
            blobs[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise DataParseError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise DataParseError(f"{path}: {len(raw) - off} trailing bytes")
    return blobs, meta, config_hash


def save_state(path, state: TrainState) -> None:
    blobs = {}
    blobs.update({f"student/{k}": v for k, v in state.student.items()})
    blobs.update({f"proj/{k}": v for k, v in state.projection.items()})
    blobs.update({f"momentum/{k}": v for k, v in state.momentum.items()})
    meta = {"kind": "distill", "epoch": state.epoch, "step": state.step,
            "best_accuracy": state.best_accuracy, "rng_state": state.rng_state}
    save_checkpoint(path, blobs, meta, state.config_hash)


def load_state(path) -> TrainState:
    blobs, meta, h = load_checkpoint(path)
    if meta.get("kind") != "distill":
        raise DataParseError(f"{path} is not a distillation checkpoint")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)}

    return TrainState(meta["epoch"], meta["step"], group("student/"), group("proj/"),
                      group("momentum/"), meta.get("rng_state", {}), meta["best_accuracy"], h)


def save_teacher(path, net: ToyNet, config_hash: str, accuracy: float) -> None:
    meta = {"kind": "teacher", "spec": asdict(net.spec), "train_accuracy": accuracy}
    save_checkpoint(path, net.state_arrays(), meta, config_hash)


def load_teacher(path) -> tuple[ToyNet, dict, str]:
    blobs, meta, h = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise DataParseError(f"{path} is not a teacher checkpoint")
    spec = meta["spec"]
    spec["widths"] = tuple(spec["widths"])
    net = ToyNet(NetSpec(**spec))
    net.load_arrays(blobs)
    return net.freeze(), meta, h


# -- diagnostics -----------------------------------------------------------


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def mean_kld(teacher_feats, student_feats) -> float:
    """Mean over instances of KL(student || teacher) after a softmax over each flattened feature."""
    t = np.asarray(teacher_feats.data if isinstance(teacher_feats, Tensor) else teacher_feats)
    s = np.asarray(student_feats.data if isinstance(student_feats, Tensor) else student_feats)
    if t.shape[0] != s.shape[0]:
        raise UsageError(f"mean_kld: {t.shape[0]} teacher vs {s.shape[0]} student instances")
    t = t.reshape(t.shape[0], -1)
    s = s.reshape(s.shape[0], -1)
    if t.shape != s.shape:
        raise UsageError(f"mean_kld: flattened features differ in size ({t.shape[1]} vs {s.shape[1]})")
    lt, ls = _log_softmax_np(t), _log_softmax_np(s)
    return float((np.exp(ls) * (ls - lt)).sum(axis=1).mean())


def mul(tokens) -> float:
    """(1/|T|) * sum over ordered pairs of squared distances between tokens."""
    if isinstance(tokens, TokenBatch):
        tokens = tokens.tokens
    x = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError(f"mul needs at least two tokens, got shape {x.shape}")
    s = x.shape[0]
    total = 2.0 * s * float((x * x).sum()) - 2.0 * float((x.sum(axis=0) ** 2).sum())
    return max(total, 0.0) / s


def evaluate(net: ToyNet, ds: LabeledDataset, batch_size: int = 512) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(ds) == 0:
        raise UsageError("cannot evaluate on an empty split")
    correct = 0
    for lo in range(0, len(ds), batch_size):
        _, logits = net.forward(ds.images[lo:lo + batch_size])
        correct += int((np.argmax(logits.data, axis=1) == ds.labels[lo:lo + batch_size]).sum())
    return correct / len(ds)


def export_embeddings(net: ToyNet, ds: LabeledDataset, path, batch_size: int = 512) -> int:
    """Write ``label,f0..f(D-1)`` rows of pooled penultimate features; returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(net.feature_dim)])
        for lo in range(0, len(ds), batch_size):
            feats, _ = net.forward(ds.images[lo:lo + batch_size])
            emb = net.embed(feats).data
            for lab, vec in zip(ds.labels[lo:lo + batch_size], emb):
                w.writerow([int(lab)] + [format(float(v), ".17g") for v in vec])
                rows += 1
    return rows


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1:]


# -- teacher pretraining ---------------------------------------------------


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        ix = order[lo:lo + batch_size]
        if ix.size >= 2:
            yield ix


def pretrain_teacher(net: ToyNet, ds: LabeledDataset, cfg: RunConfig) -> tuple[ToyNet, list[MetricRecord]]:
    """Cross-entropy training for ``cfg.teacher_epochs`` epochs, then freeze."""
    if len(ds) == 0:
        raise UsageError("teacher pretraining needs a non-empty dataset")
    opt = NesterovSGD(net.named_parameters(), cfg.momentum, cfg.weight_decay, cfg.nesterov)
    sched = cfg.teacher_lr_schedule()
    records = []
    for epoch in range(1, cfg.teacher_epochs + 1):
        lr = learning_rate(sched, epoch)
        seen = correct = 0
        loss_sum = 0.0
        for ix in _batches(len(ds), cfg.teacher_batch_size, cfg.teacher_seed, epoch):
            _, logits = net.forward(ds.images[ix])
            loss = cross_entropy(logits, ds.labels[ix])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"teacher loss diverged at epoch {epoch} (loss={value})")
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            loss_sum += value * ix.size
            seen += ix.size
            correct += int((np.argmax(logits.data, axis=1) == ds.labels[ix]).sum())
        records.append(MetricRecord(epoch, "teacher_train", correct / seen,
                                    {"ce": loss_sum / seen}, 0.0, 0.0, 0.0, lr))
    net.freeze()
    return net, records


# -- distillation ----------------------------------------------------------


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def _token_views(teacher: ToyNet, student: ToyNet, ft, fs, cfg):
    """Full per-instance token sets of both nets (B x M x D)."""
    if cfg.instance_level:
        tt = teacher.embed(ft)
        ts = student.embed(fs)
        return reshape(tt, (tt.shape[0], 1, tt.shape[1])), reshape(ts, (ts.shape[0], 1, ts.shape[1]))
    m = cfg.num_tokens or teacher.native_tokens
    return teacher.tokens(ft, m), student.tokens(fs, m)


def distill_step(teacher: ToyNet, student: ToyNet, proj: Projection, images, labels,
                 cfg, epoch: int, seed: int, optimizer: NesterovSGD | None = None,
                 lr: float | None = None, diagnostics: dict | None = None) -> LossBreakdown:
    """One pass of the full objective; updates student and projection when an optimizer is given.

    Terms listed in ``cfg.ablate`` are skipped entirely. Terms whose
    coefficient is 0 are still computed and enter the total with weight 0.
    """
    if not teacher.frozen:
        raise UsageError("teacher must be frozen before distillation")
    labels = np.asarray(labels)
    b = labels.shape[0]
    if b < 2:
        raise UsageError("distillation batches need at least two instances")
    x = Tensor(images)
    ft, zt = teacher.forward(x)
    fs, zs = student.forward(x)
    lam = cfg.lam if cfg.active("kd") else 0.0
    logit = logit_loss(zs, zt, labels, cfg.tau, lam, cfg.tau2_scaling)

    tt_all, ts_all = _token_views(teacher, student, ft, fs, cfg)
    inner = None
    if cfg.active("inner"):
        inner = inner_loss(contextual_similarity(tt_all), contextual_similarity(ts_all))

    m = tt_all.shape[1]
    per = 1 if cfg.instance_level else cfg.tokens_per_instance
    plan = make_sampling_plan(b, m, min(b * per, b * m), seed)
    tb_t = apply_plan(tt_all, plan, "teacher")
    tb_s = apply_plan(ts_all, plan, "student")

    tau_g = graph_temperature(cfg.temperature_schedule(), epoch)
    local = glob = None
    if cfg.active("local"):
        g_t = build_token_graph(tb_t, cfg.k, cfg.sigma_value, cfg.mutual_knn)
        g_s = build_token_graph(tb_s, cfg.k, g_t.sigma, cfg.mutual_knn)
        local = local_loss(g_s, g_t, cfg.local_neighbors_only)
    if cfg.active("global"):
        glob = global_loss(token_similarity(tb_s.tokens, tb_t.tokens, proj), tau_g)
    if cfg.graph_reduction == "mean":
        local = None if local is None else local / float(plan.total)
        glob = None if glob is None else glob / float(plan.total)

    parts = total_loss(logit, inner, local, glob, cfg.alpha, cfg.beta, cfg.gamma,
                       lam=lam, tau=cfg.tau, tau_g=tau_g)
    if not math.isfinite(parts.total):
        raise NumericError(f"non-finite loss at epoch {epoch}: {parts.as_dict()}")

    if diagnostics is not None:
        diagnostics["correct"] = int((np.argmax(zs.data, axis=1) == labels).sum())
        projected = ts_all.data @ proj.weight.data
        diagnostics["mean_kld"] = mean_kld(tt_all.data, projected)
        diagnostics["mul"] = mul(tb_s) if tb_s.size >= 2 else 0.0

    if optimizer is not None:
        optimizer.zero_grad()
        backward(parts.total_tensor)
        optimizer.step(cfg.lr if lr is None else lr)
    return parts


def evaluate_distill(teacher: ToyNet, student: ToyNet, proj: Projection, ds: LabeledDataset,
                     cfg, batch_size: int = 256) -> dict:
    """Accuracy, Mean KLD and MUL of the student on a split, with fixed sampling plans."""
    correct = 0
    kld_sum = mul_sum = 0.0
    mul_batches = 0
    for bi, lo in enumerate(range(0, len(ds), batch_size)):
        imgs = ds.images[lo:lo + batch_size]
        ft, _ = teacher.forward(imgs)
        fs, zs = student.forward(imgs)
        correct += int((np.argmax(zs.data, axis=1) == ds.labels[lo:lo + batch_size]).sum())
        tt_all, ts_all = _token_views(teacher, student, ft, fs, cfg)
        kld_sum += mean_kld(tt_all.data, ts_all.data @ proj.weight.data) * imgs.shape[0]
        b, m = ts_all.shape[0], ts_all.shape[1]
        per = 1 if cfg.instance_level else cfg.tokens_per_instance
        if b * min(per, m) >= 2:
            plan = make_sampling_plan(b, m, b * min(per, m), step_seed(cfg.seed, 0, bi))
            mul_sum += mul(apply_plan(ts_all, plan))
            mul_batches += 1
    n = len(ds)
    return {"accuracy": correct / n, "mean_kld": kld_sum / n,
            "mul": mul_sum / mul_batches if mul_batches else 0.0}


def init_state(student: ToyNet, proj: Projection, cfg) -> TrainState:
    h = cfg.hash() if hasattr(cfg, "hash") else "0" * 64
    return TrainState(0, 0, student.state_arrays(), {"weight": proj.weight.data.copy()}, {},
                      {"seed": cfg.seed}, 0.0, h)


class MetricsWriter:
    """Append-only JSON-lines stream plus a CSV summary written on close."""

    def __init__(self, out_dir, append: bool = False):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / "metrics.jsonl"
        header = self.out_dir / "metrics_header.json"
        if not append or not header.exists():
            header.write_text(json.dumps(METRICS_HEADER, indent=1, sort_keys=True) + "\n")
        self._fh = open(self.path, "a" if append else "w")
        self.records: list[MetricRecord] = []

    def write(self, rec: MetricRecord) -> None:
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()
        self.records.append(rec)

    def close(self) -> None:
        self._fh.close()
        write_summary(self.out_dir / "summary.csv", read_metrics(self.path))


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary(path, records: list[dict]) -> None:
    loss_keys = ["logit_term", "inner_term", "local_term", "global_term", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "accuracy", "mean_kld", "mul", "tau_g", "lr"] + loss_keys)
        for r in records:
            loss = r.get("loss") or {}
            w.writerow([r["epoch"], r["split"], repr(r["accuracy"]), repr(r["mean_kld"]),
                        repr(r["mul"]), repr(r["tau_g"]), repr(r["lr"])]
                       + [repr(loss[k]) if k in loss else "" for k in loss_keys])


def distill(teacher: ToyNet, student: ToyNet, proj: Projection, train_ds: LabeledDataset,
            test_ds: LabeledDataset | None, cfg: RunConfig, out_dir=None,
            state: TrainState | None = None, stop_epoch: int | None = None,
            writer: MetricsWriter | None = None) -> tuple[TrainState, list[MetricRecord]]:
    """Run the distillation loop from ``state`` (or scratch) up to ``stop_epoch``.

    With ``out_dir`` set, metrics stream to ``metrics.jsonl`` and the
    checkpoints ``last.ckpt`` and ``best.ckpt`` are refreshed every epoch.
    """
    cfg.validate()
    if not teacher.frozen:
        raise UsageError("teacher must be frozen before distillation")
    opt = NesterovSGD(student.named_parameters() + proj.named_parameters(),
                      cfg.momentum, cfg.weight_decay, cfg.nesterov)
    if state is None:
        state = init_state(student, proj, cfg)
    else:
        if state.config_hash != cfg.hash():
            raise UsageError("checkpoint was written under a different configuration")
        student.load_arrays(state.student)
        proj.weight.assign(state.projection["weight"])
        for name in opt.buffers:
            if name in state.momentum:
                opt.buffers[name] = state.momentum[name].copy()
    own_writer = writer is None and out_dir is not None
    if own_writer:
        writer = MetricsWriter(out_dir, append=state.epoch > 0)
    records: list[MetricRecord] = []
    lr_sched = cfg.lr_schedule()
    t_sched = cfg.temperature_schedule()
    last = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    try:
        for epoch in range(state.epoch + 1, last + 1):
            t0 = time.perf_counter()
            lr = learning_rate(lr_sched, epoch)
            tau_g = graph_temperature(t_sched, epoch)
            sums = {"logit_term": 0.0, "inner_term": 0.0, "local_term": 0.0,
                    "global_term": 0.0, "total": 0.0}
            seen = correct = 0
            kld = mul_acc = 0.0
            for bi, ix in enumerate(_batches(len(train_ds), cfg.batch_size, cfg.seed, epoch)):
                diag: dict = {}
                try:
                    parts = distill_step(teacher, student, proj, train_ds.images[ix], train_ds.labels[ix],
                                         cfg, epoch, step_seed(cfg.seed, epoch, bi), opt, lr, diag)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc
                state.step += 1
                n = ix.size
                for key in sums:
                    sums[key] += getattr(parts, key) * n
                seen += n
                correct += diag["correct"]
                kld += diag["mean_kld"] * n
                mul_acc += diag["mul"] * n
            seconds = time.perf_counter() - t0 if cfg.log_wallclock else None
            loss = {k: v / seen for k, v in sums.items()}
            rec = MetricRecord(epoch, "train", correct / seen, loss, kld / seen, mul_acc / seen,
                               tau_g, lr, seconds)
            records.append(rec)
            if writer:
                writer.write(rec)
            if test_ds is not None and len(test_ds):
                ev = evaluate_distill(teacher, student, proj, test_ds, cfg)
                erec = MetricRecord(epoch, "test", ev["accuracy"], None, ev["mean_kld"], ev["mul"],
                                    tau_g, lr, None)
                records.append(erec)
                if writer:
                    writer.write(erec)
                acc = ev["accuracy"]
            else:
                acc = rec.accuracy
            state.epoch = epoch
            state.student = student.state_arrays()
            state.projection = {"weight": proj.weight.data.copy()}
            state.momentum = {k: v.copy() for k, v in opt.buffers.items()}
            improved = acc > state.best_accuracy
            if improved:
                state.best_accuracy = acc
            if out_dir is not None:
                save_state(Path(out_dir) / "last.ckpt", state)
                if improved:
                    save_state(Path(out_dir) / "best.ckpt", state)
            log.info("epoch %d lr %.4g tau_g %.4g loss %.4f acc %.4f", epoch, lr, tau_g, loss["total"], acc)
    finally:
        if own_writer:
            writer.close()
    return state, records
