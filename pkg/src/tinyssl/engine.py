"""Pretraining loop for every method, with accumulation, EMA targets and checkpoints."""
from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import nn
from . import tensor as T
from .augment import (CurriculumPolicy, augment_image, phase_for_epoch, policy_for_phase,
                      resize, stream)
from .config import RunConfig, parse_config
from .data import Dataset, batch_iterator, load_cifar_binary, synth_dataset_generate
from .losses import (DinoCenter, LossWeights, byol_loss, cls_loss, cross_entropy_loss,
                     dino_self_distill_loss, infonce_loss, ms_loss, nt_xent_loss, total_loss)
from .model import (BackboneSpec, HeadSpec, StudentNet, build_student, micro_spec, full_spec,
                    project_global, project_stages, student_forward)
from .optim import (AdamWState, NegativeQueue, TrainingError, adamw_step, collapse_metrics,
                    ema_update, lr_schedule)
from .teacher import TeacherStore, lookup_stage_aligned, synth_teacher_generate, write_store

METRICS_HEADER = ("epoch", "loss_total", "loss_cls", "loss_ms", "loss_reg", "lr",
                  "feat_std", "rank_proxy", "collapsed", "wall_seconds")


# --- run assembly -------------------------------------------------------------

def backbone_spec(cfg: RunConfig) -> BackboneSpec:
    make = micro_spec if cfg["backbone.preset"] == "micro" else full_spec
    spec = make(cfg["backbone.alpha"])
    if cfg["backbone.resolution"]:
        spec = BackboneSpec(spec.width_multiplier, cfg["backbone.resolution"], spec.stage_plan)
    return spec


def head_spec(cfg: RunConfig, teacher_cls_dim=384, teacher_channels=384, num_classes=0,
              teacher_stages=True) -> HeadSpec:
    m = cfg.method
    return HeadSpec(
        teacher_cls_dim=teacher_cls_dim,
        stage_proj_channels=teacher_channels,
        head_kind=cfg.head_kind(),
        hidden=cfg["head.hidden"],
        align=m in ("ca_dssl", "seed"),
        stage_proj=m == "ca_dssl" and cfg["loss.lambda_ms"] > 0 and teacher_stages,
        predictor_hidden=cfg["head.predictor_hidden"] if m == "byol" and cfg["head.predictor"] else 0,
        num_classes=num_classes if m == "supervised" else 0,
    )


def load_datasets(cfg: RunConfig):
    """(train, held-out) datasets named by the config."""
    if cfg["data.cifar_path"]:
        train = load_cifar_binary(cfg["data.cifar_path"], cfg["data.variant"])
        test = load_cifar_binary(cfg["data.cifar_test_path"], cfg["data.variant"]) if cfg["data.cifar_test_path"] else None
        return train, test
    k, seed = cfg["data.synth_classes"], cfg["data.synth_seed"]
    train = synth_dataset_generate(k, cfg["data.synth_per_class"], 32, seed)
    test = synth_dataset_generate(k, cfg["data.synth_test_per_class"], 32, seed + 1)
    return train, test


def teacher_stage_dims(spec: BackboneSpec, source_resolution):
    # twice the student's tap grid at the source resolution, so crops still resolve detail
    return [(max(1, 2 * source_resolution // s),) * 2 for s in spec.tap_strides]


def open_teacher(cfg: RunConfig, train: Dataset, spec: BackboneSpec):
    if cfg.method not in ("ca_dssl", "seed"):
        return None
    path = cfg["teacher.store_path"]
    if not path:
        path = os.path.join(cfg["output_dir"], "teacher.tfst")
        if not os.path.exists(path):
            os.makedirs(cfg["output_dir"], exist_ok=True)
            write_store(path, synth_teacher_generate(train, cfg["teacher.synth_seed"],
                                                     teacher_stage_dims(spec, train.resolution)))
    store = TeacherStore(path)
    missing = [int(i) for i in train.image_ids if int(i) not in store]
    if missing:
        raise TrainingError(f"teacher store {path} has no record for image_id {missing[0]} "
                            f"({len(missing)} of {len(train)} missing)")
    return store


@dataclass
class TrainState:
    opt: AdamWState
    epoch: int = 0  # completed epochs
    step: int = 0  # optimizer steps taken
    target: StudentNet | None = None
    center: DinoCenter | None = None
    queue: NegativeQueue | None = None
    seed: int = 0


@dataclass
class Run:
    cfg: RunConfig
    spec: BackboneSpec
    net: StudentNet
    state: TrainState
    train: Dataset
    test: Dataset | None
    teacher: TeacherStore | None
    curriculum: CurriculumPolicy
    weights: LossWeights
    dtype: type = np.float32
    history: list = field(default_factory=list)

    @property
    def resolution(self):
        return self.spec.input_resolution


def build_run(cfg: RunConfig, datasets=None) -> Run:
    dtype = np.float64 if cfg["dtype"] == "float64" else np.float32
    spec = backbone_spec(cfg)
    train, test = datasets if datasets is not None else load_datasets(cfg)
    teacher = open_teacher(cfg, train, spec)
    cls_dim, channels, has_stages = 384, 384, True
    if teacher is not None:
        cls_dim = teacher.cls_dim
        # a CLS-only store (no stage maps) switches the multi-scale term off
        has_stages = len(teacher.stage_dims) > 0
        if has_stages:
            channels = teacher.stage_dims[0][2]
    head = head_spec(cfg, cls_dim, channels, num_classes=train.num_classes or int(train.labels.max()) + 1
                     if train.labels is not None else 0, teacher_stages=has_stages)
    seed = cfg["seed"]
    net = build_student(spec, head, seed, dtype)
    opt = AdamWState(weight_decay=cfg["optimizer.weight_decay"], decay_norm=cfg["optimizer.decay_norm"])
    if cfg["optimizer.backbone_lr_mult"] != 1.0:
        opt.lr_mult["backbone."] = cfg["optimizer.backbone_lr_mult"]
    state = TrainState(opt=opt, seed=seed)
    if cfg.method in ("byol", "dino"):
        state.target = make_target(net)
    if cfg.method == "dino":
        state.center = DinoCenter.zeros(head.proj_dim, momentum=cfg["dino.center_momentum"],
                                        teacher_temp=cfg["dino.teacher_temp"],
                                        student_temp=cfg["dino.student_temp"])
    if cfg.method == "ca_dssl" and cfg["loss.lambda_reg"] > 0:
        state.queue = NegativeQueue(cfg["queue.capacity"], head.proj_dim, dtype)
    curriculum = CurriculumPolicy(total_epochs=cfg["curriculum.total_epochs"], enabled=cfg.curriculum_enabled())
    weights = LossWeights(cfg["loss.lambda_ms"] if has_stages else 0.0, cfg["loss.lambda_reg"], cfg["loss.tau"])
    return Run(cfg, spec, net, state, train, test, teacher, curriculum, weights, dtype)


def make_target(net: StudentNet) -> StudentNet:
    """EMA target: backbone and projection only, initialised as a copy of ``net``."""
    head = HeadSpec(proj_dim=net.head.proj_dim, head_kind=net.head.head_kind, hidden=net.head.hidden,
                    align=False, stage_proj=False)
    target = nn.cast(StudentNet(net.spec, head), net.dtype)
    online = dict(net.named_parameters())
    for name, p in target.named_parameters():
        p.data = online[name].data.copy()
        p.requires_grad = False
    online_buf = dict(net.named_buffers())
    for name, b in target.named_buffers():
        b[...] = online_buf[name]
    return target


# --- one optimisation step ------------------------------------------------------

def make_views(run: Run, indices, epoch, nviews):
    """Augmented views for dataset rows ``indices``; returns (views, crop params)."""
    phase = phase_for_epoch(run.curriculum, epoch)
    policy = policy_for_phase(run.curriculum, phase)
    R = run.resolution
    views = [np.empty((len(indices), 3, R, R), run.dtype) for _ in range(nviews)]
    params = [[None] * len(indices) for _ in range(nviews)]
    for j, i in enumerate(indices):
        img = run.train.images[i]
        for v in range(nviews):
            out, p = augment_image(img, policy, stream(run.state.seed, epoch, int(i), v), (R, R),
                                   return_params=True)
            views[v][j] = out
            params[v][j] = p
    return views, params


def teacher_targets(run: Run, indices, crops):
    cls, stages = [], [[] for _ in range(len(run.teacher.stage_dims))]
    dims = run.spec.tap_resolutions()
    for i, crop in zip(indices, crops):
        image_id = int(run.train.image_ids[i])
        if image_id not in run.teacher:
            raise TrainingError(f"teacher store has no record for image_id {image_id}")
        cls.append(run.teacher.lookup(image_id).cls)
        for k, s in enumerate(lookup_stage_aligned(run.teacher, image_id, dims, crop)):
            stages[k].append(s)
    return np.stack(cls).astype(run.dtype), [np.stack(s).astype(run.dtype) for s in stages]


def _z(net, x, mode):
    return project_global(net, student_forward(net, x, mode)["h"])


def micro_losses(run: Run, indices, epoch, mode="train"):
    """Loss terms for one micro-batch. Returns (total, {name: float})."""
    net, state, w = run.net, run.state, run.weights
    m = run.cfg.method
    tensor = lambda a: T.Tensor(a, dtype=run.dtype)  # noqa: E731
    logs = {}
    if m in ("ca_dssl", "seed"):
        use_reg = m == "ca_dssl" and w.lambda_reg > 0
        (views, crops) = make_views(run, indices, epoch, 2 if use_reg else 1)
        t_cls, t_stages = teacher_targets(run, indices, crops[0])
        out = student_forward(net, tensor(views[0]), mode)
        z1 = project_global(net, out["h"])
        parts = {"cls": cls_loss(z1, t_cls, net.align)}
        if m == "ca_dssl" and w.lambda_ms > 0:
            parts["ms"] = ms_loss(project_stages(net, out["stages"], mode), t_stages)
        if use_reg:
            z2 = _z(net, tensor(views[1]), mode)
            if len(state.queue):
                parts["reg"] = infonce_loss(z1, z2, state.queue.negatives(), w.tau)
            state.queue.push(z2.detach())
        total = total_loss(parts, w)
        for key in ("cls", "ms", "reg"):
            if key in parts:
                logs[key] = float(parts[key].data)
        if use_reg and "reg" not in parts:
            logs["reg"] = 0.0  # queue warm-up: first micro-batch has no negatives yet
    elif m == "simclr":
        (v1, v2), _ = make_views(run, indices, epoch, 2)
        z = _z(net, tensor(np.concatenate([v1, v2])), mode)
        total = nt_xent_loss(*T.split(z, 2), w.tau)
    elif m == "byol":
        (v1, v2), _ = make_views(run, indices, epoch, 2)
        x = tensor(np.concatenate([v1, v2]))
        p = net.proj(student_forward(net, x, mode)["h"])
        if net.head.predictor_hidden:
            p = net.predictor(p)
        target = state.target.proj(student_forward(state.target, tensor(np.concatenate([v2, v1])), mode)["h"])
        total = byol_loss(p, target.detach())
    elif m == "dino":
        (v1, v2), _ = make_views(run, indices, epoch, 2)
        s = net.proj(student_forward(net, tensor(np.concatenate([v1, v2])), mode)["h"])
        t = state.target.proj(student_forward(state.target, tensor(np.concatenate([v2, v1])), mode)["h"])
        total, state.center = dino_self_distill_loss(s, t.detach(), state.center)
    elif m == "supervised":
        (v1,), _ = make_views(run, indices, epoch, 1)
        h = student_forward(net, tensor(v1), mode)["h"]
        total = cross_entropy_loss(net.classifier(h), run.train.labels[indices])
    else:  # pragma: no cover - config validation rejects it
        raise TrainingError(f"unknown method {m!r}")
    logs["total"] = float(total.data)
    return total, logs


def train_step(run: Run, indices, epoch, lr, bn_mode="train", apply=True):
    """One effective batch: accumulate micro-batch gradients, then one AdamW update.

    Micro-batch losses are weighted by their share of the batch, so the
    accumulated gradient equals the full-batch gradient whenever the loss
    is a per-sample mean and normalisation uses fixed statistics.
    """
    net, state = run.net, run.state
    net.zero_grad()
    micro = run.cfg["optimizer.micro_batch"]
    n = len(indices)
    sums = {}
    for start in range(0, n, micro):
        chunk = indices[start:start + micro]
        frac = len(chunk) / n
        with T.Tape() as tape:
            total, logs = micro_losses(run, chunk, epoch, bn_mode)
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss in method {run.cfg.method} at step {state.step + 1}")
            scaled = T.scale(total, frac)
        T.backward(scaled, tape)
        for k, v in logs.items():
            sums[k] = sums.get(k, 0.0) + frac * v
    if apply:
        params = [(name, p) for name, p in net.named_parameters() if p.grad is not None]
        adamw_step(params, state.opt, lr)
        state.step += 1
        if state.target is not None:
            online = dict(net.named_parameters())
            shadow = {name: p.data for name, p in state.target.named_parameters()}
            ema_update(shadow, {k: online[k].data for k in shadow}, run.cfg["ema.decay"])
    return sums


# --- epochs -------------------------------------------------------------------

def probe_subset(run: Run):
    n = min(run.cfg["collapse.subset"], len(run.train))
    imgs = run.train.images[:n]
    R = run.resolution
    if imgs.shape[-1] != R:
        imgs = np.stack([resize(im, (R, R)) for im in imgs])
    return imgs.astype(run.dtype)


def embedding_stats(run: Run, images):
    """Collapse statistics of unit-norm eval-mode embeddings."""
    net = run.net
    x = T.Tensor(images, dtype=run.dtype)
    h = student_forward(net, x, "eval")["h"]
    z = project_global(net, h) if hasattr(net, "proj") else T.l2_normalize(h, axis=1)
    return collapse_metrics(z.data, run.cfg["collapse.threshold"])


def _fmt(x):
    return "" if x is None else format(float(x), ".9g")


def run_epoch(run: Run, epoch):
    cfg, state = run.cfg, run.state
    E = cfg["curriculum.total_epochs"]
    batch = min(cfg["optimizer.batch"], len(run.train))
    batches = batch_iterator(len(run.train), batch, epoch_seed=state.seed * 100_003 + epoch)
    sums, count, lr = {}, 0, 0.0
    for k, idx in enumerate(batches):
        lr = lr_schedule((epoch - 1) + k / len(batches), cfg["optimizer.lr"], cfg["optimizer.warmup_epochs"],
                         E, cfg["optimizer.floor_lr"])
        logs = train_step(run, idx, epoch, lr)
        for key, v in logs.items():
            sums[key] = sums.get(key, 0.0) + v * len(idx)
        count += len(idx)
    state.epoch = epoch
    return {k: v / count for k, v in sums.items()}, lr


def metrics_row(epoch, losses, lr, stats, wall):
    return [str(epoch), _fmt(losses.get("total")), _fmt(losses.get("cls")), _fmt(losses.get("ms")),
            _fmt(losses.get("reg")), _fmt(lr), _fmt(stats["mean_per_dim_std"]), _fmt(stats["rank_proxy"]),
            "true" if stats["collapsed"] else "false", _fmt(wall)]


def run_pretrain(cfg: RunConfig, datasets=None, resume=None, progress=None, run=None):
    """Train per ``cfg``; writes metrics.csv and checkpoint.tdck under output_dir. Returns the Run."""
    run = run or build_run(cfg, datasets)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    metrics_path = os.path.join(out, "metrics.csv")
    rows = []
    if resume:
        load_training(resume, run)
        if os.path.exists(metrics_path):
            with open(metrics_path, newline="") as f:
                rows = [r for r in csv.reader(f)][1:run.state.epoch + 1]
    subset = probe_subset(run)
    t0 = time.perf_counter()
    for epoch in range(run.state.epoch + 1, cfg["curriculum.total_epochs"] + 1):
        losses, lr = run_epoch(run, epoch)
        stats = embedding_stats(run, subset)
        wall = time.perf_counter() - t0 if cfg["log.wall_seconds"] else 0.0
        rows.append(metrics_row(epoch, losses, lr, stats, wall))
        run.history.append({"epoch": epoch, "lr": lr, **losses, **stats})
        _write_metrics(metrics_path, rows)
        if progress:
            progress(epoch, losses, stats)
        interval = cfg["checkpoint.interval"]
        if interval and epoch % interval == 0:
            save_training(os.path.join(out, f"checkpoint_e{epoch:04d}.tdck"), run)
    _write_metrics(metrics_path, rows)
    save_training(os.path.join(out, "checkpoint.tdck"), run)
    return run


def _write_metrics(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


# --- checkpoints ----------------------------------------------------------------

def training_tensors(run: Run):
    tensors = {f"net.{k}": v for k, v in run.net.state_dict().items()}
    st = run.state
    for name, m in st.opt.m.items():
        tensors[f"opt.m.{name}"] = m
    for name, v in st.opt.v.items():
        tensors[f"opt.v.{name}"] = v
    if st.target is not None:
        tensors.update((f"target.{k}", v) for k, v in st.target.state_dict().items())
    if st.center is not None:
        tensors["dino.center"] = np.asarray(st.center.c, dtype=np.float64)
    if st.queue is not None:
        tensors["queue.rows"] = st.queue.rows
    return tensors


def training_metadata(run: Run):
    st = run.state
    meta = {
        "format": "tinyssl-training",
        "method": run.cfg.method,
        "config": run.cfg.to_text(),
        "epoch": st.epoch,
        "step": st.step,
        "seed": st.seed,
        "opt": {"t": st.opt.t, "beta1": st.opt.beta1, "beta2": st.opt.beta2, "eps": st.opt.eps,
                "weight_decay": st.opt.weight_decay, "decay_norm": st.opt.decay_norm,
                "lr_mult": st.opt.lr_mult},
    }
    if st.queue is not None:
        meta["queue"] = {"fill": st.queue.fill, "cursor": st.queue.cursor, "capacity": st.queue.capacity}
    if st.center is not None:
        c = st.center
        meta["dino"] = {"momentum": c.momentum, "teacher_temp": c.teacher_temp, "student_temp": c.student_temp}
    return meta


def save_training(path, run: Run):
    ckpt.save(path, training_tensors(run), training_metadata(run))


def load_training(path, run: Run):
    """Restore net and optimiser state from ``path`` into an already-built run."""
    tensors, meta = ckpt.load(path)
    if meta.get("method") != run.cfg.method:
        raise ckpt.CheckpointError(f"{path}: checkpoint is for method {meta.get('method')!r}, "
                                   f"run is {run.cfg.method!r}")
    restore_net(run.net, tensors, "net.", path)
    st = run.state
    o = meta["opt"]
    st.opt.t, st.opt.beta1, st.opt.beta2, st.opt.eps = o["t"], o["beta1"], o["beta2"], o["eps"]
    st.opt.weight_decay, st.opt.decay_norm, st.opt.lr_mult = o["weight_decay"], o["decay_norm"], dict(o["lr_mult"])
    st.opt.m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    st.opt.v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    st.epoch, st.step, st.seed = meta["epoch"], meta["step"], meta["seed"]
    if st.target is not None:
        restore_net(st.target, tensors, "target.", path)
    if st.center is not None:
        st.center = DinoCenter(tensors["dino.center"], **meta["dino"])
    if st.queue is not None:
        q = meta["queue"]
        if "queue.rows" not in tensors or tensors["queue.rows"].shape != st.queue.rows.shape:
            raise ckpt.CheckpointError(f"{path}: queue rows missing or mis-shaped")
        st.queue.rows = tensors["queue.rows"].astype(st.queue.rows.dtype)
        st.queue.fill, st.queue.cursor = q["fill"], q["cursor"]
    return run


def restore_net(net, tensors, prefix, source="checkpoint"):
    sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    try:
        net.load_state_dict(sub)
    except (KeyError, ValueError) as e:
        raise ckpt.CheckpointError(f"{source}: {e.args[0]}") from None


def load_student(path, dtype=None):
    """Rebuild the student stored in a training checkpoint."""
    tensors, meta = ckpt.load(path)
    cfg = parse_config(meta["config"])
    if dtype is None:
        dtype = np.float64 if cfg["dtype"] == "float64" else np.float32
    sub = {k[4:]: v for k, v in tensors.items() if k.startswith("net.")}
    spec = backbone_spec(cfg)
    align = sub.get("align.weight")
    stage0 = sub.get("stage_proj.0.conv.weight")
    classes = sub.get("classifier.bias")
    head = head_spec(cfg, align.shape[0] if align is not None else 384,
                     stage0.shape[0] if stage0 is not None else 384,
                     classes.shape[0] if classes is not None else 0, teacher_stages=stage0 is not None)
    net = build_student(spec, head, cfg["seed"], dtype)
    restore_net(net, tensors, "net.", path)
    return net, cfg, meta


# --- sweeps ---------------------------------------------------------------------

SWEEP_GRIDS = {
    "byol_lr_ema": {"method": "byol", "optimizer.lr": (5e-4, 1e-3, 3e-3), "ema.decay": (0.99, 0.996, 0.999)},
}


def sweep_cells(grid):
    spec = SWEEP_GRIDS[grid]
    cells = []
    for lr in spec["optimizer.lr"]:
        for decay in spec["ema.decay"]:
            cells.append((f"lr{lr:g}_ema{decay:g}", {"method": spec["method"], "optimizer.lr": lr, "ema.decay": decay}))
    return cells


def run_sweep(base_text, grid, output_dir, extra=(), progress=None):
    """Run every cell of ``grid``; each writes ``output_dir/<cell>.csv``. Returns the CSV paths."""
    paths = []
    for name, values in sweep_cells(grid):
        cell_dir = os.path.join(output_dir, name)
        overrides = [f"{k}={v}" for k, v in values.items()] + list(extra) + [f"output_dir={cell_dir}"]
        cfg = parse_config(base_text, overrides)
        run_pretrain(cfg, progress=progress)
        dest = os.path.join(output_dir, f"{name}.csv")
        with open(os.path.join(cell_dir, "metrics.csv"), "rb") as src, open(dest, "wb") as dst:
            dst.write(src.read())
        paths.append(dest)
    return paths
