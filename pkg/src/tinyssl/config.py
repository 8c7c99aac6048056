"""Flat ``key = value`` run configuration with dotted section names.

Lines are ``key = value``; ``#`` starts a comment. Every key has a typed
default; unknown keys, bad values and cross-field conflicts are reported
with the offending line number before any compute happens.
"""
from __future__ import annotations

from dataclasses import dataclass, field

METHODS = ("ca_dssl", "seed", "simclr", "byol", "dino", "supervised")
TEACHER_METHODS = ("ca_dssl", "seed")
EMA_METHODS = ("byol", "dino")


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    parse.__name__ = "|".join(options)
    return parse


def _auto_bool(text):
    return "auto" if text.strip().lower() == "auto" else _bool(text)


_auto_bool.__name__ = "auto|bool"

# key: (parser, default, help)
SCHEMA = {
    "method": (_choice(*METHODS), "ca_dssl", "pretraining objective"),
    "seed": (int, 42, "root seed; every random stream derives from it"),
    "output_dir": (str, "out", "directory receiving metrics.csv, checkpoint.tdck, results.csv, report.txt"),
    "dtype": (_choice("float32", "float64"), "float32", "parameter and activation precision"),
    "backbone.preset": (_choice("full", "micro"), "full", "full: MobileNetV2 repeats at 128 px; micro: halved repeats at 32 px"),
    "backbone.alpha": (float, 0.35, "width multiplier"),
    "backbone.resolution": (int, 0, "student input side in pixels; 0 takes the preset's value"),
    "head.kind": (_choice("auto", "capacity_proportional_linear", "seed_mlp", "none"), "auto",
                  "projection head; auto = linear for ca_dssl, none for supervised, 2048-hidden MLP otherwise"),
    "head.hidden": (int, 2048, "hidden width of the MLP head"),
    "head.predictor": (_bool, True, "byol only: use the online predictor (false gives the degenerate control)"),
    "head.predictor_hidden": (int, 512, "byol only: predictor hidden width"),
    "loss.lambda_ms": (float, 0.5, "weight of the multi-scale feature term"),
    "loss.lambda_reg": (float, 0.0, "weight of the queue InfoNCE term; > 0 enables the queue"),
    "loss.tau": (float, 0.1, "InfoNCE / NT-Xent temperature"),
    "curriculum.enabled": (_auto_bool, "auto", "three-phase augmentation curriculum; auto = on for ca_dssl only"),
    "curriculum.total_epochs": (int, 100, "pretraining epochs"),
    "optimizer.lr": (float, 1e-3, "AdamW base learning rate"),
    "optimizer.weight_decay": (float, 5e-4, "decoupled weight decay"),
    "optimizer.decay_norm": (_bool, False, "also decay batch-norm scale and shift"),
    "optimizer.warmup_epochs": (float, 10.0, "linear warmup length in epochs"),
    "optimizer.floor_lr": (float, 0.0, "cosine schedule floor"),
    "optimizer.batch": (int, 256, "effective batch size"),
    "optimizer.micro_batch": (int, 64, "micro-batch size; gradients accumulate to the effective batch"),
    "optimizer.backbone_lr_mult": (float, 1.0, "learning-rate multiplier on backbone parameters"),
    "teacher.store_path": (str, "", "teacher feature store; empty synthesises one from teacher.synth_seed"),
    "teacher.synth_seed": (int, 0, "seed of the synthetic frozen teacher"),
    "data.cifar_path": (str, "", "CIFAR binary training file; empty uses the synthetic shapes set"),
    "data.cifar_test_path": (str, "", "CIFAR binary test file for probing"),
    "data.variant": (_choice("cifar10", "cifar100"), "cifar100", "CIFAR label layout"),
    "data.synth_classes": (int, 8, "synthetic dataset: number of classes"),
    "data.synth_per_class": (int, 256, "synthetic dataset: training images per class"),
    "data.synth_test_per_class": (int, 64, "synthetic dataset: held-out probe images per class"),
    "data.synth_seed": (int, 0, "synthetic dataset seed (the held-out set uses seed + 1)"),
    "queue.capacity": (int, 4096, "negative queue length"),
    "ema.decay": (float, 0.996, "byol/dino: target-network EMA decay"),
    "dino.center_momentum": (float, 0.9, "dino: centering momentum"),
    "dino.teacher_temp": (float, 0.04, "dino: teacher temperature"),
    "dino.student_temp": (float, 0.1, "dino: student temperature"),
    "probe.lr": (float, 0.3, "linear probe SGD learning rate (cosine)"),
    "probe.momentum": (float, 0.9, "linear probe SGD momentum"),
    "probe.epochs": (int, 100, "linear probe epochs"),
    "probe.batch": (int, 256, "linear probe batch size"),
    "probe.weight_decay": (float, 0.0, "linear probe L2 penalty"),
    "probe.space": (_choice("h", "z"), "h", "probe on pooled backbone features (h) or projections (z)"),
    "checkpoint.interval": (int, 0, "also checkpoint every N epochs (0: only at the end)"),
    "collapse.threshold": (float, 1e-4, "mean per-dim std below which a run is flagged collapsed"),
    "collapse.subset": (int, 256, "images used for per-epoch collapse statistics"),
    "log.wall_seconds": (_bool, False, "log elapsed seconds per epoch; off by default so metrics.csv is byte-reproducible"),
}


@dataclass
class RunConfig:
    values: dict
    explicit: dict = field(default_factory=dict)  # key -> line number

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def method(self):
        return self.values["method"]

    def head_kind(self):
        kind = self.values["head.kind"]
        if kind != "auto":
            return kind
        return {"ca_dssl": "capacity_proportional_linear", "supervised": "none"}.get(self.method, "seed_mlp")

    def curriculum_enabled(self):
        on = self.values["curriculum.enabled"]
        return self.method == "ca_dssl" if on == "auto" else on

    def to_text(self):
        """Explicit and non-default keys only, so the text re-parses to the same config."""
        keys = [k for k in SCHEMA if k in self.explicit or self.values[k] != SCHEMA[k][1]]
        return "".join(f"{k} = {self.values[k]}\n" for k in keys)


def defaults():
    return RunConfig({k: v[1] for k, v in SCHEMA.items()})


def _line_of(cfg, key):
    line = cfg.explicit.get(key)
    return f"line {line}: " if line else ""


def parse_config(text, overrides=()):
    """Parse config text; ``overrides`` are extra ``key=value`` strings applied after it."""
    cfg = defaults()
    lines = [(i, raw) for i, raw in enumerate(text.splitlines(), 1)]
    lines += [(None, o) for o in overrides]
    for lineno, raw in lines:
        where = f"line {lineno}: " if lineno else f"override {raw!r}: "
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{where}expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}unknown key {key!r}")
        if lineno is not None and key in cfg.explicit:
            raise ConfigError(f"{where}{key!r} already set on line {cfg.explicit[key]}")
        parser = SCHEMA[key][0]
        try:
            cfg.values[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"{where}bad value for {key!r}: {e}") from None
        cfg.explicit[key] = lineno or 0
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    v, m = cfg.values, cfg.method

    def fail(key, msg):
        raise ConfigError(f"{_line_of(cfg, key)}{msg}")

    for key in cfg.explicit:
        section = key.split(".", 1)[0]
        if section == "teacher" and m not in TEACHER_METHODS:
            fail(key, f"{key} conflicts with method={m}, which uses no teacher")
        if section == "ema" and m not in EMA_METHODS:
            fail(key, f"{key} conflicts with method={m}, which has no EMA target")
        if section == "dino" and m != "dino":
            fail(key, f"{key} only applies to method=dino")
        if key.startswith("head.predictor") and m != "byol":
            fail(key, f"{key} only applies to method=byol")
    if v["loss.lambda_reg"] > 0 and m != "ca_dssl":
        fail("loss.lambda_reg", f"loss.lambda_reg only applies to method=ca_dssl, not {m}")
    if v["loss.lambda_ms"] > 0 and m == "seed" and "loss.lambda_ms" in cfg.explicit:
        fail("loss.lambda_ms", "method=seed distils the CLS embedding only; loss.lambda_ms must stay unset")
    if v["data.cifar_path"] and any(k.startswith("data.synth_") for k in cfg.explicit):
        fail("data.cifar_path", "data.cifar_path conflicts with data.synth_* keys")
    if v["teacher.store_path"] and "teacher.synth_seed" in cfg.explicit:
        fail("teacher.store_path", "teacher.store_path conflicts with teacher.synth_seed")
    if m == "supervised" and v["data.cifar_path"] == "" and v["data.synth_classes"] < 2:
        fail("data.synth_classes", "supervised training needs at least two classes")
    for key in ("optimizer.lr", "optimizer.weight_decay", "loss.lambda_ms", "loss.lambda_reg",
                "optimizer.floor_lr", "probe.weight_decay"):
        if v[key] < 0:
            fail(key, f"{key} must be >= 0")
    for key in ("loss.tau", "probe.lr", "backbone.alpha", "dino.teacher_temp", "dino.student_temp"):
        if v[key] <= 0:
            fail(key, f"{key} must be > 0")
    for key in ("curriculum.total_epochs", "optimizer.batch", "optimizer.micro_batch", "queue.capacity",
                "probe.epochs", "probe.batch", "data.synth_classes", "data.synth_per_class", "collapse.subset"):
        if v[key] < 1:
            fail(key, f"{key} must be >= 1")
    if v["optimizer.batch"] % v["optimizer.micro_batch"]:
        fail("optimizer.micro_batch", f"optimizer.batch ({v['optimizer.batch']}) must be a multiple of "
                                      f"optimizer.micro_batch ({v['optimizer.micro_batch']})")
    if not 0 <= v["optimizer.warmup_epochs"] < v["curriculum.total_epochs"]:
        fail("optimizer.warmup_epochs", "optimizer.warmup_epochs must be in [0, curriculum.total_epochs)")
    if not 0 <= v["ema.decay"] < 1:
        fail("ema.decay", "ema.decay must be in [0, 1)")
    if not 0 <= v["dino.center_momentum"] < 1:
        fail("dino.center_momentum", "dino.center_momentum must be in [0, 1)")
    if cfg.head_kind() == "none" and m not in ("supervised",):
        fail("head.kind", f"method={m} needs a projection head")
    if v["backbone.resolution"] and v["backbone.resolution"] % 32:
        fail("backbone.resolution", "backbone.resolution must be a multiple of 32")
    return cfg


def help_text():
    width = max(len(k) for k in SCHEMA)
    rows = []
    for key, (parser, default, doc) in SCHEMA.items():
        kind = getattr(parser, "__name__", "value")
        rows.append(f"  {key:<{width}}  {kind:<8} default {default!s:<10} {doc}")
    return "config keys (key = value):\n" + "\n".join(rows)
