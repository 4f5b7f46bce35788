"""Experiment configuration files.

Configs are INI documents with the sections ``data``, ``teacher``, ``student``,
``train``, ``alw`` and ``output``.  Every key has a default (see ``DEFAULTS``);
unknown sections or keys are rejected with an error naming them.
"""

import configparser

from aicsd.data import AugmentConfig, generate_synthetic, load_directory
from aicsd.errors import ConfigurationError
from aicsd.models import ToyNetConfig
from aicsd.schedules import ALWConfig
from aicsd.trainer import TrainConfig

DEFAULTS = {
    "data": {
        "source": "synthetic",
        "train_dir": "",
        "val_dir": "",
        "num_classes": "4",
        "ignore_index": "255",
        "n_train": "200",
        "n_val": "50",
        "size": "64",
        "train_seed": "1",
        "val_seed": "2",
        "noise": "0.12",
        "color_jitter": "0.08",
        "hue_spread": "1.0",
        "class_shapes": "false",
        "augment": "false",
        "scale_min": "0.5",
        "scale_max": "2.0",
        "hflip_prob": "0.5",
        "crop_h": "64",
        "crop_w": "64",
    },
    "teacher": {"width": "32", "depth": "3", "seed": "0", "checkpoint": ""},
    "student": {"width": "16", "depth": "2", "seed": "0"},
    "train": {
        "method": "aicsd",
        "arch": "student",
        "epochs": "50",
        "batch_size": "8",
        "lr": "0.01",
        "momentum": "0.9",
        "weight_decay": "1e-4",
        "lambda": "9500",
        "temperature": "1.0",
        "kd_weight": "1.0",
        "lambda_in_aicsd": "true",
        "epsilon": "1e-12",
        "seed": "0",
        "eval_every": "1",
    },
    "alw": {"mode": "exponential_complement", "beta": "0.985", "clamp": "true"},
    "output": {"dir": "runs/default"},
}


class ExperimentConfig:
    """Parsed experiment config with typed accessors."""

    def __init__(self, parser):
        self._p = parser

    @classmethod
    def from_text(cls, text="", overrides=None):
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_dict(DEFAULTS)
        user = configparser.ConfigParser(interpolation=None)
        try:
            user.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config: {exc}") from exc
        for section in user.sections():
            for key, value in user[section].items():
                cls._set(parser, section, key, value)
        for item in overrides or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigurationError(f"override '{item}' must look like section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
            cls._set(parser, section.strip(), key.strip(), value.strip())
        cfg = cls(parser)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path=None, overrides=None):
        text = ""
        if path:
            try:
                with open(path) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, overrides)

    @staticmethod
    def _set(parser, section, key, value):
        if section not in DEFAULTS:
            raise ConfigurationError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigurationError(f"unknown config key '{section}.{key}'")
        parser[section][key] = value

    def set(self, section, key, value):
        self._set(self._p, section, key, str(value))

    def get(self, section, key):
        return self._p[section][key]

    def _typed(self, section, key, kind):
        try:
            if kind is bool:
                return self._p.getboolean(section, key)
            return kind(self._p[section][key])
        except ValueError as exc:
            raise ConfigurationError(f"bad value for '{section}.{key}': {self._p[section][key]!r}") from exc

    def int(self, section, key):
        return self._typed(section, key, int)

    def float(self, section, key):
        return self._typed(section, key, float)

    def bool(self, section, key):
        return self._typed(section, key, bool)

    def validate(self):
        # building every typed object surfaces bad values early
        self.net_config("teacher")
        self.net_config("student")
        self.train_config()
        if self.get("data", "source") not in ("synthetic", "directory"):
            raise ConfigurationError("data.source must be 'synthetic' or 'directory'")
        if self.get("train", "arch") not in ("student", "teacher"):
            raise ConfigurationError(f"train.arch must be 'student' or 'teacher', got '{self.get('train', 'arch')}'")
        for key in ("num_classes", "n_train", "n_val", "size", "train_seed", "val_seed", "ignore_index"):
            self.int("data", key)
        for key in ("noise", "color_jitter", "hue_spread"):
            self.float("data", key)
        self.bool("data", "class_shapes")

    def net_config(self, role):
        return ToyNetConfig(
            width=self.int(role, "width"),
            depth=self.int(role, "depth"),
            num_classes=self.int("data", "num_classes"),
            seed=self.int(role, "seed"),
        )

    def augment_config(self):
        if not self.bool("data", "augment"):
            return None
        return AugmentConfig(
            scale_min=self.float("data", "scale_min"),
            scale_max=self.float("data", "scale_max"),
            hflip_prob=self.float("data", "hflip_prob"),
            crop_h=self.int("data", "crop_h"),
            crop_w=self.int("data", "crop_w"),
            seed=self.int("train", "seed"),
            ignore_index=self.int("data", "ignore_index"),
        )

    def train_config(self):
        epochs = self.int("train", "epochs")
        return TrainConfig(
            method=self.get("train", "method"),
            epochs=epochs,
            batch_size=self.int("train", "batch_size"),
            lr=self.float("train", "lr"),
            momentum=self.float("train", "momentum"),
            weight_decay=self.float("train", "weight_decay"),
            lam=self.float("train", "lambda"),
            temperature=self.float("train", "temperature"),
            kd_weight=self.float("train", "kd_weight"),
            lambda_in_aicsd=self.bool("train", "lambda_in_aicsd"),
            epsilon=self.float("train", "epsilon"),
            ignore_index=self.int("data", "ignore_index"),
            alw=ALWConfig(
                mode=self.get("alw", "mode"),
                beta=self.float("alw", "beta"),
                total_epochs=epochs,
                clamp=self.bool("alw", "clamp"),
            ),
            augment=self.augment_config(),
            seed=self.int("train", "seed"),
            eval_every=self.int("train", "eval_every"),
            output_dir=self.get("output", "dir"),
        )

    def datasets(self):
        """Return ``(train_set, val_set)`` as described by the ``data`` section."""
        c = self.int("data", "num_classes")
        if self.get("data", "source") == "directory":
            ignore = self.int("data", "ignore_index")
            train_dir, val_dir = self.get("data", "train_dir"), self.get("data", "val_dir")
            if not train_dir:
                raise ConfigurationError("data.train_dir is required when data.source = directory")
            val = load_directory(val_dir, c, ignore) if val_dir else []
            return load_directory(train_dir, c, ignore), val
        size = self.int("data", "size")
        kwargs = synthetic_kwargs(self)
        train = generate_synthetic(self.int("data", "n_train"), c, size, size, self.int("data", "train_seed"), **kwargs)
        val = generate_synthetic(self.int("data", "n_val"), c, size, size, self.int("data", "val_seed"), **kwargs)
        return train, val

    def to_text(self):
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in self._p[section].items())
            lines.append("")
        return "\n".join(lines)


def synthetic_kwargs(cfg):
    return {
        "noise": cfg.float("data", "noise"),
        "color_jitter": cfg.float("data", "color_jitter"),
        "hue_spread": cfg.float("data", "hue_spread"),
        "class_shapes": cfg.bool("data", "class_shapes"),
    }
