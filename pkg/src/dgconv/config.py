"""Strict INI-style run configuration.

Example::

    [model]
    widths = 16, 32, 64
    blocks = 2
    # one mode for all blocks, or a comma-separated mode per block
    mode = dgconv

    [train]
    epochs = 20
    batch_size = 64
    lr = 0.05
    seed = 0

    [budget]
    b = 2

    [data]
    kind = cifar10
    path = data/cifar-10-batches-bin
    subset = 10000
    test_subset = 2000

Unknown sections or keys, missing required keys and unparsable values raise
:class:`~dgconv.errors.ConfigError` carrying the offending line and column.
"""

import configparser
import re
from dataclasses import dataclass, field

from .data import DatasetHandle
from .errors import ConfigError, ConfigurationError
from .model import ModelConfig
from .trainer import TrainConfig

REQUIRED = object()


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _blocks(text):
    values = _ints(text)
    return values[0] if len(values) == 1 else values


def _modes(text):
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ValueError("empty mode")
    return values[0] if len(values) == 1 else values


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_str(text):
    return None if text.strip().lower() in ("", "none") else text.strip()


SCHEMA = {
    "model": {
        "widths": (_ints, REQUIRED),
        "blocks": (_blocks, 2),
        "expansion": (int, 2),
        "stem_width": (int, 16),
        "mode": (_modes, "dgconv"),
        "num_classes": (int, 10),
        "image_size": (int, 32),
    },
    "train": {
        "epochs": (int, REQUIRED),
        "batch_size": (int, 64),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "seed": (int, 0),
        "augment": (_bool, True),
        "gate_task_grad": (_bool, True),
    },
    "budget": {
        "b": (float, REQUIRED),
        "alpha": (float, -0.02),
    },
    "data": {
        "kind": (str.strip, REQUIRED),
        "path": (_opt_str, None),
        "subset": (_opt_int, None),
        "test_subset": (_opt_int, None),
        "synthetic_samples": (int, 2048),
    },
    "output": {
        "dir": (_opt_str, None),
    },
}
REQUIRED_SECTIONS = ("model", "train", "budget", "data")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    budget: dict
    data: dict
    output_dir: str = None
    raw: dict = field(default_factory=dict, repr=False)

    def dataset_handle(self, split):
        d = self.data
        return DatasetHandle(
            kind=d["kind"],
            path=d["path"],
            split=split,
            subset=d["subset"] if split == "train" else d["test_subset"],
            num_classes=self.model.num_classes,
            size=self.model.input_shape[1],
            seed=self.train.seed,
            augment=self.train.augment,
            synthetic_samples=d["synthetic_samples"],
        )


def _index_lines(text):
    """Map section names and ``(section, key)`` pairs to ``(line, column)``."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[section] = (lineno, line.index("[") + 1)
            continue
        m = re.match(r"(\s*)([^=:\s][^=:]*?)\s*[=:]\s*", line)
        if m and section is not None:
            where[(section, m.group(2).lower())] = (lineno, len(m.group(1)) + 1, m.end() + 1)
    return where


def parse_config_text(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("expected a [section] header", e.lineno, 1) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(e.message.split(":")[-1].strip() or str(e), e.lineno, 1) from None
    except configparser.ParsingError as e:
        lineno, _ = e.errors[0]
        raise ConfigError("cannot parse line", lineno, 1) from None
    where = _index_lines(text)
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            line, col = where.get(section, (None, None))
            raise ConfigError(f"unknown section [{section}]", line, col)
    for section, keys in SCHEMA.items():
        present = parser.has_section(section)
        if not present and section in REQUIRED_SECTIONS:
            raise ConfigError(f"missing required section [{section}]", None)
        values[section] = {}
        if present:
            for key in parser.options(section):
                if key not in keys:
                    line, col, _ = where.get((section, key), (None, None, None))
                    raise ConfigError(f"unknown key {key!r} in [{section}]", line, col)
        for key, (conv, default) in keys.items():
            if present and parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[section][key] = conv(raw)
                except ValueError as e:
                    line, _, col = where.get((section, key), (None, None, None))
                    raise ConfigError(f"bad value for {section}.{key}: {e}", line, col) from None
            elif default is REQUIRED:
                line, col = where.get(section, (None, None))
                raise ConfigError(f"missing required key {key!r} in [{section}]", line, col)
            else:
                values[section][key] = default
    return build_run_config(values, where)


def build_run_config(values, where=None):
    where = where or {}
    m, t = values["model"], values["train"]
    try:
        model = ModelConfig(
            widths=m["widths"],
            blocks=m["blocks"],
            expansion=m["expansion"],
            stem_width=m["stem_width"],
            input_shape=(3, m["image_size"], m["image_size"]),
            num_classes=m["num_classes"],
            mode=m["mode"],
        )
    except ConfigurationError as e:
        line, col = where.get("model", (None, None))
        raise ConfigError(f"invalid [model]: {e}", line, col) from None
    if values["data"]["kind"] not in ("synthetic", "cifar10", "raw"):
        line, _, col = where.get(("data", "kind"), (None, None, None))
        raise ConfigError(f"unknown data kind {values['data']['kind']!r}", line, col)
    if values["budget"]["b"] <= 0 or values["budget"]["alpha"] >= 0:
        line, col = where.get("budget", (None, None))
        raise ConfigError("budget needs b > 0 and alpha < 0", line, col)
    train = TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        base_lr=t["lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        seed=t["seed"],
        augment=t["augment"],
        gate_task_grad=t["gate_task_grad"],
    )
    return RunConfig(model, train, values["budget"], values["data"], values["output"]["dir"], values)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), source=str(path))
