"""Run configuration: ``key = value`` files with ``[section]`` headers.

Precedence, lowest first: built-in defaults, the config file, command-line
flags. Unknown sections or keys are rejected.
"""

import configparser
import dataclasses
import os

from .errors import ConfigError, IntegrityError
from .finetune import FinetuneConfig, baseline_config
from .mae import PretrainConfig

RUN_DEFAULTS = {
    "seed": 0,
    "backbone": "swinv2-desk",
    "baseline_backbone": "resnet-desk",
    "data": "data",
    "domains": "ds1-desk,ds2-desk,ds3-desk",
    "mode": "full",
    "synth_preset": "desk3",
}


def _phase(cfg):
    d = dataclasses.asdict(cfg)
    del d["seed"]  # one seed for the whole run, in [run]
    return d


def _section_defaults():
    return {
        "run": dict(RUN_DEFAULTS),
        "pretrain": _phase(PretrainConfig()),
        "finetune": _phase(FinetuneConfig()),
        "baseline": _phase(baseline_config()),
    }


def _coerce(value, like, where):
    if isinstance(value, str) and not isinstance(like, str):
        v = value.strip()
        try:
            if isinstance(like, bool):
                if v.lower() in ("1", "true", "yes", "on"):
                    return True
                if v.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(v)
            if isinstance(like, int):
                return int(v)
            if isinstance(like, float):
                return float(v)
            if like is None:
                return None if v.lower() in ("", "none") else int(v)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {value!r}") from None
    return value


@dataclasses.dataclass
class RunConfig:
    sections: dict

    @classmethod
    def default(cls):
        return cls(_section_defaults())

    def get(self, section, key):
        return self.sections[section][key]

    def set(self, section, key, value):
        if section not in self.sections:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.sections[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self.sections[section][key] = _coerce(value, self.sections[section][key], f"[{section}] {key}")

    def update_from_file(self, path):
        parser = configparser.ConfigParser(delimiters=("=",), interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise IntegrityError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(section, key, value)
        return self

    def pretrain_config(self):
        d = dict(self.sections["pretrain"])
        d["seed"] = self.get("run", "seed")
        return PretrainConfig(**d)

    def finetune_config(self, section="finetune"):
        d = dict(self.sections[section])
        d["seed"] = self.get("run", "seed")
        return FinetuneConfig(**d)

    def domains(self):
        return [d.strip() for d in self.get("run", "domains").split(",") if d.strip()]

    def to_dict(self):
        return {s: dict(v) for s, v in self.sections.items()}

    def to_text(self):
        lines = []
        for s, values in self.sections.items():
            lines.append(f"[{s}]")
            lines.extend(f"{k} = {v}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)


def default_run_root():
    return os.environ.get("OCTSN_RUN_DIR", "runs")
