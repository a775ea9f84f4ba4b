"""Run configuration: one versioned JSON document per experiment."""
import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .continual import TrainConfig
from .errors import ConfigError
from .model import ModelConfig
from .synthdata import ARTIFACT_KINDS, TaskSpec

SCHEMA_VERSION = 1
BUILTIN = ("protocol1", "protocol2")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_flag = {"type": "boolean"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


TASK_SCHEMA = _obj({
    "task_id": {"type": "integer", "minimum": 0},
    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
    "seed": {"type": "integer", "minimum": 0},
    "real": _obj({"seed": {"type": "integer", "minimum": 0}, "blobs": {"type": "integer", "minimum": 0},
                  "smoothness": _pos}),
    "artifact": _obj({"kind": {"enum": list(ARTIFACT_KINDS)}, "strength": {"type": "number", "minimum": 0}},
                     required=("kind", "strength")),
    "counts": _obj({"train": _posint, "val": _posint, "test": _posint}, required=("train", "val", "test")),
    "fake_budget": {"type": ["integer", "null"], "minimum": 0},
}, required=("name", "artifact"))

SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "protocol": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "model": _obj({
        "feature_dim": _posint, "hidden_dim": _posint, "head_dim": _posint, "rank": _posint,
        "alpha": _pos, "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "gate_scale": _num,
    }),
    "optim": _obj({
        "lr": _pos, "beta1": _num, "beta2": _num, "adam_eps": _pos,
        "batch_size": {"type": "integer", "minimum": 2}, "eval_batch_size": _posint, "epochs": _posint,
    }),
    "loss": _obj({"lambda_ewc": {"type": "number", "minimum": 0}, "lambda_orth": {"type": "number", "minimum": 0},
                  "lambda_align": {"type": "number", "minimum": 0}}),
    "tau": _obj({"start": {"type": "number", "minimum": 0}, "end": {"type": "number", "minimum": 0}}),
    "fisher_mode": {"enum": ["running-mean", "latest-only"]},
    "cache_mode": {"enum": ["blend", "basis"]},
    "ablation": _obj({k: _flag for k in ("no_ewc", "no_freq_branches", "no_align_loss", "no_ogc", "naive")}),
    "tasks": {"type": "array", "minItems": 2, "items": TASK_SCHEMA},
    "order": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
    "data_dir": {"type": "string"},
    "output_dir": {"type": "string"},
}, required=("schema_version", "tasks"))

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "protocol": "custom",
    "seed": 0,
    "model": {"feature_dim": 64, "hidden_dim": 256, "head_dim": 128, "rank": 4, "alpha": 16.0,
              "dropout": 0.5, "gate_scale": 0.1},
    "optim": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "batch_size": 32,
              "eval_batch_size": 64, "epochs": 15},
    "loss": {"lambda_ewc": 22000.0, "lambda_orth": 0.1, "lambda_align": 0.5},
    "tau": {"start": 0.2, "end": 0.1},
    "fisher_mode": "running-mean",
    "cache_mode": "blend",
    "ablation": {"no_ewc": False, "no_freq_branches": False, "no_align_loss": False, "no_ogc": False,
                 "naive": False},
    "order": None,
    "data_dir": "data",
    "output_dir": "runs",
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err):
    parts = []
    for p in err.absolute_path:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        else:
            parts.append(("." if parts else "") + p)
    return "".join(parts) or "<root>"


def validate(doc):
    """Raise ConfigError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_path(err)}: {err.message}")


@dataclass
class RunConfig:
    doc: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("<root>: config must be a JSON object")
        if "schema_version" in doc and doc["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {doc['schema_version']!r}")
        validate(doc)
        full = _merge(DEFAULTS, doc)
        for i, t in enumerate(full["tasks"]):
            t.setdefault("task_id", i)
            t.setdefault("seed", 100 + i)
        full["tasks"] = [TaskSpec(**t).to_dict() for t in full["tasks"]]
        if full["order"] is not None:
            full["order"] = _check_order(full["order"], len(full["tasks"]))
        return cls(full)

    @classmethod
    def load(cls, source):
        """Load from a file path or the name of a packaged config."""
        if str(source) in BUILTIN and not Path(source).exists():
            text = resources.files("fd2cl").joinpath("configs", f"{source}.json").read_text()
            where = f"builtin:{source}"
        else:
            try:
                text = Path(source).read_text()
            except FileNotFoundError:
                raise FileNotFoundError(f"config file not found: {source}") from None
            where = str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{where}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(doc)

    # -- derived views -------------------------------------------------

    @property
    def seed(self):
        return self.doc["seed"]

    @property
    def protocol(self):
        return self.doc["protocol"]

    def with_overrides(self, seed=None, order=None, flags=()):
        doc = copy.deepcopy(self.doc)
        if seed is not None:
            doc["seed"] = int(seed)
        if order is not None:
            doc["order"] = _check_order(order, len(doc["tasks"]))
        for f in flags:
            doc["ablation"][f] = True
        return RunConfig(doc)

    def task_specs(self):
        """Task specs in training order."""
        specs = [TaskSpec(**copy.deepcopy(t)) for t in self.doc["tasks"]]
        order = self.doc["order"]
        return [specs[i] for i in order] if order is not None else specs

    def model_config(self):
        return ModelConfig(**self.doc["model"])

    def train_config(self):
        d, ab = self.doc, self.doc["ablation"]
        return TrainConfig(
            seed=d["seed"], **d["optim"], **d["loss"],
            tau_start=d["tau"]["start"], tau_end=d["tau"]["end"],
            fisher_mode=d["fisher_mode"], cache_mode=d["cache_mode"],
            use_ewc=not (ab["no_ewc"] or ab["naive"]),
            use_ogc=not (ab["no_ogc"] or ab["naive"]),
            use_align=not ab["no_align_loss"],
            use_freq=not ab["no_freq_branches"],
        )

    def method(self):
        """Human-readable variant name, e.g. ``w/o EWC & Freq``."""
        ab = self.doc["ablation"]
        if ab["naive"]:
            name = "naive"
            extra = [n for k, n in (("no_freq_branches", "Freq"), ("no_align_loss", "align")) if ab[k]]
            return name + ("" if not extra else " w/o " + " & ".join(extra))
        off = [n for k, n in (("no_ewc", "EWC"), ("no_ogc", "OGC"), ("no_freq_branches", "Freq"),
                              ("no_align_loss", "align")) if ab[k]]
        return "full" if not off else "w/o " + " & ".join(off)

    def run_name(self):
        slug = self.method().replace("w/o ", "wo-").replace(" & ", "-").replace(" ", "-")
        name = f"{self.protocol}_{slug}_seed{self.seed}"
        if self.doc["order"] is not None:
            name += "_order" + "".join(str(i) for i in self.doc["order"])
        return name

    def to_json(self):
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"


def _check_order(order, n):
    order = [int(i) for i in order]
    if sorted(order) != list(range(n)):
        raise ConfigError(f"order: {order} is not a permutation of 0..{n - 1}")
    return order


def parse_order(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"order: cannot parse {text!r}; expected comma-separated task indices") from None
