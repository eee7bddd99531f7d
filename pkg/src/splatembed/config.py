"""Run configuration shared by the command line and INI config files.

Every option is declared once in ``OPTIONS``. The parser, the config-file
reader and the serializer are all built from that table, so any flag can
also be set under ``[common]`` or ``[<subcommand>]`` in a config file.
Precedence: built-in default < config file < command line.
"""

from __future__ import annotations

import argparse
import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ENCODE, PARTITION, QUERY, EVAL, BENCH, FIXTURE = "encode", "partition", "query", "eval", "bench", "fixture"
SUBCOMMANDS = (ENCODE, PARTITION, QUERY, EVAL, BENCH, FIXTURE)


@dataclass(frozen=True)
class Option:
    name: str
    kind: str  # path, int, float, bool, str, strlist, intlist, floatlist
    default: object
    commands: tuple
    help: str
    low: float | None = None
    high: float | None = None
    choices: tuple | None = None
    must_exist: bool = False


OPTIONS = [
    Option("scene", "path", None, (ENCODE, PARTITION, QUERY, EVAL), "Gaussian scene PLY", must_exist=True),
    Option("manifest", "path", None, (ENCODE, EVAL), "dataset manifest", must_exist=True),
    Option("table", "path", None, (PARTITION, QUERY, EVAL), "embedding table file", must_exist=True),
    Option("out", "path", None, (ENCODE,), "output embedding table file"),
    Option("out_dir", "path", None, (PARTITION, QUERY, FIXTURE), "output directory"),
    Option("report_dir", "path", None, (ENCODE, EVAL, BENCH), "directory for TSV reports and figures"),
    Option("workers", "int", 1, (ENCODE,), "encode worker threads", low=1, high=1024),
    Option("chunk_rows", "int", None, (ENCODE, BENCH), "rows per aggregation chunk (default: all)", low=1),
    Option("raw_falloff", "bool", False, (ENCODE,), "use the raw Gaussian falloff as the weight instead of alpha*T"),
    Option("contiguous", "bool", False, (ENCODE,), "assign contiguous image blocks to workers instead of round-robin"),
    Option("spill_dir", "path", None, (ENCODE,), "directory for spilled masked weights"),
    Option("max_resident_entries", "int", None, (ENCODE,), "spill once a worker holds this many masked weights", low=0),
    Option("cell_size", "float", None, (PARTITION, QUERY), "partition cell edge length", low=0.0),
    Option("partitions", "path", None, (QUERY,), "partition index (partitions.json)", must_exist=True),
    Option("text", "strlist", None, (QUERY,), "query text (repeatable; comma separated in config files)"),
    Option("labels", "path", None, (QUERY, EVAL), "label file, one label per line", must_exist=True),
    Option("threshold", "float", 0.28, (QUERY, EVAL), "cosine similarity threshold", low=-1.0, high=1.0),
    Option("top_k", "int", None, (QUERY, EVAL), "return the k best matches instead of thresholding", low=1),
    Option("center", "floatlist", None, (QUERY,), "x,y,z of the region of interest"),
    Option("radius", "float", None, (QUERY,), "radius of the region of interest", low=0.0),
    Option("lookup", "path", None, (QUERY, EVAL), "label<TAB>vector lookup table for text embeddings", must_exist=True),
    Option("strict", "bool", True, (QUERY, EVAL), "fail on labels missing from the lookup table"),
    Option("dim", "int", 512, (QUERY, EVAL, BENCH, FIXTURE), "embedding dimension", low=1),
    Option("seed", "int", 0, (BENCH, FIXTURE), "random seed", low=0),
    Option("protocol", "str", "binary", (EVAL,), "evaluation protocol", choices=("binary", "multiclass")),
    Option("gt_masks", "path", None, (EVAL,), "directory of per-view ground-truth RLE masks, one per label", must_exist=True),
    Option("alpha_threshold", "float", 0.5, (EVAL,), "alpha above which a pixel counts as predicted", low=0.0, high=1.0),
    Option("accuracy", "str", "localization", (EVAL,), "binary accuracy definition", choices=("localization", "pixel")),
    Option("points", "path", None, (EVAL,), "labeled point cloud (x y z class)", must_exist=True),
    Option("segments", "path", None, (EVAL,), "segment id per point for prediction filtering", must_exist=True),
    Option("class_subset", "intlist", None, (EVAL,), "class ids to score (default: all)"),
    Option("gaussians", "int", 100_000, (BENCH,), "Gaussians in the synthetic workload", low=1),
    Option("images", "int", 200, (BENCH,), "images in the synthetic workload", low=1),
    Option("resolution", "int", 128, (BENCH, FIXTURE), "image width and height", low=8, high=8192),
    Option("worker_counts", "intlist", [1, 2, 4, 8], (BENCH,), "worker counts to time"),
    Option("store_sizes", "intlist", [100_000, 1_000_000], (BENCH,), "vector store sizes for query latency"),
    Option("response", "int", 10_000, (BENCH,), "result count for latency queries", low=1),
    Option("objects", "int", 5, (FIXTURE,), "objects in the synthetic fixture", low=1),
    Option("gaussians_per_object", "int", 200, (FIXTURE,), "Gaussians per object", low=1),
    Option("views", "int", 8, (FIXTURE,), "camera views", low=1),
]
OPTION_BY_NAME = {o.name: o for o in OPTIONS}


def _convert(opt: Option, raw):
    """Parse a config-file or command-line string into the option's type."""
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if opt.kind == "path":
            return Path(s)
        if opt.kind == "int":
            return int(s)
        if opt.kind == "float":
            return float(s)
        if opt.kind == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if opt.kind == "strlist":
            return [t.strip() for t in s.split(",") if t.strip()]
        if opt.kind == "intlist":
            return [int(t) for t in s.split(",") if t.strip()]
        if opt.kind == "floatlist":
            return [float(t) for t in s.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"option '{opt.name}': {exc}") from None
    return s


def _format(opt: Option, value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def add_options(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", type=Path, help="INI config file; command-line flags win")
    for opt in OPTIONS:
        if command not in opt.commands:
            continue
        flag = "--" + opt.name.replace("_", "-")
        helptext = opt.help + ("" if opt.default is None else f" (default: {_format(opt, opt.default)})")
        if opt.kind == "bool":
            parser.add_argument(flag, dest=opt.name, action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS, help=helptext)
        elif opt.kind == "strlist":
            parser.add_argument(flag, dest=opt.name, action="append", default=argparse.SUPPRESS, help=helptext)
        else:
            parser.add_argument(flag, dest=opt.name, default=argparse.SUPPRESS, help=helptext,
                                choices=opt.choices, metavar=opt.name.upper())


@dataclass
class RunConfig:
    """Resolved settings for one subcommand run."""

    subcommand: str
    values: dict = field(default_factory=dict)
    source: Path | None = None

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        if name in OPTION_BY_NAME:
            return None
        raise AttributeError(name)

    @classmethod
    def build(cls, command: str, cli: dict, config_path=None) -> "RunConfig":
        if command not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand '{command}'")
        values = {o.name: o.default for o in OPTIONS if command in o.commands}
        base = None
        if config_path is not None:
            config_path = Path(config_path)
            if not config_path.is_file():
                raise ConfigError(f"config file not found: {config_path}")
            base = config_path.resolve().parent
            cp = configparser.ConfigParser(interpolation=None)
            try:
                cp.read(config_path, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigError(f"{config_path}: {exc}") from None
            for section in ("common", command):
                if not cp.has_section(section):
                    continue
                for key, raw in cp.items(section):
                    name = key.replace("-", "_")
                    opt = OPTION_BY_NAME.get(name)
                    if opt is None:
                        raise ConfigError(f"{config_path}: unknown option '{key}' in [{section}]")
                    if command not in opt.commands:
                        if section == "common":
                            continue
                        raise ConfigError(f"{config_path}: option '{key}' does not apply to {command}")
                    value = _convert(opt, raw)
                    if opt.kind == "path" and not value.is_absolute():
                        value = base / value
                    values[name] = value
        for name, raw in cli.items():
            opt = OPTION_BY_NAME[name]
            if opt.kind == "strlist" and isinstance(raw, list):
                value = [t for item in raw for t in _convert(opt, item)]
            else:
                value = _convert(opt, raw)
            values[name] = value
        cfg = cls(command, values, config_path)
        cfg.resolve()
        cfg.validate()
        return cfg

    def resolve(self) -> None:
        for name, value in self.values.items():
            if OPTION_BY_NAME[name].kind == "path" and value is not None:
                self.values[name] = Path(value).expanduser().resolve()

    def validate(self) -> None:
        for name, value in self.values.items():
            opt = OPTION_BY_NAME[name]
            if value is None:
                continue
            items = value if isinstance(value, list) else [value]
            for v in items:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    continue
                if opt.low is not None and v < opt.low:
                    raise ConfigError(f"{name} = {v} is below the allowed minimum {opt.low}")
                if opt.high is not None and v > opt.high:
                    raise ConfigError(f"{name} = {v} is above the allowed maximum {opt.high}")
            if opt.choices and value not in opt.choices:
                raise ConfigError(f"{name} must be one of {', '.join(opt.choices)}")
            if opt.must_exist and not Path(value).exists():
                raise ConfigError(f"{name}: {value} does not exist")
        if self.values.get("cell_size") is not None and self.values["cell_size"] <= 0:
            raise ConfigError("cell_size must be > 0")
        center = self.values.get("center")
        if center is not None and len(center) != 3:
            raise ConfigError("center needs three coordinates x,y,z")
        if (center is None) != (self.values.get("radius") is None) and self.subcommand == QUERY:
            raise ConfigError("center and radius must be given together")
        for name in ("worker_counts", "store_sizes"):
            if name in self.values and self.values[name] is not None and any(v < 1 for v in self.values[name]):
                raise ConfigError(f"{name} entries must be >= 1")

    def require(self, *names) -> None:
        missing = [n for n in names if self.values.get(n) is None]
        if missing:
            flags = ", ".join("--" + n.replace("_", "-") for n in missing)
            raise ConfigError(f"{self.subcommand} needs {flags}")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp[self.subcommand] = {k: _format(OPTION_BY_NAME[k], v) for k, v in self.values.items() if v is not None}
        lines = [f"# {self.subcommand} run configuration; replay with --config this_file"]
        buf = io.StringIO()
        cp.write(buf)
        return "\n".join(lines) + "\n" + buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path
