"""Plain-text run configuration.

One ``key = value`` pair per line, ``#`` starts a comment. Keys are dotted:
``pipeline.<field>``, ``phantom.<field>``, ``ensemble.<field>`` and
``experiment.<field>`` address the matching dataclass; ``seed`` is the master
seed. Unknown keys are rejected.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .pipeline import EnsembleConfig, PipelineConfig
from .synthdata import PhantomParams


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    role: str = "pathology"

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("experiment splits need at least one case each")
        if self.role not in ("scar", "pathology"):
            raise ConfigError(f"experiment.role must be scar or pathology, got {self.role!r}")


SECTIONS = {
    "pipeline": PipelineConfig,
    "phantom": PhantomParams,
    "ensemble": EnsembleConfig,
    "experiment": ExperimentConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    phantom: PhantomParams = field(default_factory=PhantomParams)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def items(self):
        """Flat ``(dotted key, value)`` pairs in a stable order."""
        out = [("seed", self.seed)]
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                out.append((f"{sec}.{f.name}", getattr(obj, f.name)))
        return out

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return "; ".join(format_value(r) for r in v)
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text, like, key):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(text, default, key):
    text = text.strip()
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(parse_value(r, default[0], key) for r in text.split(";"))
        like = default[0] if default else 0
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(p, like, key) for p in parts)
    return _parse_scalar(text, default, key)


def parse_text(text, source="<config>"):
    """Parse config text into a :class:`RunConfig`."""
    base = RunConfig()
    updates = {sec: {} for sec in SECTIONS}
    seed = base.seed
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "seed":
            seed = _parse_scalar(value, 0, key)
            continue
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        obj = getattr(base, sec)
        names = {f.name for f in fields(obj)}
        if name not in names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        updates[sec][name] = parse_value(value, getattr(obj, name), key)
    try:
        built = {sec: replace(getattr(base, sec), **updates[sec]) for sec in SECTIONS}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    built["pipeline"] = replace(built["pipeline"], seed=seed) if "seed" not in updates["pipeline"] else built["pipeline"]
    return RunConfig(seed=seed, **built)


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    return parse_text(text, source=path)
