"""Run configuration shared by every stage of the pipeline."""

import dataclasses

from .errors import ConfigError

_SCALES = (2, 4)
_DEGRADATIONS = ("spatial", "kspace")


@dataclasses.dataclass
class RunConfig:
    resolution: int = 32
    scale: int = 4
    iterations: int = 3          # unfolding rounds L
    levels: int = 3              # pyramid depth J
    channels: tuple = (64, 96, 128)
    base_channels: int = 64
    experts: int = 4
    top_k: int = 2
    eta_init: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_y: float = 0.01
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 500
    seed: int = 0
    degradation: str = "spatial"
    misalign: float = 0.0
    checkpoint_every: int = 100

    def validate(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two >= 8, got {r}")
        if r % 4:
            raise ConfigError(f"resolution must be divisible by 4, got {r}")
        if self.scale not in _SCALES:
            raise ConfigError(f"scale must be one of {_SCALES}, got {self.scale}")
        if self.degradation not in _DEGRADATIONS:
            raise ConfigError(
                f"degradation must be one of {_DEGRADATIONS}, got {self.degradation!r}")
        if self.top_k > self.experts:
            raise ConfigError(f"top_k {self.top_k} exceeds experts {self.experts}")
        if self.levels != len(self.channels):
            raise ConfigError(f"levels {self.levels} does not match channels {self.channels}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        return self

    def apply(self, overrides):
        """Return a copy with ``overrides`` (a name->value mapping) applied."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        values = dataclasses.asdict(self)
        for key, raw in overrides.items():
            if key not in fields or key == "channels":
                raise ConfigError(f"unknown config key {key!r}")
            current = values[key]
            try:
                if isinstance(current, int):
                    values[key] = int(raw)
                elif isinstance(current, float):
                    values[key] = float(raw)
                else:
                    values[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc
        values["channels"] = tuple(values["channels"])
        return RunConfig(**values).validate()

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "channels":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, base=None, overrides=None):
    cfg = base or RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = cfg.apply(parse_config_text(fh.read()))
    if overrides:
        cfg = cfg.apply(overrides)
    return cfg.validate()
