"""Named, versioned hyperparameter sets.

A set is registered under ``(name, version)``.  Registering the same pair
again with different values is an error, so a published set cannot drift.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .registry import registry


class HParamsError(ValueError):
    pass


@dataclass(frozen=True)
class HParams:
    set_name: str = "default"
    version: int = 1

    # model
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.0
    norm_type: str = "post"
    share_embeddings: bool = True
    max_length: int = 256
    layer_norm_epsilon: float = 1e-6
    init_scale: float = 1.0

    # data
    batch_size: int = 512  # tokens per batch, padding included
    min_length: int = 8  # first bucket boundary
    num_train_examples: int = 5000
    num_dev_examples: int = 200
    min_seq_len: int = 2
    max_seq_len: int = 10
    lexicon_size: int = 12
    num_merges: int = 8000

    # optimizer
    learning_rate: float = 1.0
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.997
    adam_epsilon: float = 1e-9

    # decoding
    beam_size: int = 4
    alpha: float = 0.6
    extra_length: int = 50

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise HParamsError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        for f in ("num_heads", "d_model", "d_ff", "max_length", "batch_size", "min_length"):
            if getattr(self, f) <= 0:
                raise HParamsError(f"{f} must be positive")
        if self.num_layers < 0:
            raise HParamsError("num_layers must be >= 0")
        if self.norm_type not in ("post", "pre"):
            raise HParamsError(f"norm_type must be 'post' or 'pre', got {self.norm_type!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise HParamsError("dropout must be in [0, 1)")

    @property
    def key(self) -> tuple[str, int]:
        return (self.set_name, self.version)

    def values(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "HParams":
        unknown = set(kw) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise HParamsError(f"unknown hparams: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **kw)

    def override_from_string(self, spec: str) -> "HParams":
        """Apply ``"a=1,b=0.5,c=pre"`` style overrides."""
        if not spec:
            return self
        types = {f.name: f.type for f in dataclasses.fields(self)}
        updates = {}
        for item in spec.split(","):
            if "=" not in item:
                raise HParamsError(f"bad override {item!r}, expected key=value")
            k, v = (s.strip() for s in item.split("=", 1))
            if k not in types:
                raise HParamsError(f"unknown hparam {k!r}")
            updates[k] = _coerce(types[k], v, k)
        return self.replace(**updates)


def _coerce(typ, raw: str, name: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise HParamsError(f"cannot parse {name}={raw!r} as {typ}") from None
    return raw


_SETS: dict[str, dict[int, HParams]] = {}
_hparams_kind = registry("hparams_sets", create=True)


def register_hparams(hp: HParams) -> HParams:
    versions = _SETS.setdefault(hp.set_name, {})
    existing = versions.get(hp.version)
    if existing is not None and existing != hp:
        raise HParamsError(f"hparams {hp.set_name} v{hp.version} already registered with other values")
    versions[hp.version] = hp
    if hp.set_name not in _hparams_kind:
        _hparams_kind.add(hp.set_name, versions)
    return hp


def get_hparams(name: str, version: int | None = None) -> HParams:
    versions = _hparams_kind.get(name)
    if version is None:
        version = max(versions)
    try:
        return versions[version]
    except KeyError:
        raise HParamsError(f"hparams {name} has no version {version}") from None


register_hparams(HParams(
    set_name="transformer_tiny", version=1,
    num_layers=2, d_model=64, num_heads=4, d_ff=256, batch_size=256,
))

register_hparams(HParams(
    set_name="transformer_base_toy", version=1,
    num_layers=4, d_model=128, num_heads=8, d_ff=512, dropout=0.1,
    batch_size=2048, num_train_examples=20000, num_dev_examples=500,
    min_seq_len=3, max_seq_len=20,
))
