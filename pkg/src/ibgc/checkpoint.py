"""Run configuration files and binary model checkpoints.

Configs are flat JSON objects whose keys are drawn from the
``ModelConfig`` and ``TrainConfig`` fields; the shared ``seed`` key
drives every randomness stream of a run.  Unknown keys and
out-of-range values fail fast.

Checkpoint layout, all little-endian: magic ``IBGC1``, u32 format
version, u32 length plus canonical-JSON config block (sorted keys,
compact separators), u32 parameter count, a manifest of (name, shape)
entries in block order, the raw f64 parameter payload in the same
order, and finally u32 count plus f64 training log-likelihood
reference scores.  Canonical JSON plus the fixed manifest order make
save -> load -> save byte-identical.

Only architectures reachable from a config can round-trip; a model
assembled from a hand-built block list is rejected at save time.
"""

import dataclasses
import json
import struct

import numpy as np

from .errors import DataError
from .model import GenerativeClassifier, ModelConfig
from .ood import ScoreSet
from .training import TrainConfig

MAGIC = b"IBGC1"
VERSION = 1

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_TUPLE_KEYS = ("image_shape", "milestones")


def split_config(mapping):
    """Build (ModelConfig, TrainConfig) from one flat mapping."""
    if not isinstance(mapping, dict):
        raise DataError("config must be a JSON object")
    model_kw = {}
    train_kw = {}
    for key, value in mapping.items():
        if key in _TUPLE_KEYS:
            try:
                value = tuple(value)
            except TypeError as e:
                raise DataError("config key %r needs a list" % key) from e
        known = False
        if key in _MODEL_FIELDS:
            model_kw[key] = value
            known = True
        if key in _TRAIN_FIELDS:
            train_kw[key] = value
            known = True
        if not known:
            raise DataError("unknown config key: %r" % key)
    model_cfg = ModelConfig(**model_kw)
    train_cfg = TrainConfig(**train_kw)
    try:
        model_cfg.validate()
        train_cfg.validate()
    except ValueError as e:
        raise DataError(str(e)) from e
    return model_cfg, train_cfg


def parse_config(path):
    """Read a JSON run config; returns (ModelConfig, TrainConfig)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataError("cannot read config: %s" % e) from e
    try:
        mapping = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError("config is not valid JSON: %s" % e) from e
    return split_config(mapping)


def effective_config(model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Every effective setting as one flat mapping; feeding it back
    through split_config reproduces the same configs."""
    if model_cfg.seed != train_cfg.seed:
        raise DataError("model and training seeds disagree; configs use one seed")
    out = {}
    out.update(dataclasses.asdict(train_cfg))
    out.update(dataclasses.asdict(model_cfg))
    return {k: list(v) if isinstance(v, tuple) else v
            for k, v in sorted(out.items())}


def _config_block(model_cfg, train_cfg):
    block = effective_config(model_cfg, train_cfg)
    return json.dumps(block, sort_keys=True, separators=(",", ":")).encode()


def _manifest(model):
    return [(name, tuple(p.data.shape)) for name, p in model.params()]


@dataclasses.dataclass
class Checkpoint:
    model: GenerativeClassifier
    refs: ScoreSet
    train_cfg: TrainConfig


def save_checkpoint(model, refs: ScoreSet, path, train_cfg=None):
    """Write model weights plus the reference score snapshot."""
    if train_cfg is None:
        train_cfg = TrainConfig(seed=model.config.seed)
    rebuilt = GenerativeClassifier(model.config)
    manifest = _manifest(model)
    if _manifest(rebuilt) != manifest:
        raise DataError("model architecture is not reconstructable from its config")
    block = _config_block(model.config, train_cfg)
    parts = [MAGIC, struct.pack("<II", VERSION, len(block)), block,
             struct.pack("<I", len(manifest))]
    for name, shape in manifest:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(np.array(shape, dtype="<u4").tobytes())
    for _, p in model.params():
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", refs.n))
    parts.append(refs.scores.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.raw):
            raise DataError("checkpoint truncated")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    """Rebuild the model from its config block and load the weights.

    The manifest must match the architecture derived from the config
    entry for entry (names and shapes), which also cross-checks the
    parameter count."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError("cannot read checkpoint: %s" % e) from e
    r = _Reader(raw)
    if r.take(5) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DataError("unsupported checkpoint version %d" % version)
    try:
        mapping = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError("checkpoint config block is corrupt: %s" % e) from e
    model_cfg, train_cfg = split_config(mapping)
    model = GenerativeClassifier(model_cfg)
    manifest = []
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(int(d) for d in np.frombuffer(r.take(4 * ndim), dtype="<u4"))
        manifest.append((name, shape))
    want = _manifest(model)
    if manifest != want:
        raise DataError("checkpoint manifest does not match the configured "
                        "architecture (%d vs %d parameters)"
                        % (len(manifest), len(want)))
    for (_, shape), (_, p) in zip(manifest, model.params()):
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        p.data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
    refs = ScoreSet(np.frombuffer(r.take(8 * r.u32()), dtype="<f8").copy())
    if r.off != len(raw):
        raise DataError("trailing bytes after checkpoint payload")
    return Checkpoint(model=model, refs=refs, train_cfg=train_cfg)
