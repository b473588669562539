"""Run configuration: every pipeline hyper-parameter behind a named key.

The file format is flat `key = value` text, diff-friendly and typed by the
dataclass field: ints, floats, strings, and comma-separated integer tuples.
`dump` emits fields in declaration order with repr-formatted floats, which
is the canonical byte form the config tests pin.
"""
from dataclasses import dataclass, fields, replace

__all__ = ["RunConfig", "preset", "parse_config", "dump_config", "load_config_file"]


@dataclass
class RunConfig:
    # voxel grid / ingestion
    voxel_size: float = 0.02
    highres_voxel_size: float = 0.04
    in_channels: int = 3
    n_class: int = 18
    # backbone
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    highres_channels: int = 64
    out_channels: int = 64
    norm: str = "batch"
    # stage I: votes, semantics, grouping, proposals
    vote_hidden: int = 64
    alpha: float = 0.15
    tau_start: float = 0.15
    tau_min: float = 0.05
    tau_step: float = 0.02
    tau_epoch_period: int = 10
    k_aggregation: int = 9
    group_channels: int = 64
    score_min: float = 0.01
    nms_iou: float = 0.5
    # stage II: RoI pooling and refinement
    roi_grid1: tuple = (7, 7, 7)
    roi_grid2: tuple = (1, 1, 1)
    roi_kernel1: int = 5
    roi_kernel2: int = 7
    roi_channels: tuple = (64, 128)
    refine_hidden: int = 128
    max_train_proposals: int = 128
    proposal_iou_min: float = 0.3
    pre_nms_limit: int = 256
    # loss balancing
    beta_sem: float = 1.0
    beta_vote: float = 1.0
    beta_cntr: float = 1.0
    beta_box: float = 1.0
    beta_cls: float = 1.0
    beta_rebox: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    smooth_l1_beta: float = 1.0
    # optimization (batch 2 / 500 steps are desk-scale choices of this
    # artifact, not dataset-scale training values)
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    batch_size: int = 16
    grad_clip: float = 10.0
    steps: int = 500
    dataset_preset: str = "scannet"
    precision: str = "f32"
    seed: int = 0

    @property
    def highres_stride(self) -> int:
        ratio = self.highres_voxel_size / self.voxel_size
        stride = int(round(ratio))
        if abs(ratio - stride) > 1e-9 or stride < 1 or stride & (stride - 1):
            raise ValueError(
                f"highres_voxel_size / voxel_size must be a power of two, got {ratio}"
            )
        return stride

    def voxel_size3(self):
        return (self.voxel_size,) * 3


_PRESETS = {
    "scannet": dict(tau_epoch_period=10, n_class=18),
    "sunrgbd": dict(tau_epoch_period=4, n_class=10),
    # desk-scale preset: small batches, reduced channel widths, 3 classes,
    # and a faster learning rate suited to overfitting a handful of scenes
    "toy": dict(
        tau_epoch_period=10,
        n_class=3,
        batch_size=2,
        steps=500,
        group_channels=32,
        roi_channels=(32, 64),
        refine_hidden=64,
        stage_channels=(16, 32, 64, 128),
        learning_rate=0.003,
        precision="f64",
    ),
}


def preset(name: str) -> RunConfig:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return replace(RunConfig(), dataset_preset=name, **_PRESETS[name])


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(val, types[key], key)
    if "dataset_preset" in values and (base is None):
        cfg = preset(values["dataset_preset"])
    return replace(cfg, **values)


def _parse_value(val, typ, key):
    typ_name = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ_name == "int":
            return int(val)
        if typ_name == "float":
            return float(val)
        if typ_name == "tuple":
            return tuple(int(x) for x in val.split(","))
        return val
    except ValueError as e:
        raise ValueError(f"config key {key!r}: cannot parse {val!r} as {typ_name}") from e


def load_config_file(path, base: RunConfig = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base)
