"""Command-line surface: gen, select, calibrate, eval, stability.

Every command is a deterministic function of its input files, flags, and
seed; re-running with identical inputs produces byte-identical outputs.
Configuration can come from a JSON file (--config, unknown keys rejected)
with command-line flags taking precedence.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import synth
from .calibrate import (
    CalibConfig,
    NonFiniteLossError,
    calibrate,
    stability_report,
)
from .layer import (
    build_layer,
    forward,
    forward_reference,
    load_layer,
    save_layer,
)
from .mocd import MocdConfig, build_partition, trivial_partition
from .quantizer import Granularity, QuantSpec, compute_params, quant_error
from .tensor import ActivationBatch, TensorFormatError, load_tensor, save_tensor
from .transform import apply_inv_left

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    activations: str | None = None
    weights: str | None = None
    layer_dir: str | None = None
    out: str = "."
    seed: int = 0
    wbits: int = 4
    abits: int = 4
    mocd: bool = True
    cws: bool = True
    mac: bool = True
    ratio_vision: float = 0.02
    ratio_text: float = 0.02
    clusters: int = 3
    rank_cws: float = 0.02
    rank_mac: float = 0.03
    steps: int = 200
    learning_rate: float = 1.0
    # synthetic data generation
    tokens_text: int = 64
    tokens_vision: int = 64
    dim: int = 64
    d_out: int = 64
    vision_outliers: list[int] = dataclasses.field(default_factory=lambda: [3, 9])
    text_outliers: list[int] = dataclasses.field(default_factory=lambda: [17, 42])
    vision_scale: float = 100.0
    text_instability: float = 0.8
    # stability report
    subset_sizes: list[int] = dataclasses.field(default_factory=lambda: [32, 64])
    reference_size: int = 128
    trials: int = 20


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(values) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _quant_specs(cfg: RunConfig) -> tuple[QuantSpec, QuantSpec]:
    abits = None if cfg.abits == 0 else cfg.abits
    wbits = None if cfg.wbits == 0 else cfg.wbits
    act = QuantSpec(abits, symmetric=False, granularity=Granularity.PER_TOKEN)
    weight = QuantSpec(wbits, symmetric=True, granularity=Granularity.PER_CHANNEL)
    return act, weight


def _mocd_config(cfg: RunConfig) -> MocdConfig:
    return MocdConfig(
        ratio_vision=cfg.ratio_vision,
        ratio_text=cfg.ratio_text,
        clusters_k=cfg.clusters,
        seed=cfg.seed,
    )


def _load_batch(path: str | None) -> ActivationBatch:
    if path is None:
        raise ConfigError("activation dump path not set")
    batch = load_tensor(path)
    if not isinstance(batch, ActivationBatch):
        raise TensorFormatError(f"{path} does not contain an activation batch")
    return batch


def _load_weight(path: str | None) -> np.ndarray:
    if path is None:
        raise ConfigError("weight dump path not set")
    w = load_tensor(path)
    if isinstance(w, ActivationBatch):
        raise TensorFormatError(f"{path} contains a batch, expected a matrix")
    return w


def _write_csv(path: str, header: list[str], rows, seed: int) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# seed={seed}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_gen(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    scfg = synth.SynthConfig(
        tokens_text=cfg.tokens_text,
        tokens_vision=cfg.tokens_vision,
        dim=cfg.dim,
        vision_outlier_channels=tuple(cfg.vision_outliers),
        text_outlier_channels=tuple(cfg.text_outliers),
        vision_outlier_scale=cfg.vision_scale,
        text_instability=cfg.text_instability,
        seed=cfg.seed,
    )
    batch = synth.generate(scfg)
    save_tensor(os.path.join(cfg.out, "activations.spqt"), batch)
    w = synth.generate_weight(cfg.dim, cfg.d_out, seed=cfg.seed)
    save_tensor(os.path.join(cfg.out, "weights.spqt"), w)
    print(f"wrote activations.spqt and weights.spqt to {cfg.out} (seed={cfg.seed})")
    return EXIT_OK


def _partition_for(cfg: RunConfig, batch: ActivationBatch):
    if not cfg.mocd:
        return trivial_partition(batch.data.shape[1])
    return build_partition(batch, _mocd_config(cfg))


def cmd_select(cfg: RunConfig) -> int:
    batch = _load_batch(cfg.activations)
    partition = _partition_for(cfg, batch)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "partition.json"), "w") as fh:
        json.dump(
            {
                "seed": cfg.seed,
                "dim": partition.dim,
                "c_main": partition.c_main.tolist(),
                "c_text": partition.c_text.tolist(),
                "c_vision": partition.c_vision.tolist(),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    t_rows, v_rows = batch.text_rows, batch.vision_rows
    rows = []
    for c in range(partition.dim):
        t_max = float(np.max(np.abs(batch.data[t_rows, c]))) if t_rows.size else 0.0
        v_max = float(np.max(np.abs(batch.data[v_rows, c]))) if v_rows.size else 0.0
        rows.append((c, t_max, v_max))
    _write_csv(
        os.path.join(cfg.out, "channel_stats.csv"),
        ["channel", "text_max_abs", "vision_max_abs"], rows, cfg.seed,
    )
    print(f"partition: {len(partition.c_main)} main / "
          f"{len(partition.c_text)} text / {len(partition.c_vision)} vision")
    return EXIT_OK


def _build_and_calibrate(cfg: RunConfig, batch, w, partition):
    act_spec, weight_spec = _quant_specs(cfg)
    layer = build_layer(
        w, batch, partition,
        act_spec=act_spec, weight_spec=weight_spec,
        use_cws=cfg.cws, use_mac=cfg.mac,
        rank_ratio_cws=cfg.rank_cws, rank_ratio_mac=cfg.rank_mac,
    )
    ccfg = CalibConfig(
        steps=cfg.steps, learning_rate=cfg.learning_rate, seed=cfg.seed
    )
    return calibrate(layer, batch, ccfg)


def cmd_calibrate(cfg: RunConfig) -> int:
    batch = _load_batch(cfg.activations)
    w = _load_weight(cfg.weights)
    partition = _partition_for(cfg, batch)
    layer, trace = _build_and_calibrate(cfg, batch, w, partition)
    layer_dir = cfg.layer_dir or os.path.join(cfg.out, "layer")
    save_layer(layer, layer_dir)
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(
        os.path.join(cfg.out, "loss_trace.csv"),
        ["step", "loss"],
        list(enumerate(trace.losses)),
        cfg.seed,
    )
    print(f"best loss {trace.best_loss:.6e} at step {trace.best_step}; "
          f"layer saved to {layer_dir}")
    return EXIT_OK


def _mse_rows(layer, batch):
    y = forward(layer, batch)
    y_ref = forward_reference(layer.full_weight(), batch)
    err = (y - y_ref) ** 2
    overall = float(err.mean())
    t_rows, v_rows = batch.text_rows, batch.vision_rows
    mse_t = float(err[t_rows].mean()) if t_rows.size else float("nan")
    mse_v = float(err[v_rows].mean()) if v_rows.size else float("nan")
    return overall, mse_t, mse_v


def cmd_eval(cfg: RunConfig, ablation: bool = False) -> int:
    batch = _load_batch(cfg.activations)
    os.makedirs(cfg.out, exist_ok=True)
    layer_dir = cfg.layer_dir or os.path.join(cfg.out, "layer")
    manifest = os.path.join(layer_dir, "manifest.json")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"layer manifest not found: {manifest}")
    layer = load_layer(manifest)
    overall, mse_t, mse_v = _mse_rows(layer, batch)
    _write_csv(
        os.path.join(cfg.out, "report.csv"),
        ["metric", "value"],
        [("mse_overall", overall), ("mse_text", mse_t), ("mse_vision", mse_v)],
        cfg.seed,
    )

    # Per-channel weight quantization error of the transformed main weight,
    # sorted ascending by MAE and averaged within 10 equal bins.
    w_prime = apply_inv_left(layer.w_main, layer.p_main)
    params = compute_params(w_prime, layer.weight_spec)
    mae = np.mean(np.abs(quant_error(w_prime, params, layer.weight_spec)), axis=1)
    order = np.sort(mae)
    bins = np.array_split(order, 10)
    decile_rows = [
        (i + 1, float(b.mean()) if b.size else 0.0) for i, b in enumerate(bins)
    ]
    _write_csv(
        os.path.join(cfg.out, "weight_error_deciles.csv"),
        ["decile", "mean_mae"], decile_rows, cfg.seed,
    )
    print(f"mse overall {overall:.6e} (text {mse_t:.6e}, vision {mse_v:.6e})")

    if ablation:
        w = _load_weight(cfg.weights)
        rows = []
        grid = [
            ("baseline", False, False, False),
            ("mocd", True, False, False),
            ("mocd+cws", True, True, False),
            ("mocd+cws+mac", True, True, True),
        ]
        for name, use_mocd, use_cws, use_mac in grid:
            sub = dataclasses.replace(cfg, mocd=use_mocd, cws=use_cws, mac=use_mac)
            partition = _partition_for(sub, batch)
            lay, _ = _build_and_calibrate(sub, batch, w, partition)
            rows.append((name, _mse_rows(lay, batch)[0]))
        _write_csv(os.path.join(cfg.out, "ablation.csv"),
                   ["config", "mse"], rows, cfg.seed)
    return EXIT_OK


def cmd_stability(cfg: RunConfig) -> int:
    batch = _load_batch(cfg.activations)
    report = stability_report(
        batch, _mocd_config(cfg), cfg.subset_sizes,
        min(cfg.reference_size, batch.data.shape[0]),
        cfg.trials, seed=cfg.seed,
    )
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(
        os.path.join(cfg.out, "stability.csv"),
        ["subset_size", "mean_jaccard", "std"],
        [(r["subset_size"], r["mean_jaccard"], r["std_jaccard"]) for r in report],
        cfg.seed,
    )
    for r in report:
        print(f"size {r['subset_size']}: mean jaccard {r['mean_jaccard']:.3f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="modquant")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "select", "calibrate", "eval", "stability"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--activations", type=str, default=None)
        p.add_argument("--weights", type=str, default=None)
        p.add_argument("--layer-dir", dest="layer_dir", type=str, default=None)
        p.add_argument("--wbits", type=int, default=None)
        p.add_argument("--abits", type=int, default=None)
        p.add_argument("--no-mocd", dest="mocd", action="store_false", default=None)
        p.add_argument("--no-cws", dest="cws", action="store_false", default=None)
        p.add_argument("--no-mac", dest="mac", action="store_false", default=None)
        p.add_argument("--ratio-vision", dest="ratio_vision", type=float, default=None)
        p.add_argument("--ratio-text", dest="ratio_text", type=float, default=None)
        p.add_argument("--clusters", type=int, default=None)
        p.add_argument("--rank-cws", dest="rank_cws", type=float, default=None)
        p.add_argument("--rank-mac", dest="rank_mac", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)
        if name == "eval":
            p.add_argument("--ablation", action="store_true", default=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {
        k: v for k, v in vars(args).items()
        if k in _CONFIG_FIELDS
    }
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "select":
            return cmd_select(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, ablation=args.ablation)
        if args.command == "stability":
            return cmd_stability(cfg)
        print(f"unknown command {args.command}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TensorFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
