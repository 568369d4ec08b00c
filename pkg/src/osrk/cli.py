"""Command-line front end.

Every command writes a JSON run manifest next to its output recording the
argument vector, resolved configuration, seeds, input hashes and artifact
paths. Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._io import atomic_write_text
from .asc import AscKernelSpec, KernelBank, RadarParams, build_kernel_bank, table_iii_spec
from .data import (
    SynthConfig,
    load_dataset_dir,
    load_sample_file,
    make_soc_split,
    preprocess,
    save_samples,
    select_soc_serials,
    soc_count_mismatches,
    synth_dataset,
    to_arrays,
)
from .errors import ArgumentError, ConfigError, DataError, OsrkError
from .evaluation import (
    ACCOUNTING_NOTE,
    embed,
    evaluate_open_set,
    resolve_eval_threshold,
    run_limited_sample_protocol,
    run_openness_sweep,
    write_csv,
)
from .imaging import montage, write_png
from .kvconfig import read_kv_file
from .network import NetworkConfig, build_network, desk_config, init_conv1_from_bank, table_i_config
from .rpl import UNKNOWN, predict_open_batch
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, make_head, save_checkpoint, thread_limit

log = logging.getLogger("osrk")

MANIFEST_SUFFIX = ".manifest.json"
DIR_MANIFEST = "run_manifest.json"
SECTIONS = ("radar", "kernels", "synth", "network", "train", "eval")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        atomic_write_text(path, self.to_json())
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_path_for(output: str | os.PathLike) -> Path:
    output = Path(output)
    if output.is_dir():
        return output / DIR_MANIFEST
    return output.with_name(output.name + MANIFEST_SUFFIX)


def hash_path(path: str | os.PathLike) -> str:
    """sha256 of a file, or of every (relative path, content) pair below a directory."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            if p.name == DIR_MANIFEST or p.name.endswith(MANIFEST_SUFFIX):
                continue
            h.update(p.relative_to(path).as_posix().encode("utf-8") + b"\0")
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# configuration plumbing


def split_sections(values: dict[str, str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    bad = []
    for key, value in values.items():
        section, _, rest = key.partition(".")
        if section not in out or not rest:
            bad.append(key)
        else:
            out[section][rest] = value
    if bad:
        raise ConfigError(f"config keys must be prefixed with one of {SECTIONS}; offending keys: {bad}")
    return out


def _csv_list(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise ArgumentError(f"expected comma-separated integers, got {text!r}") from exc


def radar_params(args) -> RadarParams:
    values = dict(args.sections["radar"])
    if getattr(args, "params", None):
        values.update(read_kv_file(args.params))
    return RadarParams.from_mapping(values)


def train_config(args) -> TrainConfig:
    values = dict(args.sections["train"])
    values.setdefault("seed", str(args.seed))
    values.setdefault("deterministic", "true" if args.deterministic else "false")
    flags = {
        "epochs": "epochs", "learning_rate": "lr", "batch_size": "batch_size", "lambda": "lam",
        "gamma": "gamma", "momentum": "momentum",
    }
    for key, attr in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            values.pop("lam" if key == "lambda" else key, None)
            values[key] = str(v)
    return TrainConfig.from_mapping(values)


def network_config(args) -> NetworkConfig:
    values = dict(args.sections["network"])
    if getattr(args, "net_config", None):
        values.update(read_kv_file(args.net_config))
    preset = values.pop("preset", None) or getattr(args, "net", None) or "desk"
    if any(k.startswith("layer.") for k in values):
        cfg = NetworkConfig.from_mapping(values)
    else:
        extra = set(values) - {"embedding_dim", "freeze_first_layer"}
        if extra:
            raise ConfigError(f"unknown network keys without layer definitions: {sorted(extra)}")
        dim = int(values["embedding_dim"]) if "embedding_dim" in values else None
        freeze = values.get("freeze_first_layer", "false").lower() in ("1", "true", "yes", "on")
        if preset == "desk":
            cfg = desk_config(dim or 32, freeze_first_layer=freeze)
        elif preset == "table-i":
            cfg = table_i_config(dim or 10, freeze_first_layer=freeze)
        else:
            raise ConfigError(f"network preset must be 'desk' or 'table-i', got {preset!r}")
    if getattr(args, "embedding_dim", None):
        cfg = _with_embedding_dim(cfg, args.embedding_dim)
    if getattr(args, "freeze_first_layer", False):
        cfg = replace(cfg, freeze_first_layer=True)
    cfg.validate()
    return cfg


def _with_embedding_dim(cfg: NetworkConfig, dim: int) -> NetworkConfig:
    last = replace(cfg.layers[-1], count=dim)
    return replace(cfg, layers=cfg.layers[:-1] + (last,), embedding_dim=dim)


def synth_config(args) -> SynthConfig:
    values = dict(args.sections["synth"])
    values.setdefault("seed", str(args.seed))
    for key in ("n_classes", "per_class_train", "per_class_test", "image_size", "noise_sigma", "azimuth_span_deg"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    return SynthConfig.from_mapping(values)


def _load_bank(path) -> KernelBank | None:
    return KernelBank.load(path) if path else None


def _load_samples(args):
    samples = load_dataset_dir(args.data, manifest=args.manifest, strict=args.strict)
    if any(s.metadata.get("format") == "mstar" for s in samples):
        samples = select_soc_serials(samples)
        for cls, (tr, tr_want, te, te_want) in soc_count_mismatches(samples).items():
            log.warning("%s: %d/%d chips at 17 deg, %d/%d at 15 deg", cls, tr, tr_want, te, te_want)
    return samples


def _class_order(samples) -> list[str]:
    return sorted({s.label for s in samples if s.label is not None})


def _model_meta(ckpt: Checkpoint) -> tuple[list[str], str]:
    meta = ckpt.train_config
    known = meta.get("known_classes")
    if not known:
        raise DataError("checkpoint does not record its known classes")
    return list(known), meta.get("image_mode", "pad")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_kernels(args) -> tuple[dict, list[Path], list[Path]]:
    params = radar_params(args)
    if args.spec:
        spec = AscKernelSpec.from_file(args.spec)
    else:
        size = args.size if args.size is not None else int(args.sections["kernels"].get("size", 11))
        mode = args.sections["kernels"].get("normalize_mode", "zero_mean_unit_l2")
        spec = table_iii_spec(size, mode, params.spatial_resolution)
    bank = build_kernel_bank(spec, params)
    out = Path(args.out)
    meta_path = bank.save(out)
    artifacts = [out, meta_path]
    if args.montage:
        write_png(args.montage, montage(bank.kernels, columns=len(spec.orientation_grid)))
        artifacts.append(Path(args.montage))
    print(f"wrote {bank.count} kernels of size {bank.kernel_size} to {out}")
    config = {"radar": asdict(params), "kernel_spec": asdict(spec)}
    inputs = [p for p in (args.spec, args.params) if p]
    return config, artifacts, inputs


def cmd_synth_data(args):
    cfg = synth_config(args)
    radar = radar_params(args)
    samples = synth_dataset(cfg, radar)
    manifest = save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return {"synth": asdict(cfg), "radar": asdict(radar)}, [Path(args.out), manifest], [
        p for p in (args.params,) if p
    ]


def cmd_train(args):
    tcfg = train_config(args)
    samples = _load_samples(args)
    known = _csv_list(args.known) or _class_order(samples)
    split = make_soc_split(samples, known, seed=tcfg.seed)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        net, head, state = ckpt.restore()
        known, image_mode = _model_meta(ckpt)
        ncfg = net.config
    else:
        ncfg = network_config(args)
        image_mode = args.image_mode
        net = build_network(ncfg, seed=tcfg.seed)
        bank = _load_bank(args.bank)
        if bank is not None:
            init_conv1_from_bank(net, bank)
            ncfg = replace(ncfg, first_layer_init="asc_bank", bank_path=str(args.bank))
            net.config = ncfg
        head = make_head(len(known), ncfg.embedding_dim, tcfg)
        state = None
    x, y = to_arrays(split.train, known, ncfg.input_size, image_mode)
    meta = dict(tcfg.to_mapping(), known_classes=known, image_mode=image_mode)
    out = Path(args.out)

    def on_epoch_end(epoch, st):
        if args.checkpoint_every and epoch % args.checkpoint_every == 0:
            save_checkpoint(out, Checkpoint.capture(net, head, st, meta))

    result = fit(net, head, x, y, tcfg, state=state, on_epoch_end=on_epoch_end)
    save_checkpoint(out, Checkpoint.capture(result.net, result.head, result.state, meta))
    artifacts = [out]
    if args.loss_log:
        rows = [{"step": i + 1, "loss": v} for i, v in enumerate(result.step_losses)]
        write_csv(args.loss_log, rows)
        artifacts.append(Path(args.loss_log))
    last = result.epochs[-1].total if result.epochs else float("nan")
    print(f"trained {len(result.epochs)} epoch(s) on {len(y)} samples, final loss {last:.6g}; wrote {out}")
    config = {"train": tcfg.to_mapping(), "network": ncfg.to_mapping(), "known": known, "image_mode": image_mode}
    return config, artifacts, [p for p in (args.data, args.bank, args.resume) if p]


def _eval_inputs(args):
    ckpt = load_checkpoint(args.model)
    net, head, _ = ckpt.restore()
    known, image_mode = _model_meta(ckpt)
    samples = _load_samples(args)
    present = _class_order(samples)
    unknown = _csv_list(args.unknown) if args.unknown else [c for c in present if c not in known]
    split = make_soc_split(samples, known, unknown, seed=args.seed)
    return net, head, known, unknown, image_mode, split


def _threshold(args, net, head, split, known, image_mode):
    train_feats = None
    if str(args.threshold).strip().lower() == "calibrated":
        x_tr, _ = to_arrays(split.train, known, net.config.input_size, image_mode)
        train_feats = embed(net, x_tr)
    return resolve_eval_threshold(args.threshold, head, train_feats, args.gate, args.percentile)


def cmd_eval(args):
    net, head, known, unknown, image_mode, split = _eval_inputs(args)
    thr = _threshold(args, net, head, split, known, image_mode)
    x, y = to_arrays(split.test, known, net.config.input_size, image_mode)
    report = evaluate_open_set(net, head, x, y, thr, args.gate)
    row = dict(report.as_row(), n_known=len(known), n_unknown=len(unknown), n_test=len(y))
    write_csv(args.out, [row], ACCOUNTING_NOTE)
    print(
        f"precision {report.precision:.4f} recall {report.recall:.4f} f1 {report.f1:.4f} "
        f"accuracy {report.accuracy:.4f} closed-set accuracy {report.closed_set_accuracy:.4f}"
    )
    config = {"known": known, "unknown": unknown, "threshold": str(args.threshold), "gate": args.gate,
              "percentile": args.percentile, "image_mode": image_mode}
    return config, [Path(args.out)], [args.model, args.data]


def cmd_sweep_openness(args):
    tcfg = train_config(args)
    ncfg = network_config(args)
    samples = _load_samples(args)
    order = _csv_list(args.classes) or _class_order(samples)
    bank = _load_bank(args.bank)
    rows = run_openness_sweep(
        samples, order, args.k_min, args.k_max, ncfg, tcfg, args.repetitions, args.threshold, bank, args.image_mode
    )
    write_csv(args.out, rows, ACCOUNTING_NOTE)
    print(f"wrote {len(rows)} rows to {args.out}")
    config = {"train": tcfg.to_mapping(), "network": ncfg.to_mapping(), "classes": order, "k_min": args.k_min,
              "k_max": args.k_max, "repetitions": args.repetitions, "threshold": str(args.threshold)}
    return config, [Path(args.out)], [p for p in (args.data, args.bank) if p]


def cmd_limited_sample(args):
    tcfg = train_config(args)
    ncfg = network_config(args)
    samples = _load_samples(args)
    known = _csv_list(args.known) or _class_order(samples)
    split = make_soc_split(samples, known, seed=tcfg.seed)
    counts = _int_list(args.counts)
    bank = _load_bank(args.bank)
    rows = run_limited_sample_protocol(split, counts, ncfg, tcfg, bank, args.contiguous_azimuth, args.image_mode)
    write_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    config = {"train": tcfg.to_mapping(), "network": ncfg.to_mapping(), "known": known, "counts": counts,
              "contiguous_azimuth": args.contiguous_azimuth}
    return config, [Path(args.out)], [p for p in (args.data, args.bank) if p]


def cmd_export_embeddings(args):
    net, head, known, unknown, image_mode, split = _eval_inputs(args)
    thr = _threshold(args, net, head, split, known, image_mode)
    chosen = {"test": split.test, "train": split.train, "all": split.train + split.test}[args.split]
    x, y = to_arrays(chosen, known, net.config.input_size, image_mode)
    feats = embed(net, x)
    preds = predict_open_batch(feats, head, args.gate, thr)
    rows = []
    for i, (s, p) in enumerate(zip(chosen, preds)):
        row = {
            "sample_id": s.metadata.get("sample_id") or s.metadata.get("path", f"sample_{i:06d}"),
            "true_label": s.label if s.label is not None else "",
            "predicted": "unknown" if p.class_index == UNKNOWN else known[p.class_index],
            "gating_distance": p.gating_distance,
        }
        row.update({f"e_{j + 1}": float(v) for j, v in enumerate(feats[i])})
        rows.append(row)
    write_csv(args.out, rows)
    print(f"wrote {len(rows)} embeddings of dimension {feats.shape[1]} to {args.out}")
    config = {"known": known, "unknown": unknown, "threshold": str(args.threshold), "gate": args.gate,
              "split": args.split}
    return config, [Path(args.out)], [args.model, args.data]


def _feature_layers(net) -> list[int]:
    """Indices of layers whose output is still a spatial feature map."""
    shape = (1, 1, net.config.input_size, net.config.input_size)
    valid = []
    x = np.zeros(shape)
    for i, layer in enumerate(net.layers):
        x = layer.forward(x)
        if x.ndim != 4:
            break
        valid.append(i)
    return valid


def cmd_dump_features(args):
    if args.model:
        net, _, _ = load_checkpoint(args.model).restore()
    else:
        ncfg = network_config(args)
        net = build_network(ncfg, seed=args.seed)
        bank = _load_bank(args.bank)
        if bank is not None:
            init_conv1_from_bank(net, bank)
    valid = _feature_layers(net)
    if args.layer not in valid:
        raise ArgumentError(
            f"layer {args.layer} is not a feature-map layer; valid range is {valid[0]}..{valid[-1]}"
        )
    sample = load_sample_file(Path(args.image))
    if sample is None:
        raise DataError(f"unsupported image file: {args.image}")
    x = preprocess(sample, net.config.input_size, args.image_mode)[None]
    fmap = net.forward(x, upto=args.layer + 1)[0]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for c in range(fmap.shape[0]):
        path = out / f"channel_{c:04d}.png"
        write_png(path, fmap[c])
        artifacts.append(path)
    grid = out / "montage.png"
    write_png(grid, montage(fmap))
    artifacts.append(grid)
    print(f"wrote {fmap.shape[0]} channel images of {fmap.shape[1]}x{fmap.shape[2]} to {out}")
    config = {"layer": args.layer, "image_mode": args.image_mode, "network": net.config.to_mapping()}
    return config, [out] + artifacts, [p for p in (args.model, args.bank, args.image) if p]


# ---------------------------------------------------------------------------
# argument parsing


def _add_data_args(p, known=True):
    p.add_argument("--data", required=True, help="dataset directory (MSTAR, PNG or .npy chips)")
    p.add_argument("--manifest", help="CSV with path,label,split columns (default: <data>/manifest.csv if present)")
    p.add_argument("--strict", action="store_true", help="fail on unreadable files instead of skipping them")
    if known:
        p.add_argument("--known", help="comma-separated known classes (default: all classes found)")


def _add_train_args(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lam", type=float, help="weight of the boundary loss")
    p.add_argument("--gamma", type=float, help="softmax temperature")
    p.add_argument("--momentum", type=float)


def _add_net_args(p):
    p.add_argument("--net", choices=("desk", "table-i"), help="network preset (default desk)")
    p.add_argument("--net-config", help="key=value network definition file")
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--freeze-first-layer", action="store_true")
    p.add_argument("--bank", help="ASC kernel bank for the first conv layer")
    p.add_argument("--image-mode", choices=("pad", "center_crop"), default="pad")


def _add_threshold_args(p):
    p.add_argument("--threshold", default="calibrated",
                   help="rejection threshold: a number, '-inf', 'R' (learned radius) or 'calibrated'")
    p.add_argument("--gate", choices=("euclid", "combined"), default="euclid")
    p.add_argument("--percentile", type=float, default=5.0,
                   help="percentile of training gating distances used by 'calibrated'")


def _default_threads() -> int | None:
    env = os.environ.get("OSRK_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osrk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help="BLAS thread cap (default: $OSRK_THREADS, else library default)")
    parser.add_argument("--config", help="key=value file with section-prefixed keys, e.g. train.epochs = 10")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-kernels", help="build an ASC kernel bank")
    p.add_argument("--size", type=int, choices=(11, 21, 31))
    p.add_argument("--spec", help="custom kernel spec file (kernel_size, length_grid, orientation_grid)")
    p.add_argument("--params", help="radar parameter file")
    p.add_argument("--out", required=True)
    p.add_argument("--montage", help="PNG montage path")
    p.set_defaults(func=cmd_gen_kernels)

    p = sub.add_parser("synth-data", help="generate a synthetic scatterer-scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="radar parameter file")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--per-class-train", type=int)
    p.add_argument("--per-class-test", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--azimuth-span-deg", type=float)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train network and reciprocal points")
    _add_data_args(p)
    _add_net_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save after every N epochs")
    p.add_argument("--loss-log", help="CSV of per-step losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="open-set evaluation of a checkpoint")
    p.add_argument("--model", required=True)
    _add_data_args(p, known=False)
    p.add_argument("--unknown", help="comma-separated unknown classes (default: all non-known classes)")
    _add_threshold_args(p)
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-openness", help="train/evaluate with the first k classes known, for each k")
    _add_data_args(p, known=False)
    _add_net_args(p)
    _add_train_args(p)
    p.add_argument("--classes", help="class order (default: sorted)")
    p.add_argument("--k-min", type=int, default=3)
    p.add_argument("--k-max", type=int, default=7)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--threshold", default="calibrated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_openness)

    p = sub.add_parser("limited-sample", help="closed-set accuracy versus samples per class")
    _add_data_args(p)
    _add_net_args(p)
    _add_train_args(p)
    p.add_argument("--counts", default="20,40,80", help="comma-separated samples per class")
    p.add_argument("--contiguous-azimuth", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_limited_sample)

    p = sub.add_parser("export-embeddings", help="write per-sample embeddings and predictions")
    p.add_argument("--model", required=True)
    _add_data_args(p, known=False)
    p.add_argument("--unknown")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    _add_threshold_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("dump-features", help="write feature maps of one layer as PNGs")
    p.add_argument("--model", help="checkpoint (default: untrained network from --net/--bank)")
    _add_net_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump_features)
    return parser


def run(argv: Sequence[str]) -> int:
    argv = list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.sections = split_sections(read_kv_file(args.config)) if args.config else {s: {} for s in SECTIONS}
    with thread_limit(args.threads):
        config, artifacts, inputs = args.func(args)
    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config=json.loads(json.dumps(config, default=str)),
        seeds={"seed": args.seed, "deterministic": args.deterministic, "threads": args.threads},
        inputs={str(p): hash_path(p) for p in inputs + ([args.config] if args.config else [])},
        artifacts=[str(a) for a in artifacts],
    )
    manifest.write(manifest_path_for(artifacts[0]))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except OsrkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
