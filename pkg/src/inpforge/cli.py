"""``inpforge`` command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``score``, ``zero-shot``,
``export-inps`` and ``flops``. Human-readable summaries go to stdout; every
artifact goes to a file, and each run leaves a ``run.json`` manifest in its
output directory. Configuration precedence is flags > ``--config`` JSON file
> built-in defaults.

Heavy modules are imported inside the command functions so that ``flops``
starts without loading the model stack.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, InpForgeError

MANIFEST_NAME = "run.json"
CHECKPOINT_NAME = "model.inpf"
LOSSES_NAME = "losses.csv"

# ModelConfig fields exposed as flags on the training command; the group
# ranges are structured values and can only be set through --config.
_MODEL_FLAG_FIELDS = (
    "image_size", "patch_size", "channels", "embed_dim", "heads", "encoder_depth", "decoder_depth",
    "num_inps", "gamma", "lam", "lr", "weight_decay", "clip_threshold", "epochs", "batch_size", "seed",
    "top_fraction", "smoothing_sigma", "attention_scale", "supervision", "use_inp", "bottleneck_skip",
)


# -- helpers -------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_checksums(root: Path) -> dict[str, str]:
    """sha256 of every file under ``root`` except the run manifest, by relative path."""
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel != MANIFEST_NAME:
            out[rel] = sha256_file(path)
    return out


def tree_digest(checksums: dict[str, str]) -> str:
    h = hashlib.sha256()
    for rel, digest in sorted(checksums.items()):
        h.update(f"{rel}\0{digest}\n".encode())
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict
    outputs: dict
    checksums: dict
    duration_s: float
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        data = dataclasses.asdict(self)
        data["tree_sha256"] = tree_digest(self.checksums)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _parse_classes(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        return tuple(int(c) for c in text.split(",") if c.strip())
    except ValueError as exc:
        raise ConfigError(f"--classes expects comma-separated integers, got {text!r}") from exc


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (pass --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _data_config(args):
    from .config import DataConfig

    values = {f.name: f.default for f in dataclasses.fields(DataConfig)}
    if args.config:
        file_values = _read_json(args.config)
        unknown = set(file_values) - set(values)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        values.update(file_values)
    flags = {
        "master_seed": args.seed,
        "classes": _parse_classes(args.classes),
        "few_shot": args.few_shot,
        "train_per_class": args.train_per_class,
        "test_normal_per_class": args.test_normal_per_class,
        "test_anomalous_per_class": args.test_anomalous_per_class,
        "augment_factor": args.augment_factor,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if values.get("classes") is None:
        values["classes"] = ()
    return DataConfig(**values)


def _data_config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["classes"] = list(cfg.classes)
    return d


def _model_config(args):
    from .config import ModelConfig

    values = ModelConfig().to_dict()
    if args.config:
        file_values = _read_json(args.config)
        unknown = set(file_values) - set(values)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        values.update(file_values)
    for name in _MODEL_FLAG_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            values[name] = val
    return ModelConfig.from_dict(values)


def _image_array(path, cfg):
    import numpy as np

    from .io import from_uint8, load_pgm

    img = from_uint8(load_pgm(path))
    if img.shape != (cfg.image_size, cfg.image_size):
        raise DataError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, model expects {cfg.image_size}px")
    return np.repeat(img[:, :, None], cfg.channels, axis=2)


def _select(samples, classes):
    if classes is None:
        return list(samples)
    return [s for s in samples if s.class_id in classes]


def _write_maps(out_dir: Path, ids, maps) -> None:
    """PTF1 map plus a PGM view per image; PGMs share one scale across the run."""
    import numpy as np

    from .io import heatmap_u8, save_pgm, save_ptf

    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(np.min(maps)), float(np.max(maps))
    for sid, m in zip(ids, maps):
        save_ptf(out_dir / f"{sid}.ptf", m)
        save_pgm(out_dir / f"{sid}.pgm", heatmap_u8(m, lo, hi))


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    from .data import build_splits, save_dataset

    cfg = _data_config(args)
    out = _prepare_out(Path(args.out), args.force)
    splits = build_splits(cfg)
    save_dataset(splits, cfg, out)
    print(f"wrote {len(splits['train'])} train and {len(splits['test'])} test images "
          f"for classes {list(cfg.classes)} to {out}")
    return {"config": _data_config_dict(cfg), "seed": cfg.master_seed, "inputs": {}, "out": out}


def cmd_train(args) -> dict:
    import numpy as np

    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_dataset
    from .inp import INPFormer
    from .train import TrainState, history_csv, train

    out = Path(args.out)
    ckpt_path = out / CHECKPOINT_NAME
    if args.resume:
        if not ckpt_path.exists():
            raise ConfigError(f"--resume given but {ckpt_path} does not exist")
        ck = load_checkpoint(ckpt_path)
        model, state = ck.model, ck.state
        cfg = model.cfg
        if args.epochs is not None and args.epochs != cfg.epochs:
            cfg = cfg.replace(epochs=args.epochs)
            model.cfg = cfg
        print(f"resuming from epoch {state.epoch}")
    else:
        _prepare_out(out, args.force)
        cfg = _model_config(args)
        model, state = INPFormer(cfg), TrainState.fresh(cfg)

    splits, _ = load_dataset(args.data)
    samples = _select(splits["train"], _parse_classes(args.classes))
    if not samples:
        raise DataError(f"{args.data}: no training images for the selected classes")
    images = np.stack([s.image for s in samples])
    if images.shape[1] != cfg.image_size or images.shape[3] != cfg.channels:
        raise DataError(f"dataset images {images.shape[1:]} do not match the model config")

    def report(rec):
        print(f"epoch {rec.epoch:3d}  L_sm={rec.l_sm:.5f}  L_c={rec.l_c:.5f}  L_total={rec.l_total:.5f}", flush=True)

    model, history, state = train(model, images, cfg.epochs, state, on_epoch=report)
    save_checkpoint(ckpt_path, model, state)
    (out / LOSSES_NAME).write_text(history_csv(history))
    print(f"trained {state.epoch} epochs on {len(samples)} images; checkpoint {ckpt_path}")
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {"data": str(args.data), "resume": bool(args.resume)},
        "out": out,
    }


def cmd_eval(args) -> dict:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .pipeline import per_class_reports, report, score_samples

    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    splits, _ = load_dataset(args.data)
    samples = _select(splits["test"], _parse_classes(args.classes))
    if not samples:
        raise DataError(f"{args.data}: no test images for the selected classes")
    out = _prepare_out(Path(args.out), args.force)
    scored = score_samples(model, samples)
    pixel = all(s.gt_mask is not None for s in scored if s.label)
    if not pixel:
        print("warning: ground-truth masks missing for some anomalous images; pixel metrics skipped",
              file=sys.stderr)
    rep = report(scored, pixel)
    (out / "metrics.csv").write_text(rep.csv())
    by_class = per_class_reports(scored, pixel)
    rows = ["class_id," + ",".join(rep.METRICS)]
    rows += [f"{c}," + ",".join(_fmt(v) for v in r.as_dict().values()) for c, r in by_class.items()]
    (out / "per_class.csv").write_text("\n".join(rows) + "\n")
    scores = ["id,class_id,label,score"] + [f"{s.id},{s.class_id},{s.label},{s.image_score!r}" for s in scored]
    (out / "scores.csv").write_text("\n".join(scores) + "\n")
    _write_maps(out / "maps", [s.id for s in scored], np.stack([s.pixel_map for s in scored]))
    print(rep.summary())
    for c, r in by_class.items():
        print(f"class {c}: {r.summary()}")
    return {
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "inputs": {"data": str(args.data), "checkpoint": str(args.checkpoint)},
        "out": out,
    }


def cmd_score(args) -> dict:
    from .checkpoint import load_checkpoint
    from .io import heatmap_u8, save_pgm, save_ptf
    from .pipeline import predict_maps
    from .scoring import image_score

    model = load_checkpoint(args.checkpoint).model
    img = _image_array(args.image, model.cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = predict_maps(model, img[None])[0]
    score = image_score(m, model.cfg.top_fraction)
    stem = Path(args.image).stem
    save_ptf(out / f"{stem}.ptf", m)
    save_pgm(out / f"{stem}.pgm", heatmap_u8(m))
    print(f"{score:.6f}")
    return {
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "inputs": {"image": str(args.image), "checkpoint": str(args.checkpoint)},
        "out": out,
        "extra": {"score": score, "sha256": {"image": sha256_file(args.image)}},
        "only": [f"{stem}.ptf", f"{stem}.pgm"],
    }


def cmd_zero_shot(args) -> dict:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .metrics import auroc
    from .pipeline import zero_shot_maps
    from .scoring import image_score

    model = load_checkpoint(args.checkpoint).model
    if not model.cfg.use_inp:
        raise ConfigError("zero-shot scoring needs a model trained with prototypes (use_inp=true)")
    splits, _ = load_dataset(args.data)
    samples = _select(splits["test"], _parse_classes(args.classes))
    if not samples:
        raise DataError(f"{args.data}: no test images for the selected classes")
    out = _prepare_out(Path(args.out), args.force)
    maps = zero_shot_maps(model, np.stack([s.image for s in samples]))
    _write_maps(out / "maps", [s.id for s in samples], maps)
    rows = ["id,class_id,label,score,mean_in_mask,mean_outside"]
    hits = []
    for s, m in zip(samples, maps):
        inside = outside = ""
        if s.label and s.gt_mask is not None:
            a, b = float(m[s.gt_mask > 0].mean()), float(m[s.gt_mask == 0].mean())
            inside, outside = f"{a!r}", f"{b!r}"
            hits.append(a > b)
        rows.append(f"{s.id},{s.class_id},{s.label},{image_score(m, model.cfg.top_fraction)!r},{inside},{outside}")
    (out / "zero_shot.csv").write_text("\n".join(rows) + "\n")
    print(f"zero-shot maps for {len(samples)} images written to {out / 'maps'}")
    if hits:
        print(f"anomalous images with higher distance inside the mask: {np.mean(hits):.3f} of {len(hits)}")
    labels = [s.label for s in samples]
    if 0 < sum(labels) < len(labels):
        scores = [image_score(m, model.cfg.top_fraction) for m in maps]
        print(f"image AUROC {auroc(scores, labels):.4f}")
    return {
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "inputs": {"data": str(args.data), "checkpoint": str(args.checkpoint)},
        "out": out,
    }


def cmd_export_inps(args) -> dict:
    import numpy as np

    from . import tensor as T
    from .checkpoint import load_checkpoint
    from .inp import extract_inps
    from .io import heatmap_u8, save_pgm, save_ptf

    model = load_checkpoint(args.checkpoint).model
    cfg = model.cfg
    if not cfg.use_inp:
        raise ConfigError("this checkpoint has no prototypes (use_inp=false)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    scale = cfg.image_size // cfg.grid
    for path in args.image:
        img = _image_array(path, cfg)
        with T.no_grad():
            enc = model.encode(img)
            inps = extract_inps(enc.fused, model.params["inp.tokens"], model.params)
        attn = inps.attention_over_patches.data.reshape(cfg.num_inps, cfg.grid, cfg.grid)
        stem = Path(path).stem
        save_ptf(out / f"{stem}_attention.ptf", attn)
        save_ptf(out / f"{stem}_prototypes.ptf", inps.prototypes.data)
        written += [f"{stem}_attention.ptf", f"{stem}_prototypes.ptf"]
        for j, a in enumerate(attn):
            name = f"{stem}_inp{j}.pgm"
            save_pgm(out / name, heatmap_u8(np.kron(a, np.ones((scale, scale)))))
            written.append(name)
    print(f"exported {cfg.num_inps} prototype attention maps for {len(args.image)} image(s) to {out}")
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {"images": [str(p) for p in args.image], "checkpoint": str(args.checkpoint)},
        "out": out,
        "only": written,
    }


def cmd_flops(args) -> dict:
    from .flops import as_csv, format_table

    print(format_table(args.n, args.m, args.c))
    if not args.out:
        return {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.csv").write_text(as_csv(args.n, args.m, args.c))
    return {"config": {"N": args.n, "M": args.m, "C": args.c}, "seed": None, "inputs": {}, "out": out,
            "only": ["flops.csv"]}


# -- parser --------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    from .config import ModelConfig

    g = p.add_argument_group("model config (override --config)")
    for f in dataclasses.fields(ModelConfig):
        if f.name not in _MODEL_FLAG_FIELDS:
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        if kind is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpforge", description="Desk-scale INP-Former anomaly detection.")
    parser.add_argument("--version", action="version", version=f"inpforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--classes", help="comma-separated class ids, e.g. 0,1")
    p.add_argument("--few-shot", type=int, metavar="K", help="K normals per class, augmented")
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-normal-per-class", type=int)
    p.add_argument("--test-anomalous-per-class", type=int)
    p.add_argument("--augment-factor", type=int)
    p.add_argument("--config", help="JSON file with data config keys")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the normal images of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help=f"run directory ({CHECKPOINT_NAME}, {LOSSES_NAME})")
    p.add_argument("--classes", help="train only on these class ids")
    p.add_argument("--config", help="JSON file with model config keys")
    p.add_argument("--resume", action="store_true", help=f"continue from OUT/{CHECKPOINT_NAME}")
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="seven metrics plus per-image maps on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score one PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("zero-shot", help="prototype-distance maps without the decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("export-inps", help="per-prototype attention maps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_inps)

    p = sub.add_parser("flops", help="attention multiply-add and memory table")
    p.add_argument("n", type=int, metavar="N", help="patch tokens")
    p.add_argument("m", type=int, metavar="M", help="prototypes")
    p.add_argument("c", type=int, metavar="C", help="channels")
    p.add_argument("--out", help="also write flops.csv and a manifest here")
    p.set_defaults(func=cmd_flops)
    return parser


def _finish(args, result: dict, started: float) -> None:
    if not result:
        return
    out: Path = result["out"]
    if "only" in result:
        checksums = {rel: sha256_file(out / rel) for rel in result["only"]}
    else:
        checksums = tree_checksums(out)
    inputs = dict(result["inputs"])
    inputs.update(result.get("extra", {}))
    RunManifest(
        command=args.command,
        config=result["config"],
        seed=result["seed"],
        inputs=inputs,
        outputs={"dir": str(out)},
        checksums=checksums,
        duration_s=round(time.perf_counter() - started, 3),
    ).write(out)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        if args.command == "flops":
            result = args.func(args)
        else:
            from threadpoolctl import threadpool_limits

            # BLAS threading reorders float reductions; one thread keeps
            # results identical regardless of host and INPFORGE_THREADS.
            with threadpool_limits(limits=1):
                result = args.func(args)
        _finish(args, result, started)
    except InpForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
