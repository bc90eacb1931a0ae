"""Command line: generate, pretrain, train, sample, eval, verify.

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 I/O or file-format error. Every command writes ``effective_config.ini``
and ``run_manifest.json`` (config echo, seeds, SHA-256 of inputs and outputs)
into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import SyntheticClip, generate_dataset, load_clip, load_dataset, load_manifest, save_clip
from .errors import FormatError

log = logging.getLogger("idguide")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifests --------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out: Path, command: str, cfg: RunConfig, seeds: dict,
                       inputs: dict[str, Path], artifacts: list[Path], extra: dict | None = None) -> Path:
    """Config echo plus hashes; paths are stored relative to ``out`` or by input role."""
    config_path = out / "effective_config.ini"
    config_path.write_text(cfg.to_text(), encoding="utf-8")
    manifest = {
        "command": command,
        "version": __version__,
        "seeds": seeds,
        "config_file": config_path.name,
        "inputs": {role: sha256_file(p) for role, p in sorted(inputs.items())},
        "artifacts": {str(p.relative_to(out)): sha256_file(p) for p in sorted(artifacts + [config_path])},
    }
    if extra:
        manifest.update(extra)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dataset_inputs(data_dir: Path) -> dict[str, Path]:
    return {"dataset_manifest": data_dir / "manifest.json"}


def _load_split(data_dir: Path, split: str) -> list[SyntheticClip]:
    clips = load_dataset(data_dir, split)
    if not clips:
        raise UsageError(f"dataset {data_dir} has no clips in split {split!r}")
    return clips


# -- commands ---------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = Path(args.out)
    manifest = generate_dataset(cfg.data.data_config(), cfg.data.seed, out)
    files = [out / "manifest.json"] + [out / c["file"] for c in manifest.clips]
    write_run_manifest(out, "generate", cfg, {"data": cfg.data.seed}, {}, files)
    print(f"wrote {manifest.clip_count} clips for {manifest.identity_count} identities to {out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .pipeline import pretrain_frozen
    from .training import identity_gap, reconstruction_psnr, save_bundle
    data, out = Path(args.data), Path(args.out)
    clips = _load_split(data, "train")
    out.mkdir(parents=True, exist_ok=True)
    bundle = pretrain_frozen(cfg, clips)
    path = out / "pretrained.sanm"
    save_bundle(path, bundle)
    psnr = reconstruction_psnr(bundle.encoder, bundle.decoder, clips)
    same, diff = identity_gap(bundle.embedder, clips)
    write_run_manifest(out, "pretrain", cfg, {"pretrain": cfg.train.pretrain_seed},
                       _dataset_inputs(data), [path],
                       {"train_psnr": round(psnr, 6), "cosine_same": round(same, 6),
                        "cosine_diff": round(diff, 6)})
    print(f"pretrained decoder psnr={psnr:.2f} dB, identity cosine same={same:.3f} diff={diff:.3f}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .pipeline import pretrain_frozen, train_full
    from .training import load_bundle, save_bundle
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be non-negative")
        cfg.train.epochs = args.epochs
    data, out = Path(args.data), Path(args.out)
    clips = _load_split(data, "train")
    out.mkdir(parents=True, exist_ok=True)
    inputs = _dataset_inputs(data)
    artifacts = []
    if args.pretrained:
        frozen = load_bundle(args.pretrained)
        inputs["pretrained"] = Path(args.pretrained)
    else:
        frozen = pretrain_frozen(cfg, clips)
        save_bundle(out / "pretrained.sanm", frozen)
        artifacts.append(out / "pretrained.sanm")
    bundle, history = train_full(cfg, clips, frozen,
                                 log=lambda s: log.info("epoch %d loss %.5f", s.epoch, s.mean_loss))
    path = out / "model.sanm"
    save_bundle(path, bundle)
    hist = out / "history.tsv"
    hist.write_text("epoch\tmean_loss\tsteps\n" + "".join(
        f"{s.epoch}\t{s.mean_loss!r}\t{s.steps}\n" for s in history), encoding="utf-8")
    write_run_manifest(out, "train", cfg, {"train": cfg.train.seed, "pretrain": cfg.train.pretrain_seed},
                       inputs, artifacts + [path, hist])
    final = history[-1].mean_loss if history else float("nan")
    print(f"trained {len(history)} epochs, final loss {final:.4f}; checkpoint {path}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    from .pipeline import guidance_options, sample_clip, schedule_from
    from .training import load_bundle
    bundle = load_bundle(args.checkpoint)
    ref = load_clip(args.reference)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    guided = args.guidance == "on"
    frames, record = sample_clip(bundle, ref, schedule_from(cfg.schedule), guided,
                                 guidance_options(cfg.guidance), args.seed)
    # the generated clip keeps the reference's identity label, pose and target mask
    clip = SyntheticClip(frames, ref.identity_id, ref.identity_params, ref.pose_track,
                         ref.face_mask_pixel)
    clip_path, traj_path = out / "sample.sclp", out / "trajectory.tsv"
    save_clip(clip_path, clip)
    traj_path.write_text(record.to_text(), encoding="utf-8")
    write_run_manifest(out, "sample", cfg, {"sample": args.seed},
                       {"checkpoint": Path(args.checkpoint), "reference": Path(args.reference)},
                       [clip_path, traj_path], {"guidance": args.guidance})
    print(f"wrote {clip_path} and {traj_path} (guidance {args.guidance})")
    return EXIT_OK


def _parse_checkpoints(values: list[str]) -> dict[str, Path]:
    out = {}
    for v in values:
        label, sep, path = v.partition("=")
        if not sep:
            label, path = "full", v
        if label in out:
            raise UsageError(f"checkpoint for {label!r} given twice")
        out[label] = Path(path)
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    from .metrics import ABLATION_VARIANTS, format_table, run_ablation, write_reports
    from .pipeline import guidance_options, schedule_from
    from .training import load_bundle
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise UsageError("--variants is empty")
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    paths = _parse_checkpoints(args.checkpoint)
    needed = {}
    for v in variants:
        key = v if v in paths else ABLATION_VARIANTS[v][0]
        if key not in paths:
            raise UsageError(f"no checkpoint for variant {v!r}; pass --checkpoint {key}=PATH")
        needed[key] = paths[key]
    data, out = Path(args.data), Path(args.out)
    load_manifest(data)
    clips = _load_split(data, cfg.eval.split)
    manifest = load_manifest(data)
    names = [c["file"] for c in manifest.split(cfg.eval.split)]
    if cfg.eval.max_clips > 0:
        clips, names = clips[:cfg.eval.max_clips], names[:cfg.eval.max_clips]
    bundles = {k: load_bundle(p) for k, p in needed.items()}
    reports = run_ablation(variants, clips, bundles, schedule_from(cfg.schedule),
                           guidance_options(cfg.guidance), cfg.eval.seed, clip_names=names)
    files = write_reports(reports, out)
    inputs = {f"checkpoint_{k}": p for k, p in needed.items()}
    inputs.update(_dataset_inputs(data))
    write_run_manifest(out, "eval", cfg, {"eval": cfg.eval.seed}, inputs, files,
                       {"variants": variants})
    print(format_table(reports), end="")
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    from .checks import format_results, run_checks
    results = run_checks(quick=args.quick)
    text = format_results(results)
    print(text, end="")
    if args.report:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(text, encoding="utf-8")
        out = report.parent
        write_run_manifest(out, "verify", cfg, {}, {}, [report], {"quick": bool(args.quick)})
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idguide", description="Identity-guided toy video diffusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI config file; omitted keys take defaults")
        return sp

    g = add("generate", "render the synthetic dataset")
    g.add_argument("--seed", type=int, help="overrides data.seed")
    g.add_argument("--out", required=True)

    pt = add("pretrain", "fit the frozen decoder and identity embedder")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)

    t = add("train", "train the denoiser (pretrains first unless --pretrained is given)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="overrides train.epochs")
    t.add_argument("--pretrained", help="checkpoint from the pretrain command")

    s = add("sample", "generate a clip for a reference clip's first frame and pose track")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reference", required=True, help="clip file supplying reference and poses")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--guidance", choices=("on", "off"), default="on")
    s.add_argument("--out", required=True)

    e = add("eval", "score variants on a dataset split")
    e.add_argument("--checkpoint", action="append", required=True, metavar="[KEY=]PATH",
                   help="repeatable; KEY is a variant label or alignment mode (default full)")
    e.add_argument("--data", required=True)
    e.add_argument("--variants", default="full,no-opt",
                   help="comma list from full, no-opt, addition, norm")
    e.add_argument("--out", required=True)

    v = add("verify", "run the numerical self-checks")
    v.add_argument("--report", help="write the key=value table here as well")
    v.add_argument("--quick", action="store_true", help="fewer seeds and Monte Carlo paths")
    return p


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "sample": cmd_sample, "eval": cmd_eval, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
