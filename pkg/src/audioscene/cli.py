"""Command-line entry point: ``audioscene <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .audio import FEATURE_KINDS, AudioFormatError, FeatureConfig, read_wav, write_embedding_sequence
from .data import (
    BUILTIN_SPECS,
    ManifestError,
    SynthSpec,
    clean,
    example_condition,
    load_arrays,
    load_class_counts,
    read_manifest,
    save_image,
    synthesize_dataset,
    write_manifest,
)
from .evaluation import (
    ClassifierConfig,
    EvalClassifier,
    GateError,
    generate_batched,
    inception_score,
    save_grid,
    train_eval_classifier,
    volume_probe,
)
from .losses import PRESETS
from .runs import ConfigError, dump_config, eval_noise, load_config, run_training, score_generator
from .training import GeneratorBundle, TrainingDiverged

logger = logging.getLogger("audioscene")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _features_from_ckpt(bundle: GeneratorBundle) -> tuple[FeatureConfig, str | None]:
    extra = bundle.meta.get("extra", {})
    cfg = FeatureConfig(**extra["features"]) if "features" in extra else FeatureConfig()
    return cfg, extra.get("features_dir") or None


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- commands ------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    spec = BUILTIN_SPECS[args.spec]()
    if args.coupling is not None or args.label_noise is not None:
        spec = SynthSpec(**{**asdict(spec),
                            **({"coupling": args.coupling} if args.coupling is not None else {}),
                            **({"label_noise": args.label_noise} if args.label_noise is not None else {})})
    try:
        m = synthesize_dataset(spec, args.out, args.seed)
    except OSError as exc:
        raise RuntimeError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"manifest: {Path(args.out) / 'manifest' / 'manifest.ndjson'}")
    for split in ("train", "test"):
        counts = load_class_counts(m.split(split))
        print(f"{split}: " + ", ".join(f"{k}={v}" for k, v in counts.items()) + f" (total {sum(counts.values())})")
    return EXIT_OK


def cmd_clean(args) -> int:
    m = read_manifest(_need_file(args.manifest, "manifest"))
    kept, report = clean(m)
    out = Path(args.out)
    path = out if out.suffix == ".ndjson" else out / "manifest.ndjson"
    # the cleaned manifest points at the same files as the original
    rel = lambda p: os.path.relpath(m.resolve(p), path.parent.resolve())
    kept = replace(kept, examples=[replace(e, audio_path=rel(e.audio_path), image_path=rel(e.image_path))
                                   for e in kept.examples], root=path.parent)
    write_manifest(kept, path)
    print(report.summary())
    print(f"manifest: {path}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    m = read_manifest(_need_file(args.manifest, "manifest"))
    cfg = FeatureConfig(kind=args.kind, n_mels=args.n_mels, n_ceps=args.n_ceps)
    if args.kind == "embedding" and not args.features_dir:
        raise UsageError("--kind embedding reads precomputed sequences; pass --features-dir")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for e in m.examples:
        try:
            vec = example_condition(m, e, cfg, args.features_dir)
        except (AudioFormatError, OSError, ValueError) as exc:
            failures.append(f"{e.id}: {exc}")
            continue
        write_embedding_sequence(out / f"{e.id}.sne", vec[None])
    (out / "features.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(m) - len(failures)} condition files ({cfg.kind}, d={cfg.dim}) to {out}")
    if failures:
        print(f"{len(failures)} examples failed to decode:", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _train_overrides(args) -> dict[str, dict[str, str]]:
    ov: dict[str, dict[str, str]] = {}

    def put(section, key, value):
        if value is not None:
            ov.setdefault(section, {})[key] = str(value)

    put("loss", "preset", args.loss_preset)
    put("train", "seed", args.seed)
    put("train", "iterations", args.iters)
    put("data", "manifest", args.manifest)
    put("run", "out", args.out)
    put("run", "clf", args.clf)
    put("run", "run_id", args.run_id)
    return ov


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args), need_manifest=not args.print_config)
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    result = run_training(cfg)
    print(f"run directory: {result.run_dir}")
    print((result.run_dir / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _test_arrays(bundle: GeneratorBundle, manifest_path, split: str):
    feat, features_dir = _features_from_ckpt(bundle)
    m = read_manifest(_need_file(manifest_path, "manifest"))
    arr = load_arrays(m.split(split), feat, bundle.model_cfg.image_size, features_dir)
    return m, arr


def cmd_generate(args) -> int:
    bundle = GeneratorBundle.load(_need_file(args.ckpt, "checkpoint"))
    m, arr = _test_arrays(bundle, args.manifest, args.split)
    z = eval_noise(len(arr), bundle.model_cfg.noise_dim, args.seed)
    images = generate_batched(bundle.generate, arr.conditions, z)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ex_id, img in zip(arr.ids, images):
        save_image(out / f"{ex_id}.png", img)
    save_grid(out, "generate", int(bundle.meta.get("iteration", 0)), images[None, :8])
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    clf = EvalClassifier.load(_need_file(args.clf, "classifier"))
    if args.ckpt:
        bundle = GeneratorBundle.load(_need_file(args.ckpt, "checkpoint"))
        m, arr = _test_arrays(bundle, args.manifest, args.split)
        scores = score_generator(bundle.generate, arr, clf, bundle.model_cfg.noise_dim, args.seed, m.classes)
        record = {"conditional_accuracy": scores["conditional_accuracy"],
                  "inception": json.loads(scores["inception"].to_record())}
    else:
        # no generator: score the real images of the split
        m = read_manifest(_need_file(args.manifest, "manifest"))
        arr = load_arrays(m.split(args.split), FeatureConfig(), clf.cfg.image_size, with_conditions=False)
        rep = inception_score(arr.images, clf, seed=args.seed, labels=arr.image_labels, class_names=m.classes)
        acc = float(np.mean(clf.predict(arr.images) == arr.image_labels))
        record = {"classifier_accuracy": acc, "inception": json.loads(rep.to_record())}
    text = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _audio_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.wav"))
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"audio not found: {p}")
    if not paths:
        raise UsageError("no .wav files given")
    return paths


def _factors(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--factors must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise UsageError("--factors must be positive")
    return vals


def cmd_volume_probe(args) -> int:
    factors = _factors(args.factors)
    paths = _audio_paths(args.audio)
    bundle = GeneratorBundle.load(_need_file(args.ckpt, "checkpoint"))
    feat, _ = _features_from_ckpt(bundle)
    if feat.kind == "embedding":
        raise UsageError("the volume probe recomputes features from audio; embedding checkpoints are not supported")
    waves = [read_wav(p) for p in paths]
    z = eval_noise(len(waves), bundle.model_cfg.noise_dim, args.seed)
    res = volume_probe(bundle.generate, waves, feat, z, factors)
    out = Path(args.out)
    save_grid(out, "probe", int(bundle.meta.get("iteration", 0)), res.images)
    summary = res.summary() | {"sounds": [p.name for p in paths], "areas": res.areas.astype(int).tolist()}
    (out / "probe.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    for f, a in zip(res.factors, res.median_areas):
        print(f"factor {f:g}: median area {a:g}")
    print(f"non-decreasing: {res.is_non_decreasing()}")
    return EXIT_OK


def cmd_train_clf(args) -> int:
    m = read_manifest(_need_file(args.manifest, "manifest"))
    train, test = m.split("train"), m.split("test")
    if not len(test):
        raise UsageError("the manifest has no test split to gate the classifier on")
    fc = FeatureConfig()
    tr = load_arrays(train, fc, args.image_size, with_conditions=False)
    te = load_arrays(test, fc, args.image_size, with_conditions=False)
    cfg = ClassifierConfig(n_classes=m.n_classes, image_size=args.image_size, epochs=args.epochs, seed=args.seed)
    clf = train_eval_classifier(tr.images, tr.image_labels, te.images, te.image_labels, cfg, gate=args.gate)
    clf.save(args.out)
    print(f"held-out accuracy {clf.held_out_accuracy:.4f}, hash {clf.version_hash}, saved to {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="audioscene", description="Sound-conditioned image generation with a conditional GAN.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic paired dataset")
    s.add_argument("--spec", choices=sorted(BUILTIN_SPECS), default="table1")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coupling", type=float, help="volume-to-size coupling (default from the spec)")
    s.add_argument("--label-noise", type=float, help="probability that the image label differs")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("clean", help="drop pairs whose sound and image labels disagree")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory or .ndjson path")
    s.set_defaults(func=cmd_clean)

    s = sub.add_parser("extract-features", help="write one condition vector per example")
    s.add_argument("--manifest", required=True)
    s.add_argument("--kind", choices=FEATURE_KINDS, default="fbank")
    s.add_argument("--out", required=True)
    s.add_argument("--features-dir", help="precomputed <id>.sne sequences (required for embedding)")
    s.add_argument("--n-mels", type=int, default=40)
    s.add_argument("--n-ceps", type=int, default=13)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train", help="train a generator/discriminator pair")
    s.add_argument("--config", help="run configuration file")
    s.add_argument("--loss-preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int)
    s.add_argument("--iters", type=int, help="stop after this many iterations")
    s.add_argument("--manifest")
    s.add_argument("--out", help="parent directory of the run directory")
    s.add_argument("--run-id")
    s.add_argument("--clf", help="evaluation classifier for the final report")
    s.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="generate images for a manifest split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="Inception score and conditional accuracy")
    s.add_argument("--ckpt", help="generator checkpoint; omit to score the real images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--clf", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the JSON record here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("volume-probe", help="generate from sounds at scaled loudness")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--audio", required=True, nargs="+", help=".wav files or directories of them")
    s.add_argument("--factors", default="0.5,1,2,3")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_volume_probe)

    s = sub.add_parser("train-clf", help="train and gate the evaluation classifier")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="classifier checkpoint path")
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--epochs", type=int, default=8)
    s.add_argument("--gate", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_clf)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GateError, TrainingDiverged, checkpoint.CheckpointError, ManifestError, AudioFormatError,
            FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
