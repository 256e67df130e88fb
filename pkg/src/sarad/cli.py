"""Command-line entry point: ``sarad <subcommand> [flags]``.

Every flag can also come from a ``--config`` file of ``key = value`` lines
(keys are flag names without the leading dashes); flags given on the command
line win.  All randomness derives from ``--seed``, which is echoed first.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .core import ComplexSlcImage, Domain, SarImage, clip_top_percent, exp_transform, log_transform, merge_cross_pol
from .tensorio import TensorFormatError, load_image, save_image, write_pgm, write_tensor

__all__ = ["RunConfig", "ConfigError", "parse_config_text", "build_parser", "run", "main"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """The fully resolved parameters of one invocation."""

    command: str
    seed: int
    threads: int
    params: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"command = {self.command}", f"seed = {self.seed}", f"threads = {self.threads}"]
        lines += [f"{k.replace('_', '-')} = {v}" for k, v in sorted(self.params.items())]
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key.lstrip("-").replace("-", "_")] = value
    return out


# --- parser ------------------------------------------------------------------


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root random seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 keeps results bit-reproducible")
    p.add_argument("--config", default=None, help="key = value file; command-line flags override it")


def _despeckler_flags(p):
    p.add_argument("--train-scenes", type=int, default=2, help="number of simulated training scenes")
    p.add_argument("--train-size", type=int, default=128, help="side of each training scene")
    p.add_argument("--dates", type=int, default=32, help="acquisitions per training scene")
    p.add_argument("--epochs-a", type=int, default=5, help="phase A epochs")
    p.add_argument("--epochs-b", type=int, default=3, help="phase B epochs")
    p.add_argument("--epochs-c", type=int, default=3, help="phase C epochs")
    p.add_argument("--patches-per-epoch", type=int, default=1600, help="training patches per epoch")
    p.add_argument("--despeckler-patch", type=int, default=32, help="training patch side")
    p.add_argument("--despeckler-batch", type=int, default=16, help="batch size")
    p.add_argument("--despeckler-width", type=int, default=16, help="feature maps per layer")
    p.add_argument("--despeckler-depth", type=int, default=6, help="convolution layers")
    p.add_argument("--despeckler-lr", type=float, default=1e-2, help="initial learning rate (cosine decay)")


def _aae_flags(p):
    p.add_argument("--aae-patch", type=int, default=64, help="patch side")
    p.add_argument("--aae-stride", type=int, default=16, help="patch stride")
    p.add_argument("--aae-batch", type=int, default=32, help="batch size")
    p.add_argument("--aae-epochs", type=int, default=20, help="training epochs")
    p.add_argument("--latent", type=int, default=64, help="latent dimension")
    p.add_argument("--lr-low", type=float, default=1e-4, help="cyclical learning rate minimum")
    p.add_argument("--lr-high", type=float, default=1e-3, help="cyclical learning rate maximum")


def _detect_flags(p):
    p.add_argument("--k", type=int, default=3, help="boxcar semi-kernel; window side 2k+1")
    p.add_argument("--clip", type=float, default=10.0, help="percent of highest scores clipped in renderings")


def _rx_flags(p):
    p.add_argument("--outer", type=int, default=15, help="RX outer window side")
    p.add_argument("--guard", type=int, default=7, help="RX guard window side")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="sarad", description="SAR anomaly detection toolkit",
                                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    subs = {}

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        _common(p)
        subs[name] = p
        return p

    p = add("simulate", "simulate a speckled polarimetric scene")
    p.add_argument("--height", type=int, default=128, help="scene height")
    p.add_argument("--width", type=int, default=128, help="scene width")
    p.add_argument("--channels", type=int, default=4, help="polarimetric channels")
    p.add_argument("--scene", default=None, help="key = value scene description; overrides the random scene")
    p.add_argument("--benchmark", action="store_true", help="simulate the labelled benchmark scene instead")
    p.add_argument("--out", default="scene.sart", help="complex single-look output tensor")
    p.add_argument("--clean-out", default=None, help="optional clean reflectivity output")
    p.add_argument("--labels-out", default=None, help="optional label mask output (benchmark only)")

    p = add("despeckle-train", "train the despeckler on simulated multi-date stacks")
    _despeckler_flags(p)
    p.add_argument("--out", default="despeckler", help="checkpoint directory")

    p = add("despeckle", "despeckle each polarization of an image")
    p.add_argument("--model", required=True, help="despeckler checkpoint directory")
    p.add_argument("--input", required=True, help="complex or intensity image tensor")
    p.add_argument("--out", default="despeckled.sart", help="log-intensity output tensor")

    p = add("aae-train", "train the adversarial autoencoder on one or more images")
    _aae_flags(p)
    p.add_argument("--input", nargs="+", required=True, help="image tensors (complex, intensity or log)")
    p.add_argument("--despeckler", default=None, help="despeckle noisy inputs with this checkpoint first")
    p.add_argument("--out", default="aae", help="checkpoint directory")

    p = add("reconstruct", "reconstruct an image with a trained AAE")
    p.add_argument("--model", required=True, help="AAE checkpoint directory")
    p.add_argument("--input", required=True, help="image tensor (complex, intensity or log)")
    p.add_argument("--despeckler", default=None, help="despeckle noisy input with this checkpoint first")
    p.add_argument("--out", default="reconstruction.sart", help="normalized log output tensor")

    p = add("detect", "covariance-change anomaly map of an image")
    p.add_argument("--despeckler", required=True, help="despeckler checkpoint directory")
    p.add_argument("--aae", required=True, help="AAE checkpoint directory")
    p.add_argument("--input", required=True, help="noisy complex or intensity image tensor")
    p.add_argument("--out", default="anomaly_map.sart", help="anomaly map output tensor")
    p.add_argument("--render", default=None, help="optional clipped PGM rendering")
    _detect_flags(p)

    p = add("rx", "Reed-Xiaoli anomaly map of a complex image")
    p.add_argument("--input", required=True, help="complex single-look image tensor")
    p.add_argument("--out", default="rx_map.sart", help="anomaly map output tensor")
    p.add_argument("--render", default=None, help="optional clipped PGM rendering")
    p.add_argument("--clip", type=float, default=10.0, help="percent of highest scores clipped in renderings")
    _rx_flags(p)

    p = add("evaluate", "compare detectors on benchmark scenes with trained checkpoints")
    p.add_argument("--despeckler", default="despeckler", help="despeckler checkpoint directory")
    p.add_argument("--aae", default="aae", help="AAE checkpoint (despeckled input)")
    p.add_argument("--aae-noisy", default="aae_noisy", help="AAE checkpoint (noisy input)")
    p.add_argument("--scene-size", type=int, default=256, help="benchmark scene side")
    p.add_argument("--out", default="evaluation", help="output directory")
    p.add_argument("--record-runtime", action="store_true", help="fill the runtime column (not reproducible)")
    _detect_flags(p)
    _rx_flags(p)

    p = add("pipeline", "simulate, train every model, and compare detectors end to end")
    _despeckler_flags(p)
    _aae_flags(p)
    p.add_argument("--aae-scenes", type=int, default=4, help="benchmark-style scenes in the AAE dataset")
    p.add_argument("--scene-size", type=int, default=256, help="benchmark scene side")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--record-runtime", action="store_true", help="fill the runtime column (not reproducible)")
    _detect_flags(p)
    _rx_flags(p)
    return parser, subs


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    values = parse_config_text(text)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        if key == "command":
            continue
        if key not in actions:
            raise ConfigError(f"{path}: unknown key {key!r}")
        action = actions[key]
        action.required = False
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _bool(value)
        elif action.nargs == "+":
            defaults[key] = value.split()
        else:
            try:
                defaults[key] = action.type(value) if action.type else value
            except ValueError:
                raise ConfigError(f"{path}: bad value for {key}: {value!r}") from None
    sub.set_defaults(**defaults)


def resolve(argv: list[str]) -> RunConfig:
    parser, subs = build_parser()
    # the config file is read first so that it can also supply required flags
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in subs), None)
    if known.config and command:
        _apply_config(subs[command], known.config)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise SystemExit(2)
    params = {k: v for k, v in vars(args).items() if k not in ("command", "seed", "threads", "config")}
    return RunConfig(args.command, args.seed, args.threads, params)


# --- helpers -----------------------------------------------------------------


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input: {p}")
    return p


def _log_image(path, despeckler=None) -> SarImage:
    """Any image tensor as a 3-channel log intensity (merging cross channels)."""
    from .despeckler import despeckle

    img = load_image(_require(path))
    if isinstance(img, ComplexSlcImage):
        img = img.intensity()
    if img.domain is Domain.LINEAR:
        img = log_transform(img)
    if img.domain is not Domain.LOG:
        raise ValueError(f"{path}: expected a complex, intensity or log image, got {img.domain.name}")
    if despeckler is not None:
        img = despeckle(despeckler, img)
    if img.channels == 4:
        img = log_transform(merge_cross_pol(exp_transform(img)))
    return img


def _load_despeckler(path):
    from .nn import load_model

    if path is None:
        return None
    _require(Path(path) / "manifest.json")
    return load_model(path)


def _load_aae(path):
    from .aae import load_aae

    _require(Path(path) / "aae.json")
    return load_aae(path)


def _aae_config(p: dict, seed: int):
    from .aae import AaeConfig

    return AaeConfig(patch=p["aae_patch"], stride=p["aae_stride"], batch=p["aae_batch"], epochs=p["aae_epochs"],
                     latent=p["latent"], lr_low=p["lr_low"], lr_high=p["lr_high"], seed=seed)


def _despeckler_config(p: dict, seed: int):
    from .despeckler import DespecklerConfig

    return DespecklerConfig(patch=p["despeckler_patch"], stride=p["despeckler_patch"] // 2,
                            batch=p["despeckler_batch"], epochs_a=p["epochs_a"], epochs_b=p["epochs_b"],
                            epochs_c=p["epochs_c"], patches_per_epoch=p["patches_per_epoch"],
                            width=p["despeckler_width"], depth=p["despeckler_depth"], lr=p["despeckler_lr"],
                            seed=seed)


def _write_map(scores: np.ndarray, out, render, clip: float) -> None:
    write_tensor(out, scores)
    if render:
        write_pgm(render, clip_top_percent(scores, clip))


# --- subcommands -------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> str:
    from .eval import benchmark_scene
    from .scenes import random_scene_spec
    from .speckle import load_scene_spec, render_clean, sample_slc
    from .core import make_rng

    p = cfg.params
    labels = None
    if p["benchmark"]:
        scene = benchmark_scene(cfg.seed, p["height"], p["width"], p["channels"])
        slc, clean, labels = scene.noisy, scene.clean, scene.labels
    else:
        if p["scene"]:
            spec = load_scene_spec(_require(p["scene"]))
        else:
            spec = random_scene_spec(cfg.seed, p["height"], p["width"], p["channels"])
        clean = render_clean(spec)
        slc = sample_slc(clean, make_rng(cfg.seed, 0x51))
    save_image(p["out"], slc)
    if p["clean_out"]:
        save_image(p["clean_out"], clean)
    if p["labels_out"]:
        if labels is None:
            raise ValueError("--labels-out needs --benchmark")
        write_tensor(p["labels_out"], labels.astype(np.float64))
    h, w, c = slc.shape
    return f"simulated {h}x{w}x{c} scene -> {p['out']}"


def cmd_despeckle_train(cfg: RunConfig) -> str:
    from .despeckler import train_despeckler, write_loss_log
    from .nn import save_model
    from .scenes import training_stacks

    p = cfg.params
    stacks = training_stacks(cfg.seed, p["train_scenes"], p["train_size"], p["dates"])
    log: list = []
    model = train_despeckler(stacks, _despeckler_config(p, cfg.seed), log)
    save_model(model, p["out"])
    write_loss_log(Path(p["out"]) / "loss.csv", log)
    return f"trained despeckler for {len(log)} batches, final loss {log[-1].loss:.4f} -> {p['out']}"


def cmd_despeckle(cfg: RunConfig) -> str:
    from .despeckler import despeckle

    p = cfg.params
    model = _load_despeckler(p["model"])
    img = load_image(_require(p["input"]))
    if isinstance(img, ComplexSlcImage):
        img = img.intensity()
    if img.domain is Domain.LINEAR:
        img = log_transform(img)
    out = despeckle(model, img)
    save_image(p["out"], out)
    return f"despeckled {out.height}x{out.width}x{out.channels} image -> {p['out']}"


def cmd_aae_train(cfg: RunConfig) -> str:
    from .aae import save_aae, write_epoch_log
    from .pipeline import fit_aae

    p = cfg.params
    despeckler = _load_despeckler(p["despeckler"])
    images = [_log_image(path, despeckler) for path in p["input"]]
    log: list = []
    bundle = fit_aae(images, _aae_config(p, cfg.seed), log)
    save_aae(bundle, p["out"])
    write_epoch_log(Path(p["out"]) / "loss.csv", log)
    return f"trained AAE for {len(log)} epochs, rec loss {log[0].rec_loss:.4f} -> {log[-1].rec_loss:.4f} -> {p['out']}"


def cmd_reconstruct(cfg: RunConfig) -> str:
    from .aae import reconstruct_image
    from .core import minmax_normalize

    p = cfg.params
    bundle = _load_aae(p["model"])
    img = _log_image(p["input"], _load_despeckler(p["despeckler"]))
    x = minmax_normalize(img, bundle.norm_lo, bundle.norm_hi)[0]
    out = reconstruct_image(bundle, x)
    save_image(p["out"], out)
    return f"reconstructed {out.height}x{out.width}x{out.channels} image -> {p['out']}"


def cmd_detect(cfg: RunConfig) -> str:
    from .detect import detect_pipeline

    p = cfg.params
    despeckler = _load_despeckler(p["despeckler"])
    bundle = _load_aae(p["aae"])
    img = load_image(_require(p["input"]))
    if isinstance(img, ComplexSlcImage):
        img = img.intensity()
    amap = detect_pipeline(img, despeckler, bundle, p["k"])
    _write_map(amap.scores, p["out"], p["render"], p["clip"])
    return f"anomaly map {amap.shape[0]}x{amap.shape[1]} -> {p['out']}"


def cmd_rx(cfg: RunConfig) -> str:
    from .detect import normalize_map, rx_map

    p = cfg.params
    img = load_image(_require(p["input"]))
    if not isinstance(img, ComplexSlcImage):
        raise ValueError(f"{p['input']}: RX needs a complex single-look image")
    if img.channels == 4:
        img = merge_cross_pol(img)
    amap = normalize_map(rx_map(img, p["outer"], p["guard"]))
    _write_map(amap.scores, p["out"], p["render"], p["clip"])
    return f"RX map {amap.shape[0]}x{amap.shape[1]} -> {p['out']}"


def cmd_evaluate(cfg: RunConfig) -> str:
    from .eval import benchmark_compare, benchmark_scene, write_results

    p = cfg.params
    despeckler = _load_despeckler(p["despeckler"])
    aae = _load_aae(p["aae"])
    aae_noisy = _load_aae(p["aae_noisy"])
    scene = benchmark_scene(cfg.seed, p["scene_size"], p["scene_size"])
    results = benchmark_compare(scene, despeckler, aae, aae_noisy, p["k"], p["outer"], p["guard"])
    write_results(results, p["out"], p["clip"], p["record_runtime"])
    return "AUC " + ", ".join(f"{r.method}={r.auc:.4f}" for r in results) + f" -> {p['out']}"


def cmd_pipeline(cfg: RunConfig) -> str:
    from .pipeline import PipelineConfig, run_pipeline

    p = cfg.params
    pcfg = PipelineConfig(seed=cfg.seed, train_scenes=p["train_scenes"], train_size=p["train_size"],
                          dates=p["dates"], scene_size=p["scene_size"], aae_scenes=p["aae_scenes"], k=p["k"],
                          rx_outer=p["outer"], rx_guard=p["guard"], clip_percent=p["clip"],
                          despeckler=_despeckler_config(p, cfg.seed), aae=_aae_config(p, cfg.seed))
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    # the output path is left out so identical runs give identical directories
    recorded = {k: v for k, v in p.items() if k != "out"}
    (out / "config.txt").write_text(replace(cfg, params=recorded).to_text())
    results, _, _ = run_pipeline(pcfg, out, say=lambda m: print(m, flush=True), record_runtime=p["record_runtime"])
    return "AUC " + ", ".join(f"{r.method}={r.auc:.4f}" for r in results) + f" -> {out}"


COMMANDS = {
    "simulate": cmd_simulate,
    "despeckle-train": cmd_despeckle_train,
    "despeckle": cmd_despeckle,
    "aae-train": cmd_aae_train,
    "reconstruct": cmd_reconstruct,
    "detect": cmd_detect,
    "rx": cmd_rx,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def run(argv: list[str] | None = None) -> int:
    """Execute one subcommand; returns the process exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg = resolve(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"sarad: config error: {exc}", file=sys.stderr)
        return 2
    print(f"seed: {cfg.seed}", flush=True)
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=cfg.threads):
            summary = COMMANDS[cfg.command](cfg)
    except FileNotFoundError as exc:
        print(f"sarad {cfg.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, TensorFormatError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"sarad {cfg.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.command}: {summary} ({time.perf_counter() - t0:.1f}s)", flush=True)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
