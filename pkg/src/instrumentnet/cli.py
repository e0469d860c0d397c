"""Command-line driver: ``instrumentnet <command> [flags]``.

Every command resolves its settings from defaults, an optional flat
``key = value`` file (``--config``) and the flags, in that order of
precedence, and writes the resolved settings to ``run_config.txt`` in the
output directory. Failures print one JSON line to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import dsp
from . import evaluate as E
from . import network as N
from . import trainer as T
from .aggregate import decide, format_prediction_line, normalize_strategy, predict_excerpt, window_offsets
from .dataset import SynthSpec, scan_testing, scan_training, synth_corpus
from .kernels import ActivationKind

log = logging.getLogger("instrumentnet")

COMMANDS = ("preprocess", "synth", "train", "predict", "evaluate", "sweep", "dump-activations")
# the activation settings compared in the experiments
ACTIVATION_GRID = ("tanh", "relu", "prelu", "lrelu(0.01)", "lrelu(0.33)")
SEED_ENV = "INSTRUMENTNET_SEED"
SNAPSHOT = "run_config.txt"


@dataclass
class RunConfig:
    command: str = "train"
    dataset: str = ""
    model: str = ""
    out: str = "."
    excerpt: str = ""
    window_seconds: float = 1.0
    activation: str = "lrelu"
    lrelu_alpha: float = 0.33
    strategy: str = "S2"
    theta: float = 0.5
    seed: int = 0
    runs: int = 1
    threads: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 128
    validation_fraction: float = 0.15
    patience: int = 2
    max_epochs: int = 100
    loss: str = "binary"
    grid: str = "theta"
    classes: int = 6
    per_class: int = 60
    test_excerpts: int = 60

    def activation_kind(self) -> ActivationKind:
        if self.activation in ("lrelu", "prelu"):
            return ActivationKind.parse(self.activation, self.lrelu_alpha if self.activation == "lrelu" else None)
        return ActivationKind.parse(self.activation)

    def training_config(self, seed: int | None = None, activation: ActivationKind | None = None) -> T.TrainingConfig:
        return T.TrainingConfig(window_seconds=self.window_seconds, learning_rate=self.learning_rate,
                                batch_size=self.batch_size, validation_fraction=self.validation_fraction,
                                patience_epochs=self.patience, max_epochs=self.max_epochs,
                                seed=self.seed if seed is None else seed,
                                activation=activation or self.activation_kind(), loss=self.loss,
                                threads=self.threads)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        self.strategy = normalize_strategy(self.strategy)
        self.activation_kind()
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.runs < 1 or self.threads < 1:
            raise ValueError("runs and threads must be at least 1")
        if self.grid not in ("theta", "activation"):
            raise ValueError("grid must be 'theta' or 'activation'")
        return self


def default_config() -> RunConfig:
    """The default experiment: lrelu(0.33), 1.0 s window, S2 aggregation, theta 0.50."""
    return RunConfig()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, text: str):
    kind = type(getattr(RunConfig(), name))
    return kind(text) if kind is not str else text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may use dashes."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in _FIELDS:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def write_snapshot(config: RunConfig, out_dir) -> Path:
    """Resolved settings plus format versions, in the same format ``--config`` reads."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# instrumentnet {__version__}; model format {N.MODEL_VERSION}; mel cache format {dsp.MELS_VERSION}"]
    lines += [f"{k} = {v}" for k, v in asdict(config).items()]
    path = out_dir / SNAPSHOT
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="instrumentnet", description="Predominant instrument recognition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--dataset", help="corpus root (train/ and test/ below it) or a split directory")
    p.add_argument("--model", help="model file to read")
    p.add_argument("--out", help="output directory (synth: corpus root)")
    p.add_argument("--excerpt", help="WAV file for dump-activations")
    p.add_argument("--window-seconds", type=float, choices=T.WINDOW_CHOICES)
    p.add_argument("--activation", choices=ActivationKind.KINDS)
    p.add_argument("--lrelu-alpha", type=float)
    p.add_argument("--strategy", type=str.upper, choices=("S1", "S2"))
    p.add_argument("--theta", type=float)
    p.add_argument("--seed", type=int, help=f"default: ${SEED_ENV}, else 0")
    p.add_argument("--runs", type=int, help="evaluate: train and score this many independently seeded models")
    p.add_argument("--threads", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--loss", choices=T.LOSSES)
    p.add_argument("--grid", choices=("theta", "activation"), help="sweep: thresholds or activations")
    p.add_argument("--classes", type=int, help="synth: number of instrument classes")
    p.add_argument("--per-class", type=int, help="synth: training excerpts per class")
    p.add_argument("--test-excerpts", type=int, help="synth: number of test excerpts")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values = {}
    if environ.get(SEED_ENV):
        values["seed"] = int(environ[SEED_ENV])
    if args.config:
        values.update(read_config_file(args.config))
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    values["command"] = args.command
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# commands


def _split_dir(root: str, name: str) -> Path:
    if not root:
        raise ValueError("--dataset is required")
    path = Path(root)
    return path / name if (path / name).is_dir() else path


def _need_model(cfg: RunConfig) -> N.Model:
    if not cfg.model:
        raise ValueError("--model is required")
    return N.load_model(cfg.model)


def cmd_preprocess(cfg: RunConfig) -> dict:
    if not cfg.dataset:
        raise ValueError("--dataset is required")
    src, out = Path(cfg.dataset), Path(cfg.out)
    wavs = [src] if src.is_file() else sorted(src.rglob("*.wav"))
    if not wavs:
        raise ValueError(f"no WAV files under {src}")
    for wav in wavs:
        target = out / (wav.relative_to(src).with_suffix(".mels") if src.is_dir() else wav.with_suffix(".mels").name)
        target.parent.mkdir(parents=True, exist_ok=True)
        dsp.save_mel(dsp.preprocess(wav), target)
    return {"files": len(wavs)}


def cmd_synth(cfg: RunConfig) -> dict:
    spec = SynthSpec(n_classes=cfg.classes, train_per_class=cfg.per_class, n_test=cfg.test_excerpts, seed=cfg.seed)
    synth_corpus(cfg.out, spec)
    return {"classes": cfg.classes, "train": cfg.classes * cfg.per_class, "test": cfg.test_excerpts}


def _train(cfg: RunConfig, out: Path, seed: int | None = None, activation: ActivationKind | None = None):
    manifest = scan_training(_split_dir(cfg.dataset, "train"))
    tcfg = cfg.training_config(seed, activation)
    x, y = T.load_training_chunks(manifest, tcfg.window_seconds)
    model, report = T.train(x, y, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    N.save_model(model, out / "model.icnn")
    report.save_json(out / "train_report.json")
    (out / "train_log.txt").write_text("\n".join(report.log_lines()) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_time": report.wall_time}) + "\n")
    return model, report


def cmd_train(cfg: RunConfig) -> dict:
    _, report = _train(cfg, Path(cfg.out))
    return {"model": str(Path(cfg.out) / "model.icnn"), "best_epoch": report.best_epoch,
            "stopped_epoch": report.stopped_epoch}


def cmd_predict(cfg: RunConfig) -> dict:
    model = _need_model(cfg)
    if not cfg.dataset:
        raise ValueError("--dataset is required")
    src = Path(cfg.dataset)
    wavs = [src] if src.is_file() else sorted(src.rglob("*.wav"))
    lines = []
    for wav in wavs:
        result = decide(predict_excerpt(model, dsp.preprocess(wav)), cfg.strategy, cfg.theta)
        lines.append(format_prediction_line(str(wav), result))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "predictions.tsv").write_text("".join(ln + "\n" for ln in lines))
    return {"excerpts": len(lines)}


def cmd_evaluate(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    testset = scan_testing(_split_dir(cfg.dataset, "test"))
    if cfg.runs == 1:
        report = E.evaluate_testset(_need_model(cfg), list(testset), cfg.strategy, cfg.theta)
        E.write_report(report, out)
        return {"micro_f1": report.micro[2], "macro_f1": report.macro[2]}

    def run_once(k: int, seed: int) -> E.EvalReport:
        model, _ = _train(cfg, out / f"run_{k + 1}", seed=seed)
        report = E.evaluate_testset(model, list(testset), cfg.strategy, cfg.theta)
        E.write_report(report, out / f"run_{k + 1}")
        return report

    reports, stats = E.repeat_runs(run_once, cfg.seed, cfg.runs)
    summary = {"runs": cfg.runs, "seeds": E.derive_seeds(cfg.seed, cfg.runs), "statistics": stats}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"micro_f1_mean": stats["micro_f1"]["mean"], "macro_f1_mean": stats["macro_f1"]["mean"]}


def cmd_sweep(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    testset = list(scan_testing(_split_dir(cfg.dataset, "test")))
    if cfg.grid == "theta":
        reports = E.sweep(_need_model(cfg), testset, cfg.strategy)
        (out / f"sweep_{cfg.strategy.lower()}.csv").write_text(E.sweep_csv(reports))
        return {"rows": len(reports)}
    rows = ["activation,microP,microR,microF1,macroP,macroR,macroF1"]
    for setting in ACTIVATION_GRID:
        act = ActivationKind.parse(setting)
        stem = str(act).replace("(", "_").replace(")", "")
        model, _ = _train(cfg, out / stem, activation=act)
        report = E.evaluate_testset(model, testset, cfg.strategy, cfg.theta)
        E.write_report(report, out, f"report_{stem}")
        rows.append(",".join([str(act), *(f"{v:.6f}" for v in (*report.micro, *report.macro))]))
    (out / "sweep_activation.csv").write_text("\n".join(rows) + "\n")
    return {"rows": len(rows) - 1}


def cmd_dump_activations(cfg: RunConfig) -> dict:
    model = _need_model(cfg)
    if not cfg.excerpt:
        raise ValueError("--excerpt is required")
    mel = dsp.preprocess(cfg.excerpt)
    frames = model.spec.input_frames
    offsets = window_offsets(mel.frame_count, frames)
    taps = [N.activations(model, mel.values[o:o + frames]) for o in offsets]
    arrays = {name: np.stack([t[name] for t in taps]) for name in taps[0]}
    arrays["offsets"] = np.asarray(offsets)
    arrays["output"] = N.forward(model, np.stack([mel.values[o:o + frames] for o in offsets]))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "activations.npz", **arrays)
    return {"windows": len(offsets), "blocks": sorted(taps[0])}


HANDLERS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "dump-activations": cmd_dump_activations,
}


def run(config: RunConfig) -> dict:
    config.validate()
    result = HANDLERS[config.command](config)
    write_snapshot(config, config.out)
    return result


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = run(resolve_config(args))
    except KeyboardInterrupt:
        print(json.dumps({"error": "Interrupted", "message": "interrupted"}), file=sys.stderr)
        return 130
    except Exception as exc:  # every failure becomes one parsable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
