"""Command-line entry point: ``geoscore {gen-data,pretrain,train,eval}``.

Settings come from an optional flat ``key = value`` config file, overridden
by flags. The merged settings are written to ``run_config.txt`` in every
output directory.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from . import evaluation, scoring, synthdata, training
from .datamodel import DatasetManifest, SplitSpec, load_manifest, load_slice
from .errors import ConfigError, GeoScoreError
from .network import NetConfig, init_params

log = logging.getLogger("geoscore")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data
    side: int = 128
    train_count: int = 400
    validation_count: int = 100
    test_normal_count: int = 100
    test_abnormal_count: int = 100
    lesion_kinds: tuple[str, ...] = synthdata.LESION_KINDS
    # network
    filters: tuple[int, ...] = (32, 64, 128, 256)
    latent_dim: int = 128
    geo_pool: str = "avg"
    # training
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epsilon: float = 1.0
    beta_kl: float = 1e-4
    checkpoint_interval: int = 0
    freeze_geo: bool = False
    # scoring
    lam: float = scoring.DEFAULT_LAMBDA
    alpha: float = 1.0
    geo_score: str = "meanprob"
    dsc_quantile: float = scoring.DEFAULT_DSC_QUANTILE

    def phantom(self) -> synthdata.PhantomConfig:
        return synthdata.PhantomConfig(
            side=self.side,
            splits=SplitSpec(self.train_count, self.validation_count, self.test_normal_count, self.test_abnormal_count),
            lesion_kinds=self.lesion_kinds,
            seed=self.seed,
        )

    def net(self, input_size: int) -> NetConfig:
        return NetConfig(
            input_size=input_size, filters=self.filters, latent_dim=self.latent_dim, geo_pool=self.geo_pool
        )

    def train(self, stage: str, input_size: int) -> training.TrainConfig:
        return training.TrainConfig(
            stage=stage, batch_size=self.batch_size, steps=self.steps, lr=self.lr,
            optimizer=self.optimizer, beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            epsilon=self.epsilon, beta_kl=self.beta_kl, seed=self.seed,
            checkpoint_interval=self.checkpoint_interval, input_size=input_size,
            freeze_geo=self.freeze_geo,
        )

    def eval_settings(self) -> evaluation.EvalSettings:
        return evaluation.EvalSettings(self.alpha, self.lam, self.geo_score, self.dsc_quantile)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{'lambda' if f.name == 'lam' else f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_ALIASES = {"lambda": "lam"}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "tuple[str, ...]":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise UsageError(f"invalid value for {key}: {raw!r}") from None


def read_config_file(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key).replace("-", "_")
        if key not in _FIELD_TYPES:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


_FLAG_KEYS = {
    "seed": "seed", "steps": "steps", "epsilon": "epsilon", "beta_kl": "beta_kl",
    "lam": "lam", "alpha": "alpha", "geo_score": "geo_score", "dsc_quantile": "dsc_quantile",
}


def build_run_config(args) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    if getattr(args, "freeze_geo", False):
        values["freeze_geo"] = True
    cfg = RunConfig(**values)
    # validate every consumed section before any side effect
    cfg.phantom()
    cfg.net(cfg.side)
    cfg.train("pretrain", cfg.side)
    cfg.eval_settings()
    return cfg


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.tsv" if p.is_dir() else p


def _write_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(cfg.dump(), encoding="utf-8")


def _input_size(manifest: DatasetManifest) -> int:
    entries = manifest.split("train") or list(manifest)
    return load_slice(entries[0].image_path).side


def cmd_gen_data(args) -> int:
    cfg = build_run_config(args)
    out = Path(args.out)
    manifest = synthdata.emit_dataset(cfg.phantom(), out)
    _write_config(out, cfg)
    counts = manifest.counts()
    abnormal = sum(e.label == "abnormal" for e in manifest)
    print(
        f"wrote {len(manifest)} slices to {out}: train {counts['train']}, "
        f"validation {counts['validation']}, test {counts['test']} ({abnormal} abnormal)"
    )
    return EXIT_OK


def _train_stage(args, stage: str) -> int:
    cfg = build_run_config(args)
    manifest = load_manifest(_manifest_path(args.data))
    size = _input_size(manifest)
    tcfg = cfg.train(stage, size)
    out = Path(args.out)
    ckpt_path = out / "model.ckpt"
    start, opt_state = 0, None
    if args.resume:
        ck = training.load_checkpoint(args.resume, expect=cfg.net(size))
        model, start, opt_state = ck.model, ck.step, ck.optimizer
        if ck.train_config.get("stage") not in (None, stage):
            raise ConfigError(f"cannot resume a {ck.train_config.get('stage')} checkpoint with {stage}")
    elif getattr(args, "init", None):
        model = training.load_checkpoint(args.init, expect=cfg.net(size)).model
    else:
        model = init_params(cfg.seed, cfg.net(size))
    _write_config(out, cfg)
    model, trainlog, opt_state = training.train(
        model, manifest, tcfg, start_step=start, opt_state=opt_state, checkpoint_path=ckpt_path
    )
    training.save_checkpoint(ckpt_path, model, opt_state, tcfg, tcfg.steps)
    trainlog.write(out / "train_log.tsv", append=bool(args.resume))
    last = trainlog[-1].losses.l_total if trainlog else float("nan")
    print(f"{stage}: steps {start}..{tcfg.steps}, final loss {last:.6f}, checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_stage(args, "pretrain")


def cmd_train(args) -> int:
    if args.init and args.from_scratch:
        raise UsageError("--init and --from-scratch are mutually exclusive")
    if not (args.init or args.from_scratch or args.resume):
        raise UsageError("train needs --init CKPT, --from-scratch or --resume CKPT")
    return _train_stage(args, "multitask")


def _parse_checkpoint_arg(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    if not sep:
        return Path(spec).parent.name or Path(spec).stem, Path(spec)
    return name, Path(path)


def cmd_eval(args) -> int:
    cfg = build_run_config(args)
    specs = [_parse_checkpoint_arg(s) for s in (args.checkpoint or [])]
    if args.init:
        specs.insert(0, _parse_checkpoint_arg(args.init))
    if not specs:
        raise UsageError("eval needs at least one --checkpoint")
    for _, path in specs:
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
    manifest = load_manifest(_manifest_path(args.data))
    out = Path(args.out)
    _write_config(out, cfg)
    results = []
    for name, path in specs:
        model = training.load_checkpoint(path).model
        result = evaluation.evaluate(model, manifest, cfg.eval_settings(), name=name)
        scoring.write_scores(result.records, out / f"scores_{name}.tsv")
        results.append(result)
    report = evaluation.format_report(results)
    (out / "report.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--beta-kl", dest="beta_kl", type=float)
    p.add_argument("--resume", help="continue from this checkpoint's step counter")


def _scoring_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--geo-score", dest="geo_score", choices=scoring.GEO_SCORE_MODES)
    p.add_argument("--dsc-quantile", dest="dsc_quantile", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoscore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="context-restoration pretraining")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="multi-task fine-tuning")
    _common(p)
    _training_flags(p)
    p.add_argument("--init", help="start from this checkpoint (usually a pretraining one)")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--freeze-geo", action="store_true", help="reconstruction-only ablation")
    _scoring_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score, calibrate and report AUROC/AUPR/DSC")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH", help="repeat to compare models")
    p.add_argument("--init", metavar="[NAME=]PATH", help="alias for a single --checkpoint")
    _scoring_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    threads = os.environ.get("GEOSCORE_THREADS", "1")
    try:
        torch.set_num_threads(max(1, int(threads)))
    except ValueError:
        print(f"error: GEOSCORE_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GeoScoreError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
