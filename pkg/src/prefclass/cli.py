"""Command-line entry point: ``prefclass {gen,train,verify,sweep,report}``.

Every artifact-producing command writes ``manifest.json`` into its output
directory with the normalized config, its SHA-256, the seed, the RNG algorithm
and a version string, which is enough to repeat the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checks, collapse
from .data import RNG_ALGORITHM, generate_dataset, latent_rewards, read_jsonl, write_jsonl
from .errors import ConfigError, NumericalFailure, RecordParseError
from .model import ModelPair, PolicyModel, PromptSpace
from .train import TrainConfig, collapse_metrics, train

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST = "manifest.json"


# configuration ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    prompts: int = 10
    k: int = 4
    pairs_per_prompt: int = 3
    variant: str = "pair"
    list_size: int = 3
    score_noise: float = 0.5
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.prompts < 1 or self.k < 2:
            raise ConfigError("generator needs prompts >= 1 and k >= 2")
        if self.variant not in ("pair", "list", "scored_pair"):
            raise ConfigError(f"unknown record variant {self.variant!r}")
        if self.pairs_per_prompt < 1:
            raise ConfigError("pairs_per_prompt must be positive")
        if self.variant != "list" and self.pairs_per_prompt > self.k * (self.k - 1) // 2:
            raise ConfigError(f"pairs_per_prompt={self.pairs_per_prompt} exceeds the "
                              f"{self.k * (self.k - 1) // 2} distinct pairs for k={self.k}")
        if self.variant == "list" and not 2 <= self.list_size <= self.k:
            raise ConfigError(f"list_size must lie in [2, {self.k}]")


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    kind: str = "tabular"
    dim: int = 4
    init_scale: float = 1.0
    path: str | None = None  # a saved reference model overrides random init

    def __post_init__(self):
        if self.kind not in ("tabular", "linear"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.dim < 1 or not self.init_scale >= 0:
            raise ConfigError("model needs dim >= 1 and init_scale >= 0")


@dataclasses.dataclass(frozen=True)
class SweepSpec:
    k: int = collapse.DEFAULT_K
    gamma: float = collapse.DEFAULT_GAMMA
    beta: float = collapse.DEFAULT_BETA
    learning_rate: float = collapse.DEFAULT_LR
    steps: int = collapse.DEFAULT_STEPS
    samples: int = collapse.DEFAULT_SAMPLES
    num_prompts: int | None = None
    seeds: tuple = (0, 1, 2)
    variants: tuple = collapse.SWEEP_VARIANTS
    lambdas: tuple = collapse.SWEEP_LAMBDAS

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        bad = set(self.variants) - set(collapse.SWEEP_VARIANTS)
        if bad:
            raise ConfigError(f"unknown sweep variants {sorted(bad)}")
        if self.k < 3 or self.steps < 1 or self.samples < 1 or not self.seeds:
            raise ConfigError("sweep needs k >= 3, steps >= 1, samples >= 1 and some seeds")

    def settings(self):
        return collapse.ExperimentSettings(self.k, self.gamma, self.beta, self.learning_rate,
                                           self.steps, self.samples, self.num_prompts)


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    dataset: str | None = None
    generator: GeneratorSpec | None = None
    model: ModelSpec = ModelSpec()
    train: TrainConfig | None = None
    sweep: SweepSpec | None = None
    base_dir: Path = Path(".")  # directory relative paths are resolved against

    @classmethod
    def from_dict(cls, data, base_dir=Path(".")):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"seed", "out", "dataset", "generator", "model", "train", "sweep"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        train_data = data.get("train")
        if train_data is not None:
            train_data = dict(train_data)
            if "seed" in train_data:
                raise ConfigError("set the seed at the top level of the config")
            if train_data.get("early_stop") is not None:
                train_data["early_stop"] = tuple(train_data["early_stop"])
        return cls(
            seed=seed,
            out=data.get("out"),
            dataset=data.get("dataset"),
            generator=_build(GeneratorSpec, data["generator"], "generator")
            if "generator" in data else None,
            model=_build(ModelSpec, data.get("model"), "model"),
            train=_build(TrainConfig, train_data, "train") if train_data is not None else None,
            sweep=_build(SweepSpec, data["sweep"], "sweep") if "sweep" in data else None,
            base_dir=Path(base_dir),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data, path.parent)

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self):
        out = {"seed": self.seed}
        if self.dataset is not None:
            out["dataset"] = self.dataset
        for name in ("generator", "model", "sweep"):
            value = getattr(self, name)
            if value is not None:
                out[name] = dataclasses.asdict(value)
        if self.train is not None:
            t = self.train.to_dict()
            t.pop("seed")
            out["train"] = t
        return out


def config_hash(config_dict):
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def version_string():
    """``git describe``-style string: ``v<version>-g<commit>[-dirty]`` or ``v<version>``."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--abbrev=7",
                              "--match", "v[0-9]*"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5, check=True)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    described = out.stdout.strip()
    if not described:
        return f"v{__version__}"
    return described if described.startswith("v") else f"v{__version__}-g{described}"


def _write_manifest(out_dir, command, config, files, wall_time=None):
    cfg = config.to_dict()
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": config.seed,
        "rng": RNG_ALGORITHM,
        "version": version_string(),
        "files": sorted(files),
    }
    if wall_time is not None:
        manifest["wall_time_s"] = round(wall_time, 6)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    return manifest


def _out_dir(args, config, default=None):
    target = args.out or (str(config.resolve(config.out)) if config.out else default)
    if target is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    path = Path(target)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    return path


def _load_config(args):
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


# commands ----------------------------------------------------------------------

def _generate(spec, seed):
    rng = np.random.default_rng(seed)
    r_star = latent_rewards(spec.prompts, spec.k, rng, spec.reward_scale)
    records = generate_dataset(r_star, spec.pairs_per_prompt, rng, spec.variant,
                               spec.list_size, spec.score_noise)
    return r_star, records


def cmd_gen(args):
    config = _load_config(args)
    spec = config.generator or GeneratorSpec()
    config = dataclasses.replace(config, generator=spec)
    out = _out_dir(args, config)
    r_star, records = _generate(spec, config.seed)
    write_jsonl(records, out / "data.jsonl")
    (out / "rewards.json").write_text(json.dumps({"r_star": r_star.tolist()}) + "\n",
                                      encoding="utf-8")
    # no wall time here so that repeated runs give byte-identical outputs
    _write_manifest(out, "gen", config, ["data.jsonl", "rewards.json"])
    print(f"wrote {len(records)} records to {out / 'data.jsonl'}")
    return EXIT_OK


def _reference_model(config, space):
    spec = config.model
    if spec.path is not None:
        ref = PolicyModel.load(config.resolve(spec.path))
        if ref.space != space:
            raise ConfigError(f"reference model space {ref.space} does not match data {space}")
        return ref
    rng = np.random.default_rng([config.seed, 0])
    if spec.kind == "tabular":
        return PolicyModel.tabular(spec.init_scale * rng.standard_normal((space.num_prompts,
                                                                          space.k)))
    feats = rng.standard_normal((space.num_prompts, space.k, spec.dim))
    return PolicyModel.linear(feats, spec.init_scale * rng.standard_normal(spec.dim))


def _infer_space(records):
    prompts = max(r.prompt for r in records) + 1
    k = max(max(r.responses) for r in records) + 1
    return PromptSpace(prompts, max(k, 2))


def cmd_train(args):
    config = _load_config(args)
    if config.train is None:
        raise ConfigError("config needs a 'train' section")
    tc = dataclasses.replace(config.train, seed=config.seed)
    if config.dataset is not None:
        records = read_jsonl(config.resolve(config.dataset))
        space = (PromptSpace(config.generator.prompts, config.generator.k)
                 if config.generator else None)
    elif config.generator is not None:
        _, records = _generate(config.generator, config.seed)
        space = PromptSpace(config.generator.prompts, config.generator.k)
    else:
        raise ConfigError("config needs a 'dataset' path or a 'generator' spec")
    if not records:
        raise ConfigError("dataset is empty")
    if config.model.path is not None:
        space = PolicyModel.load(config.resolve(config.model.path)).space
    space = space or _infer_space(records)
    out = _out_dir(args, config)
    ref = _reference_model(config, space)
    pair = ModelPair.from_reference(ref)
    start = time.perf_counter()
    files = ["metrics.csv", "model.json", "ref.json", "summary.json"]
    try:
        report = train(pair, records, tc)
    except NumericalFailure as exc:
        if exc.report is not None:
            exc.report.write_csv(out / "metrics.csv")
        _write_manifest(out, "train", config, ["metrics.csv"], time.perf_counter() - start)
        raise
    wall = time.perf_counter() - start
    report.write_csv(out / "metrics.csv")
    pair.theta.save(out / "model.json")
    ref.save(out / "ref.json")
    summary = _train_summary(report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "train", config, files, wall)
    print(f"trained {tc.loss} for {report.rows[-1].step} steps; final loss "
          f"{report.rows[-1].loss:.6g}; collapse={summary['collapsed']}")
    return EXIT_OK


def _train_summary(report):
    s = collapse_metrics(report)
    last = report.rows[-1]
    return {
        "final_step": last.step, "final_loss": last.loss, "mean_residual": last.mean_residual,
        "collapsed": s.collapsed, "best_step": report.best_step,
        "stopped_early": report.stopped_early,
        "min_winner_ratio": s.min_winner_ratio.tolist(),
        "final_winner_ratio": s.final_winner_ratio.tolist(),
        "final_loser_ratio": s.final_loser_ratio.tolist(),
    }


def cmd_verify(args):
    names = args.check or None
    try:
        results = checks.run_checks(names)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    text = json.dumps(results, indent=2, default=float)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if all(r["status"] == "pass" for r in results) else EXIT_CHECK_FAILED


def cmd_sweep(args):
    config = _load_config(args)
    spec = config.sweep or SweepSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    config = dataclasses.replace(config, sweep=spec)
    out = _out_dir(args, config)
    start = time.perf_counter()
    results = collapse.run_sweep(spec.settings(), spec.seeds, spec.variants, spec.lambdas,
                                 jobs=args.jobs)
    collapse.write_sweep_csv(results, out / "sweep.csv")
    _write_manifest(out, "sweep", config, ["sweep.csv"], time.perf_counter() - start)
    for seed in spec.seeds:
        best = collapse.best_constrained(results, seed)
        label = (f"{best.variant} lam={best.lam:g} win_rate_vs_dpo={best.win_rate_vs_dpo:.4f}"
                 if best else "no constrained run avoided collapse")
        print(f"seed {seed}: {label}")
    return EXIT_OK


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args):
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / MANIFEST
    if not manifest_path.is_file():
        raise ConfigError(f"no manifest found in {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    command = manifest.get("command")
    lines = [f"run: {command}  version: {manifest.get('version')}  seed: {manifest.get('seed')}",
             f"config_hash: {manifest.get('config_hash')}"]
    if command == "train":
        lines += _report_train(run_dir, out)
    elif command == "sweep":
        lines += _report_sweep(run_dir, out)
    elif command == "gen":
        records = read_jsonl(run_dir / "data.jsonl")
        lines.append(f"records: {len(records)}")
    print("\n".join(lines))
    return EXIT_OK


def _report_train(run_dir, out):
    rows = _read_csv(run_dir / "metrics.csv")
    if not rows:
        raise ConfigError("metrics.csv is empty")
    pairs = sorted({int(r["pair_id"]) for r in rows})
    # theta starts at the reference, so the first logged step holds pi_ref
    step0 = int(rows[0]["step"])
    first = {int(r["pair_id"]): r for r in rows if int(r["step"]) == step0}
    ref_w = {p: float(first[p]["prob_w"]) for p in pairs}
    ref_l = {p: float(first[p]["prob_l"]) for p in pairs}
    plot_rows, min_w = [], {p: np.inf for p in pairs}
    for r in rows:
        p = int(r["pair_id"])
        wr, lr_ = float(r["prob_w"]) / ref_w[p], float(r["prob_l"]) / ref_l[p]
        min_w[p] = min(min_w[p], wr)
        plot_rows.append({"step": r["step"], "pair_id": p, "loss": r["loss"],
                          "mean_residual": r["mean_residual"],
                          "winner_ratio": repr(wr), "loser_ratio": repr(lr_)})
    last_step = int(rows[-1]["step"])
    final = {int(r["pair_id"]): r for r in rows if int(r["step"]) == last_step}
    final_w = [float(final[p]["prob_w"]) / ref_w[p] for p in pairs]
    final_l = [float(final[p]["prob_l"]) / ref_l[p] for p in pairs]
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["step", "pair_id", "loss", "mean_residual", "winner_ratio",
                                "loser_ratio"], lineterminator="\n")
        w.writeheader()
        w.writerows(plot_rows)
    collapsed = any(v < 1.0 for v in final_w)
    return [
        f"steps logged: {len({int(r['step']) for r in rows})} (last step {last_step})",
        f"final loss: {float(final[pairs[0]]['loss']):.6g}",
        f"tracked pairs: {len(pairs)}",
        f"min winner ratio over training: {min(min_w.values()):.4g}",
        f"final winner ratio (worst pair): {min(final_w):.4g}",
        f"final loser ratio (largest): {max(final_l):.4g}",
        f"collapse: {'yes' if collapsed else 'no'}",
        f"plot-ready CSV: {out / 'report.csv'}",
    ]


def _report_sweep(run_dir, out):
    rows = _read_csv(run_dir / "sweep.csv")
    lines = []
    summary = []
    for seed in sorted({r["seed"] for r in rows}, key=int):
        sub = [r for r in rows if r["seed"] == seed]
        dpo = [r for r in sub if r["variant"] == "dpo"]
        ok = [r for r in sub if r["variant"] != "dpo" and r["collapsed"] == "0"
              and float(r["final_loser_ratio"]) < 1.0]
        best = max(ok, key=lambda r: float(r["expected_reward"]), default=None)
        dpo_txt = (f"dpo collapsed={dpo[0]['collapsed']} "
                   f"winner_ratio={float(dpo[0]['final_winner_ratio']):.4g}") if dpo else "no dpo"
        best_txt = (f"best {best['variant']} lam={best['lam']} "
                    f"win_rate={float(best['win_rate_vs_dpo']):.4f}") if best else "no mitigation"
        lines.append(f"seed {seed}: {dpo_txt}; {best_txt}")
        if best:
            summary.append({"seed": seed, "variant": best["variant"], "lam": best["lam"],
                            "win_rate_vs_dpo": best["win_rate_vs_dpo"]})
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["seed", "variant", "lam", "win_rate_vs_dpo"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return lines


# entry point -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="prefclass", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="path to a JSON run config")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    common(sub.add_parser("gen", help="generate a synthetic preference dataset"))
    common(sub.add_parser("train", help="train a policy on a dataset"))
    p = sub.add_parser("verify", help="run the self-verification checks")
    p.add_argument("--out", help="also write verify.json here")
    p.add_argument("--check", action="append", help="run only this check (repeatable)")
    p = sub.add_parser("sweep", help="collapse experiment: DPO vs C-3DPO variants over lambda")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="where to write report.csv (default: the run directory)")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "verify": cmd_verify, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, RecordParseError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
