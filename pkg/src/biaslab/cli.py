"""Command-line driver: ``biaslab <command> [--config PATH] [--out DIR] [--seed N] [--threads N]``.

Every command writes a timestamped directory under ``--out`` holding its
reports and the fully resolved ``config.toml``. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import cbi, gebi, mitigation, stylemix, synthdata
from .config import ConfigError, RunConfig
from .formats import FormatError, read_dataset, write_dataset
from .model import CheckpointError, NumericalError, TinyCnn, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("biaslab")

COMMANDS = ("gen-data", "train", "audit-gebi", "audit-cbi", "sweep-tda", "finetune-attr", "stda", "stats", "repro")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def make_run_dir(root: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    root.mkdir(parents=True, exist_ok=True)
    for n in range(1000):
        path = root / (f"{command}-{stamp}" + (f"-{n}" if n else ""))
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise OSError(f"could not create a run directory under {root}")


class Context:
    """Shared state of one command invocation; lazily builds the dataset and model."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self._dataset = None
        self._model = None

    @property
    def side(self) -> int:
        return self.dataset.images.shape[-1] if len(self.dataset) else self.cfg["data"]["side"]

    @property
    def dataset(self) -> synthdata.Dataset:
        if self._dataset is None:
            data_dir = self.cfg["io"]["data_dir"]
            if data_dir:
                self._dataset = read_dataset(data_dir)
            else:
                self._dataset = synthdata.generate(self.cfg.generator_spec())
        return self._dataset

    @property
    def model(self):
        if self._model is None:
            path = self.cfg["io"]["model"]
            if path:
                if not Path(path).exists():
                    raise DataError(f"model checkpoint {path} not found")
                self._model = load_checkpoint(path, side=self.side)
            else:
                self._model = self.train_model()
        return self._model

    def train_model(self):
        if self._model is not None:
            return self._model
        tcfg = self.cfg.train_config()
        result = train(TinyCnn(side=self.side, seed=tcfg.seed), self.dataset.split("train"), tcfg)
        save_checkpoint(result.model, self.out / "model.bin")
        report = {
            "loss_history": result.loss_history,
            "updates": result.updates,
            "test": evaluate(result.model, self.dataset.split("test"), threads=self.threads).to_dict(),
        }
        dump_json(self.out / "train_report.json", report)
        self._model = result.model
        return result.model

    def transform(self, kind: str, seed: int, role: str = "test") -> cbi.BiasTransform:
        hair, ruler = mitigation.stamp_banks(self.side, role)
        return cbi.BiasTransform(kind, seed=seed, hair_bank=hair, ruler_bank=ruler)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(ctx: Context) -> None:
    write_dataset(ctx.dataset, ctx.out / "dataset")
    dump_json(ctx.out / "stats_report.json", synthdata.stats_report(ctx.dataset).to_dict())


def cmd_train(ctx: Context) -> None:
    ctx.train_model()


def cmd_audit_gebi(ctx: Context) -> None:
    g = ctx.cfg["gebi"]
    subset = ctx.dataset.split(g["split"]).of_class(g["target_class"])
    report = gebi.run_gebi(subset, ctx.model, ctx.cfg.gebi_config())
    (ctx.out / "gebi_report.json").write_text(report.to_json() + "\n")


def cmd_audit_cbi(ctx: Context) -> None:
    c = ctx.cfg["cbi"]
    subset = ctx.dataset.split(c["split"])
    reports = {}
    for kind in c["transforms"]:
        rep = cbi.run_cbi(ctx.model, subset, ctx.transform(kind, c["seed"]))
        reports[kind] = rep.to_dict()
        (ctx.out / f"cbi_{kind}.csv").write_text(rep.to_csv())
    dump_json(ctx.out / "cbi_report.json", reports)


def cmd_sweep_tda(ctx: Context) -> None:
    t = ctx.cfg["tda"]
    cache = None
    if ctx._model is not None and not ctx.cfg["io"]["model"]:
        # the baseline model is exactly the p=0 run for its seed
        cache = {ctx.cfg["train"]["seed"]: ctx._model}
    rows = mitigation.tda_sweep(
        ctx.dataset.split("train"), ctx.dataset.split("test"), t["kind"], t["ps"], t["seeds"],
        ctx.cfg.train_config(), side=ctx.side, cache=cache,
    )
    (ctx.out / "tda_sweep.csv").write_text(mitigation.sweep_to_csv(rows))


def cmd_finetune_attr(ctx: Context) -> None:
    f = ctx.cfg["feedback"]
    test = ctx.dataset.split("test")
    transform = ctx.transform(f["kind"], f["seed"], role="train")
    fcfg = mitigation.FeedbackConfig(f["alpha"], f["epochs"], f["learning_rate"], f["batch_size"], f["seed"], transform,
                                     f["classify_biased"])
    before_model = ctx.model
    result = mitigation.feedback_finetune(before_model, ctx.dataset.split("train"), fcfg)
    save_checkpoint(result.model, ctx.out / "model_finetuned.bin")
    test_transform = ctx.transform(f["kind"], f["seed"], role="test")
    report = {"loss_history": result.loss_history, "updates": result.updates}
    for name, m in (("pretrained", before_model), ("finetuned", result.model)):
        entry = mitigation.tda_evaluate(m, test, f["kind"], seed=f["seed"])
        entry["attribution_loss"] = mitigation.mean_attribution_loss(m, test, test_transform, f["seed"])
        report[name] = entry
    dump_json(ctx.out / "attr_finetune.json", report)


def cmd_stda(ctx: Context) -> None:
    s = ctx.cfg["stda"]
    synthetic = stylemix.stda_generate(ctx.dataset.split("train"), ctx.model, ctx.cfg.stda_config(), s["pairs"])
    write_dataset(synthetic, ctx.out / "stda")
    lines = ["id,content_id,style_id,iterations,score"]
    for ident, prov in zip(synthetic.ids, synthetic.provenance or []):
        lines.append(f"{ident},{prov['content_id']},{prov['style_id']},{prov['iterations']},{prov['score']!r}")
    (ctx.out / "stda" / "provenance.csv").write_text("\n".join(lines) + "\n")


def cmd_stats(ctx: Context) -> None:
    dump_json(ctx.out / "stats_report.json", synthdata.stats_report(ctx.dataset).to_dict())


def cmd_repro(ctx: Context) -> None:
    cmd_gen_data(ctx)
    ctx.model
    cmd_audit_gebi(ctx)
    cmd_audit_cbi(ctx)
    cmd_sweep_tda(ctx)
    cmd_finetune_attr(ctx)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "audit-gebi": cmd_audit_gebi,
    "audit-cbi": cmd_audit_cbi,
    "sweep-tda": cmd_sweep_tda,
    "finetune-attr": cmd_finetune_attr,
    "stda": cmd_stda,
    "stats": cmd_stats,
    "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biaslab", description="Bias discovery and mitigation on synthetic data.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="TOML run configuration")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="root for timestamped output directories")
    parser.add_argument("--seed", type=int, help="override every seed in the configuration")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = make_run_dir(args.out, args.command)
        cfg.write(out / "config.toml")
        with np.errstate(all="ignore"):
            HANDLERS[args.command](Context(cfg, out, args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CheckpointError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
