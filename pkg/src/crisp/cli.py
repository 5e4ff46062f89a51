"""Batch command-line driver.

Every command is a pure function of its config file, input files and seeds.
Data goes to files under ``--out`` (default: ``$CRISP_OUT_DIR``, else the
current directory); one-line log events go to stderr.  Exit codes: 0
success, 1 usage or configuration error, 2 numerical failure.
"""

import argparse
import logging
import os
import sys

from . import config as config_mod
from . import experiments as ex
from .errors import ConfigError, ContainerError, NumericalError, ShapeError
from .store import atomic_write, load_bank, read_container, save_bank, save_delta, write_container, write_csv
from .toy import make_task

log = logging.getLogger("crisp")

OUT_ENV = "CRISP_OUT_DIR"
SWEEPS = tuple(ex.SWEEP_FIELDS)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path):
    return config_mod.load(path) if path else config_mod.RunConfig()


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _event(name, **fields):
    log.info("%s %s", name, " ".join(f"{k}={v}" for k, v in fields.items()))


def _write_config(out, cfg):
    atomic_write(os.path.join(out, "config.json"), config_mod.dumps(cfg).encode("utf-8"))


# ---------------------------------------------------------------------------
# commands


def _retrofit(cfg, checkpoint, out):
    bank, rows = ex.retrofit_checkpoint(checkpoint, cfg)
    final = ex.final_rel_errors(rows)
    worst = max(final.values())
    if worst > cfg.mimicry.target_rel_error:
        log.warning("retrofit target_not_reached max_rel_error=%r target=%r", worst, cfg.mimicry.target_rel_error)
    save_bank(os.path.join(out, "bank.crsp"), bank)
    write_csv(os.path.join(out, "retrofit.csv"), rows, ex.RETROFIT_FIELDS)
    _event("retrofit_done", steps=rows[-1]["step"], max_rel_error=repr(worst))
    return bank


def cmd_pretrain(args):
    cfg = _load_config(args.config)
    out = _out_dir(args)
    model, data = ex.pretrain(cfg)
    write_container(os.path.join(out, "dense.crsp"), model.to_checkpoint())
    _event("pretrain_done", test_accuracy=repr(model.accuracy(data.x_test, data.y_test)))


def cmd_retrofit(args):
    cfg = _load_config(args.config)
    checkpoint = read_container(args.weights)
    _retrofit(cfg, checkpoint, _out_dir(args))


def _compress(cfg, bank, mode, out):
    data = make_task(cfg.task)
    compressed, rows = ex.compress_bank(bank, cfg, mode, data)
    save_bank(os.path.join(out, "compressed.crsp"), compressed)
    write_csv(os.path.join(out, "compress.csv"), rows, ex.STAGE_FIELDS)
    _event("compress_done", mode=mode, params_before=bank.param_count(), params_after=compressed.param_count())
    return compressed


def cmd_compress(args):
    cfg = _load_config(args.config)
    bank = load_bank(args.bank)
    _compress(cfg, bank, args.mode, _out_dir(args))


def _adapt(cfg, bank, out):
    data = make_task(cfg.target_task)
    adapted, rows = ex.adapt_bank(bank, cfg, data)
    save_delta(os.path.join(out, "delta.crsp"), adapted, bank)
    write_csv(os.path.join(out, "adapt.csv"), rows, ex.ADAPT_FIELDS)
    _event("adapt_done", test_accuracy=repr(rows[-1]["accuracy"]))
    return adapted


def cmd_adapt(args):
    cfg = _load_config(args.config)
    bank = load_bank(args.bank)
    _adapt(cfg, bank, _out_dir(args))


def cmd_pipeline(args):
    """Pretrain, retrofit, compress, adapt; each stage's files are final once written."""
    cfg = _load_config(args.config)
    out = _out_dir(args)
    _write_config(out, cfg)
    model, _ = ex.pretrain(cfg)
    checkpoint = model.to_checkpoint()
    write_container(os.path.join(out, "dense.crsp"), checkpoint)
    bank = _retrofit(cfg, checkpoint, out)
    compressed = _compress(cfg, bank, args.mode, out)
    _adapt(cfg, compressed, out)


def cmd_ablate(args):
    cfg = _load_config(args.config)
    out = _out_dir(args)
    rows = ex.sweep(cfg, args.sweep)
    write_csv(os.path.join(out, f"ablate_{args.sweep}.csv"), rows, ex.SWEEP_FIELDS[args.sweep])
    _event("ablate_done", sweep=args.sweep, rows=len(rows))


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = _Parser(prog="crisp", description="Coefficient-gated basis/mixer recombination on toy models.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="RunConfig JSON (defaults used when omitted)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        sp.set_defaults(func=fn)
        return sp

    add("pretrain", cmd_pretrain, "train the dense source model and write dense.crsp")
    sp = add("retrofit", cmd_retrofit, "retrofit dense weights into a factor bank")
    sp.add_argument("--weights", required=True, help="CRSP container of dense <layer>.weight/.bias tensors")
    sp = add("compress", cmd_compress, "shrink a factor bank")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--mode", choices=("distill", "cluster"), default="cluster")
    sp = add("adapt", cmd_adapt, "mixer-only adaptation to the shifted task")
    sp.add_argument("--bank", required=True)
    sp = add("pipeline", cmd_pipeline, "pretrain, retrofit, compress and adapt in one run")
    sp.add_argument("--mode", choices=("distill", "cluster"), default="cluster")
    sp = add("ablate", cmd_ablate, "run one ablation sweep")
    sp.add_argument("--sweep", required=True, choices=SWEEPS)
    return p


def main(argv=None):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
    root = logging.getLogger("crisp")
    root.handlers[:] = [handler]
    root.propagate = False
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"crisp: error: {exc}", file=sys.stderr)
        return 1
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        args.func(args)
    except NumericalError as exc:
        log.error("numerical_failure %s", exc)
        return 2
    except (ConfigError, ShapeError, ContainerError) as exc:
        log.error("config_error %s", exc)
        return 1
    except OSError as exc:
        log.error("io_error %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
