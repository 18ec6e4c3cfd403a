"""Command-line surface.

Subcommands: ``train``, ``eval``, ``score``, ``gradcheck``, ``synth``.
Human-readable output goes to stdout, logs to stderr, machine-readable
artifacts to files. Exit codes are stable API: 0 ok, 1 config error,
2 data error, 3 numeric abort, 4 gradcheck tolerance failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data_io, gradcheck, metrics, model, trainer
from .errors import ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_config(path, overrides: dict | None = None) -> model.WhisqConfig:
    """Flat JSON config with defaults for absent keys; unknown keys rejected."""
    doc = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a flat JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    return model.WhisqConfig.from_dict(doc)


def _write_effective_config(config: model.WhisqConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective-config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_train(args) -> int:
    config = load_config(args.config, {
        "attention_mode": args.mode,
        "ot_weight": args.ot_weight,
        "seed": args.seed,
        "epochs": args.epochs,
    })
    if not os.path.exists(args.manifest):
        raise DataError(f"manifest not found: {args.manifest}")
    _write_effective_config(config, args.out)
    ckpt, history = trainer.train(args.manifest, config, args.out,
                                  checkpoint_every=args.checkpoint_every,
                                  quiet=not args.verbose)
    last = history.records[-1] if history.records else None
    if last is not None:
        print(json.dumps({"checkpoint": ckpt, "final_task_loss": last.task_loss,
                          "final_ot_loss": last.ot_loss,
                          "final_total_loss": last.total_loss}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not os.path.exists(args.manifest):
        raise DataError(f"manifest not found: {args.manifest}")
    records = data_io.parse_manifest(args.manifest)
    if args.oracle:
        preds = {r.clip_id: (r.omq_mos, r.ta_mos) for r in records}
    else:
        params, config = model.load_checkpoint(args.checkpoint)
        preds = trainer.predict_records(records, params, config)
    report = metrics.evaluate(preds, records)
    for w in report.warnings:
        _log(f"warning: {w}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    print(report.render_table())
    return EXIT_OK


def cmd_score(args) -> int:
    params, config = model.load_checkpoint(args.checkpoint)
    audio = data_io.read_embedding(args.audio_emb)
    text = data_io.read_embedding(args.text_emb)
    batch = data_io.Batch(
        audio=audio[None, :, :],
        audio_mask=np.ones((1, audio.shape[0]), dtype=bool),
        text=text[None, :, :],
        text_mask=np.ones((1, text.shape[0]), dtype=bool),
        omq_targets=np.zeros(1),
        ta_targets=np.zeros(1),
        clip_ids=["cli"], system_ids=["cli"],
    )
    res = model.forward(batch, params, config)
    print(json.dumps({"omq": float(res.y_omq[0]), "ta": float(res.y_ta[0])},
                     sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        config = load_config(args.config, {"attention_mode": args.mode})
    else:
        config = gradcheck.toy_config(mode=args.mode or "seq_coattention",
                                      seed=args.seed)
    result = gradcheck.run_gradcheck(config, args.seed, corrupt=args.corrupt_backward)
    payload = {
        "mode": config.attention_mode,
        "loss": result.loss,
        "passed": result.passed,
        "params": {
            c.name: {
                "max_rel_err": c.max_rel_err,
                "tolerance": result.tolerances[c.name],
                "analytic_norm": c.analytic_norm,
                "numeric_norm": c.numeric_norm,
            }
            for c in result.report.checks
        },
    }
    print(json.dumps(payload, sort_keys=True, indent=1))
    return EXIT_OK if result.passed else EXIT_GRADCHECK


def cmd_synth(args) -> int:
    manifest = data_io.generate_synthetic(args.n, args.systems, args.d_audio,
                                          args.d_text, args.seed, args.out)
    print(json.dumps({"manifest": manifest}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="whisq",
                                     description="Text-to-music MOS prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=None, choices=model.ATTENTION_MODES)
    p.add_argument("--lambda", dest="ot_weight", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--oracle", action="store_true",
                   help="evaluate ground truth against itself (sanity path)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score one clip from its embedding files")
    p.add_argument("--audio-emb", required=True)
    p.add_argument("--text-emb", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default=None, choices=model.ATTENTION_MODES)
    p.add_argument("--corrupt-backward", action="store_true",
                   help="testing hook: corrupt one gradient to exercise the failure path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--systems", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--d-audio", type=int, default=16)
    p.add_argument("--d-text", type=int, default=24)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        _log(f"numeric error: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
