"""Command-line entry point.

Subcommands: gen-data, train, predict, eval-rul, eval-soh, synth.  Runs are
driven by a JSON config file (nested sections, unknown keys rejected) whose
defaults are printed by ``--help``; the ``--seed``/``--seeds`` and ``--out``
flags override the config.  Relative paths in the config resolve against the
output directory (``--out``, else $SOHDIFF_OUT, else the working directory).

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import data as data_mod
from .denoiser import DenoiserConfig
from .diffusion import make_schedule
from .errors import ConfigurationError, NumericError, SohdiffError
from .forest import ForestConfig
from .prediction import EolConfig, eval_rul, eval_soh, item_early_soh, predict
from .seeding import stream
from .synthesis import eval_augmentation, synthesize_dataset
from .training import TrainConfig, run_training

OUT_ENV_VAR = "SOHDIFF_OUT"

DEFAULT_CONFIG = {
    "data": {
        "train": "train.json",
        "test": "test.json",
        "format": "canonical-json",
        "l": 64,
        "c_max": 1000,
        "eol_threshold": 0.8,
    },
    "gen": {
        "n_train": 64,
        "n_test": 16,
        "n_feat": 4,
        "noise_sd": 0.002,
        "rul_min": 130.0,
        "rul_max": 420.0,
        "b_min": 0.85,
        "b_max": 1.25,
        "floor": 0.6,
    },
    "model": {
        "base_channels": 32,
        "channel_multipliers": [1, 2, 2],
        "attn_levels": [1, 2],
        "time_embed_dim": 64,
        "cond_embed_dim": 64,
        "dim_p": 8,
        "enc_layers": 2,
        "enc_heads": 4,
        "enc_d_model": 32,
    },
    "schedule": {"kind": "linear", "t": 200, "beta_1": 1e-4, "beta_t": 0.02},
    "train": {
        "steps": 2000,
        "batch_size": 16,
        "step_size": 1e-4,
        "p_uncond": 0.2,
        "ema_decay": 0.99,
        "eval_every": 100,
    },
    "eval": {
        "k": 10,
        "w": 0.0,
        "eol": 0.8,
        "eols": [0.9, 0.8, 0.7, 0.6],
        "checkpoint": "ckpt_seed{seed}.bin",
    },
    "synth": {
        "w_list": [0.0, 1.0, 2.0, 4.0, 6.0],
        "per_sample": 10,
        "input_noise": 0.01,
        "n_trees": 100,
        "max_depth": None,
        "min_leaf": 1,
        "bootstrap": True,
        "forest_seeds": [0, 1, 2],
    },
}


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the config file; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    for section, values in user.items():
        if section not in cfg:
            raise ConfigurationError(f"{path}: unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigurationError(f"{path}: unknown key {section}.{key}")
            cfg[section][key] = value
    return cfg


def parse_seeds(seed: int | None, seeds: str | None) -> list[int]:
    if seeds is None:
        return [0 if seed is None else seed]
    if seed is not None:
        raise ConfigurationError("pass either --seed or --seeds, not both")
    text = seeds.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise ConfigurationError(f"bad --seeds range {seeds!r}") from None
        if hi_i < lo_i:
            raise ConfigurationError(f"empty --seeds range {seeds!r}")
        return list(range(lo_i, hi_i + 1))
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"bad --seeds list {seeds!r}") from None


def _resolve(out_dir: Path, path_text: str) -> Path:
    p = Path(path_text)
    return p if p.is_absolute() else out_dir / p


def _schedule_from(cfg_section: dict):
    return make_schedule(kind=cfg_section["kind"], T=int(cfg_section["t"]),
                         beta_1=float(cfg_section["beta_1"]),
                         beta_T=float(cfg_section["beta_t"]))


def _load_split(cfg: dict, out_dir: Path, which: str, *, l: int | None = None,
                c_max: int | None = None):
    d = cfg["data"]
    return data_mod.load_dataset(
        _resolve(out_dir, d[which]),
        d["format"],
        l=int(l if l is not None else d["l"]),
        c_max=c_max if c_max is not None else d["c_max"],
        eol_threshold=float(d["eol_threshold"]),
        split="train" if which == "train" else "test",
    )


def _model_config(cfg: dict, l: int, n_feat: int) -> DenoiserConfig:
    m = cfg["model"]
    return DenoiserConfig(
        l=l,
        base_channels=int(m["base_channels"]),
        channel_multipliers=tuple(m["channel_multipliers"]),
        attn_levels=frozenset(m["attn_levels"]),
        time_embed_dim=int(m["time_embed_dim"]),
        cond_embed_dim=int(m["cond_embed_dim"]),
        dim_p=int(m["dim_p"]),
        enc_layers=int(m["enc_layers"]),
        enc_heads=int(m["enc_heads"]),
        enc_d_model=int(m["enc_d_model"]),
        n_feat=n_feat,
    )


def _load_models(cfg: dict, out_dir: Path, seeds: list[int]):
    models = []
    for seed in seeds:
        path = _resolve(out_dir, cfg["eval"]["checkpoint"].format(seed=seed))
        model, _ = ckpt.load_checkpoint(path, expect_l=int(cfg["data"]["l"]))
        models.append(model)
    desc = models[0].schedule_desc
    schedule = (make_schedule(desc["kind"], desc["T"], desc["beta_1"], desc["beta_T"])
                if desc is not None else _schedule_from(cfg["schedule"]))
    return models, schedule


def cmd_gen_data(cfg: dict, seeds: list[int], out_dir: Path) -> int:
    g = cfg["gen"]
    d = cfg["data"]
    for key in ("rul_min", "rul_max", "b_min", "b_max", "noise_sd", "floor"):
        if g[key] <= 0 and key != "noise_sd":
            raise ConfigurationError(f"gen.{key} must be positive, got {g[key]}")
    seed = seeds[0]
    made = {}
    for idx, (which, count, prefix) in enumerate(
        [("train", int(g["n_train"]), "train"), ("test", int(g["n_test"]), "test")]
    ):
        ds = data_mod.make_synthetic_dataset(
            count,
            stream(seed, "data", idx),
            int(d["l"]),
            int(d["c_max"]),
            rul_range=(float(g["rul_min"]), float(g["rul_max"])),
            b_range=(float(g["b_min"]), float(g["b_max"])),
            noise_sd=float(g["noise_sd"]),
            n_feat=int(g["n_feat"]),
            eol_threshold=float(d["eol_threshold"]),
            floor=float(g["floor"]),
            split="train" if which == "train" else "test",
            id_prefix=prefix,
        )
        path = _resolve(out_dir, d[which])
        data_mod.save_dataset_json(ds, path)
        made[which] = ds
        ruls = [it.true_rul for it in ds.items]
        print(f"{which}: {len(ds)} cells -> {path} "
              f"(life-to-eol range {min(ruls)}..{max(ruls)} cycles)")
    return 0


def cmd_train(cfg: dict, seeds: list[int], out_dir: Path) -> int:
    ds_train = _load_split(cfg, out_dir, "train")
    n_feat = ds_train.items[0].capacity.rows.shape[1]
    schedule = _schedule_from(cfg["schedule"])
    model_cfg = _model_config(cfg, int(cfg["data"]["l"]), n_feat)
    t = cfg["train"]
    for seed in seeds:
        train_cfg = TrainConfig(
            steps=int(t["steps"]),
            batch_size=int(t["batch_size"]),
            step_size=float(t["step_size"]),
            p_uncond=float(t["p_uncond"]),
            T=schedule.T,
            ema_decay=None if t["ema_decay"] is None else float(t["ema_decay"]),
            seed=seed,
            eval_every=int(t["eval_every"]),
        )
        out_path = out_dir / f"ckpt_seed{seed}.bin"
        log_path = out_dir / f"loss_seed{seed}.csv"
        _, report = run_training(ds_train, model_cfg, train_cfg, schedule,
                                 out_path=out_path, log_path=log_path)
        final = report.loss_history[-1][1]
        print(f"seed {seed}: {len(report.loss_history)} steps, final loss {final:.4g}, "
              f"checkpoint {out_path}")
    return 0


def _dump_cells_csv(report, path: Path) -> None:
    if not report.cells:
        return
    keys = sorted({k for row in report.cells for k in row})
    lines = [",".join(keys)]
    for row in report.cells:
        lines.append(",".join(repr(row.get(k, "")) for k in keys))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval_rul(cfg: dict, seeds: list[int], out_dir: Path, dump_cells: bool) -> int:
    models, schedule = _load_models(cfg, out_dir, seeds)
    ds_test = _load_split(cfg, out_dir, "test", l=models[0].config.l,
                          c_max=models[0].grid_c_max)
    e = cfg["eval"]
    report = eval_rul(models, ds_test, schedule, k=int(e["k"]), w=float(e["w"]),
                      eol=float(e["eol"]), seeds=seeds)
    (out_dir / "rul_report.csv").write_text(report.to_csv(), encoding="utf-8")
    table = report.format_table()
    (out_dir / "rul_table.txt").write_text(table, encoding="utf-8")
    if dump_cells:
        _dump_cells_csv(report, out_dir / "rul_cells.csv")
    print(table, end="")
    return 0


def cmd_eval_soh(cfg: dict, seeds: list[int], out_dir: Path, dump_cells: bool) -> int:
    models, schedule = _load_models(cfg, out_dir, seeds)
    ds_test = _load_split(cfg, out_dir, "test", l=models[0].config.l,
                          c_max=models[0].grid_c_max)
    e = cfg["eval"]
    report = eval_soh(models, ds_test, schedule,
                      eols=EolConfig(tuple(float(x) for x in e["eols"])),
                      seeds=seeds, k=int(e["k"]), w=float(e["w"]))
    (out_dir / "soh_report.csv").write_text(report.to_csv(), encoding="utf-8")
    table = report.format_table()
    (out_dir / "soh_table.txt").write_text(table, encoding="utf-8")
    if dump_cells:
        _dump_cells_csv(report, out_dir / "soh_cells.csv")
    print(table, end="")
    return 0


def _generated_curves_json(entries, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def cmd_predict(cfg: dict, seeds: list[int], out_dir: Path) -> int:
    models, schedule = _load_models(cfg, out_dir, seeds[:1])
    model = models[0]
    ds_test = _load_split(cfg, out_dir, "test", l=model.config.l,
                          c_max=model.grid_c_max)
    e = cfg["eval"]
    nodes = data_mod.grid_cycles(model.config.l, model.grid_c_max)
    entries = []
    summary = ["cell_id,rul,rul_std,fit_rmse"]
    for ci, item in enumerate(ds_test.items):
        rng = stream(seeds[0], "eval", ci)
        res = predict(model, item.capacity, item_early_soh(item), k=int(e["k"]),
                      w=float(e["w"]), s=schedule, rng=rng, eol_threshold=float(e["eol"]))
        entries.append({
            "cell_id": item.capacity.cell_id,
            "cycles": [int(round(c)) for c in nodes],
            "soh": res.selected.tolist(),
            "rul": res.rul,
            "rul_std": res.rul_std,
            "fit_rmse": res.fit_rmse,
        })
        summary.append(f"{item.capacity.cell_id},{res.rul},{res.rul_std!r},{res.fit_rmse!r}")
    _generated_curves_json(entries, out_dir / "predictions.json")
    (out_dir / "predictions.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"wrote {len(entries)} per-cell predictions to {out_dir / 'predictions.json'}")
    return 0


def cmd_synth(cfg: dict, seeds: list[int], out_dir: Path, export_curves: bool) -> int:
    models, schedule = _load_models(cfg, out_dir, seeds[:1])
    model = models[0]
    ds_train = _load_split(cfg, out_dir, "train", l=model.config.l,
                           c_max=model.grid_c_max)
    ds_test = _load_split(cfg, out_dir, "test", l=model.config.l,
                          c_max=model.grid_c_max)
    sy = cfg["synth"]
    forest_cfg = ForestConfig(
        n_trees=int(sy["n_trees"]),
        max_depth=None if sy["max_depth"] is None else int(sy["max_depth"]),
        min_leaf=int(sy["min_leaf"]),
        bootstrap=bool(sy["bootstrap"]),
    )
    report = eval_augmentation(
        model, ds_train, ds_test, [float(w) for w in sy["w_list"]], forest_cfg,
        [int(s_) for s_ in sy["forest_seeds"]], s=schedule,
        per_sample=int(sy["per_sample"]), input_noise=float(sy["input_noise"]),
        master_seed=seeds[0],
    )
    (out_dir / "synth_report.csv").write_text(report.to_csv(), encoding="utf-8")
    table = report.format_table()
    (out_dir / "synth_table.txt").write_text(table, encoding="utf-8")
    if export_curves:
        nodes = data_mod.grid_cycles(model.config.l, model.grid_c_max)
        for wi, w in enumerate(sy["w_list"]):
            rng = stream(seeds[0], "synth", wi)
            synth = synthesize_dataset(model, ds_train, int(sy["per_sample"]),
                                       float(w), float(sy["input_noise"]), rng,
                                       s=schedule)
            entries = [{
                "cell_id": it.capacity.cell_id,
                "cycles": [int(round(c)) for c in nodes],
                "soh": it.curve.values.tolist(),
                "true_rul": it.true_rul,
            } for it in synth.items]
            _generated_curves_json(entries, out_dir / f"synthetic_w{float(w):g}.json")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sohdiff",
        description="Train, evaluate, and sample a degradation-curve diffusion model.",
        epilog="Config defaults:\n" + json.dumps(DEFAULT_CONFIG, indent=2),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, metavar="N", help="single master seed")
        p.add_argument("--seeds", metavar="A..B",
                       help="inclusive seed range A..B or comma list")
        p.add_argument("--out", metavar="DIR",
                       help=f"output directory (default ${OUT_ENV_VAR} or '.')")

    add_common(sub.add_parser("gen-data", help="emit a synthetic train/test dataset"))
    add_common(sub.add_parser("train", help="train one checkpoint per seed"))
    add_common(sub.add_parser("predict", help="dump per-cell predicted curves"))
    p_rul = sub.add_parser("eval-rul", help="remaining-useful-life RMSE report")
    add_common(p_rul)
    p_rul.add_argument("--dump-cells", action="store_true",
                       help="also write per-cell prediction rows")
    p_soh = sub.add_parser("eval-soh", help="state-of-health RMSE report per EOL")
    add_common(p_soh)
    p_soh.add_argument("--dump-cells", action="store_true",
                       help="also write per-cell rows")
    p_synth = sub.add_parser("synth", help="guidance-sweep synthesis report")
    add_common(p_synth)
    p_synth.add_argument("--export-curves", action="store_true",
                         help="also write the synthetic datasets per guidance value")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seeds = parse_seeds(args.seed, args.seeds)
        out_dir = Path(args.out or os.environ.get(OUT_ENV_VAR, "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, seeds, out_dir)
        if args.command == "train":
            return cmd_train(cfg, seeds, out_dir)
        if args.command == "predict":
            return cmd_predict(cfg, seeds, out_dir)
        if args.command == "eval-rul":
            return cmd_eval_rul(cfg, seeds, out_dir, args.dump_cells)
        if args.command == "eval-soh":
            return cmd_eval_soh(cfg, seeds, out_dir, args.dump_cells)
        if args.command == "synth":
            return cmd_synth(cfg, seeds, out_dir, args.export_curves)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SohdiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
