"""
CLI de DiffKnock: cada etapa lee y escribe archivos, así que se puede
reanudar por partes.

Uso:
  python -m diffknock.tools.cli simulate --out runs/sim --set simulation.scenario=polynomial
  python -m diffknock.tools.cli train-generator --features runs/sim/features.csv --out runs/sim/generator.dkck
  python -m diffknock.tools.cli gen-knockoffs --features runs/sim/features.csv --checkpoint runs/sim/generator.dkck --out runs/sim/knockoffs.csv
  python -m diffknock.tools.cli stats --features ... --knockoffs ... --response ... --out runs/sim/statistics.csv
  python -m diffknock.tools.cli select --stats runs/sim/statistics.csv --q 0.2
  python -m diffknock.tools.cli run --preset desk --set simulation.amplitude=5
  python -m diffknock.tools.cli experiment --preset desk --workers 4 --out runs/exp
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence

from diffknock.core.errors import DiffKnockError, ShapeError
from diffknock.models.matrix import FeatureMatrix
from diffknock.models.schemas import PipelineConfig
from diffknock.services import statistics as stats_service
from diffknock.services.diagnostics import export_report, quality_report, screen_features
from diffknock.services.experiment import export_eval_table, run_experiment
from diffknock.services.pipeline import (
    build_generator,
    load_generator,
    normalize,
    run_pipeline,
    run_repeated_selection,
    stage_seeds,
)
from diffknock.services.selection import knockoff_plus_select
from diffknock.services.simgen import simulate
from diffknock.utils import config_store
from diffknock.utils.io import (
    ingest_csv,
    read_response,
    to_jsonable,
    write_json,
    write_matrix_csv,
    write_table_csv,
    write_vector_csv,
)
from diffknock.utils.logger import get_log_files, get_logger, read_log_file
from diffknock.utils.paths import runtime_paths_info

logger = get_logger("CLI")


def _print_json(data: Any) -> None:
    print(json.dumps(to_jsonable(data), ensure_ascii=False, indent=2))


def _config(args: argparse.Namespace) -> PipelineConfig:
    """DEFAULTS ← preset ← archivo ← --set. Sin fuente de datos se asume simulación."""
    overrides: List[str] = list(getattr(args, "overrides", None) or [])
    raw = config_store.resolve_raw(getattr(args, "config", None), getattr(args, "preset", None), overrides)
    if not (raw.get("data") or {}).get("features_path") and raw.get("simulation") is None:
        raw["simulation"] = {}
    return config_store.validate_config(raw)


def _workers(args: argparse.Namespace) -> int:
    return config_store.worker_count(getattr(args, "workers", None))


def _features(args: argparse.Namespace, cfg: PipelineConfig) -> FeatureMatrix:
    """Lee y normaliza las características igual que `run`."""
    raw, _, _ = ingest_csv(args.features, impute=cfg.data.impute)
    X, _ = normalize(raw, cfg.normalization)
    return X


def _knockoffs(path: str, X: FeatureMatrix) -> FeatureMatrix:
    Xk, _, _ = ingest_csv(path)
    if Xk.shape != X.shape:
        raise ShapeError(f"knockoffs {Xk.shape} no coinciden con X {X.shape}", stage="knockoffs")
    return Xk


# ─── Etapas ──────────────────────────────────────────────

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    sim = simulate(cfg.simulation, scenario=args.scenario, amplitude=args.amplitude)
    out = Path(args.out)
    write_matrix_csv(sim.tpm, out / "features.csv")
    write_vector_csv(sim.y, out / "response.csv")
    write_json(sim.truth.to_dict(sim.tpm.names), out / "truth.json")
    logger.info("[CLI] simulate -> %s", out)
    _print_json({"ok": True, "action": "simulate", "out": str(out), "n": sim.tpm.n, "p": sim.tpm.p,
                 "scenario": sim.scenario, "amplitude": sim.amplitude, "causal": sim.truth.causal})
    return 0


def cmd_train_generator(args: argparse.Namespace) -> int:
    cfg = _config(args)
    X = _features(args, cfg)
    seed = stage_seeds(cfg.seed)["generator"]
    generator = build_generator(cfg, seed, _workers(args)).fit(X)
    path = generator.save(args.out)
    _print_json({"ok": True, "action": "train-generator", "generator": cfg.generator, "checkpoint": str(path),
                 "final_loss": generator.model.loss_trace[-1] if generator.model.loss_trace else None})
    return 0


def cmd_gen_knockoffs(args: argparse.Namespace) -> int:
    cfg = _config(args)
    X = _features(args, cfg)
    generator = load_generator(args.checkpoint, cfg, _workers(args))
    seed = args.seed if args.seed is not None else stage_seeds(cfg.seed)["knockoffs"]
    Xk = generator.generate(X, seed)
    write_matrix_csv(Xk, args.out)
    _print_json({"ok": True, "action": "gen-knockoffs", "out": args.out, "n": X.n, "p": X.p})
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = _config(args)
    X = _features(args, cfg)
    Xk = _knockoffs(args.knockoffs, X)
    y = read_response(args.response, args.response_column)
    method = args.method or cfg.statistic
    net = stats_service.train_filter_network(X, Xk, y, cfg.filter, stage_seeds(cfg.seed)["filter"])
    result = {"ok": True, "action": "stats", "method": method, "out": args.out}
    if method == "both":
        W_grad = stats_service.compute_statistics(net, X, Xk, y, "gradient", _workers(args))
        W_filter = stats_service.filter_statistics(net)
        base = Path(args.out)
        stats_service.export_statistics(W_grad, X.names, base.with_name(f"{base.stem}_gradient{base.suffix}"))
        stats_service.export_statistics(W_filter, X.names, base.with_name(f"{base.stem}_filter{base.suffix}"))
        result["agreement"] = stats_service.statistics_agreement(W_grad, W_filter, cfg.q)
    else:
        W = stats_service.compute_statistics(net, X, Xk, y, method, _workers(args))
        stats_service.export_statistics(W, X.names, args.out)
    _print_json(result)
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    cfg = _config(args)
    W, names = stats_service.read_statistics(args.stats)
    q = args.q if args.q is not None else cfg.q
    selection = knockoff_plus_select(W, q, names)
    if args.out:
        write_json(selection, args.out)
    _print_json({"ok": True, "action": "select", "selection": selection})
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg = _config(args)
    X = _features(args, cfg)
    Xk = _knockoffs(args.knockoffs, X)
    report = quality_report(X, Xk, args.swap_subsets, stage_seeds(cfg.seed)["diagnostics"])
    export_report(report, args.out, args.csv)
    _print_json({"ok": True, "action": "diagnose", "delta_hat": report.delta_hat,
                 "corr_diff_max": report.corr_diff_max, "swap_invariance": report.swap_invariance})
    return 0


def cmd_screen(args: argparse.Namespace) -> int:
    cfg = _config(args)
    X = _features(args, cfg)
    y = read_response(args.response, args.response_column)
    keep = screen_features(X, y, args.keep)
    names = [X.names[j] for j in keep]
    if args.out:
        write_json({"keep": keep, "names": names}, args.out)
    _print_json({"ok": True, "action": "screen", "keep": keep, "names": names})
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _config(args)
    table = run_experiment(cfg, workers=_workers(args))
    paths = export_eval_table(table, args.out or Path(cfg.output_dir) / "experiment")
    _print_json({"ok": True, "action": "experiment", "partial": table.partial,
                 "records": len(table.records), "files": {k: str(v) for k, v in paths.items()}})
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = run_pipeline(cfg, workers=_workers(args), force=bool(args.force))
    _print_json({"ok": True, "action": "run", "skipped": result.skipped, "output_dir": str(result.output_dir),
                 "selection": result.selection, "delta_hat": result.report.delta_hat})
    return 0


def cmd_frequency(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = run_repeated_selection(cfg, args.repetitions, _workers(args))
    out = Path(args.out or Path(cfg.output_dir) / "frequency")
    for method, frame in result.frequency.items():
        write_table_csv(frame, out / f"frequency_{method}.csv")
    write_json({"scores": result.scores}, out / "scores.json")
    top = {m: f.head(10).to_dict(orient="records") for m, f in result.frequency.items()}
    _print_json({"ok": True, "action": "frequency", "out": str(out), "top": top})
    return 0


# ─── Utilidades ──────────────────────────────────────────

def cmd_logs(args: argparse.Namespace) -> int:
    if args.file:
        text = read_log_file(args.file)
        if text is None:
            print(f"Error: log no encontrado: {args.file}", file=sys.stderr)
            return 3
        print(text, end="")
        return 0
    _print_json({"ok": True, "files": get_log_files(), "paths": runtime_paths_info()})
    return 0


def cmd_show_config(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _print_json({"ok": True, "config": config_store.config_snapshot(cfg), "hash": config_store.config_hash(cfg),
                 "workers": _workers(args)})
    return 0


# ─── Parser ──────────────────────────────────────────────

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Archivo YAML/JSON de configuración.")
    p.add_argument("--preset", choices=sorted(config_store.PRESETS), help="Preset de hiperparámetros.")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="CLAVE=VALOR",
                   help="Override en dot notation (repetible), p. ej. --set diffusion.epochs=20")
    p.add_argument("--workers", type=int, help="Workers (por defecto DIFFKNOCK_WORKERS o 1).")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="python -m diffknock.tools.cli",
        description="DiffKnock: knockoffs por difusión y selección con control de FDR.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str, *, config: bool = True) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        if config:
            _add_config_args(sp)
        sp.set_defaults(func=func)
        return sp

    sp = command("simulate", cmd_simulate, "Simular expresión tipo TPM y respuesta")
    sp.add_argument("--out", required=True, help="Directorio de salida (features.csv, response.csv, truth.json).")
    sp.add_argument("--scenario", help="Escenario (por defecto simulation.scenario).")
    sp.add_argument("--amplitude", type=float, help="Amplitud A (por defecto simulation.amplitude).")

    sp = command("train-generator", cmd_train_generator, "Entrenar el generador de knockoffs")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True, help="Checkpoint .dkck")

    sp = command("gen-knockoffs", cmd_gen_knockoffs, "Generar knockoffs desde un checkpoint")
    sp.add_argument("--features", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="Seed de muestreo (por defecto derivado del seed maestro).")

    sp = command("stats", cmd_stats, "Entrenar la red filtro y calcular W")
    sp.add_argument("--features", required=True)
    sp.add_argument("--knockoffs", required=True)
    sp.add_argument("--response", required=True)
    sp.add_argument("--response-column")
    sp.add_argument("--method", choices=["gradient", "filter", "both"])
    sp.add_argument("--out", required=True, help="CSV (o .json) de estadísticos")

    sp = command("select", cmd_select, "Selección knockoff+ a partir de W")
    sp.add_argument("--stats", required=True)
    sp.add_argument("--q", type=float, help="Nivel objetivo de FDR (por defecto el de la config).")
    sp.add_argument("--out")

    sp = command("diagnose", cmd_diagnose, "Diagnósticos de calidad de knockoffs")
    sp.add_argument("--features", required=True)
    sp.add_argument("--knockoffs", required=True)
    sp.add_argument("--out", required=True, help="Reporte JSON")
    sp.add_argument("--csv", help="Tabla larga opcional (kind,row,col,value)")
    sp.add_argument("--swap-subsets", type=int, default=20)

    sp = command("screen", cmd_screen, "Cribado por correlación de distancias")
    sp.add_argument("--features", required=True)
    sp.add_argument("--response", required=True)
    sp.add_argument("--response-column")
    sp.add_argument("--keep", type=int, required=True)
    sp.add_argument("--out")

    sp = command("experiment", cmd_experiment, "Curvas de potencia / FDR sobre la rejilla configurada")
    sp.add_argument("--out", help="Directorio (por defecto <output_dir>/experiment)")

    sp = command("run", cmd_run, "Pipeline completo con manifiesto")
    sp.add_argument("--force", action="store_true", help="Ignorar un manifiesto idéntico y recalcular.")

    sp = command("frequency", cmd_frequency, "Selección repetida con división cribado/entrenamiento/prueba")
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--out")

    sp = command("logs", cmd_logs, "Listar o mostrar archivos de log", config=False)
    sp.add_argument("--file", help="Nombre del archivo a mostrar")

    command("show-config", cmd_show_config, "Mostrar la configuración resuelta")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args))
    except DiffKnockError as e:
        stage = e.stage or args.command
        logger.error("[CLI] %s falló en [%s]: %s", args.command, stage, e.message)
        print(f"Error [{stage}]: {e.message}", file=sys.stderr)
        return e.exit_code
    except Exception:
        logger.exception("[CLI] error inesperado en %s", args.command)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
