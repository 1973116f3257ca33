"""
Atlas Lab - linha de comando dos experimentos.

Uso:
    atlas-lab synth --config desk.cfg
    atlas-lab train --config desk.cfg --set train.epochs=50
    atlas-lab train --config desk.cfg --resume runs/<id>/checkpoint.ckpt
    atlas-lab template --checkpoint runs/<id>/checkpoint.ckpt --ages 20,50,80
    atlas-lab register --checkpoint ... --image sub.volb --age 63 --sex F
    atlas-lab evaluate --checkpoint ... --config desk.cfg
    atlas-lab trend --checkpoint ... --lt2019 ... --config desk.cfg
    atlas-lab gradcheck
    atlas-lab ablation --config desk.cfg --variants cond,uncond --seeds 0,1,2
    atlas-lab serve

Cada comando grava suas saídas em <out>/<carimbo>_<comando>_<nome>_<hex>/.
Erros de domínio (AtlasError) terminam com código 2.
"""

import argparse
import csv
import io
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.__version__ import __version__
from app.config import CHECKPOINT_ENV, HOST, LABEL_NAMES, PORT
from app.logging_config import setup_logging
from app.services import grid_field, reports, volume_io
from app.services.attributes import AttributeRecord, extras_tag, parse_extras
from app.services.dataset_store import load_dataset, resolve_dataset_path, save_dataset
from app.services.evaluation import (
    MetricReport,
    evaluate_dataset,
    posthoc_template_labels,
    register_and_segment,
)
from app.services.exceptions import AtlasError, ConfigError
from app.services.file_utils import atomic_text_write
from app.services.gradcheck_suite import format_table, rows_as_dicts, run_suite
from app.services.grid_field import VectorField, Volume
from app.services.models import AtlasModel, load_model
from app.services.run_config import RunConfig, load_run_config
from app.services.run_manager import RunContext
from app.services.synthdata import Dataset, generate_population, split
from app.services.trainer import LOSSES_NAME, Trainer
from app.services.trends import trend_analysis

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_ATLAS_ERROR = 2

# Sujeitos de treino usados nos rótulos pós-hoc das variantes no-seg
POSTHOC_SUBJECTS = 100


# =============================================================================
# Helpers
# =============================================================================

def _float_list(text: Optional[str]) -> Optional[Tuple[float, ...]]:
    if text is None:
        return None
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"Lista numérica inválida: {text}")


def _str_list(text: Optional[str]) -> Optional[Tuple[str, ...]]:
    if text is None:
        return None
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    flags: Dict[str, Any] = {
        "seed": args.seed,
        "out": str(args.out) if args.out is not None else None,
        "threads": args.threads,
        "float64": True if args.float64 else None,
    }
    return load_run_config(args.config, args.set, flags)


def _dtype(config: RunConfig):
    return np.float64 if config.float64 else np.float32


def _load_population(config: RunConfig) -> Dataset:
    """Dataset do disco (data.path) ou gerado a partir de population."""
    if config.data.path:
        return load_dataset(resolve_dataset_path(Path(config.data.path)))
    logger.info("data.path ausente: gerando população a partir da especificação")
    return generate_population(config.population, workers=config.threads)


def _splits(config: RunConfig) -> Dict[str, Dataset]:
    return split(_load_population(config), config.data.split_fractions, config.data.split_seed)


def _checkpoint_path(value: Optional[str]) -> Path:
    path = value or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise ConfigError(f"Informe --checkpoint ou defina {CHECKPOINT_ENV}")
    return Path(path)


def _template_seg(model: AtlasModel, train: Sequence[Any]) -> Optional[Volume]:
    if model.config.with_seg:
        return None
    probs, _ = posthoc_template_labels(list(train)[:POSTHOC_SUBJECTS], model)
    return probs


def _evaluate(model: AtlasModel, parts: Dict[str, Dataset], split_name: str, workers: int) -> MetricReport:
    if split_name not in parts:
        raise ConfigError(f"Partição desconhecida: {split_name}")
    return evaluate_dataset(parts[split_name].subjects, model, _template_seg(model, parts["train"]), workers)


def _levels(model: AtlasModel, text: Optional[str]) -> List[Dict[str, str]]:
    """Extras pedidos em --extras, ou todas as combinações declaradas no modelo."""
    return [parse_extras(text)] if text else model.stats.categorical_levels()


def _ventricle_error(model: AtlasModel, subjects: Sequence[Any], config: RunConfig) -> float:
    """Erro relativo médio do ventrículo do template, média entre sexos e grupos de extras."""
    if not model.config.with_seg:
        return float("nan")
    errors = [
        trend_analysis(model, subjects, sex, config.eval.ages, config.eval.bandwidth, extras=level)
        .mean_relative_error(2)
        for sex in config.eval.sex
        for level in model.stats.categorical_levels()
    ]
    return float(np.nanmean(errors)) if errors else float("nan")


# =============================================================================
# Comandos
# =============================================================================

def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    """Gera a população sintética e grava o dataset."""
    with RunContext(config, "synth") as run:
        dataset = generate_population(config.population, workers=config.threads)
        path = save_dataset(dataset, run.path / "dataset")
        run.extra["dataset"] = str(path)
        print(path)
    return EXIT_OK


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    """Treina a variante configurada; suporta retomada."""
    parts = _splits(config)
    with RunContext(config, "train") as run:
        resume = Path(args.resume) if args.resume else None
        if resume is not None:
            previous = resume.parent / LOSSES_NAME
            if previous.exists():
                shutil.copyfile(previous, run.path / LOSSES_NAME)
        trainer = Trainer(config, parts["train"], parts["val"], run.path)
        result = trainer.fit(resume=resume)
        run.extra.update({
            "global_step": result.global_step,
            "epochs": result.epochs_run,
            "converged": result.converged,
            "resumed_from": str(resume) if resume else None,
        })
        print(result.checkpoint)
    return EXIT_OK


def cmd_template(config: RunConfig, args: argparse.Namespace) -> int:
    """Templates nas idades pedidas: VOLB por idade, montagem PGM e GIF."""
    model, _ = load_model(_checkpoint_path(args.checkpoint), _dtype(config))
    ages = _float_list(args.ages) or config.eval.ages
    sexes = _str_list(args.sex) or config.eval.sex
    levels = _levels(model, args.extras)
    with RunContext(config, "template") as run:
        for sex, level in [(s, lv) for s in sexes for lv in levels]:
            tag = extras_tag(sex, level)
            intensities, labels = [], []
            for age in ages:
                template = model.template_for(AttributeRecord.create(age, sex, level))
                stem = f"template_{tag}_{age:g}"
                volume_io.write_volume(run.path / f"{stem}.volb", template.intensity)
                intensities.append(template.intensity.data[0])
                if template.seg is not None:
                    hard = template.hard_labels()
                    volume_io.write_volume(run.path / f"{stem}_seg.volb", template.seg)
                    volume_io.write_labels(run.path / f"{stem}_labels.volb", hard)
                    labels.append(hard.labels)
            panel = reports.template_montage(intensities, labels, model.config.n_labels)
            reports.write_pgm(panel, run.path / f"montage_{tag}.pgm")
            lo = min(float(i.min()) for i in intensities)
            hi = max(float(i.max()) for i in intensities)
            reports.write_gif([reports.to_uint8(i, lo, hi) for i in intensities], run.path / f"ages_{tag}.gif")
        print(run.path)
    return EXIT_OK


def cmd_register(config: RunConfig, args: argparse.Namespace) -> int:
    """Registra um sujeito: u, φ⁻¹, template deformado, rótulos e Jacobiano."""
    model, _ = load_model(_checkpoint_path(args.checkpoint), _dtype(config))
    image = volume_io.read_volume(Path(args.image))
    record = AttributeRecord.create(args.age, args.sex, parse_extras(args.extras))

    template = model.template_for(record)
    v = model.predict_velocity(image, record, template)
    v = VectorField(v.grid, v.data.astype(np.float64), "velocity")
    steps = model.config.integration_steps
    u = grid_field.integrate_velocity(v, steps)
    u_inv = grid_field.invert_velocity(v, steps)
    warped = grid_field.warp(Volume(template.intensity.grid, template.intensity.data.astype(np.float64)), u)
    jac = grid_field.jacobian_determinant(u)

    with RunContext(config, "register") as run:
        volume_io.write_field(run.path / "displacement.volb", u)
        volume_io.write_field(run.path / "inverse_displacement.volb", u_inv)
        volume_io.write_volume(run.path / "warped_template.volb", warped)
        volume_io.write_volume(run.path / "jacobian.volb", jac)
        frames = [reports.to_uint8(image.data[0]), reports.to_uint8(warped.data[0]), reports.to_uint8(jac.data[0])]

        t_seg = template.seg
        if t_seg is None and args.dataset:
            train = split(load_dataset(resolve_dataset_path(Path(args.dataset))),
                          config.data.split_fractions, config.data.split_seed)["train"]
            t_seg = _template_seg(model, train.subjects)
        if t_seg is not None:
            subject = _AdHocSubject(image, record)
            labels, _ = register_and_segment(subject, model, t_seg)
            volume_io.write_labels(run.path / "labels.volb", labels)
            frames.append(reports.labels_to_uint8(labels.labels, labels.n_labels))
        else:
            logger.warning("Modelo sem segmentação e sem --dataset: rótulos não gerados")

        reports.write_pgm(reports.montage(frames), run.path / "panel.pgm")
        run.extra["neg_jac_voxels"] = int((jac.data <= 0).sum())
        print(run.path)
    return EXIT_OK


class _AdHocSubject:
    """Sujeito avulso (imagem + atributos) para register_and_segment."""

    def __init__(self, image: Volume, attributes: AttributeRecord):
        self.id = "subject"
        self.image = image
        self.attributes = attributes


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    """Dice, distância de superfície e regularidade na partição configurada."""
    model, _ = load_model(_checkpoint_path(args.checkpoint), _dtype(config))
    parts = _splits(config)
    split_name = args.split or config.eval.split
    with RunContext(config, "evaluate") as run:
        report = _evaluate(model, parts, split_name, config.threads)
        reports.write_metrics(report, run.path)
        run.extra["dice_mean"] = report.mean_dice
        print(reports.aggregate_csv(report), end="")
    return EXIT_OK


def cmd_trend(config: RunConfig, args: argparse.Namespace) -> int:
    """Curvas de volume do template vs. população, com LT2019 opcional."""
    model, _ = load_model(_checkpoint_path(args.checkpoint), _dtype(config))
    lt2019 = load_model(Path(args.lt2019), _dtype(config))[0] if args.lt2019 else None
    subjects = _load_population(config).subjects
    with RunContext(config, "trend") as run:
        summary = {}
        for sex in config.eval.sex:
            for level in model.stats.categorical_levels():
                report = trend_analysis(model, subjects, sex, config.eval.ages, config.eval.bandwidth, lt2019,
                                        extras=level)
                reports.write_trend(report, run.path / report.tag)
                summary[report.tag] = report.error_summary()
                for c in sorted({r.structure for r in report.rows}):
                    line = f"{report.tag} {LABEL_NAMES.get(c, c)}: rel_err={report.mean_relative_error(c):.4f}"
                    if lt2019 is not None:
                        line += f" lt2019_rel_err={report.mean_relative_error(c, lt2019=True):.4f}"
                    print(line)
        run.extra["error_summary"] = summary
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> int:
    """Tabela pass/fail da verificação de gradiente."""
    with RunContext(config, "gradcheck") as run:
        rows = run_suite(seed=config.seed, include_loss=not args.ops_only)
        table = format_table(rows)
        atomic_text_write(run.path / "gradcheck.txt", table)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["operation", "parameter", "max_rel_error", "passed"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows_as_dicts(rows))
        atomic_text_write(run.path / "gradcheck.csv", buf.getvalue())
        failed = [r for r in rows if not r.passed]
        run.extra["failed"] = len(failed)
        print(table, end="")
    return EXIT_FAILED_CHECK if failed else EXIT_OK


ABLATION_COLUMNS = (
    "variant", "centrality_mode", "init_spec", "seed", "dice_mean", "dice_ci95",
    "surface_distance", "neg_jac_fraction", "ventricle_rel_err",
)


def cmd_ablation(config: RunConfig, args: argparse.Namespace) -> int:
    """Treina e avalia cada combinação variante × centralidade × init × semente."""
    variants = _str_list(args.variants) or (config.model.variant,)
    modes = _str_list(args.modes) or (config.train.centrality_mode,)
    inits = _str_list(args.inits) or (config.model.init_spec,)
    seeds = [int(s) for s in (_str_list(args.seeds) or (str(config.seed),))]

    with RunContext(config, "ablation") as run:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        parts = _splits(config)
        for variant in variants:
            for mode in modes:
                for init in inits:
                    for seed in seeds:
                        cfg = config.with_overrides({
                            "model.variant": variant,
                            "train.centrality_mode": mode,
                            "model.init_spec": init,
                            "seed": seed,
                        })
                        tag = f"{variant}_{mode}_{init}_s{seed}"
                        logger.info(f"Ablação: {tag}")
                        trainer = Trainer(cfg, parts["train"], parts["val"], run.path / tag)
                        trainer.fit()
                        report = _evaluate(trainer.model, parts, cfg.eval.split, cfg.threads)
                        agg = report.aggregate()
                        writer.writerow({
                            "variant": variant,
                            "centrality_mode": mode,
                            "init_spec": init,
                            "seed": seed,
                            "dice_mean": agg["dice_mean"][0],
                            "dice_ci95": agg["dice_mean"][1],
                            "surface_distance": agg["surface_distance"][0],
                            "neg_jac_fraction": agg["neg_jac_fraction"][0],
                            "ventricle_rel_err": _ventricle_error(trainer.model, parts["train"].subjects, cfg),
                        })
        atomic_text_write(run.path / "ablation.csv", buf.getvalue())
        print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_serve(config: RunConfig, args: argparse.Namespace) -> int:
    """Visualizador local somente leitura."""
    import uvicorn

    from app.main import app

    if args.checkpoint:
        os.environ[CHECKPOINT_ENV] = args.checkpoint
    app.state.runs_dir = Path(config.out).expanduser()
    logger.info(f"Atlas Lab viewer em http://{HOST}:{args.port}")
    uvicorn.run(app, host=HOST, port=args.port, log_level="warning")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "template": cmd_template,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "trend": cmd_trend,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
    "serve": cmd_serve,
}


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Arquivo chave = valor")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="Diretório raiz das execuções")
    common.add_argument("--threads", type=int)
    common.add_argument("--float64", action="store_true")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Sobrescreve uma chave do config (repetível)")
    common.add_argument("--verbose", "-v", action="store_true", help="Log em DEBUG")

    parser = argparse.ArgumentParser(prog="atlas-lab", description="Atlas Lab - templates deformáveis condicionais")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Gera população sintética")

    p = sub.add_parser("train", parents=[common], help="Treina um modelo")
    p.add_argument("--resume", help="Checkpoint de onde retomar")

    p = sub.add_parser("template", parents=[common], help="Templates ao longo da idade")
    p.add_argument("--checkpoint")
    p.add_argument("--ages", help="Lista separada por vírgula")
    p.add_argument("--sex", help="Lista separada por vírgula")
    p.add_argument("--extras", help="nome=valor,... (padrão: todos os grupos declarados)")

    p = sub.add_parser("register", parents=[common], help="Registra um sujeito ao template")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True, help="Imagem VOLB")
    p.add_argument("--age", type=float, required=True)
    p.add_argument("--sex", required=True)
    p.add_argument("--extras", help="nome=valor,... quando o modelo declara extras")
    p.add_argument("--dataset", help="Dataset para rótulos pós-hoc (variantes no-seg)")

    p = sub.add_parser("evaluate", parents=[common], help="Métricas em uma partição")
    p.add_argument("--checkpoint")
    p.add_argument("--split", help="train, val ou test")

    p = sub.add_parser("trend", parents=[common], help="Tendência de volume por idade")
    p.add_argument("--checkpoint")
    p.add_argument("--lt2019", help="Checkpoint treinado com centralidade global")

    p = sub.add_parser("gradcheck", parents=[common], help="Verificação de gradiente")
    p.add_argument("--ops-only", action="store_true", help="Pula a loss completa")

    p = sub.add_parser("ablation", parents=[common], help="Comparação de variantes")
    p.add_argument("--variants")
    p.add_argument("--modes", help="conditional, lt2019, off")
    p.add_argument("--inits", help="ex.: mean-of-100,single-subject")
    p.add_argument("--seeds", help="ex.: 0,1,2")

    p = sub.add_parser("serve", parents=[common], help="Visualizador HTTP local")
    p.add_argument("--checkpoint")
    p.add_argument("--port", type=int, default=PORT)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](config, args)
    except AtlasError as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        return EXIT_ATLAS_ERROR


if __name__ == "__main__":
    sys.exit(main())
