"""
Bateria de verificação de gradiente: cada operação diferenciável e a loss
completa em um modelo pequeno (16×16, C = 3), tudo em float64.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.config import GRADCHECK_COORDS, GRADCHECK_STEP, GRADCHECK_TOL
from app.services import autodiff as ad
from app.services.attributes import AttributeRecord, PopulationStats
from app.services.autodiff import Node, Parameter, Tape, grad_check
from app.services.grid_field import Grid, LabelMap, Volume
from app.services.losses import LossWeights, total_loss
from app.services.models import AtlasModel, ModelConfig
from app.services.synthdata import Subject

logger = logging.getLogger(__name__)

TOY_GRID = (16, 16)
TOY_LABELS = 3


@dataclass
class GradCheckRow:
    name: str
    parameter: str
    max_rel_error: float
    passed: bool


def _param(name: str, value: np.ndarray) -> Parameter:
    return Parameter(name, np.asarray(value, dtype=np.float64))


def _projection(tape: Tape, out: Node, seed: int) -> Node:
    """Σ R ⊙ out com R fixo: adjunto genérico em vez de uniforme."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(ad.mul(out, tape.constant(r)))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return np.sign(rng.normal(size=shape)) * (0.1 + rng.random(shape))


def _smooth_field(rng: np.random.Generator, dims, amplitude: float) -> np.ndarray:
    v = np.stack([ndimage.gaussian_filter(rng.normal(size=dims), 2.0) for _ in dims])
    return amplitude * v / max(float(np.abs(v).max()), 1e-12)


# =============================================================================
# Cenários por operação
# =============================================================================

Scenario = Tuple[str, Callable[[Tape], Node], List[Parameter]]


def op_scenarios(seed: int = 0) -> List[Scenario]:
    """(nome, loss_fn, parâmetros verificados) para cada operação."""
    rng = np.random.default_rng(seed)
    dims = (8, 8)
    a = _param("a", rng.normal(size=(2,) + dims))
    b = _param("b", rng.normal(size=(2,) + dims))
    pos = _param("pos", 0.5 + rng.random((2,) + dims))
    kinked = _param("x", _away_from_zero(rng, (2,) + dims))
    vec = _param("vec", rng.normal(size=5))
    w_dense = _param("w", rng.normal(size=(6, 5)))
    b_dense = _param("b", rng.normal(size=6))
    w_conv = _param("w", rng.normal(size=(3, 2, 3, 3)) * 0.3)
    b_conv = _param("b", rng.normal(size=3))
    coarse = _param("coarse", rng.normal(size=(2, 4, 4)))
    vol = _param("vol", ndimage.gaussian_filter(rng.normal(size=(1,) + dims), (0, 1.0, 1.0)))
    disp = _param("u", 0.3 + 0.2 * rng.random((2,) + dims))
    u_outer = _param("u_outer", _smooth_field(rng, dims, 0.8))
    u_inner = _param("u_inner", _smooth_field(rng, dims, 0.8) + 0.35)
    velocity = _param("v", _smooth_field(rng, (12, 12), 1.5))

    def unary(fn):
        return lambda p: (lambda tape: _projection(tape, fn(tape.param(p)), seed))

    def binary(fn):
        return lambda tape: _projection(tape, fn(tape.param(a), tape.param(b)), seed)

    scenarios: List[Scenario] = [
        ("add", binary(ad.add), [a, b]),
        ("sub", binary(ad.sub), [a, b]),
        ("mul", binary(ad.mul), [a, b]),
        ("divide", lambda tape: _projection(tape, ad.divide(tape.param(a), tape.param(pos)), seed), [a, pos]),
        ("scale", unary(lambda x: ad.scale(x, -1.7))(a), [a]),
        ("add_const", unary(lambda x: ad.add_const(x, 0.25))(a), [a]),
        ("square", unary(ad.square)(a), [a]),
        ("log", unary(ad.log)(pos), [pos]),
        ("relu", unary(ad.relu)(kinked), [kinked]),
        ("sum", lambda tape: ad.square(ad.sum(tape.param(a))), [a]),
        ("mean", lambda tape: ad.square(ad.mean(tape.param(a))), [a]),
        ("sum_spatial", unary(ad.sum_spatial)(a), [a]),
        ("reshape", unary(lambda x: ad.reshape(x, (4, 32)))(a), [a]),
        ("concat", lambda tape: _projection(tape, ad.concat([tape.param(a), tape.param(b)]), seed), [a, b]),
        ("softmax", unary(ad.softmax)(a), [a]),
        ("dense", lambda tape: _projection(
            tape, ad.dense(tape.param(vec), tape.param(w_dense), tape.param(b_dense)), seed),
         [vec, w_dense, b_dense]),
        ("conv", lambda tape: _projection(
            tape, ad.conv(tape.param(a), tape.param(w_conv), tape.param(b_conv)), seed),
         [a, w_conv, b_conv]),
        ("max_pool2", unary(ad.max_pool2)(a), [a]),
        ("upsample2", unary(ad.upsample2)(coarse), [coarse]),
        ("spatial_gradient", unary(ad.spatial_gradient)(a), [a]),
        ("warp", lambda tape: _projection(tape, ad.warp(tape.param(vol), tape.param(disp)), seed), [vol, disp]),
        ("compose", lambda tape: _projection(
            tape, ad.compose(tape.param(u_outer), tape.param(u_inner)), seed), [u_outer, u_inner]),
        ("integrate_velocity", unary(lambda x: ad.integrate_velocity(x, 4))(velocity), [velocity]),
    ]
    return scenarios


# =============================================================================
# Loss completa
# =============================================================================

def toy_model_config(**overrides) -> ModelConfig:
    """Modelo pequeno para verificação; a cabeça final começa longe de zero."""
    base = dict(
        grid_dims=TOY_GRID,
        n_labels=TOY_LABELS,
        upsample_stages=2,
        base_features=4,
        unet_encoder=(4, 4),
        unet_decoder=(4, 4, 4),
        integration_steps=4,
        final_init_std=0.1,
        init_spec="mean-of-2",
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_subjects(n: int = 2, seed: int = 0) -> List[Subject]:
    """Imagens suaves com rótulos por limiar (3 classes)."""
    rng = np.random.default_rng(seed)
    grid = Grid(TOY_GRID)
    subjects = []
    for i in range(n):
        smooth = ndimage.gaussian_filter(rng.normal(size=TOY_GRID), 2.0)
        smooth = (smooth - smooth.mean()) / max(float(smooth.std()), 1e-12)
        labels = np.digitize(smooth, [-0.4, 0.4]).astype(np.int32)
        image = (0.5 + 0.3 * smooth)[None]
        record = AttributeRecord.create(30.0 + 20.0 * i, "F" if i % 2 == 0 else "M")
        label_map = LabelMap(grid, labels, TOY_LABELS)
        subjects.append(Subject(f"toy{i:02d}", record, Volume(grid, image), label_map, label_map.counts()))
    return subjects


def full_loss_scenarios(seed: int = 0, variant: str = "cond",
                        seg_loss: str = "soft-dice") -> List[Scenario]:
    """Loss de quatro termos no modelo pequeno; um cenário por grupo de parâmetros."""
    subjects = toy_subjects(2, seed)
    stats = PopulationStats.from_records([s.attributes for s in subjects])
    model = AtlasModel(toy_model_config(variant=variant), stats, seed=seed, dtype=np.float64)
    model.init_template(subjects, np.random.default_rng(seed))
    weights = LossWeights(seg_loss=seg_loss)
    central = np.array([0.7, 1.3])

    def loss_fn(tape: Tape) -> Node:
        return total_loss(tape, model, subjects, weights, central)[0]

    checked = ["unet.enc0.w", "unet.dec2.w", "unet.flow.w"]
    if model.config.conditional:
        checked += ["decoder.dense.w", "decoder.conv0.w", "decoder.img_head.w"]
        if model.config.with_seg:
            checked.append("decoder.seg_head.w")
    else:
        checked.append("template.intensity")
        if model.config.with_seg:
            checked.append("template.seg_logits")

    return [(f"loss[{variant},{seg_loss}]", loss_fn, [model.parameter(name)]) for name in checked]


# =============================================================================
# Execução
# =============================================================================

def run_suite(
    seed: int = 0,
    h: float = GRADCHECK_STEP,
    tol: float = GRADCHECK_TOL,
    n_coords: int = GRADCHECK_COORDS,
    include_loss: bool = True,
    only: Optional[Sequence[str]] = None,
) -> List[GradCheckRow]:
    """
    Roda todos os cenários e devolve uma linha por (cenário, parâmetro).

    Args:
        only: Restringe aos cenários com esses nomes
    """
    scenarios = op_scenarios(seed)
    if include_loss:
        scenarios += full_loss_scenarios(seed, "cond", "soft-dice")
        scenarios += full_loss_scenarios(seed, "cond", "cross-entropy")
        scenarios += full_loss_scenarios(seed, "uncond", "soft-dice")

    rows: List[GradCheckRow] = []
    for name, loss_fn, params in scenarios:
        if only and name not in only:
            continue
        for p in params:
            err = grad_check(loss_fn, p, h=h, seed=seed, n_coords=n_coords, tol=tol)
            row = GradCheckRow(name, p.name, err, err < tol)
            rows.append(row)
            level = logging.INFO if row.passed else logging.WARNING
            logger.log(level, f"gradcheck {name} [{p.name}]: {err:.3e} {'ok' if row.passed else 'FALHOU'}")
    return rows


def format_table(rows: Sequence[GradCheckRow]) -> str:
    width = max([len(r.name) for r in rows] + [9])
    pwidth = max([len(r.parameter) for r in rows] + [9])
    lines = [f"{'operation':<{width}}  {'parameter':<{pwidth}}  {'max_rel_err':>11}  result"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.parameter:<{pwidth}}  {r.max_rel_error:>11.3e}  {'pass' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines) + "\n"


def rows_as_dicts(rows: Sequence[GradCheckRow]) -> List[Dict[str, object]]:
    return [
        {"operation": r.name, "parameter": r.parameter, "max_rel_error": r.max_rel_error, "passed": r.passed}
        for r in rows
    ]
