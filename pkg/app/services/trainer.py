"""
Laço de treino: sorteio do batch de centralidade, loss total, backward,
Adam. Grava losses.csv a cada passo e checkpoints na cadência configurada.

Retomada exata: parâmetros, momentos do Adam, step counts e estado do RNG
vêm do checkpoint; o CSV é truncado no passo salvo e continua dali.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from app.services.attributes import PopulationStats
from app.services.autodiff import Adam, Tape
from app.services.centrality import CentralitySampler
from app.services.checkpoint import load_checkpoint, restore_parameters, restore_rng
from app.services.evaluation import evaluate_dataset, posthoc_template_labels
from app.services.exceptions import CheckpointError, DatasetError
from app.services.grid_field import Volume
from app.services.losses import total_loss
from app.services.models import AtlasModel
from app.services.run_config import RunConfig
from app.services.synthdata import Dataset

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
LOSSES_NAME = "losses.csv"
LOSS_COLUMNS = ("step", "epoch", "img", "seg", "smooth", "central", "total", "anchor")


@dataclass
class TrainResult:
    checkpoint: Path
    losses_csv: Path
    global_step: int
    epochs_run: int
    val_history: List[Tuple[int, float]] = field(default_factory=list)
    converged: bool = False


def converged(history: List[Tuple[int, float]], window: int, min_delta: float) -> bool:
    """
    Dice de validação parou de melhorar: o melhor valor dos últimos
    `window` épocas supera o melhor anterior por menos de `min_delta`.
    """
    if not history:
        return False
    last_epoch = history[-1][0]
    recent = [d for e, d in history if e > last_epoch - window]
    before = [d for e, d in history if e <= last_epoch - window]
    if not before:
        return False
    return max(recent) - max(before) < min_delta


def _truncate_losses(path: Path, global_step: int) -> None:
    """Mantém só as linhas com step <= global_step."""
    if not path.exists():
        return
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = [r for r in csv.DictReader(f) if int(r["step"]) <= global_step]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


class Trainer:
    """
    Treina um AtlasModel sobre a partição de treino.

    Uso:
        trainer = Trainer(config, train, val, run_dir)
        result = trainer.fit()                 # ou fit(resume=ckpt)
    """

    def __init__(self, config: RunConfig, train: Dataset, val: Optional[Dataset], run_dir: Path):
        if len(train) == 0:
            raise DatasetError("Partição de treino vazia")
        self.config = config
        self.train = train
        self.val = val
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = np.float64 if config.float64 else np.float32

        extras_vocab = train.spec.extras if train.spec is not None else None
        self.stats = PopulationStats.from_records(train.records(), extras_vocab)
        self.model = AtlasModel(config.model, self.stats, seed=config.seed, dtype=self.dtype)
        self.optimizer = Adam(lr=config.train.lr)
        self.rng = np.random.default_rng(config.seed)
        self.sampler = CentralitySampler(
            train.records(),
            self.stats,
            mode=config.train.centrality_mode,
            anchor_kind=config.train.anchor_kind,
            sigma_kde=config.loss.sigma_kde,
            sigma_density=config.loss.sigma_density,
            kde_units=config.loss.kde_units,
            reweight=config.train.centrality_reweight,
        )

        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0
        self.val_history: List[Tuple[int, float]] = []

    @property
    def steps_per_epoch(self) -> int:
        t = self.config.train
        return t.steps_per_epoch or math.ceil(len(self.train) / t.batch_size)

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / CHECKPOINT_NAME

    @property
    def losses_path(self) -> Path:
        return self.run_dir / LOSSES_NAME

    # ------------------------------------------------------------------
    # Estado
    # ------------------------------------------------------------------

    def _extra(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "val_history": [[e, d] for e, d in self.val_history],
        }

    def save(self, path: Optional[Path] = None) -> Path:
        path = path or self.checkpoint_path
        self.model.save(path, self.rng, self._extra())
        return path

    def resume(self, path: Path) -> None:
        """
        Restaura o estado completo do checkpoint.

        Raises:
            CheckpointError: checkpoint sem metadados de treino
        """
        state = load_checkpoint(path)
        if "global_step" not in state.extra:
            raise CheckpointError("Checkpoint sem estado de treino", path)
        restore_parameters(self.model.state(), state, path)
        self.rng = restore_rng(state)
        self.epoch = int(state.extra["epoch"])
        self.step_in_epoch = int(state.extra.get("step_in_epoch", 0))
        self.global_step = int(state.extra["global_step"])
        self.val_history = [(int(e), float(d)) for e, d in state.extra.get("val_history", [])]
        _truncate_losses(self.losses_path, self.global_step)
        logger.info(f"Treino retomado de {path}: época {self.epoch}, passo {self.global_step}")

    # ------------------------------------------------------------------
    # Passos
    # ------------------------------------------------------------------

    def train_step(self) -> Dict[str, Any]:
        """Um passo de Adam; devolve a linha do CSV."""
        plan = self.sampler.draw(self.config.train.batch_size, self.rng)
        batch = [self.train[int(i)] for i in plan.indices]
        tape = Tape()
        loss, breakdown = total_loss(tape, self.model, batch, self.config.loss,
                                     plan.central_weights, plan.describe())
        tape.backward(loss)
        self.optimizer.step(self.model.parameters())
        self.global_step += 1
        logger.debug(f"Passo {self.global_step}: {breakdown.as_dict()}")
        row = {"step": self.global_step, "epoch": self.epoch}
        row.update(breakdown.as_dict())
        return row

    def template_seg(self) -> Optional[Volume]:
        """Probabilidades pós-hoc do template para variantes no-seg."""
        if self.model.config.with_seg:
            return None
        n = min(self.config.train.val_subjects, len(self.train))
        probs, _ = posthoc_template_labels(self.train.subjects[:n], self.model)
        return probs

    def validate(self) -> float:
        n = min(self.config.train.val_subjects, len(self.val))
        subjects = sorted(self.val.subjects, key=lambda s: s.id)[:n]
        report = evaluate_dataset(subjects, self.model, self.template_seg(), workers=self.config.threads)
        return report.mean_dice

    # ------------------------------------------------------------------
    # Laço
    # ------------------------------------------------------------------

    def fit(self, resume: Optional[Path] = None) -> TrainResult:
        t = self.config.train
        if resume is not None:
            self.resume(resume)
        else:
            self.model.init_template(self.train.subjects, self.rng)
            _truncate_losses(self.losses_path, 0)

        new_file = not self.losses_path.exists()
        is_converged = False
        with open(self.losses_path, "a", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS, lineterminator="\n")
            if new_file:
                writer.writeheader()

            progress = tqdm(range(self.epoch, t.epochs), desc="treino", unit="época",
                            disable=not logger.isEnabledFor(logging.INFO))
            for epoch in progress:
                self.epoch = epoch
                epoch_losses = []
                while self.step_in_epoch < self.steps_per_epoch:
                    if t.max_steps is not None and self.global_step >= t.max_steps:
                        break
                    row = self.train_step()
                    self.step_in_epoch += 1
                    writer.writerow(row)
                    epoch_losses.append(row["total"])
                f.flush()

                if t.max_steps is not None and self.global_step >= t.max_steps:
                    logger.info(f"max_steps={t.max_steps} atingido na época {epoch}")
                    break

                self.epoch = epoch + 1
                self.step_in_epoch = 0
                mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
                progress.set_postfix(loss=f"{mean_loss:.4f}")
                logger.info(f"Época {epoch + 1}/{t.epochs}: loss média {mean_loss:.6f}")

                if self.val is not None and len(self.val) and self.epoch % t.val_every == 0:
                    dice_val = self.validate()
                    self.val_history.append((self.epoch, dice_val))
                    logger.info(f"Época {self.epoch}: Dice de validação {dice_val:.4f}")
                    if converged(self.val_history, t.convergence_window, t.convergence_min_delta):
                        logger.info(f"Convergência na época {self.epoch}")
                        is_converged = True

                if self.epoch % t.checkpoint_every == 0 or is_converged:
                    self.save()
                if is_converged:
                    break

        path = self.save()
        return TrainResult(path, self.losses_path, self.global_step, self.epoch,
                           list(self.val_history), is_converged)
