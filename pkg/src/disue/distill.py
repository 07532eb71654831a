"""Data-free fusion of cluster models into one universal model.

Each round the server alternates two phases over a conditional generator
and the freshly averaged global model (the student):

  (a) generator phase: synthesize a batch conditioned on sampled labels
      and push it where the cluster teachers disagree with the student,
      while staying class-faithful (cf term) and diverse (div term);
  (b) student phase: regenerate the batch with the frozen generator and
      pull the student toward the per-class-weighted teacher predictions.

Stop gradients follow the alternating structure: the student distribution
is a constant during (a) and the teacher distributions are constants
during (b). Teacher parameters are never updated; generator gradients
reach the teachers only through the synthesized samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .aggregation import GlsDistribution, GwfWeights, sample_labels
from .errors import DivergenceError, InvalidInputError
from .nn import Classifier, Generator, Tensor

_PROB_FLOOR = 1e-12


@dataclass
class DistillConfig:
    """Knobs of the fusion stage.

    Defaults are calibrated for the bundled synthetic benchmark: generator
    updates lead the student 5:2 per alternation so synthesized samples
    become class-faithful before they can pull the student toward a
    teacher's opinion in regions that teacher never saw.
    """

    beta_cf: float = 1.0  # weight of the class-fidelity term
    beta_div: float = 1.0  # weight of the diversity term
    noise_dim: int = 100
    pseudo_batch: int = 50  # Q, samples synthesized per inner iteration
    inner_iters: int = 10  # alternations per round
    gen_steps: int = 5  # generator updates per alternation
    student_steps: int = 2  # student updates per alternation
    gen_lr: float = 0.05
    student_lr: float = 0.05
    label_embed_dim: int = 8
    gen_hidden_dim: int = 64
    reinit_generator: bool = False  # fresh generator every round instead of a persistent one
    literal_minimax: bool = False  # use the flipped sign composition for the generator objective

    def validate(self) -> None:
        for key in ("noise_dim", "pseudo_batch", "inner_iters", "gen_steps", "student_steps", "label_embed_dim", "gen_hidden_dim"):
            if int(getattr(self, key)) < 1:
                raise InvalidInputError(f"distill.{key} must be >= 1")
        for key in ("beta_cf", "beta_div"):
            if float(getattr(self, key)) < 0:
                raise InvalidInputError(f"distill.{key} must be >= 0")
        for key in ("gen_lr", "student_lr"):
            if float(getattr(self, key)) <= 0:
                raise InvalidInputError(f"distill.{key} must be > 0")


@dataclass
class PseudoBatch:
    """One synthesized batch: the noise and labels that produced the samples."""

    noise: np.ndarray  # [Q, noise_dim]
    labels: np.ndarray  # [Q] int64
    samples: Tensor  # [Q, sample_dim]; graph-attached when generated under grad

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class IgaRecord:
    """Loss bookkeeping for one optimization step inside iga_round."""

    phase: str  # "gen" or "student"
    inner_iter: int
    loss_cd: float
    loss_cf: float = float("nan")
    loss_div: float = float("nan")
    objective: float = float("nan")  # generator objective, gen phase only


@dataclass
class IgaResult:
    student: Classifier
    generator: Generator
    trace: list[IgaRecord] = field(default_factory=list)
    diverged: bool = False

    def mean_losses(self) -> tuple[float, float, float]:
        """Mean (cd, cf, div) over the round, cd from student steps."""
        cd = [rec.loss_cd for rec in self.trace if rec.phase == "student"]
        cf = [rec.loss_cf for rec in self.trace if rec.phase == "gen"]
        dv = [rec.loss_div for rec in self.trace if rec.phase == "gen"]
        to_mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        return to_mean(cd), to_mean(cf), to_mean(dv)


def generate_pseudo_batch(generator: Generator, gls: GlsDistribution, count: int, rng: np.random.Generator) -> PseudoBatch:
    """Sample labels and noise, then synthesize; graph recording follows the ambient mode."""
    labels = sample_labels(gls, count, rng)
    noise = rng.standard_normal((count, generator.noise_dim))
    return PseudoBatch(noise=noise, labels=labels, samples=generator.forward(noise, labels))


def _teacher_sample_weights(gwf: GwfWeights, labels: np.ndarray) -> np.ndarray:
    """weights[k, i] = alpha[k, labels[i]]."""
    return gwf.alpha[:, labels]


def _weighted_kl(teacher_probs: Sequence, student_probs, weights: np.ndarray, count: int) -> Tensor:
    """Mean over the batch of sum_k w[k,i] * KL(teacher_k_i || student_i).

    Either side may be a live tensor or a constant; the caller decides the
    stop-gradient placement by what it passes in.
    """
    total = None
    for k, probs in enumerate(teacher_probs):
        p = nn.as_tensor(probs)
        q = nn.as_tensor(student_probs)
        row_kl = nn.tsum(
            nn.mul(p, nn.sub(nn.log(nn.clamp_min(p, _PROB_FLOOR)), nn.log(nn.clamp_min(q, _PROB_FLOOR)))),
            axis=1,
        )
        contrib = nn.tsum(nn.mul(row_kl, weights[k]))
        total = contrib if total is None else nn.add(total, contrib)
    return nn.mul(total, 1.0 / count)


def loss_cd(teachers: Sequence[Classifier], student: Classifier, batch: PseudoBatch, gwf: GwfWeights) -> Tensor:
    """Cluster-distillation loss, student side live, teacher side constant.

    For every sample, the KL from each teacher's softmax to the student's is
    weighted by that teacher's share of the sample's conditioning class.
    """
    if len(teachers) != gwf.num_clusters:
        raise InvalidInputError("one weight row per teacher required")
    x = batch.samples.data  # constant for the student update
    with nn.no_grad():
        teacher_probs = [nn.softmax(t.forward(x)).data for t in teachers]
    student_probs = nn.softmax(student.forward(x))
    weights = _teacher_sample_weights(gwf, batch.labels)
    return _weighted_kl(teacher_probs, student_probs, weights, batch.size)


def loss_cf(teachers: Sequence[Classifier], batch: PseudoBatch, gwf: GwfWeights) -> Tensor:
    """Class-fidelity loss: weighted teacher cross-entropy on the synthesized batch.

    Gradients flow into the generator through the samples; teacher
    parameters stay frozen.
    """
    if len(teachers) != gwf.num_clusters:
        raise InvalidInputError("one weight row per teacher required")
    weights = _teacher_sample_weights(gwf, batch.labels)
    total = None
    for k, teacher in enumerate(teachers):
        picked = nn.take_per_row(nn.log_softmax(teacher.forward(batch.samples)), batch.labels)
        contrib = nn.tsum(nn.mul(picked, weights[k]))
        total = contrib if total is None else nn.add(total, contrib)
    return nn.mul(total, -1.0 / batch.size)


def loss_div(batch: PseudoBatch) -> Tensor:
    """Diversity loss exp(mean of -||x_i - x_j|| * ||z_i - z_j||); 1 when samples collapse."""
    q = batch.size
    zdiff = batch.noise[:, None, :] - batch.noise[None, :, :]
    zdist = np.sqrt((zdiff * zdiff).sum(axis=2))
    xdist = nn.pairwise_distances(batch.samples)
    exponent = nn.mul(nn.tsum(nn.mul(xdist, -zdist)), 1.0 / (q * q))
    return nn.exp(exponent)


def _generator_objective(
    teachers: Sequence[Classifier],
    student: Classifier,
    batch: PseudoBatch,
    gwf: GwfWeights,
    cfg: DistillConfig,
) -> tuple[Tensor, float, float, float]:
    """The scalar the generator minimizes, plus the component values."""
    weights = _teacher_sample_weights(gwf, batch.labels)
    with nn.no_grad():
        student_probs = nn.softmax(student.forward(batch.samples.data)).data  # constant for the generator
    teacher_probs = [nn.softmax(t.forward(batch.samples)) for t in teachers]  # live through the samples
    cd = _weighted_kl(teacher_probs, student_probs, weights, batch.size)
    cf = loss_cf(teachers, batch, gwf)
    div = loss_div(batch)
    if cfg.literal_minimax:
        # the flipped composition: generator descends all three terms together
        objective = nn.add(nn.add(cd, nn.mul(cf, cfg.beta_cf)), nn.mul(div, cfg.beta_div))
    else:
        objective = nn.add(nn.add(nn.neg(cd), nn.mul(cf, cfg.beta_cf)), nn.mul(div, cfg.beta_div))
    return objective, cd.item(), cf.item(), div.item()


def iga_round(
    teachers: Sequence[Classifier],
    student: Classifier,
    generator: Generator,
    gls: GlsDistribution,
    gwf: GwfWeights,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> IgaResult:
    """One full inter-group aggregation pass: alternate generator and student updates.

    On divergence (non-finite loss or gradient) both models are restored to
    their state at entry and the result is flagged.
    """
    cfg.validate()
    if not teachers:
        raise InvalidInputError("iga_round needs at least one teacher")
    for t in teachers:
        t.freeze()
    student_backup = student.param_vector()
    generator_backup = generator.param_vector()
    trace: list[IgaRecord] = []
    try:
        for inner in range(cfg.inner_iters):
            labels = sample_labels(gls, cfg.pseudo_batch, rng)
            noise = rng.standard_normal((cfg.pseudo_batch, generator.noise_dim))
            for _ in range(cfg.gen_steps):
                batch = PseudoBatch(noise, labels, generator.forward(noise, labels))
                objective, cd_val, cf_val, div_val = _generator_objective(teachers, student, batch, gwf, cfg)
                if not np.isfinite(objective.item()):
                    raise DivergenceError("non-finite generator objective")
                nn.backward(objective)
                generator.step(cfg.gen_lr)
                trace.append(IgaRecord("gen", inner, cd_val, cf_val, div_val, objective.item()))
            with nn.no_grad():
                frozen_samples = generator.forward(noise, labels)
            fixed = PseudoBatch(noise, labels, frozen_samples)
            for _ in range(cfg.student_steps):
                cd = loss_cd(teachers, student, fixed, gwf)
                if not np.isfinite(cd.item()):
                    raise DivergenceError("non-finite distillation loss")
                trace.append(IgaRecord("student", inner, cd.item()))
                if cd.item() == 0.0:
                    # KL at its exact minimum: the true logit gradient is zero,
                    # so skip the step instead of applying float residue
                    continue
                nn.backward(cd)
                student.step(cfg.student_lr)
    except DivergenceError:
        student.load_param_vector(student_backup)
        generator.load_param_vector(generator_backup)
        return IgaResult(student, generator, trace, diverged=True)
    return IgaResult(student, generator, trace, diverged=False)
