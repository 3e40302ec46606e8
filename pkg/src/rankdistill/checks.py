"""Registered gradient checks for every differentiable primitive and for
the two composite training losses on a micro instance.

Central finite differences always see the full dependency of a value on a
parameter, so the composite losses are checked with teacher detachment
disabled; the detached-mode gradient routing (teachers receiving no
gradient from distillation terms) is asserted separately in the trainer
tests. Dropout inside checked functions uses a fixed seed so the mask is
constant under perturbation.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, EncoderModel, TokenSequence
from .losses import LossFlags, cascade_loss, interaction_distill_loss
from .rng import RngState
from .tensor import Tensor, gradient_check
from .trainer import TrainConfig, TrainingExample, _prepare_batch

TOLERANCE = 1e-4


def _rand(rng: RngState, *shape) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    return rng.normal(n).reshape(shape)


def primitive_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Gradient-check every differentiable primitive on seeded inputs."""
    rng = RngState(seed).child("primitives")
    results: list[tuple[str, float]] = []

    def check(name, f, x):
        results.append((name, gradient_check(f, x)))

    a = Tensor(_rand(rng, 3, 4), requires_grad=True)
    b = Tensor(_rand(rng, 3, 4), requires_grad=True)
    row = Tensor(_rand(rng, 4), requires_grad=True)
    w = Tensor(_rand(rng, 4, 5), requires_grad=True)

    check("add", lambda x: T.sum_along(T.mul(T.add(x, b), b)), a)
    check("add_broadcast", lambda x: T.sum_along(T.mul(T.add(a, x), b)), row)
    check("sub", lambda x: T.sum_along(T.mul(T.sub(x, b), b)), a)
    check("mul", lambda x: T.sum_along(T.mul(x, b)), a)
    check("div", lambda x: T.sum_along(T.div(b, T.add(T.mul(x, x), 1.0))), a)
    check("scale", lambda x: T.sum_along(T.scale(x, -2.5)), a)
    lhs_const = Tensor(_rand(rng, 3, 5))
    check("matmul_lhs", lambda x: T.sum_along(T.mul(T.matmul(x, w), lhs_const)), a)
    check("matmul_rhs", lambda x: T.sum_along(T.exp(T.scale(T.matmul(a, x), 0.1))), w)
    check("dot", lambda x: T.dot(x, row.detach()), Tensor(_rand(rng, 4), requires_grad=True))
    check("exp", lambda x: T.sum_along(T.exp(T.scale(x, 0.3))), a)
    check("log", lambda x: T.sum_along(T.log(T.add(T.mul(x, x), 0.5))), a)
    check("sqrt", lambda x: T.sum_along(T.sqrt(T.add(T.mul(x, x), 0.5))), a)
    check("relu", lambda x: T.sum_along(T.mul(T.relu(x), b)), a)
    check("gelu", lambda x: T.sum_along(T.mul(T.gelu(x), b)), a)
    check("softmax", lambda x: T.sum_along(T.mul(T.softmax(x, 1), b)), a)
    gain = Tensor(_rand(rng, 4), requires_grad=True)
    bias = Tensor(_rand(rng, 4), requires_grad=True)
    check("layer_norm_x", lambda x: T.sum_along(T.mul(T.layer_norm(x, gain, bias), b)), a)
    check("layer_norm_gain", lambda x: T.sum_along(T.mul(T.layer_norm(a, x, bias), b)), gain)
    check("layer_norm_bias", lambda x: T.sum_along(T.mul(T.layer_norm(a, gain, x), b)), bias)
    table = Tensor(_rand(rng, 6, 3), requires_grad=True)
    proj = Tensor(_rand(rng, 4, 3))
    check("embedding", lambda x: T.sum_along(T.mul(T.embedding(x, [0, 2, 2, 5]), proj)), table)
    weights3 = Tensor(_rand(rng, 3))
    check("max_along", lambda x: T.sum_along(T.mul(T.max_along(x, 1), weights3)), Tensor(_rand(rng, 3, 4), requires_grad=True))
    check("sum_along", lambda x: T.sum_along(T.mul(T.sum_along(x, 0).reshape((1, 4)), b)), a)
    check("mean_along", lambda x: T.sum_along(T.mul(T.mean_along(x, 1).reshape((3, 1)), b)), a)
    check("concat", lambda x: T.sum_along(T.mul(T.concat([x, b], axis=0), T.concat([b, x], axis=0))), a)
    check("narrow", lambda x: T.sum_along(T.mul(T.narrow(x, 1, 1, 2), T.narrow(b, 1, 0, 2))), a)
    check("transpose", lambda x: T.sum_along(T.mul(T.transpose(x), T.transpose(b))), a)
    check("reshape", lambda x: T.sum_along(T.mul(T.reshape(x, (4, 3)), T.reshape(b, (4, 3)))), a)
    drop_in = Tensor(_rand(rng, 5, 5), requires_grad=True)
    check(
        "dropout",
        lambda x: T.sum_along(T.mul(T.dropout(x, 0.3, RngState(seed).child("mask")), Tensor(_rand(RngState(seed).child("dw"), 5, 5)))),
        drop_in,
    )
    p_fixed = T.softmax(Tensor(_rand(rng, 5)), 0).detach()
    q_logits = Tensor(_rand(rng, 5), requires_grad=True)
    check("kl_q_side", lambda x: T.kl_divergence(p_fixed, T.softmax(x, 0)), q_logits)
    q_fixed = T.softmax(Tensor(_rand(rng, 5)), 0).detach()
    check("kl_p_side", lambda x: T.kl_divergence(T.softmax(x, 0), q_fixed), Tensor(_rand(rng, 5), requires_grad=True))
    return results


def _micro_config(dropout_p: float = 0.0) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=24, d_model=8, n_layers=2, n_heads=2, d_ff=12, max_len=16, dropout_p=dropout_p
    )


def _micro_batch(rng: RngState, n_queries: int = 2, n_candidates: int = 4) -> list[TrainingExample]:
    """Tiny batch: each query has one positive and n_candidates-1 negatives."""
    batch = []
    next_pid = 0
    for qi in range(n_queries):
        q_tokens = [3 + rng.randint(21) for _ in range(3)]
        passages = []
        for _ in range(n_candidates):
            passages.append([3 + rng.randint(21) for _ in range(4)])
        pids = list(range(next_pid, next_pid + n_candidates))
        next_pid += n_candidates
        batch.append(
            TrainingExample(
                query_id=qi,
                query=TokenSequence.for_query(q_tokens),
                positive_id=pids[0],
                positive=TokenSequence.for_passage(passages[0]),
                negative_ids=pids[1:],
                negatives=[TokenSequence.for_passage(p) for p in passages[1:]],
            )
        )
    return batch


def encoder_check(seed: int = 0) -> tuple[str, float]:
    """Full-encoder gradient against a random projection of the outputs."""
    model = EncoderModel.initialize(_micro_config(), RngState(seed).child("enc"), init_scale=0.5)
    seq = TokenSequence.for_query([5, 6, 7, 8])
    projection = Tensor(_rand(RngState(seed).child("proj"), 6, 8))

    def f(_):
        enc = model.encode(seq)
        return T.sum_along(T.mul(enc.token_reps, projection))

    worst = max(gradient_check(f, p) for p in model.parameters())
    return ("encoder", worst)


def composite_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference the two composite losses w.r.t. every parameter."""
    rng = RngState(seed).child("composite")
    batch = _micro_batch(rng.split())
    student = EncoderModel.initialize(_micro_config(), rng.split(), init_scale=0.5)
    cross = EncoderModel.initialize(_micro_config(), rng.split(), scoring_head=True, init_scale=0.5)

    id_flags = LossFlags.none(l_de=True, l_li=True, l_li_to_de=True, detach_teachers=False)
    id_config = TrainConfig(step="id", batch_queries=2, n_negatives=3, flags=id_flags, seed=seed)

    def loss_id(_):
        distill_batch, _dups = _prepare_batch(student, batch, id_config, RngState(seed).child("fw"))
        return interaction_distill_loss(distill_batch, id_flags).total

    cd_flags = LossFlags(detach_teachers=False)
    cd_config = TrainConfig(step="cascade", batch_queries=2, n_negatives=3, flags=cd_flags, seed=seed)

    def loss_cd(_):
        distill_batch, _dups = _prepare_batch(
            student, batch, cd_config, RngState(seed).child("fw"), cross
        )
        return cascade_loss(distill_batch, cd_flags).total

    results = []
    worst_id = max(gradient_check(loss_id, p) for p in student.parameters())
    results.append(("interaction_distill_loss", worst_id))
    worst_cd = max(
        gradient_check(loss_cd, p) for p in [*student.parameters(), *cross.parameters()]
    )
    results.append(("cascade_loss", worst_cd))

    # Regularized variant: fixed dropout seeds keep the masks constant.
    reg_flags = LossFlags.none(
        l_de=True, l_li=True, l_li_to_de=True, dual_reg=True, detach_teachers=False
    )
    reg_student = EncoderModel.initialize(
        _micro_config(dropout_p=0.1), rng.split(), init_scale=0.5
    )
    reg_config = TrainConfig(step="id", batch_queries=2, n_negatives=3, flags=reg_flags, seed=seed)

    def loss_reg(_):
        distill_batch, _dups = _prepare_batch(
            reg_student, batch, reg_config, RngState(seed).child("fw2")
        )
        return interaction_distill_loss(distill_batch, reg_flags).total

    sample = [reg_student.params[name] for name in ("tok_emb", "layer0.wq", "layer1.w2")]
    results.append(("interaction_distill_loss+dualreg", max(gradient_check(loss_reg, p) for p in sample)))
    return results


def run_all(seed: int = 0) -> list[tuple[str, float]]:
    return [*primitive_checks(seed), encoder_check(seed), *composite_checks(seed)]
