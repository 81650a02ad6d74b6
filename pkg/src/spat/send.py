"""Per-layer attention sensitivity scoring and pruning-plan construction.

For each attention layer the loss gradient with respect to the layer's
connection mask is accumulated over scoring batches. Because the realized
scores are ``A * mask``, that gradient equals the upstream attention
gradient Hadamard-multiplied with the attention scores, summed over the
batch. The raw sensitivities are turned into a scalar dispersion score:

* take absolute values and row-softmax-normalize each row, so every row
  becomes a probability distribution over key positions;
* average the normalized maps across heads;
* score the layer by the mean over rows of the population standard
  deviation of each row.

Layers whose attention maps are close to uniform (scaled-identity-like,
uninformative) score near zero and are pruned first. Higher dispersion
means a more effective attention layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ParseError
from .model import Forecaster, mse_loss
from .tensor import Tape, softmax_lastaxis

REPORT_VERSION = 1


@dataclass
class SensitivityRecord:
    """Raw and reduced sensitivities for one attention layer."""

    layer_index: int
    sen: np.ndarray        # [H, S, S] mask gradient, batch-averaged
    sen_norm: np.ndarray   # [H, S, S] row-softmaxed |sen|
    sen_bar: np.ndarray    # [S, S] head average
    send: float
    batches_accumulated: int


@dataclass
class PruningPlan:
    """Ranked dispersion scores and the pruned-layer selection."""

    send_scores: list[tuple[int, float]]
    i_ranked: list[int]    # layer indices, highest score first
    alpha: float
    k: int
    i_pruned: list[int]    # bottom-k of i_ranked, in ranked order


def compute_sensitivity(model: Forecaster, batches) -> list[SensitivityRecord]:
    """Accumulate mask gradients of the batch-averaged loss.

    ``batches`` yields ``(x, y)`` pairs. The model must carry all-ones
    masks; dropout is disabled during scoring so the result is a
    deterministic function of weights and data. Layers whose attention was
    already removed are skipped.
    """
    layers = [i for i, blk in enumerate(model.blocks) if not blk.pruned]
    if not layers:
        raise ContractError("model has no attention layers left to score")
    for i in layers:
        if not np.all(model.blocks[i].mask.data == 1.0):
            raise ContractError(f"scoring requires an all-ones mask, "
                                f"layer {i} has masked entries")

    for i in layers:
        model.blocks[i].mask.requires_grad = True
    model.zero_grad()

    sen_sum = {i: np.zeros_like(model.blocks[i].mask.data) for i in layers}
    n_batches = 0
    try:
        for x, y in batches:
            with Tape() as tape:
                pred = model.forward(x, training=False, collect_attention=True)
                loss = mse_loss(pred, y)
            tape.backward(loss)
            for i in layers:
                blk = model.blocks[i]
                upstream = blk.last_masked_attention.grad
                if upstream is None:
                    continue
                # chain rule: dL/dmask = sum_batch dL/dA' (.) A
                sen_sum[i] += np.sum(upstream * blk.last_attention.data, axis=0)
            model.zero_grad()
            tape.release()
            n_batches += 1
    finally:
        for i in layers:
            model.blocks[i].mask.requires_grad = False
        model.zero_grad()

    if n_batches == 0:
        raise ContractError("compute_sensitivity needs at least one batch")

    records = []
    for i in layers:
        sen = sen_sum[i] / n_batches
        sen_norm = normalize_sensitivity(sen)
        sen_bar = aggregate_heads(sen_norm)
        records.append(SensitivityRecord(
            layer_index=i,
            sen=sen,
            sen_norm=sen_norm,
            sen_bar=sen_bar,
            send=send_score(sen_bar),
            batches_accumulated=n_batches,
        ))
    return records


def normalize_sensitivity(sen: np.ndarray) -> np.ndarray:
    """Row-softmax of absolute sensitivities over the key axis."""
    if np.isnan(sen).any():
        raise NumericError("normalize_sensitivity: NaN sensitivities")
    return softmax_lastaxis(np.abs(sen))


def aggregate_heads(sen_norm: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the leading head axis."""
    return sen_norm.mean(axis=0)


def send_score(sen_bar: np.ndarray) -> float:
    """Mean over rows of the population standard deviation of each row."""
    if sen_bar.size == 0:
        raise ContractError("send_score: empty sensitivity matrix")
    return float(np.std(sen_bar, axis=-1).mean())


def build_plan(send_scores, alpha: float) -> PruningPlan:
    """Rank layers by score descending and select the bottom ``ceil(alpha*N)``.

    Ties rank the lower layer index first, so selection is deterministic.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"pruning ratio must lie in (0, 1), got {alpha}")
    scores = list(send_scores)
    if not scores:
        raise ConfigError("build_plan needs at least one scored layer")
    n = len(scores)
    by_index = dict(scores)
    if len(by_index) != n:
        raise ConfigError("duplicate layer indices in send scores")
    ranked = sorted(by_index, key=lambda i: (-by_index[i], i))
    k = math.ceil(alpha * n)
    return PruningPlan(
        send_scores=scores,
        i_ranked=ranked,
        alpha=alpha,
        k=k,
        i_pruned=ranked[n - k:],
    )


def plan_from_records(records: list[SensitivityRecord], alpha: float) -> PruningPlan:
    return build_plan([(r.layer_index, r.send) for r in records], alpha)


# -- report file --------------------------------------------------------


def format_report(records: list[SensitivityRecord], plan: PruningPlan) -> str:
    """Stable-order structured text: one record per layer plus the plan."""
    lines = [
        f"send_report_version: {REPORT_VERSION}",
        f"layers: {len(plan.send_scores)}",
        f"alpha: {plan.alpha!r}",
        f"k: {plan.k}",
    ]
    rank_of = {idx: r + 1 for r, idx in enumerate(plan.i_ranked)}
    pruned = set(plan.i_pruned)
    batches = records[0].batches_accumulated if records else 0
    lines.append(f"batches: {batches}")
    for idx, send in sorted(plan.send_scores):
        lines.append(f"layer {idx}: send={send!r} rank={rank_of[idx]} "
                     f"pruned={'true' if idx in pruned else 'false'}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> PruningPlan:
    """Inverse of :func:`format_report` (record fields beyond the plan are
    not recoverable from the file and are not needed by consumers)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    fields = {}
    layer_lines = []
    for ln in lines:
        if ln.startswith("layer "):
            layer_lines.append(ln)
        else:
            key, _, value = ln.partition(":")
            fields[key.strip()] = value.strip()
    try:
        if int(fields["send_report_version"]) != REPORT_VERSION:
            raise ParseError(f"unsupported report version "
                             f"{fields['send_report_version']}")
        alpha = float(fields["alpha"])
        scores = []
        for ln in layer_lines:
            head, _, rest = ln.partition(":")
            idx = int(head.split()[1])
            parts = dict(p.split("=", 1) for p in rest.split())
            scores.append((idx, float(parts["send"])))
    except ParseError:
        raise
    except (KeyError, ValueError, IndexError) as e:
        raise ParseError(f"malformed send report: {e}") from e
    return build_plan(scores, alpha)
