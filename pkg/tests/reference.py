"""Independent brute-force oracles.

Everything here is written from the definitions with plain loops and
math-module calls, deliberately sharing no code with the package, so tests
can compare the real implementations against an independent route.
"""

from __future__ import annotations

import math

import numpy as np


def softmax_ref(logits, gamma: float = 1.0) -> list[float]:
    m = max(logits)
    exps = [math.exp((x - m) / gamma) for x in logits]
    total = sum(exps)
    return [e / total for e in exps]


def kl_ref(p, q) -> float:
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / qi)
    return total


def weighted_ce_ref(logits, target: int, weights) -> float:
    probs = softmax_ref(logits)
    return -weights[target] * math.log(probs[target])


def mse_ref(pred, target) -> float:
    """Mean over rows of the squared L2 distance."""
    rows = len(pred)
    total = 0.0
    for p_row, t_row in zip(pred, target):
        total += sum((a - b) ** 2 for a, b in zip(p_row, t_row))
    return total / rows


def distill_ref(student_logits, teacher_logits, k: int | None, gamma: float) -> float:
    """Top-K selection on teacher logits (ties to lowest index), softened KL."""
    C = len(teacher_logits)
    k = C if k is None else k
    order = sorted(range(C), key=lambda i: (-teacher_logits[i], i))[:k]
    p = softmax_ref([teacher_logits[i] for i in order], gamma)
    q = softmax_ref([student_logits[i] for i in order], gamma)
    return kl_ref(p, q)


def adamw_ref(theta, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar AdamW recurrence over a list of per-step gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        theta = theta * (1.0 - lr * wd)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def class_weights_ref(counts) -> list[float]:
    total = sum(counts)
    seen = sum(1 for c in counts if c > 0)
    return [total / (seen * c) if c > 0 else 0.0 for c in counts]


def acc_at_1_ref(records) -> float:
    hits = sum(1 for r in records if r.topk[0][0] == r.target)
    return hits / len(records)


def class_mean_recall_ref(records, k: int) -> float:
    classes = sorted({r.target for r in records})
    recalls = []
    for c in classes:
        mine = [r for r in records if r.target == c]
        hit = sum(1 for r in mine if c in [i for i, _ in r.topk[:k]])
        recalls.append(hit / len(mine))
    return sum(recalls) / len(recalls)


def many_shot_recall_ref(records, many_shot, k: int) -> float:
    kept = [r for r in records if r.target in many_shot]
    return class_mean_recall_ref(kept, k)


def ensemble_alpha_ref(f_s, teacher_feats, w_k, b_k, w_q, b_q) -> list[float]:
    """Loop evaluation of the per-head teacher softmax, averaged over heads."""
    H = len(w_k)
    n = len(teacher_feats)
    alphas = [0.0] * n
    for h in range(H):
        q_h = [sum(f_s[a] * w_q[h][a][b] for a in range(len(f_s))) + b_q[h][b]
               for b in range(len(b_q[h]))]
        scores = []
        for i in range(n):
            k_ih = [
                sum(teacher_feats[i][a] * w_k[h][a][b] for a in range(len(teacher_feats[i])))
                + b_k[h][b]
                for b in range(len(b_k[h]))
            ]
            scores.append(sum(ka * qa for ka, qa in zip(k_ih, q_h)))
        head_alpha = softmax_ref(scores)
        for i in range(n):
            alphas[i] += head_alpha[i] / H
    return alphas


def stationary_ref(transition: np.ndarray) -> np.ndarray:
    """Stationary distribution via the left eigenvector (eigen route)."""
    values, vectors = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(values - 1.0)))
    pi = np.real(vectors[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def avt_loss_ref(step_logits, final_logits, future_pred, z, target, intermediate,
                 mu_int: float, mu_feat: float) -> float:
    """Direct summation of the three student loss terms for one instance."""
    t = len(step_logits)
    final_probs = softmax_ref(final_logits)
    loss = -math.log(final_probs[target])
    inter_total = 0.0
    for j in range(t):
        probs = softmax_ref(step_logits[j])
        inter_total += -math.log(probs[intermediate[j]])
    loss += mu_int * inter_total / t
    if t > 1:
        feat_total = 0.0
        for j in range(t - 1):
            feat_total += sum((a - b) ** 2 for a, b in zip(future_pred[j], z[j + 1]))
        loss += mu_feat * feat_total / (t - 1)
    return loss


# Frozen constants computed with the oracles above (asserted in tests before use)
KL_CERTAIN_VS_UNIFORM = 0.6931471805599453  # p=[1,0], q=[.5,.5]
KL_SWAPPED_PAIR = 0.8317766166719343  # p=[.8,.2] vs q=[.2,.8], both directions
WCE_TWO_CLASS = 1.3862943611198906  # logits [0,0], target 1, w=[1,2]
DISTILL_K2 = 0.11094407167172735  # teacher [2,1,0], student [0,0,0], K=2, gamma=1
ADAMW_STEP1 = 0.9000000009999999  # theta=1, grad=1, lr=0.1, wd=0
