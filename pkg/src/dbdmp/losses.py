"""Training objectives.

Probability maps are ``(B, C, *spatial)`` tensors whose channel vectors sum to one.
Binary label maps are ``(B, *spatial)`` (a singleton channel axis is also accepted).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple

import torch

SUP_TERMS = ("ce", "sce", "pce", "tversky")
PSEUDO_TERMS = ("klce", "dice", "none")


@dataclass
class LossConfig:
    gamma: float = 0.8
    alpha: float = 0.4
    tau: float = 0.3
    lam: float = 2.0
    t_max: int = 99
    eps_prob: float = 1e-6
    eps_smooth: float = 1e-5
    rce_log_zero: float = -4.0
    sup_terms: Tuple[str, ...] = ("sce", "pce", "tversky")
    pseudo_term: str = "klce"
    sharpen_mode: str = "softmax"  # or "power"

    def __post_init__(self):
        self.sup_terms = tuple(self.sup_terms)
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if min(self.eps_prob, self.eps_smooth) <= 0:
            raise ValueError("eps values must be > 0")
        bad = [t for t in self.sup_terms if t not in SUP_TERMS]
        if bad or not self.sup_terms:
            raise ValueError(f"sup_terms must be a non-empty subset of {SUP_TERMS}, got {self.sup_terms}")
        if self.pseudo_term not in PSEUDO_TERMS:
            raise ValueError(f"pseudo_term must be one of {PSEUDO_TERMS}, got {self.pseudo_term!r}")
        if self.sharpen_mode not in ("softmax", "power"):
            raise ValueError(f"sharpen_mode must be 'softmax' or 'power', got {self.sharpen_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sup_terms"] = list(self.sup_terms)
        return d


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _binary(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Squeeze a singleton channel axis and check the label matches p's spatial grid."""
    if y.dim() == p.dim() and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != p.shape[:1] + p.shape[2:]:
        raise ValueError(f"label shape {tuple(y.shape)} does not match probabilities {tuple(p.shape)}")
    return y.to(p.dtype)


def one_hot(y: torch.Tensor, num_classes: int = 2) -> torch.Tensor:
    """(B, *spatial) integer map -> (B, C, *spatial) float one-hot."""
    oh = torch.nn.functional.one_hot(y.long(), num_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype() if not y.is_floating_point() else y.dtype)


def mse_reconstruction(p_main: torch.Tensor, p_aux: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(p_main, target, "mse_reconstruction")
    _check_same(p_aux, target, "mse_reconstruction")
    return torch.mean((p_main - target) ** 2) + torch.mean((p_aux - target) ** 2)


def cross_entropy(p: torch.Tensor, y: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Voxel-mean of -sum_k y_k log p_k; ``y`` is one-hot or soft with the same shape as ``p``."""
    _check_same(p, y, "cross_entropy")
    return -(y * torch.log(p.clamp(eps, 1.0))).sum(1).mean()


def reverse_cross_entropy(p: torch.Tensor, y: torch.Tensor, log_zero: float = -4.0) -> torch.Tensor:
    """Voxel-mean of -sum_k p_k log y_k with log 0 replaced by ``log_zero``."""
    _check_same(p, y, "reverse_cross_entropy")
    log_y = torch.log(y).clamp(min=log_zero)
    return -(p * log_y).sum(1).mean()


def sce(p: torch.Tensor, y: torch.Tensor, gamma: float = 0.8, eps: float = 1e-6, log_zero: float = -4.0):
    """Symmetric cross-entropy: gamma * CE(p, y) + CE(y, p)."""
    return gamma * cross_entropy(p, y, eps) + reverse_cross_entropy(p, y, log_zero)


def pce(p: torch.Tensor, y_partial: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Cross-entropy averaged over annotated foreground voxels only (0 if there are none)."""
    y = _binary(y_partial, p)
    omega = y > 0.5
    n = omega.sum()
    if n == 0:
        return p.sum() * 0.0
    log_fg = torch.log(p[:, 1].clamp(eps, 1.0))
    return -(log_fg * omega).sum() / n


def tversky_terms(p_fg: torch.Tensor, y: torch.Tensor):
    y = y.to(p_fg.dtype)
    tp = (p_fg * y).sum()
    fp = (p_fg * (1 - y)).sum()
    fn = ((1 - p_fg) * y).sum()
    return tp, fp, fn


def tversky(p_fg: torch.Tensor, y: torch.Tensor, alpha: float = 0.4, eps: float = 1e-5) -> torch.Tensor:
    """1 - (TP + eps) / (TP + alpha FP + (1 - alpha) FN + eps) on foreground probabilities."""
    _check_same(p_fg, y, "tversky")
    tp, fp, fn = tversky_terms(p_fg, y)
    return 1.0 - (tp + eps) / (tp + alpha * fp + (1 - alpha) * fn + eps)


def soft_dice(p: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - mean over channels of soft Dice between p and a soft target."""
    _check_same(p, target, "soft_dice")
    dims = (0,) + tuple(range(2, p.dim()))
    inter = (p * target).sum(dims)
    denom = p.sum(dims) + target.sum(dims)
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def supervised_terms(p: torch.Tensor, y_partial: torch.Tensor, cfg: LossConfig) -> Dict[str, torch.Tensor]:
    y = _binary(y_partial, p)
    y_oh = None
    out = {}
    for term in cfg.sup_terms:
        if term in ("ce", "sce") and y_oh is None:
            y_oh = torch.stack([1 - y, y], dim=1)
        if term == "ce":
            out[term] = cross_entropy(p, y_oh, cfg.eps_prob)
        elif term == "sce":
            out[term] = sce(p, y_oh, cfg.gamma, cfg.eps_prob, cfg.rce_log_zero)
        elif term == "pce":
            out[term] = pce(p, y, cfg.eps_prob)
        elif term == "tversky":
            out[term] = tversky(p[:, 1], y, cfg.alpha, cfg.eps_smooth)
    return out


def supervised_loss(p: torch.Tensor, y_partial: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Sum of the configured supervised terms (default SCE + PCE + Tversky)."""
    return sum(supervised_terms(p, y_partial, cfg).values())


def kl_divergence_map(p_main: torch.Tensor, p_aux: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-voxel sum_k p_aux,k log(p_aux,k / p_main,k), shape (B, *spatial).

    ``eps`` only guards the logarithms, so 0 log 0 contributes 0.
    """
    _check_same(p_main, p_aux, "kl_divergence_map")
    log_ratio = torch.log(p_aux.clamp(eps, 1.0)) - torch.log(p_main.clamp(eps, 1.0))
    return (p_aux * log_ratio).sum(1)


def consensus_weights(p_primary: torch.Tensor, p_other: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return torch.exp(-kl_divergence_map(p_primary, p_other, eps)).detach()


def consensus_pseudo_loss(
    p_primary: torch.Tensor, p_other: torch.Tensor, y_hat: torch.Tensor, cfg: LossConfig = None
) -> torch.Tensor:
    """Consensus-weighted cross-entropy to the pseudo label plus the decoder KL.

    (1 / W) * sum_i [W_i * CE_i + KL_i] with W_i = exp(-KL_i) held constant.
    """
    cfg = cfg or LossConfig()
    _check_same(p_primary, y_hat, "consensus_pseudo_loss")
    kl = kl_divergence_map(p_primary, p_other, cfg.eps_prob)
    w = consensus_weights(p_primary, p_other, cfg.eps_prob)
    ce = -(y_hat * torch.log(p_primary.clamp(cfg.eps_prob, 1.0))).sum(1)
    return (w * ce + kl).sum() / w.sum()


def pseudo_loss(p_primary, p_other, y_hat, cfg: LossConfig) -> torch.Tensor:
    if cfg.pseudo_term == "klce":
        return consensus_pseudo_loss(p_primary, p_other, y_hat, cfg)
    if cfg.pseudo_term == "dice":
        return soft_dice(p_primary, y_hat, cfg.eps_smooth)
    return p_primary.sum() * 0.0


def ramp_up(t: float, lam: float = 2.0, t_max: int = 99) -> float:
    """lam * exp(-5 (1 - t / t_max)^2) for t < t_max, lam afterwards."""
    if t < 0:
        raise ValueError(f"epoch must be >= 0, got {t}")
    if t >= t_max:
        return float(lam)
    return float(lam * math.exp(-5.0 * (1.0 - t / t_max) ** 2))


def total_loss(
    p_main: torch.Tensor,
    p_aux: torch.Tensor,
    y_partial: torch.Tensor,
    y_hat: torch.Tensor,
    t: float,
    cfg: LossConfig,
) -> Dict[str, torch.Tensor]:
    """Supervised losses of both decoders plus the ramped pseudo-label bracket.

    Returns a dict with ``total`` and every logged component.
    """
    _check_same(p_main, p_aux, "total_loss")
    lam_p = ramp_up(t, cfg.lam, cfg.t_max)
    sup_m = supervised_terms(p_main, y_partial, cfg)
    sup_a = supervised_terms(p_aux, y_partial, cfg)
    ps_m = pseudo_loss(p_main, p_aux, y_hat, cfg)
    ps_a = pseudo_loss(p_aux, p_main, y_hat, cfg)
    terms = {
        "sup_main": sum(sup_m.values()),
        "sup_aux": sum(sup_a.values()),
        "pseudo_main": ps_m,
        "pseudo_aux": ps_a,
    }
    terms["total"] = terms["sup_main"] + terms["sup_aux"] + lam_p * (ps_m + ps_a)
    terms["lambda_p"] = torch.tensor(lam_p, dtype=torch.float64)
    for k, v in sup_m.items():
        terms[f"main_{k}"] = v
    for k, v in sup_a.items():
        terms[f"aux_{k}"] = v
    return terms


def baseline_loss(p: torch.Tensor, y_partial: torch.Tensor, cfg: LossConfig) -> Dict[str, torch.Tensor]:
    """Single-decoder objective: the configured supervised terms on the partial label."""
    terms = {f"main_{k}": v for k, v in supervised_terms(p, y_partial, cfg).items()}
    total = sum(terms.values())
    return {"sup_main": total, "total": total, **terms}


def loss_values(terms: Dict[str, torch.Tensor]) -> Dict[str, float]:
    return {k: float(v.detach()) for k, v in terms.items()}


def term_subset(names: Sequence[str]) -> Tuple[str, ...]:
    names = tuple(n.lower() for n in names)
    bad = [n for n in names if n not in SUP_TERMS]
    if bad:
        raise ValueError(f"unknown loss terms {bad}; choose from {SUP_TERMS}")
    return names
