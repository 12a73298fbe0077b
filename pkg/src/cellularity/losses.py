"""Composite BCE / soft-Jaccard segmentation loss, its gradient, and the Jaccard index.

Per class ``c`` the loss is ``(1 - alpha) * BCE - alpha * J`` where ``J`` is the
per-pixel soft Jaccard mean, and the total is the class-weighted mean of the
class losses. BCE is reduced with a mean over pixels (the original formulation
does not state the reduction; the mean keeps ``alpha`` independent of patch
size). Gradients are with respect to the predicted probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pmap import Channel, PixelMap

DEFAULT_ALPHA = 0.15
DEFAULT_EPSILON = 1e-7


def _default_weights() -> dict:
    return {Channel.NORMAL.value: 1.0, Channel.LYMPHOCYTE.value: 1.0,
            Channel.MALIGNANT.value: 4.0, Channel.BACKGROUND.value: 1.0}


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    class_weights: dict = field(default_factory=_default_weights)
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        weights = {Channel(str(k)).value: float(v) for k, v in self.class_weights.items()}
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise ValueError(f"class weights must be non-negative with a positive sum: {weights}")
        object.__setattr__(self, "class_weights", weights)

    def scaled(self, factor: float) -> "LossConfig":
        return LossConfig(self.alpha, {k: v * factor for k, v in self.class_weights.items()},
                          self.epsilon)


def _plane(x) -> np.ndarray:
    if isinstance(x, PixelMap):
        if len(x.channels) != 1:
            raise ValueError(f"expected a single-channel map, got {list(x.channels)}")
        x = x.data[0]
    return np.asarray(x, dtype=np.float64)


def _pair(target, pred):
    y, p = _plane(target), _plane(pred)
    if y.shape != p.shape:
        raise ValueError(f"dimension mismatch: target {y.shape} vs prediction {p.shape}")
    return y, p


def _stack(m):
    """``(channel names, float64 array of shape (C, H, W))`` from a map or a dict of planes."""
    if isinstance(m, PixelMap):
        return m.channels, m.data.astype(np.float64)
    names = tuple(Channel(str(k)).value for k in m)
    return names, np.stack([np.asarray(v, dtype=np.float64) for v in m.values()])


def bce(target, pred, epsilon: float = DEFAULT_EPSILON) -> float:
    y, p = _pair(target, pred)
    p = np.clip(p, epsilon, 1.0 - epsilon)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def _jaccard_terms(y, p, epsilon):
    denom = y + p - y * p
    safe = denom >= epsilon
    return np.where(safe, y * p / np.where(safe, denom, 1.0), 0.0), denom, safe


def soft_jaccard(target, pred, epsilon: float = DEFAULT_EPSILON) -> float:
    y, p = _pair(target, pred)
    terms, _, _ = _jaccard_terms(y, p, epsilon)
    return float(np.mean(terms))


def class_loss(target, pred, cfg: LossConfig = LossConfig()) -> float:
    return ((1.0 - cfg.alpha) * bce(target, pred, cfg.epsilon)
            - cfg.alpha * soft_jaccard(target, pred, cfg.epsilon))


def _aligned(target, pred, cfg):
    t_names, y = _stack(target)
    p_names, p = _stack(pred)
    if set(t_names) != set(p_names) or len(t_names) != len(p_names):
        raise ValueError(f"channel mismatch: target {list(t_names)} vs prediction {list(p_names)}")
    if y.shape != p.shape:
        raise ValueError(f"dimension mismatch: target {y.shape[1:]} vs prediction {p.shape[1:]}")
    p = p[[p_names.index(n) for n in t_names]]
    try:
        weights = np.array([cfg.class_weights[n] for n in t_names])
    except KeyError as exc:
        raise ValueError(f"no class weight for channel {exc}") from None
    if weights.sum() <= 0:
        raise ValueError("class weights of the present channels sum to zero")
    return t_names, y, p, weights


def total_loss(target, pred, cfg: LossConfig = LossConfig()) -> float:
    names, y, p, weights = _aligned(target, pred, cfg)
    losses = np.array([class_loss(y[i], p[i], cfg) for i in range(len(names))])
    return float(np.dot(losses, weights) / weights.sum())


def total_loss_grad(target, pred, cfg: LossConfig = LossConfig()) -> dict:
    """Partial derivatives of :func:`total_loss` with respect to every predicted value.

    Returns ``{channel name: float64 array}`` in the target's channel order.
    Where the prediction sits on the BCE clamp the BCE part of the
    derivative is zero, as is the Jaccard part where its denominator is
    below ``epsilon``.
    """
    names, y, p, weights = _aligned(target, pred, cfg)
    eps = cfg.epsilon
    n = y[0].size
    inside = (p > eps) & (p < 1.0 - eps)
    pc = np.clip(p, eps, 1.0 - eps)
    d_bce = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / n
    _, denom, safe = _jaccard_terms(y, p, eps)
    d_jac = np.where(safe, y * y / np.where(safe, denom, 1.0) ** 2, 0.0) / n
    scale = (weights / weights.sum())[:, None, None]
    grad = scale * ((1.0 - cfg.alpha) * d_bce - cfg.alpha * d_jac)
    return {name: grad[i] for i, name in enumerate(names)}


def jaccard_index(pred, truth, threshold: float = 0.5) -> dict:
    """Hard intersection-over-union per channel after thresholding ``pred`` at ``threshold``.

    Two empty sets count as perfect agreement (1.0).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p_names, p = _stack(pred)
    t_names, t = _stack(truth)
    if set(p_names) != set(t_names) or len(p_names) != len(t_names):
        raise ValueError(f"channel mismatch: {list(p_names)} vs {list(t_names)}")
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape[1:]} vs {t.shape[1:]}")
    out = {}
    for name in p_names:
        a = p[p_names.index(name)] >= threshold
        b = t[t_names.index(name)] >= 0.5
        union = np.count_nonzero(a | b)
        out[name] = 1.0 if union == 0 else np.count_nonzero(a & b) / union
    return out


def random_maps(rng: np.random.Generator, size: int, low: float = 0.01, high: float = 0.99) -> tuple:
    """Random binary target and prediction stacks of shape ``(4, size, size)``."""
    target = (rng.random((4, size, size)) < 0.5).astype(np.float64)
    pred = rng.uniform(low, high, (4, size, size))
    return target, pred


def gradient_check(size: int = 16, trials: int = 1000, seed: int = 0,
                   cfg: LossConfig = LossConfig(), step: float = 1e-5) -> dict:
    """Compare :func:`total_loss_grad` with central differences at random coordinates.

    Coordinates are drawn without replacement from one random map pair per
    ``4 * size * size`` trials. The relative error of a coordinate is
    ``|fd - g| / max(|g|, |fd|, 1e-12)``.
    """
    rng = np.random.default_rng(seed)
    names = tuple(Channel(c).value for c in cfg.class_weights)
    worst, worst_at, done = 0.0, None, 0
    while done < trials:
        y, p = random_maps(rng, size)
        target = dict(zip(names, y))
        grad = total_loss_grad(target, dict(zip(names, p)), cfg)
        picks = rng.choice(p.size, size=min(p.size, trials - done), replace=False)
        for flat in picks:
            c, r, col = np.unravel_index(flat, p.shape)
            up, down = p.copy(), p.copy()
            up[c, r, col] += step
            down[c, r, col] -= step
            fd = (total_loss(target, dict(zip(names, up)), cfg)
                  - total_loss(target, dict(zip(names, down)), cfg)) / (2 * step)
            g = grad[names[c]][r, col]
            err = abs(fd - g) / max(abs(g), abs(fd), 1e-12)
            if err > worst or worst_at is None:
                worst, worst_at = float(err), (names[c], int(r), int(col), float(g), float(fd))
        done += len(picks)
    return {"trials": done, "max_rel_error": worst, "worst": worst_at}
