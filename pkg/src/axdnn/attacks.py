"""White-box and model-free input attacks, crafted on the float model only.

All attacks are per-sample: budgets, gradient normalization, random draws,
and success checks never mix information across the batch. Iterative
attacks share one integrator (step, project back into the epsilon ball
around the original, clip to [0, 1]), so the documented reductions
(single-step bim == fgm, pgd with a zero-radius start == bim) hold
bit-for-bit. Randomized attacks draw per-sample Philox streams keyed by
(seed, sample index, draw index), so results do not depend on batch
chunking or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VALID_ATTACKS = {
    ("fgm", "l2"), ("fgm", "linf"),
    ("bim", "l2"), ("bim", "linf"),
    ("pgd", "l2"), ("pgd", "linf"),
    ("cr", "l2"),
    ("rag", "l2"),
    ("rau", "l2"), ("rau", "linf"),
}

CR_TARGET = 0.5
BUDGET_TOL = 1e-6


class AttackError(ValueError):
    """Invalid attack specification or inputs."""


@dataclass(frozen=True)
class AttackSpec:
    """One attack configuration; unset tuning fields fall back to defaults.

    Defaults: bim runs 10 steps at eps/10 (linf) or eps/5 (l2); pgd runs 40
    steps at 2.5*eps/steps with a random start of radius eps (start_radius
    overrides, 0 reduces pgd to bim); rag/rau draw 100 noise samples.
    """

    kind: str
    norm: str
    epsilon: float
    steps: int | None = None
    step_size: float | None = None
    draws: int | None = None
    start_radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        object.__setattr__(self, "norm", self.norm.lower())
        if (self.kind, self.norm) not in VALID_ATTACKS:
            raise AttackError(f"unsupported attack/norm combination "
                              f"({self.kind!r}, {self.norm!r}); valid: "
                              f"{sorted(VALID_ATTACKS)}")
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise AttackError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.steps is not None and self.steps < 1:
            raise AttackError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size < 0:
            raise AttackError(f"step_size must be >= 0, got {self.step_size}")
        if self.draws is not None and self.draws < 1:
            raise AttackError(f"draws must be >= 1, got {self.draws}")
        if self.start_radius is not None and not 0 <= self.start_radius:
            raise AttackError(f"start_radius must be >= 0, got {self.start_radius}")
        if not 0 <= self.seed < 2 ** 64:
            raise AttackError(f"seed must fit an unsigned 64-bit int, got {self.seed}")

    @property
    def resolved_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return {"fgm": 1, "bim": 10, "pgd": 40}.get(self.kind, 1)

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.kind == "bim":
            return self.epsilon / 10 if self.norm == "linf" else self.epsilon / 5
        if self.kind == "pgd":
            return 2.5 * self.epsilon / self.resolved_steps
        return self.epsilon

    @property
    def resolved_draws(self) -> int:
        return self.draws if self.draws is not None else 100

    @property
    def resolved_start_radius(self) -> float:
        return self.start_radius if self.start_radius is not None else self.epsilon


@dataclass
class AdversarialBatch:
    """Crafted inputs plus bookkeeping for budget and transfer analyses."""

    spec: AttackSpec
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    source_pred: np.ndarray  # source-model argmax on the perturbed inputs
    l0: np.ndarray
    l2: np.ndarray
    linf: np.ndarray


def distance(x: np.ndarray, xa: np.ndarray, norm: str) -> np.ndarray:
    """Per-sample distance along axis 0; norm is "l0", "l2" or "linf"."""
    if x.shape != xa.shape:
        raise AttackError(f"shape mismatch {x.shape} vs {xa.shape}")
    diff = (xa.astype(np.float64) - x.astype(np.float64)).reshape(x.shape[0], -1)
    if norm == "l0":
        return np.count_nonzero(diff, axis=1).astype(np.float64)
    if norm == "l2":
        return np.sqrt((diff * diff).sum(axis=1))
    if norm == "linf":
        return np.abs(diff).max(axis=1)
    raise AttackError(f"unknown norm {norm!r}")


def project(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project perturbations onto the epsilon ball.

    A 1-D array counts as a single sample; otherwise axis 0 is the batch
    axis and each sample is projected independently.
    """
    if epsilon < 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}")
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm != "l2":
        raise AttackError(f"cannot project onto {norm!r} ball")
    single = delta.ndim == 1
    flat = delta.reshape(1, -1) if single else delta.reshape(delta.shape[0], -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    factor = np.ones_like(norms)
    over = norms > epsilon
    factor[over] = epsilon / norms[over]
    if single:
        return (delta * factor[0]).astype(delta.dtype)
    shaped = factor.reshape((-1,) + (1,) * (delta.ndim - 1))
    return (delta * shaped).astype(delta.dtype)


def clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def _l2_direction(g: np.ndarray) -> np.ndarray:
    flat = g.reshape(g.shape[0], -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    inv = np.zeros_like(norms)
    nz = norms > 0
    inv[nz] = 1.0 / norms[nz]
    return (g * inv.reshape((-1,) + (1,) * (g.ndim - 1))).astype(g.dtype)


def _ascent_step(model, x, y, norm):
    _, grad = model.loss_and_input_grad(x, y)
    if norm == "linf":
        return np.sign(grad)
    return _l2_direction(grad)


def _iterate(model, x, y, spec: AttackSpec, steps: int, alpha: float,
             x_start: np.ndarray) -> np.ndarray:
    xa = x_start
    for _ in range(steps):
        xa = xa + alpha * _ascent_step(model, xa, y, spec.norm)
        xa = clip01(x + project(xa - x, spec.norm, spec.epsilon))
    return xa


def _random_start(x: np.ndarray, spec: AttackSpec, offset: int) -> np.ndarray:
    radius = spec.resolved_start_radius
    if radius == 0:
        return x
    delta = np.empty_like(x)
    d = int(np.prod(x.shape[1:]))
    for i in range(x.shape[0]):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(spec.seed, spawn_key=(offset + i,))))
        if spec.norm == "linf":
            delta[i] = rng.uniform(-radius, radius, x.shape[1:]).astype(x.dtype)
        else:
            v = rng.standard_normal(x.shape[1:])
            n = float(np.sqrt((v * v).sum()))
            r = radius * rng.uniform() ** (1.0 / d)
            delta[i] = (v * (r / n)).astype(x.dtype) if n > 0 else 0.0
    return clip01(x + delta)


def _noise_attack(model, x, y, spec: AttackSpec, offset: int,
                  batch_size: int) -> np.ndarray:
    n = x.shape[0]
    xa = np.empty_like(x)
    pending = np.arange(n)
    fallback = None
    for d in range(spec.resolved_draws):
        cands = np.empty_like(x[pending])
        for row, i in enumerate(pending):
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence(spec.seed, spawn_key=(offset + int(i), d))))
            if spec.kind == "rag":
                noise = rng.standard_normal(x.shape[1:])
            else:
                noise = rng.uniform(-1.0, 1.0, x.shape[1:])
            mag = np.abs(noise).max() if spec.norm == "linf" else np.sqrt((noise * noise).sum())
            scaled = noise * (spec.epsilon / mag) if mag > 0 else np.zeros_like(noise)
            cands[row] = clip01(x[i] + scaled.astype(x.dtype))
        if d == 0:
            fallback = cands.copy()  # pending is still the identity here
        preds = predict_batched(model, cands, batch_size)
        wrong = preds != y[pending]
        xa[pending[wrong]] = cands[wrong]
        pending = pending[~wrong]
        if pending.size == 0:
            break
    if pending.size:
        xa[pending] = fallback[pending]
    return xa


def _contrast_reduction(x: np.ndarray, epsilon: float) -> np.ndarray:
    flat = (x.astype(np.float64) - CR_TARGET).reshape(x.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    lam = np.ones_like(norms)
    nz = norms > 0
    lam[nz] = np.minimum(1.0, epsilon / norms[nz])
    lam = lam.reshape((-1,) + (1,) * (x.ndim - 1))
    return clip01(x + (lam * (CR_TARGET - x.astype(np.float64))).astype(x.dtype))


def predict_batched(model, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    outs = [np.argmax(model.logits(x[s:s + batch_size]), axis=1)
            for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs)


def craft(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
          batch_size: int = 128) -> AdversarialBatch:
    """Run one attack over a labeled batch and package the results."""
    if x.ndim < 2 or x.shape[0] != y.shape[0]:
        raise AttackError(f"need a batch of inputs with matching labels, got "
                          f"{x.shape} vs {y.shape}")
    if x.shape[0] == 0:
        raise AttackError("cannot attack an empty batch")
    if float(x.min()) < 0.0 or float(x.max()) > 1.0:
        raise AttackError("inputs must lie in [0, 1] before attacking")

    chunks = []
    for start in range(0, x.shape[0], batch_size):
        xc = x[start:start + batch_size]
        yc = y[start:start + batch_size]
        if spec.kind == "cr":
            xa = _contrast_reduction(xc, spec.epsilon)
        elif spec.kind in ("rag", "rau"):
            xa = _noise_attack(model, xc, yc, spec, start, batch_size)
        elif spec.kind in ("fgm", "bim"):
            xa = _iterate(model, xc, yc, spec, spec.resolved_steps,
                          spec.resolved_step_size, x_start=xc)
        elif spec.kind == "pgd":
            x0 = _random_start(xc, spec, start)
            xa = _iterate(model, xc, yc, spec, spec.resolved_steps,
                          spec.resolved_step_size, x_start=x0)
        else:  # unreachable: __post_init__ already vetted the kind
            raise AttackError(f"unknown attack kind {spec.kind!r}")
        chunks.append(xa)

    perturbed = np.concatenate(chunks, axis=0)
    return AdversarialBatch(
        spec=spec,
        originals=x,
        perturbed=perturbed,
        labels=y,
        source_pred=predict_batched(model, perturbed, batch_size),
        l0=distance(x, perturbed, "l0"),
        l2=distance(x, perturbed, "l2"),
        linf=distance(x, perturbed, "linf"),
    )
