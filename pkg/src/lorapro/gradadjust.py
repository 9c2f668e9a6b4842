"""Closed-form adjustment of adapter gradients.

Updating the factors (B, A) with gradients (g_b, g_a) moves the effective
weight by the rank-limited "equivalent gradient" s*B*g_a + s*g_b*A. The
adjustment below replaces the raw chain-rule gradients with the pair whose
equivalent gradient is the Frobenius-nearest point to the full weight
gradient g among all reachable directions:

    g_a = (1/s^2) (B^T B)^{-1} g_a_raw + X A
    g_b = (1/s^2) (I - B (B^T B)^{-1} B^T) g_b_raw (A A^T)^{-1} - B X

X (r x r) is a free parameter: it shifts (g_a, g_b) without changing the
equivalent gradient. Three selections are provided: zero, "symmetry"
(balancing the two terms of the equivalent gradient), and the solver route
that keeps the adjusted pair closest to the raw pair, which reduces to the
Sylvester equation  B^T B X + X A A^T = -(1/s^2) (B^T B)^{-1} g_a_raw A^T.

Gram inversions are Tikhonov-damped per a DampingPolicy so the adjustment
stays defined when B starts at zero (the standard adapter initialization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DescentViolationError, ShapeError, SpectrumError
from .linalg import as_matrix, frob_inner, frob_norm, numerical_rank, spd_solve
from .lora import LoraLayer
from .sylvester import SylvesterProblem, solve_sylvester

__all__ = [
    "X_STRATEGIES",
    "GradBundle",
    "AdjustedGrads",
    "DampingPolicy",
    "lora_raw_grads",
    "equivalent_gradient",
    "choose_x",
    "adjust",
    "loss_decrease_certificate",
    "validate_bundle",
]

X_STRATEGIES = ("zero", "symmetry", "sylvester")
BUNDLE_CONSISTENCY_TOL = 1e-10


@dataclass
class GradBundle:
    """Raw chain-rule gradients of the factors, plus the full gradient if known.

    g_a_lora = s * B^T * g  (r x n) and g_b_lora = s * g * A^T  (m x r).
    """

    g_a_lora: np.ndarray
    g_b_lora: np.ndarray
    g_full: np.ndarray | None = None

    def __post_init__(self):
        self.g_a_lora = as_matrix(self.g_a_lora, "g_a_lora")
        self.g_b_lora = as_matrix(self.g_b_lora, "g_b_lora")
        if self.g_full is not None:
            self.g_full = as_matrix(self.g_full, "g_full")


@dataclass
class AdjustedGrads:
    """Adjusted factor gradients, the X that produced them, and the strategy label."""

    g_a: np.ndarray
    g_b: np.ndarray
    x: np.ndarray
    x_strategy: str


@dataclass
class DampingPolicy:
    """How to keep Gram inversions defined when a factor is rank deficient.

    ``damp`` adds rel_epsilon * mean(diag(Gram)) to the Gram diagonal (an
    absolute rel_epsilon when the Gram is exactly zero, where the solve's
    right-hand side vanishes anyway). ``passthrough`` skips the adjustment
    entirely while B has rank zero and returns the raw gradients for that
    step.
    """

    rel_epsilon: float = 1e-8
    fallback: str = "damp"

    def __post_init__(self):
        if self.rel_epsilon < 0.0:
            raise ValueError(f"rel_epsilon must be >= 0, got {self.rel_epsilon}")
        if self.fallback not in ("damp", "passthrough"):
            raise ValueError(f"fallback must be 'damp' or 'passthrough', got {self.fallback!r}")

    def damping_for(self, gram: np.ndarray) -> float:
        if self.rel_epsilon == 0.0:
            return 0.0
        mean_diag = float(np.trace(gram)) / gram.shape[0]
        return self.rel_epsilon * (mean_diag if mean_diag > 0.0 else 1.0)


def _check_bundle_shapes(layer: LoraLayer, bundle: GradBundle):
    m, n = layer.shape
    r = layer.rank
    if bundle.g_a_lora.shape != (r, n):
        raise ShapeError(f"g_a_lora must be {r}x{n}, got {bundle.g_a_lora.shape}")
    if bundle.g_b_lora.shape != (m, r):
        raise ShapeError(f"g_b_lora must be {m}x{r}, got {bundle.g_b_lora.shape}")
    if bundle.g_full is not None and bundle.g_full.shape != (m, n):
        raise ShapeError(f"g_full must be {m}x{n}, got {bundle.g_full.shape}")


def validate_bundle(layer: LoraLayer, bundle: GradBundle, tol: float = BUNDLE_CONSISTENCY_TOL):
    """Check the chain-rule identities against g_full when it is present."""
    _check_bundle_shapes(layer, bundle)
    if bundle.g_full is None:
        return
    s = layer.scaling
    expect_a = s * (layer.b.T @ bundle.g_full)
    expect_b = s * (bundle.g_full @ layer.a.T)
    err_a = frob_norm(bundle.g_a_lora - expect_a)
    err_b = frob_norm(bundle.g_b_lora - expect_b)
    if err_a > tol * max(1.0, frob_norm(expect_a)):
        raise ShapeError(f"g_a_lora inconsistent with g_full (deviation {err_a:.3e})")
    if err_b > tol * max(1.0, frob_norm(expect_b)):
        raise ShapeError(f"g_b_lora inconsistent with g_full (deviation {err_b:.3e})")


def lora_raw_grads(layer: LoraLayer, g_full: np.ndarray) -> GradBundle:
    """Chain-rule factor gradients induced by the full weight gradient."""
    g_full = as_matrix(g_full, "g_full")
    if g_full.shape != layer.shape:
        raise ShapeError(f"g_full must be {layer.shape}, got {g_full.shape}")
    s = layer.scaling
    return GradBundle(
        g_a_lora=s * (layer.b.T @ g_full),
        g_b_lora=s * (g_full @ layer.a.T),
        g_full=g_full,
    )


def equivalent_gradient(layer: LoraLayer, g_a: np.ndarray, g_b: np.ndarray) -> np.ndarray:
    """The update direction a (g_a, g_b) factor step induces on the effective weight."""
    g_a = as_matrix(g_a, "g_a")
    g_b = as_matrix(g_b, "g_b")
    m, n = layer.shape
    r = layer.rank
    if g_a.shape != (r, n):
        raise ShapeError(f"g_a must be {r}x{n}, got {g_a.shape}")
    if g_b.shape != (m, r):
        raise ShapeError(f"g_b must be {m}x{r}, got {g_b.shape}")
    s = layer.scaling
    return s * (layer.b @ g_a) + s * (g_b @ layer.a)


def _grams(layer: LoraLayer, policy: DampingPolicy):
    gram_b = layer.b.T @ layer.b
    gram_a = layer.a @ layer.a.T
    return gram_b, policy.damping_for(gram_b), gram_a, policy.damping_for(gram_a)


def _right_solve(gram: np.ndarray, mat: np.ndarray, damping: float) -> np.ndarray:
    # mat @ (gram + damping I)^-1 for symmetric gram, via a transposed left solve
    return spd_solve(gram, mat.T, damping).T


def choose_x(
    layer: LoraLayer,
    bundle: GradBundle,
    strategy: str = "sylvester",
    policy: DampingPolicy = DampingPolicy(),
) -> np.ndarray:
    """Pick the free r x r parameter of the adjustment for a given strategy."""
    if strategy not in X_STRATEGIES:
        raise ValueError(f"unknown X strategy {strategy!r}, expected one of {X_STRATEGIES}")
    validate_bundle(layer, bundle)
    r = layer.rank
    if strategy == "zero":
        return np.zeros((r, r))

    s = layer.scaling
    gram_b, eps_b, gram_a, eps_a = _grams(layer, policy)
    if strategy == "symmetry":
        # X = -(1/(2 s^2)) (B^T B)^-1 B^T g_b_raw (A A^T)^-1, which balances
        # the two terms of the equivalent gradient: g_b A = B g_a.
        inner = spd_solve(gram_b, layer.b.T @ bundle.g_b_lora, eps_b)
        return -0.5 / s**2 * _right_solve(gram_a, inner, eps_a)

    rhs = -1.0 / s**2 * (spd_solve(gram_b, bundle.g_a_lora, eps_b) @ layer.a.T)
    try:
        return solve_sylvester(SylvesterProblem(p=gram_b, q=gram_a, c=rhs), damping=eps_b)
    except SpectrumError as exc:
        raise SpectrumError(
            f"X selection '{strategy}' failed: {exc}", pair=exc.pair
        ) from exc


def adjust(
    layer: LoraLayer,
    bundle: GradBundle,
    strategy: str = "sylvester",
    policy: DampingPolicy = DampingPolicy(),
    x_override: np.ndarray | None = None,
) -> AdjustedGrads:
    """Replace raw factor gradients with the optimal adjusted pair.

    ``x_override`` bypasses the strategy and uses the given X directly (the
    equivalent gradient does not depend on it).  With a ``passthrough``
    policy and B at numerical rank zero, the raw gradients are returned
    unchanged for this step.
    """
    _check_bundle_shapes(layer, bundle)
    r = layer.rank
    if policy.fallback == "passthrough" and numerical_rank(layer.b) == 0:
        return AdjustedGrads(
            g_a=bundle.g_a_lora.copy(),
            g_b=bundle.g_b_lora.copy(),
            x=np.zeros((r, r)),
            x_strategy="passthrough",
        )

    s = layer.scaling
    gram_b, eps_b, gram_a, eps_a = _grams(layer, policy)

    if x_override is not None:
        x = as_matrix(x_override, "x_override")
        if x.shape != (r, r):
            raise ShapeError(f"x_override must be {r}x{r}, got {x.shape}")
        label = "override"
    else:
        x = choose_x(layer, bundle, strategy, policy)
        label = strategy

    base_a = spd_solve(gram_b, bundle.g_a_lora, eps_b) / s**2
    corr = spd_solve(gram_b, layer.b.T @ bundle.g_b_lora, eps_b)
    base_b = _right_solve(gram_a, bundle.g_b_lora - layer.b @ corr, eps_a) / s**2

    return AdjustedGrads(
        g_a=base_a + x @ layer.a,
        g_b=base_b - layer.b @ x,
        x=x,
        x_strategy=label,
    )


def loss_decrease_certificate(
    layer: LoraLayer,
    bundle: GradBundle,
    adjusted: AdjustedGrads,
    lr: float,
    policy: DampingPolicy = DampingPolicy(),
) -> float:
    """Predicted first-order loss change of the adjusted step; never positive.

        dL = -lr * ( <g_a_raw, (1/s^2)(B^T B)^-1 g_a_raw>
                   + <g_b_raw, (1/s^2)(I - B(B^T B)^-1 B^T) g_b_raw (A A^T)^-1> )

    Both Gram quadratic forms are positive semidefinite, so dL <= 0. The
    same number must come out of -lr*(<g_a_raw, g_a> + <g_b_raw, g_b>) with
    the adjusted pair (the X terms cancel for chain-rule-consistent raw
    gradients); a mismatch or a positive value signals an implementation bug
    and raises. Pass the same ``policy`` that produced ``adjusted``.
    """
    if lr < 0.0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    _check_bundle_shapes(layer, bundle)
    s = layer.scaling
    gram_b, eps_b, gram_a, eps_a = _grams(layer, policy)

    term_a = frob_inner(bundle.g_a_lora, spd_solve(gram_b, bundle.g_a_lora, eps_b)) / s**2
    corr = spd_solve(gram_b, layer.b.T @ bundle.g_b_lora, eps_b)
    projected = bundle.g_b_lora - layer.b @ corr
    term_b = frob_inner(bundle.g_b_lora, _right_solve(gram_a, projected, eps_a)) / s**2
    dl = -lr * (term_a + term_b)

    via_pairing = -lr * (
        frob_inner(bundle.g_a_lora, adjusted.g_a) + frob_inner(bundle.g_b_lora, adjusted.g_b)
    )
    scale = max(1.0, abs(dl), abs(via_pairing))
    if abs(dl - via_pairing) > 1e-9 * scale:
        raise DescentViolationError(
            f"certificate {dl:.6e} disagrees with gradient pairing {via_pairing:.6e}"
        )
    if dl > 1e-10:
        raise DescentViolationError(f"predicted loss change {dl:.6e} is positive")
    return dl
