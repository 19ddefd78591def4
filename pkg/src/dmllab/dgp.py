"""
Synthetic data: the sparse linear BCH design and sixteen ACIC-style
templates with binary treatment.

ACIC templates fix structural forms (indicator thresholds, transformations,
interactions, outcome links) and draw their coefficients from a seeded
stream. Each template is *calibrated* once per
``coeff_seed``:

* the outcome scale ``s`` so that a typical 100-dataset average of
  Var(Y)/Var(eps) hits a target SNR;
* the effect parameter (a multiplicative scale ``kappa`` or an additive
  constant ``c``) so that the population ATE, evaluated on 10^6 Monte
  Carlo rows, equals the template's nominal theta;
* for templates 6 and 12 a baseline intercept ``b`` fixing E[Y(0)].

Covariates are 200 columns in Gaussian-copula blocks of ten
(equicorrelation 0.3) with normal, lognormal, Bernoulli and uniform
marginals; columns that enter thresholds or logs get marginals chosen so
every indicator fires with probability in [0.05, 0.95].
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq
from scipy.special import expit, ndtr, ndtri

from .core import Dataset, DgpTruth, ModelKind, RngStream, TreatmentKind, as_stream, write_csv
from .dml import (DEFAULT_CLIP, DEFAULT_LEVEL, CausalEstimate, NuisancePredictions,
                  irm_ate_estimate, plr_estimate)
from .errors import CalibrationError, InvalidArgumentError

# =============================================================================
# CONFIGURATION AND OUTPUT TYPES
# =============================================================================


@dataclass(frozen=True)
class DgpSpec:
    """Which generator to run and with which sizes and seeds.

    ``coeff_seed`` freezes template coefficients across repetitions; the
    repetition stream passed to :func:`generate` drives the data draws.
    ``n``/``p`` of ``None`` mean the template default.
    """

    kind: str = "bch"
    template_id: int = 0
    n: int | None = None
    p: int | None = None
    coeff_seed: int = 0
    noise: str = ""
    rho: float = 0.5
    r2_y: float = 0.5
    r2_d: float = 0.5
    theta0: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("bch", "acic"):
            raise InvalidArgumentError(f"dgp kind must be 'bch' or 'acic', got {self.kind!r}")
        if self.kind == "acic" and not 1 <= int(self.template_id) <= 16:
            raise InvalidArgumentError(f"template_id must lie in 1..16, got {self.template_id}")
        if self.kind == "acic" and not self.noise:
            object.__setattr__(self, "noise", TEMPLATES[int(self.template_id)].noise.describe())
        if self.kind == "bch" and not self.noise:
            object.__setattr__(self, "noise", "normal(1)")

    @property
    def label(self) -> str:
        return f"acic{int(self.template_id)}" if self.kind == "acic" else "bch"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpSpec":
        return cls(**dict(d))


@dataclass(frozen=True)
class GeneratedData:
    data: Dataset
    truth: DgpTruth
    spec: DgpSpec
    arm_noise: bool = False


# =============================================================================
# BCH DESIGN
# =============================================================================

@functools.lru_cache(maxsize=8)
def _toeplitz_chol(p: int, rho: float) -> NDArray:
    idx = np.arange(p)
    sigma = rho ** np.abs(np.subtract.outer(idx, idx))
    return np.linalg.cholesky(sigma)


def bch_constants(p: int, rho: float, r2_y: float, r2_d: float) -> tuple[NDArray, float, float]:
    """Coefficient profile ``(1/j)^2`` and the scales ``c_y, c_d`` matching the target R^2."""
    beta = 1.0 / np.arange(1, p + 1) ** 2
    idx = np.arange(p)
    sigma = rho ** np.abs(np.subtract.outer(idx, idx))
    b = float(beta @ sigma @ beta)
    c_d = math.sqrt(r2_d / ((1.0 - r2_d) * b))
    c_y = math.sqrt(r2_y / ((1.0 - r2_y) * b))
    return beta, c_y, c_d


def gen_bch(n: int, p: int, rho: float = 0.5, r2_y: float = 0.5, r2_d: float = 0.5,
            theta0: float = 0.5, rng: RngStream | int | None = None) -> GeneratedData:
    """Approximately sparse partially linear design with continuous treatment.

    ``X ~ N(0, Sigma)`` with ``Sigma_jk = rho^|j-k|``;
    ``D = c_d x'beta + V`` and ``Y = theta0 D + c_y x'beta + zeta`` with
    standard normal ``V, zeta``. ``c_d`` sets the population R^2 of the D
    equation to ``r2_d``; ``c_y`` sets the R^2 of ``Y - theta0 D`` on X to
    ``r2_y``.
    """
    for name, r2 in (("r2_y", r2_y), ("r2_d", r2_d)):
        if not 0.0 < r2 < 1.0:
            raise InvalidArgumentError(f"{name} must lie in (0, 1), got {r2}")
    if n < 2 or p < 1:
        raise InvalidArgumentError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    if not -1.0 < rho < 1.0:
        raise InvalidArgumentError(f"rho must lie in (-1, 1), got {rho}")
    gen = as_stream(rng).generator()
    beta, c_y, c_d = bch_constants(p, rho, r2_y, r2_d)
    x = gen.standard_normal((n, p)) @ _toeplitz_chol(p, float(rho)).T
    v = gen.standard_normal(n)
    zeta = gen.standard_normal(n)
    xb = x @ beta
    m0 = c_d * xb
    d = m0 + v
    y = theta0 * d + c_y * xb + zeta
    truth = DgpTruth(theta0=float(theta0), ell0=theta0 * m0 + c_y * xb, m0=m0, g0_0=c_y * xb,
                     g0_1=theta0 + c_y * xb, eps=zeta, v=v)
    spec = DgpSpec("bch", 0, n, p, 0, "normal(1)", rho, r2_y, r2_d, theta0)
    return GeneratedData(Dataset(y, d, x, TreatmentKind.CONTINUOUS), truth, spec)


# =============================================================================
# COVARIATES
# =============================================================================

N_COVARIATES = 200
BLOCK = 10
COPULA_RHO = 0.3

# 1-based column -> (kind, a, b)
_MARGINAL_OVERRIDES: dict[int, tuple[str, float, float]] = {
    1: ("lognormal", 0.0, 0.5), 8: ("lognormal", 0.0, 0.5), 67: ("lognormal", 0.0, 0.5),
    68: ("lognormal", 0.0, 0.5), 7: ("shifted_lognormal", 1.0, 0.5),
    16: ("uniform", 0.5, 2.0), 169: ("uniform", 0.5, 2.5), 17: ("uniform", 0.5, 3.0),
    25: ("uniform", 0.1, 4.0), 52: ("uniform", 0.2, 3.0),
    5: ("normal", 200.0, 5.0), 10: ("normal", 4.0, 2.0), 89: ("normal", 18.0, 2.0),
    95: ("normal", 4.0, 2.0), 101: ("normal", 2.0, 1.0), 96: ("normal", 2.5, 1.5),
    106: ("normal", 0.0, 0.5), 107: ("normal", 0.0, 0.5),
    179: ("normal", 0.0, 1.0), 199: ("normal", 0.0, 1.0), 188: ("normal", 0.0, 1.0),
}

# indicator terms that appear in the templates: (column, op, cut)
THRESHOLDS: tuple[tuple[int, str, float], ...] = (
    (101, ">", 2.5), (179, "<", -0.5), (89, ">", 19.0), (95, ">", 5.0), (199, ">", 1.0),
    (96, "<", 2.0), (5, ">", 204.0), (10, ">", 5.0), (188, ">", 0.4),
)


def marginal(j: int) -> tuple[str, float, float]:
    """Marginal law of 1-based column ``j``."""
    if j in _MARGINAL_OVERRIDES:
        return _MARGINAL_OVERRIDES[j]
    return {1: ("normal", 0.0, 1.0), 2: ("lognormal", 0.0, 0.5), 3: ("bernoulli", 0.5, 0.0),
            0: ("uniform", -2.0, 2.0)}[j % 4]


def _apply_marginal(z: NDArray, j: int) -> NDArray:
    kind, a, b = marginal(j)
    if kind == "normal":
        return a + b * z
    if kind == "lognormal":
        return np.exp(a + b * z)
    if kind == "shifted_lognormal":
        return a + np.exp(b * z)
    if kind == "bernoulli":
        return (z < ndtri(a)).astype(float)
    return a + (b - a) * ndtr(z)


def covariate_block(n: int, block: int, stream: RngStream) -> NDArray:
    """Ten copula-coupled columns ``10*block + 1 .. 10*block + 10`` (1-based)."""
    gen = stream.derive("block", block).generator()
    z = gen.standard_normal((n, BLOCK + 1))
    latent = math.sqrt(COPULA_RHO) * z[:, :1] + math.sqrt(1.0 - COPULA_RHO) * z[:, 1:]
    out = np.empty((n, BLOCK))
    for c in range(BLOCK):
        out[:, c] = _apply_marginal(latent[:, c], block * BLOCK + c + 1)
    return out


def draw_covariates(n: int, p: int, stream: RngStream,
                    columns: frozenset[int] | None = None) -> "Covariates":
    """Covariate matrix (or just the blocks holding ``columns``)."""
    blocks = range(math.ceil(p / BLOCK)) if columns is None else sorted(
        {(j - 1) // BLOCK for j in columns})
    data = {b: covariate_block(n, b, stream) for b in blocks}
    return Covariates(n, p, data)


@dataclass
class Covariates:
    """Column access by 1-based index over lazily drawn blocks."""

    n: int
    p: int
    blocks: dict[int, NDArray]

    def __call__(self, j: int) -> NDArray:
        return self.blocks[(j - 1) // BLOCK][:, (j - 1) % BLOCK]

    def matrix(self) -> NDArray:
        full = np.concatenate([self.blocks[b] for b in sorted(self.blocks)], axis=1)
        return full[:, : self.p]


class _Recorder:
    """Stand-in accessor that records which columns a template touches."""

    def __init__(self) -> None:
        self.cols: set[int] = set()
        self._probe = np.full(4, 1.5)

    def __call__(self, j: int) -> NDArray:
        self.cols.add(j)
        return self._probe


def threshold_rates(stream: RngStream | None = None, n: int = 20000) -> dict[str, float]:
    """Empirical firing rate of every template indicator on a reference sample."""
    stream = stream if stream is not None else RngStream(0).derive("thresholds")
    cov = draw_covariates(n, N_COVARIATES, stream, frozenset(c for c, _, _ in THRESHOLDS))
    out = {}
    for col, op, cut in THRESHOLDS:
        x = cov(col)
        out[f"X{col}{op}{cut:g}"] = float(np.mean(x > cut if op == ">" else x < cut))
    return out


# =============================================================================
# TEMPLATES
# =============================================================================

def _ind(cond: NDArray) -> NDArray:
    return np.asarray(cond, dtype=float)


@dataclass(frozen=True)
class NoiseSpec:
    """Outcome noise: ``normal`` (sd), ``t`` (df, scale), or per-arm normal (sd0, sd1).

    ``in_exp`` puts the noise inside an exponential outcome link.
    """

    kind: str
    sd: float = 1.0
    df: float = 0.0
    sd0: float = 0.0
    sd1: float = 0.0
    in_exp: bool = False

    def variance(self) -> float:
        if self.kind == "normal":
            return self.sd ** 2
        if self.kind == "t":
            return self.sd ** 2 * self.df / (self.df - 2.0)
        raise InvalidArgumentError("per-arm noise has no single variance")

    def describe(self) -> str:
        if self.kind == "normal":
            core = f"normal({self.sd:g})"
        elif self.kind == "t":
            core = f"t({self.df:g})" if self.sd == 1.0 else f"{self.sd:g}*t({self.df:g})"
        else:
            core = f"arm_normal({self.sd0:g}|{self.sd1:g})"
        return core + (" in exp" if self.in_exp else "")

    def draw(self, gen: np.random.Generator, a: NDArray) -> NDArray:
        n = a.shape[0]
        if self.kind == "normal":
            return self.sd * gen.standard_normal(n)
        if self.kind == "t":
            return self.sd * gen.standard_t(self.df, n)
        z = gen.standard_normal(n)
        return np.where(a == 1.0, self.sd1, self.sd0) * z


@dataclass(frozen=True)
class Params:
    """Calibrated template constants."""

    s: float = 1.0
    kappa: float = 0.0
    c: float = 0.0
    b: float = 0.0
    mexp: float = 1.0
    theta: float = 0.0


Basis = Callable[[Callable[[int], NDArray], Mapping], list[NDArray]]
Groups = Callable[[Callable[[int], NDArray], Mapping], list[list[NDArray]]]
Extras = Callable[[Callable[[int], NDArray]], dict[int, NDArray]]
Mean = Callable[[NDArray, list[NDArray], dict[int, NDArray], Params], NDArray]


@dataclass(frozen=True)
class Template:
    """Structural form of one ACIC-style process.

    ``effect`` is ``"fixed"`` (contrast equals theta everywhere),
    ``"kappa"`` (theta matched by a multiplicative effect scale) or
    ``"constant"`` (theta matched by an additive constant).
    """

    tid: int
    theta: float
    n: int
    snr: float | None
    noise: NoiseSpec
    p_basis: Basis
    y_groups: Groups
    mean: Mean
    effect: str = "fixed"
    extras: Extras = lambda c: {}
    signal_sd: float = 1.0
    baseline: bool = False
    share_alpha: int = 0
    random_idx: tuple[int, ...] = ()
    kappa_positive: bool = False


def _all_cols(c, aux):
    return [c(j) for j in range(1, N_COVARIATES + 1)]


def _lin(a, L, ex, q):
    return q.theta * a + L[0]


def _t2_p(c, aux):
    return [np.sqrt(c(1)), c(5), c(32), c(5) * c(32), c(70), c(70) ** 2, _ind(c(101) > 2.5),
            c(150), _ind(c(179) < -0.5) * (c(179) + 1.5)]


def _t2_y(c, aux):
    return [[np.sqrt(c(1)), c(5), c(23), c(32), c(5) * c(32), c(70), c(70) ** 2,
             _ind(c(101) > 2.5), c(15) * c(10) * _ind(c(179) < -0.5) * (c(179) + 1.5), c(179)]]


def _t3_p(c, aux):
    return [c(j) for j in aux["idx"][:90]]


def _t4_p(c, aux):
    return [c(2), c(5), c(2) * c(5), c(12), c(23), c(23) ** 2, c(12) * c(23) ** 2, np.sqrt(c(67)),
            c(77), _ind(c(89) > 19), _ind(c(95) > 5) * (c(95) - 3), np.exp(c(106)), c(122),
            c(146), c(122) * c(146), c(150), c(168), _ind(c(199) > 1)]


def _t4_y(c, aux):
    return [[c(2), c(5), c(2) * c(5), c(12), c(23), c(23) ** 2, c(12) * c(23) ** 2, c(40),
             np.sqrt(c(67)), c(77), _ind(c(89) > 19), _ind(c(95) > 5) * (c(95) - 3),
             np.exp(c(106)), c(122), c(133), c(146), c(122) * c(146), c(150) * c(168), c(198),
             _ind(c(199) > 1)]]


def _t5_p(c, aux):
    return [c(23), c(23) ** 2, np.sqrt(c(67)), c(77), _ind(c(89) > 19),
            _ind(c(95) > 5) * (c(95) - 3), np.exp(c(106)), c(122), c(146), c(122) * c(146),
            c(150), c(168), _ind(c(199) > 1)]


def _t5_y(c, aux):
    return [[np.sqrt(c(67)), c(77), _ind(c(89) > 19), _ind(c(95) > 5) * (c(95) - 3),
             np.exp(c(106)), c(122), c(146), c(146) * c(122), c(150), c(168), _ind(c(199) > 1)]]


def _t7_p(c, aux):
    return [c(3), c(6), c(3) * c(6), c(24), c(24) ** 2, c(35), c(68), np.sqrt(c(68)),
            c(35) * np.sqrt(c(68)), _ind(c(96) < 2) * (c(96) - 1), np.exp(c(107)), c(123),
            c(149), c(123) * c(149), c(151), 1.0 / c(169), c(200)]


def _t7_y(c, aux):
    return [[c(3), c(6), c(3) * c(6), c(24), c(24) ** 2, c(35), c(40), c(68), np.sqrt(c(68)),
             c(35) * np.sqrt(c(68)), _ind(c(96) < 2) * (c(96) - 1), np.exp(c(107)), c(123),
             c(133), c(149), c(123) * c(149), c(151), 1.0 / c(169), c(198), c(200)]]


def _t8_p(c, aux):
    return [np.log(c(7) + 1), 1.0 / c(16), np.abs(c(51)), c(156), c(156) / np.log(c(7) + 0.5),
            c(163) ** 2]


def _t9_p(c, aux):
    return [np.log(c(8)), 1.0 / np.sqrt(c(17)), np.exp(-c(52)), np.abs(c(157)),
            c(157) * np.log(c(8)), c(164), c(165), c(164) * c(165)]


def _t10_p(c, aux):
    return [c(1), np.log(c(8)), 1.0 / np.sqrt(c(17)), np.exp(-c(52)), np.abs(c(157)),
            c(157) * np.log(c(8)), c(164), c(165), np.abs(c(157)) * c(165)]


def _t12_p(c, aux):
    x5 = (c(5) - 200) * _ind(c(5) > 204)
    return [x5, np.log(c(7) + 1), 1.0 / c(16), np.sqrt(c(25)), np.abs(c(51)), c(96),
            c(96) / (np.log(c(7) + 1) + 0.5), c(156), c(163) ** 2]


def _t13_p(c, aux):
    x5 = (c(5) - 200) * _ind(c(5) > 204)
    return [x5, np.sqrt(c(25)), x5 * np.sqrt(c(25)), c(96), c(163), c(96) * c(163), c(163) ** 2,
            np.abs(c(169)), c(188) ** 3, np.abs(c(169)) * c(188) ** 3]


def _t13_y(c, aux):
    x5 = (c(5) - 200) * _ind(c(5) > 204)
    return [[x5, np.log(c(7) + 1), 1.0 / c(16), np.abs(c(51)), c(96),
             c(96) / (np.log(c(7) + 1) + 0.5), c(156), c(163) ** 2, c(188) ** 2]]


def _t14_p(c, aux):
    return [np.log(c(8)), 1.0 / np.sqrt(c(17)), np.exp(c(52)), c(100), np.abs(c(157)),
            np.abs(c(157)) * np.log(c(8)), c(162) ** 2, c(165), c(100) * c(165)]


def _t15_p(c, aux):
    x10 = (c(10) - 5) * _ind(c(10) > 5)
    return [x10, np.sqrt(c(25)), x10 * np.sqrt(c(25)), c(42), np.log(c(52)),
            np.abs(c(70)) ** (1.0 / 3.0), c(96), np.log(c(52)) * c(96), c(158), c(96) * c(158),
            c(163) ** 2, np.abs(c(169)), c(188) ** 3, c(192), c(188) ** 3 * c(192)]


def _t15_y(c, aux):
    return [[np.log(c(7) + 1), 1.0 / c(16), np.sqrt(c(25)), np.log(c(52)), c(96),
             c(96) / (np.log(c(7) + 1) + 0.5), c(158), c(163) ** 2, c(188) ** 2, c(192),
             c(188) ** 3 * c(192)]]


def _build_templates() -> dict[int, Template]:
    t: dict[int, Template] = {}
    t[1] = Template(1, 0.2, 1000, 0.404, NoiseSpec("normal", 2.0), _all_cols,
                    lambda c, aux: [_all_cols(c, aux)], _lin)
    t[2] = Template(2, 0.8, 1000, 0.462, NoiseSpec("normal", 1.0), _t2_p, _t2_y, _lin)
    t[3] = Template(3, -0.8, 1000, 0.985, NoiseSpec("normal", 1.0), _t3_p,
                    lambda c, aux: [_t3_p(c, aux)], _lin, share_alpha=90, random_idx=(90,))
    t[4] = Template(4, 2.1, 2000, 0.842, NoiseSpec("t", 1.0, 5.0), _t4_p, _t4_y, _lin)
    t[5] = Template(5, -0.3429, 2000, None, NoiseSpec("t", 0.5, 12.0, in_exp=True), _t5_p, _t5_y,
                    lambda a, L, ex, q: np.exp(q.kappa * a + L[0]) * q.mexp,
                    effect="kappa", signal_sd=0.5)
    t[6] = Template(6, -1.1039, 1000, None, NoiseSpec("t", 0.5, 19.0, in_exp=True),
                    lambda c, aux: [c(4), c(19), c(44)],
                    lambda c, aux: [[c(4), c(19), c(44)]],
                    lambda a, L, ex, q: np.exp(a * q.kappa * (0.4 + 0.2 * ex[55]) + q.b + L[0])
                    * q.mexp,
                    effect="kappa", extras=lambda c: {55: c(55)}, signal_sd=0.5, baseline=True)
    t[7] = Template(7, 0.0, 2000, 0.905, NoiseSpec("normal", 1.0), _t7_p, _t7_y, _lin)
    t[8] = Template(8, -1.432, 1000, 12.463, NoiseSpec("normal", 0.2), _t8_p,
                    lambda c, aux: [[c(7), c(16), c(51), c(156)]],
                    lambda a, L, ex, q: 10.0 / (2.0 + np.exp(-(q.kappa * a + L[0]))),
                    effect="kappa")
    t[9] = Template(9, 12.62, 2000, 12.284, NoiseSpec("normal", 3.0), _t9_p,
                    lambda c, aux: [[c(8), c(17)], [c(52), c(157), c(166)]],
                    lambda a, L, ex, q: np.exp(q.kappa * a + L[0])
                    + (L[1] + 59.0) * _ind(L[1] > -59.5),
                    effect="kappa", kappa_positive=True)
    t[10] = Template(10, 9.134, 2000, 11.676, NoiseSpec("t", 1.0, 4.0), _t10_p,
                     lambda c, aux: [[c(8), c(17), c(52), c(157), c(166), c(157) * c(166)]],
                     lambda a, L, ex, q: a * (q.c + 5.0 * ex[8] + 0.5 * ex[157] * ex[166]) + L[0],
                     effect="constant", extras=lambda c: {8: c(8), 157: c(157), 166: c(166)})
    t[11] = Template(11, 10.77, 2000, 61.092, NoiseSpec("normal", 2.0),
                     lambda c, aux: [c(j) for j in aux["idx"][:18]],
                     lambda c, aux: [[c(j) for j in aux["idx"][:23]]],
                     lambda a, L, ex, q: (L[0] + q.kappa * a) ** 2,
                     effect="kappa", share_alpha=18, random_idx=(23,), kappa_positive=True)
    t[12] = Template(12, -3.159, 2000, 12.820, NoiseSpec("normal", 2.0), _t12_p,
                     lambda c, aux: [[(c(5) - 200) * _ind(c(5) > 204), np.sqrt(c(25)), c(96),
                                      c(163) ** 2, np.abs(c(169)), c(188) ** 3]],
                     lambda a, L, ex, q: 3.0 / np.exp(-0.6 * (-0.5 * q.kappa * a + q.b + L[0])),
                     effect="kappa", baseline=True, kappa_positive=True)
    t[13] = Template(13, -0.8486, 2000, None, NoiseSpec("arm", sd0=1.0, sd1=0.5), _t13_p,
                     _t13_y, lambda a, L, ex, q: a * (q.c - 0.25 * ex[163] ** 2) + L[0],
                     effect="constant", extras=lambda c: {163: c(163)})
    t[14] = Template(14, 61.11, 1000, 219.221, NoiseSpec("normal", 4.0), _t14_p,
                     lambda c, aux: [[np.log(c(8)), np.sqrt(c(17)), c(52), np.abs(c(157))],
                                     [c(162), c(166), c(188) ** 2 * _ind(c(188) > 0.4)]],
                     lambda a, L, ex, q: np.exp(0.75 * q.kappa * a + L[0]) + 10.0 * q.kappa * a
                     + np.abs(L[1]),
                     effect="kappa", kappa_positive=True)
    t[15] = Template(15, -0.1606, 2000, None, NoiseSpec("arm", sd0=0.05, sd1=0.1), _t15_p,
                     _t15_y, lambda a, L, ex, q: a * (q.c - 0.25 * ex[192] + 0.6 * ex[51]) + L[0],
                     effect="constant", extras=lambda c: {192: c(192), 51: c(51)})
    t[16] = Template(16, 1.0, 2000, 10.934, NoiseSpec("t", 1.0, 8.0), _all_cols,
                     lambda c, aux: [_all_cols(c, aux)], _lin)
    return t


TEMPLATES = _build_templates()
LINEAR_ADDITIVE = (1, 2, 3, 4, 16)


def snr_target(snr: float) -> float:
    """Calibration target for a template's nominal SNR.

    Var(Y)/Var(eps) cannot fall below 1, so a nominal value under 1 is
    replaced by the geometric midpoint of the reachable part of its
    factor-3 band, ``sqrt(1 * 3 snr)``.
    """
    return snr if snr >= 1.0 else math.sqrt(3.0 * snr)


# =============================================================================
# CALIBRATION
# =============================================================================

REF_ROWS = 20000
MC_ROWS = 1_000_000
MC_CHUNK = 100_000
_CALIBRATION_ROUNDS = 3
SNR_STUDIES = 201
SNR_STUDY_REPS = 100


@dataclass(frozen=True)
class Calibrated:
    """A template with frozen coefficients and calibrated constants."""

    template: Template
    coeff_seed: int
    aux: Mapping
    p_mean: NDArray
    p_sd: NDArray
    alpha0: float
    alpha: NDArray
    y_mean: tuple[NDArray, ...]
    y_sd: tuple[NDArray, ...]
    beta: tuple[NDArray, ...]
    params: Params
    theta0: float
    columns: frozenset[int]
    diagnostics: Mapping = field(default_factory=dict)

    def index(self, cov) -> NDArray:
        return self.alpha0 + _standardized(self.template.p_basis(cov, self.aux), self.p_mean,
                                           self.p_sd) @ self.alpha

    def lins(self, cov, s: float | None = None) -> list[NDArray]:
        s = self.params.s if s is None else s
        out = []
        for g, terms in enumerate(self.template.y_groups(cov, self.aux)):
            out.append(s * (_standardized(terms, self.y_mean[g], self.y_sd[g]) @ self.beta[g]))
        return out

    def means(self, cov) -> tuple[NDArray, NDArray]:
        lins = self.lins(cov)
        ex = self.template.extras(cov)
        n = lins[0].shape[0]
        g0 = self.template.mean(np.zeros(n), lins, ex, self.params)
        g1 = self.template.mean(np.ones(n), lins, ex, self.params)
        return np.broadcast_to(g0, (n,)).astype(float), np.broadcast_to(g1, (n,)).astype(float)


def _stats(terms: list[NDArray]) -> tuple[NDArray, NDArray]:
    mat = np.column_stack(terms)
    sd = mat.std(axis=0)
    return mat.mean(axis=0), np.where(sd > 1e-12, sd, np.inf)


def _standardized(terms: list[NDArray], mean: NDArray, sd: NDArray) -> NDArray:
    return (np.column_stack(terms) - mean) / sd


def _bracket_root(f: Callable[[float], float], lo: float, hi: float, positive: bool) -> float:
    """Root of a monotone ``f`` found by expanding ``[lo, hi]`` until the sign changes."""
    if positive:
        lo = 0.0
    for _ in range(60):
        flo, fhi = f(lo), f(hi)
        if np.sign(flo) != np.sign(fhi):
            return float(brentq(f, lo, hi, xtol=1e-12, rtol=1e-12, maxiter=200))
        hi *= 2.0
        if not positive:
            lo *= 2.0
    raise ArithmeticError("effect calibration failed to bracket the target")


@functools.lru_cache(maxsize=32)
def calibrate(template_id: int, coeff_seed: int = 0) -> Calibrated:
    """Draw coefficients for a template and calibrate its constants (cached)."""
    if not 1 <= template_id <= 16:
        raise InvalidArgumentError(f"template_id must lie in 1..16, got {template_id}")
    tpl = TEMPLATES[template_id]
    root = RngStream(coeff_seed).derive("acic", template_id)
    cgen = root.derive("coefficients").generator()

    aux: dict = {}
    if tpl.random_idx:
        aux["idx"] = tuple(int(j) for j in
                           cgen.choice(np.arange(1, N_COVARIATES + 1), tpl.random_idx[0],
                                       replace=False))
    rec = _Recorder()
    tpl.p_basis(rec, aux)
    tpl.y_groups(rec, aux)
    tpl.extras(rec)
    columns = frozenset(rec.cols)

    ref = draw_covariates(REF_ROWS, N_COVARIATES, root.derive("reference"), columns)
    for col, op, cut in THRESHOLDS:
        if col in columns:
            rate = float(np.mean(ref(col) > cut if op == ">" else ref(col) < cut))
            if not 0.05 <= rate <= 0.95:
                raise ArithmeticError(f"indicator X{col}{op}{cut:g} fires with rate {rate:.3f}")
    p_terms = tpl.p_basis(ref, aux)
    p_mean, p_sd = _stats(p_terms)
    zp = _standardized(p_terms, p_mean, p_sd)
    alpha = cgen.standard_normal(zp.shape[1])
    alpha /= max(float(np.std(zp @ alpha)), 1e-12)
    alpha0 = float(cgen.normal(0.0, 0.3))

    y_groups = tpl.y_groups(ref, aux)
    y_mean, y_sd, beta = [], [], []
    for g, terms in enumerate(y_groups):
        mu, sd = _stats(terms)
        y_mean.append(mu)
        y_sd.append(sd)
        b = cgen.standard_normal(len(terms))
        if g == 0 and tpl.share_alpha:
            b[: tpl.share_alpha] = alpha[: tpl.share_alpha]
        zy = _standardized(terms, mu, sd)
        b /= max(float(np.std(zy @ b)), 1e-12)
        beta.append(b)

    cal = Calibrated(tpl, coeff_seed, aux, p_mean, p_sd, alpha0, alpha, tuple(y_mean),
                     tuple(y_sd), tuple(beta), Params(theta=tpl.theta), tpl.theta, columns)
    return _calibrate_constants(cal, root)


def _mc_sample(cal: Calibrated, root: RngStream):
    """Unit-scale outcome signals, extras and propensity index on 10^6 rows."""
    lins: list[list[NDArray]] = []
    extras: dict[int, list[NDArray]] = {}
    idx = []
    rows = MC_ROWS if cal.template.effect != "fixed" else REF_ROWS * 10
    for chunk in range(rows // MC_CHUNK):
        cov = draw_covariates(MC_CHUNK, N_COVARIATES, root.derive("mc", chunk), cal.columns)
        lins.append(cal.lins(cov, s=1.0))
        for k, v in cal.template.extras(cov).items():
            extras.setdefault(k, []).append(v)
        idx.append(cal.index(cov))
    unit = [np.concatenate([c[g] for c in lins]) for g in range(len(lins[0]))]
    return unit, {k: np.concatenate(v) for k, v in extras.items()}, np.concatenate(idx)


def _calibrate_constants(cal: Calibrated, root: RngStream) -> Calibrated:
    tpl = cal.template
    q = Params(theta=tpl.theta)
    diag: dict = {}
    if tpl.effect == "fixed" and tpl.snr is None:
        return _replace(cal, q, tpl.theta, diag)

    unit, ex, index = _mc_sample(cal, root)
    n = unit[0].shape[0]
    gen = root.derive("mc-draws").generator()
    a_mc = (gen.random(n) < expit(index)).astype(float)
    zeros, ones = np.zeros(n), np.ones(n)

    if tpl.noise.in_exp:
        eps = tpl.noise.draw(root.derive("mexp").generator(), zeros)
        q = _with(q, mexp=float(np.mean(np.exp(eps))))

    def contrast(qq: Params, s: float) -> NDArray:
        lins = [s * u for u in unit]
        return tpl.mean(ones, lins, ex, qq) - tpl.mean(zeros, lins, ex, qq)

    def baseline(qq: Params, s: float) -> Params:
        if not tpl.baseline:
            return qq
        lins = [s * u for u in unit]
        level = float(np.mean(tpl.mean(zeros, lins, ex, _with(qq, b=0.0))))
        target = 2.5 * abs(tpl.theta)
        # mean is multiplicative in exp(b) (template 6) or exp(0.6 b) (template 12)
        rate = 1.0 if tpl.tid == 6 else 0.6
        return _with(qq, b=math.log(target / level) / rate)

    def set_effect(qq: Params, s: float) -> Params:
        qq = baseline(qq, s)
        if tpl.effect == "constant":
            rest = float(np.mean(contrast(_with(qq, c=0.0), s)))
            return _with(qq, c=tpl.theta - rest)
        if tpl.effect == "kappa":
            kappa = _bracket_root(lambda k: float(np.mean(contrast(_with(qq, kappa=k), s)))
                                  - tpl.theta, -1.0, 1.0, tpl.kappa_positive)
            return _with(qq, kappa=kappa)
        return qq

    n_blocks = n // tpl.n
    studies = root.derive("snr-studies").generator().integers(
        0, n_blocks, size=(SNR_STUDIES, SNR_STUDY_REPS))

    def snr_at(qq: Params, s: float, population: bool = False) -> float:
        # exponentiated outcomes are heavy tailed, so a finite study reports
        # far less than the population ratio; target the median study average
        qq = set_effect(qq, s) if tpl.baseline else qq
        lins = [s * u for u in unit]
        g = tpl.mean(a_mc, lins, ex, qq)
        var_eps = tpl.noise.variance()
        if population:
            return (float(np.var(g)) + var_eps) / var_eps
        per_dataset = (np.var(g[: n_blocks * tpl.n].reshape(n_blocks, tpl.n), axis=1)
                       + var_eps) / var_eps
        return float(np.median(per_dataset[studies].mean(axis=1)))

    s = tpl.signal_sd
    q = _with(q, kappa=tpl.theta if tpl.effect == "kappa" else 0.0)
    for _ in range(_CALIBRATION_ROUNDS):
        q = set_effect(q, s)
        if tpl.snr is not None:
            s = _calibrate_scale(lambda s_: snr_at(q, s_), tpl.snr, diag)
    q = set_effect(q, s)
    q = _with(q, s=s)
    ate = float(np.mean(contrast(q, s)))
    diag.update({"mc_ate": ate, "mc_rows": n,
                 "snr_study_median": snr_at(q, s) if tpl.snr is not None else None,
                 "snr_population": snr_at(q, s, True) if tpl.snr is not None else None,
                 "m0_min": float(expit(index.min())), "m0_max": float(expit(index.max()))})
    return _replace(cal, q, ate if tpl.effect != "fixed" else tpl.theta, diag)


def _calibrate_scale(snr_of: Callable[[float], float], snr: float, diag: dict) -> float:
    """Outcome scale whose SNR hits the target.

    When the treatment term alone already exceeds the target, aim at the
    geometric middle of what is reachable inside the factor-3 band.
    """
    lo = math.log(1e-4)

    def f(log_s: float, target: float) -> float:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                val = snr_of(math.exp(log_s))
            except (ValueError, OverflowError, ZeroDivisionError):
                return 1e300
        return val - target if math.isfinite(val) else 1e300

    target = snr_target(snr)
    floor = f(lo, 0.0)
    if floor >= target / 1.2:
        target = math.sqrt(floor * 3.0 * snr)
        diag["snr_target_raised"] = target
    # heavy-tailed templates are not monotone in s: take the smallest root
    step = math.log(2.0)
    hi = lo + step
    while f(hi, target) < 0.0:
        if hi > math.log(1e6):
            raise CalibrationError(f"SNR target {target:.3g} unreachable")
        lo, hi = hi, hi + step
    return math.exp(brentq(lambda v: f(v, target), lo, hi, xtol=1e-10))


def _with(q: Params, **kw) -> Params:
    return Params(**{**asdict(q), **kw})


def _replace(cal: Calibrated, q: Params, theta0: float, diag: dict) -> Calibrated:
    return Calibrated(cal.template, cal.coeff_seed, cal.aux, cal.p_mean, cal.p_sd, cal.alpha0,
                      cal.alpha, cal.y_mean, cal.y_sd, cal.beta, q, float(theta0), cal.columns,
                      diag)


# =============================================================================
# ACIC GENERATION
# =============================================================================

def gen_acic(template_id: int, n: int | None = None, p: int | None = None, coeff_seed: int = 0,
             rng: RngStream | int | None = None) -> GeneratedData:
    """One dataset from an ACIC-style template.

    ``n`` defaults to the template size; ``p`` defaults to 200 and may be
    larger (extra columns are pure noise covariates).
    """
    if not isinstance(template_id, (int, np.integer)) or not 1 <= int(template_id) <= 16:
        raise InvalidArgumentError(f"template_id must be an integer in 1..16, got {template_id!r}")
    cal = calibrate(int(template_id), int(coeff_seed))
    tpl = cal.template
    n = tpl.n if n is None else int(n)
    p = N_COVARIATES if p is None else int(p)
    if n < 2:
        raise InvalidArgumentError(f"need n >= 2, got {n}")
    if p < N_COVARIATES:
        raise InvalidArgumentError(f"ACIC templates reference 200 covariates; got p={p}")
    rng = as_stream(rng)
    cov = draw_covariates(n, p, rng.derive("x"))
    m0 = expit(cal.index(cov))
    a = (rng.derive("a").generator().random(n) < m0).astype(float)
    lins = cal.lins(cov)
    ex = tpl.extras(cov)
    noise = tpl.noise.draw(rng.derive("eps").generator(), a)
    g0, g1 = cal.means(cov)
    if tpl.noise.in_exp:
        # the mean already carries E[exp(eps)]; realize the multiplicative noise
        mu = np.log(tpl.mean(a, lins, ex, _with(cal.params, mexp=1.0)))
        y = np.exp(mu + noise)
    else:
        y = np.where(a == 1.0, g1, g0) + noise
    eps = y - np.where(a == 1.0, g1, g0)
    data = Dataset(y, a, cov.matrix(), TreatmentKind.BINARY, check_classes=False)
    truth = DgpTruth(theta0=cal.theta0, ell0=m0 * g1 + (1.0 - m0) * g0, m0=m0, g0_0=g0, g0_1=g1,
                     eps=eps, v=a - m0)
    spec = DgpSpec("acic", int(template_id), n, p, int(coeff_seed), tpl.noise.describe())
    return GeneratedData(data, truth, spec, arm_noise=tpl.noise.kind == "arm")


def generate(spec: DgpSpec, rng: RngStream | int | None = None) -> GeneratedData:
    if spec.kind == "bch":
        return gen_bch(spec.n or 100, spec.p or 200, spec.rho, spec.r2_y, spec.r2_d, spec.theta0,
                       rng)
    return gen_acic(spec.template_id, spec.n, spec.p, spec.coeff_seed, rng)


# =============================================================================
# ORACLE AND SNR
# =============================================================================

def oracle_estimate(gen: GeneratedData, model_kind: ModelKind | str, clip: float = DEFAULT_CLIP,
                    level: float = DEFAULT_LEVEL) -> CausalEstimate:
    """The model's score solved with the true nuisances plugged in (no fitting)."""
    model_kind = ModelKind(model_kind)
    t = gen.truth
    fold_of = np.zeros(gen.data.n, dtype=np.int64)
    if model_kind is ModelKind.PLR:
        nuis = NuisancePredictions(ModelKind.PLR, t.m0, fold_of, ell_hat=t.ell0)
        return plr_estimate(gen.data, nuis, level)
    nuis = NuisancePredictions(ModelKind.IRM, np.clip(t.m0, clip, 1.0 - clip), fold_of,
                               g0_hat=t.g0_0, g1_hat=t.g0_1)
    return irm_ate_estimate(gen.data, nuis, level)


def snr_ratio(y: NDArray, eps: NDArray, d: NDArray | None = None, by_arm: bool = False) -> float:
    """Var(Y)/Var(eps); with ``by_arm`` both variances are pooled within arms by arm share."""
    y, eps = np.asarray(y, float), np.asarray(eps, float)
    if not by_arm:
        return float(np.var(y) / np.var(eps))
    d = np.asarray(d, float)
    num = den = 0.0
    for arm in (0.0, 1.0):
        rows = d == arm
        if rows.sum() < 2:
            continue
        share = rows.mean()
        num += share * np.var(y[rows])
        den += share * np.var(eps[rows])
    return float(num / den)


def empirical_snr(spec: DgpSpec, reps: int = 10, rng: RngStream | int | None = None) -> float:
    """Mean over repetitions of Var(Y)/Var(eps)."""
    if reps < 1:
        raise InvalidArgumentError("reps must be >= 1")
    rng = as_stream(rng)
    vals = []
    for r in range(reps):
        g = generate(spec, rng.derive("snr", r))
        vals.append(snr_ratio(g.data.y, g.truth.eps, g.data.d, g.arm_noise))
    return float(np.mean(vals))


# =============================================================================
# EXPORT
# =============================================================================

def export_generated(gen: GeneratedData, csv_path: str | Path) -> Path:
    """Write the dataset as CSV and the truth as a JSON sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    write_csv(gen.data, csv_path)
    t = gen.truth
    sidecar = csv_path.with_suffix(".truth.json")
    doc = {"spec": gen.spec.to_dict(), "theta0": t.theta0,
           "ell0": t.ell0.tolist(), "m0": t.m0.tolist(), "g0_0": t.g0_0.tolist(),
           "g0_1": t.g0_1.tolist(), "eps": t.eps.tolist(), "v": t.v.tolist()}
    sidecar.write_text(json.dumps(doc, sort_keys=True))
    return sidecar
