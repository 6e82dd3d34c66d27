"""Exact information quantities on finite joint distributions, and checks of
the two-view bounds on the graphical model  X' <- Y -> X -> Z -> Zhat.

All quantities are in bits.  Every check works on the full enumerated joint
table, so the results are exact up to float64 rounding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, SizeError

TOL = 1e-9
SEARCH_LIMIT = 10**6

Y, X, XP, Z, ZHAT, ZP, ZHATP = "Y", "X", "X'", "Z", "Zhat", "Z'", "Zhat'"


def _names(v) -> list[str]:
    return [v] if isinstance(v, str) else list(v)


class DiscreteJoint:
    """Normalised probability table over named finite-alphabet variables."""

    def __init__(self, variables: Sequence[tuple[str, int]], table):
        names = [name for name, _ in variables]
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate variable names in {names}")
        table = np.asarray(table, dtype=np.float64)
        sizes = tuple(int(size) for _, size in variables)
        if table.shape != sizes:
            raise DimensionError(f"table shape {table.shape} does not match alphabet sizes {sizes}")
        if (table < 0).any():
            raise DomainError("probabilities must be non-negative")
        total = table.sum()
        if abs(total - 1.0) > 1e-12:
            raise DomainError(f"table sums to {total!r}, not 1")
        self.names = names
        self.sizes = sizes
        self.table = table

    @classmethod
    def from_unnormalized(cls, variables, weights) -> "DiscreteJoint":
        weights = np.asarray(weights, dtype=np.float64)
        return cls(variables, weights / weights.sum())

    def __repr__(self):
        vs = ", ".join(f"{n}:{s}" for n, s in zip(self.names, self.sizes))
        return f"DiscreteJoint({vs})"

    def _axes(self, names) -> list[int]:
        try:
            return [self.names.index(n) for n in names]
        except ValueError:
            missing = [n for n in names if n not in self.names]
            raise DomainError(f"unknown variables {missing}; have {self.names}") from None

    def marginal(self, names) -> np.ndarray:
        """Marginal table with axes in the order given by ``names``."""
        names = _names(names)
        axes = self._axes(names)
        drop = tuple(i for i in range(len(self.names)) if i not in axes)
        kept = self.table.sum(axis=drop) if drop else self.table
        remaining = [i for i in range(len(self.names)) if i in axes]
        return np.transpose(kept, [remaining.index(a) for a in axes])

    def entropy(self, names) -> float:
        p = self.marginal(names).ravel()
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())

    def conditional_entropy(self, names, given) -> float:
        given = _names(given)
        if not given:
            return self.entropy(names)
        return self.entropy(_names(names) + given) - self.entropy(given)


def _grouped(j: DiscreteJoint, groups: list[list[str]]) -> np.ndarray:
    """Marginal over the concatenated groups, reshaped to one axis per group."""
    flat = [n for g in groups for n in g]
    m = j.marginal(flat)
    shape = [int(np.prod([j.sizes[j.names.index(n)] for n in g])) for g in groups]
    return m.reshape(shape)


def _check_disjoint(*sets):
    seen = set()
    for s in sets:
        if not s:
            raise DomainError("variable sets must be non-empty")
        if seen & set(s):
            raise DomainError(f"variable sets overlap on {sorted(seen & set(s))}")
        seen |= set(s)


def _mi_from_table(pab: np.ndarray) -> float:
    pa = pab.sum(axis=1, keepdims=True)
    pb = pab.sum(axis=0, keepdims=True)
    nz = pab > 0
    return float((pab[nz] * np.log2(pab[nz] / (pa * pb)[nz])).sum())


def mutual_information(j: DiscreteJoint, a, b) -> float:
    """I(A; B) = sum p(a,b) log2 p(a,b) / (p(a) p(b)), with 0 log 0 = 0."""
    a, b = _names(a), _names(b)
    _check_disjoint(a, b)
    return _mi_from_table(_grouped(j, [a, b]))


def conditional_mi(j: DiscreteJoint, a, b, c) -> float:
    """I(A; B | C) = sum_c p(c) I(A; B | C = c)."""
    a, b, c = _names(a), _names(b), _names(c)
    _check_disjoint(a, b, c)
    pabc = _grouped(j, [a, b, c])
    pc = pabc.sum(axis=(0, 1), keepdims=True)
    pac = pabc.sum(axis=1, keepdims=True)
    pbc = pabc.sum(axis=0, keepdims=True)
    nz = pabc > 0
    ratio = (pabc * pc)[nz] / (pac * pbc)[nz]
    return float((pabc[nz] * np.log2(ratio)).sum())


# ------------------------------------------------------------------ the model


def _check_stochastic(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or (m < 0).any() or np.abs(m.sum(axis=1) - 1).max() > 1e-12:
        raise DomainError(f"{what} must be a row-stochastic matrix")
    return m


@dataclass
class Pgm:
    """p(Y) p(X|Y) p(X'|Y) p(Z|X) p(Zhat|Z), optionally with a second branch
    p(Z'|X') p(Zhat'|Z') encoding the augmented view."""

    p_y: np.ndarray
    p_x_given_y: np.ndarray
    p_xp_given_y: np.ndarray
    encoder: np.ndarray
    channel: np.ndarray
    encoder2: np.ndarray | None = None
    channel2: np.ndarray | None = None

    def __post_init__(self):
        self.p_y = np.asarray(self.p_y, dtype=np.float64)
        if self.p_y.ndim != 1 or (self.p_y < 0).any() or abs(self.p_y.sum() - 1) > 1e-12:
            raise DomainError("p(Y) must be a probability vector")
        self.p_x_given_y = _check_stochastic(self.p_x_given_y, "p(X|Y)")
        self.p_xp_given_y = _check_stochastic(self.p_xp_given_y, "p(X'|Y)")
        self.encoder = _check_stochastic(self.encoder, "p(Z|X)")
        self.channel = _check_stochastic(self.channel, "p(Zhat|Z)")
        ny, nx = self.p_x_given_y.shape
        if self.p_y.size != ny or self.p_xp_given_y.shape[0] != ny:
            raise DimensionError("conditionals disagree on |Y|")
        if self.encoder.shape[0] != nx or self.channel.shape[0] != self.encoder.shape[1]:
            raise DimensionError("encoder/channel shapes do not chain")
        if (self.encoder2 is None) != (self.channel2 is None):
            raise DomainError("second branch needs both encoder2 and channel2")
        if self.encoder2 is not None:
            self.encoder2 = _check_stochastic(self.encoder2, "p(Z'|X')")
            self.channel2 = _check_stochastic(self.channel2, "p(Zhat'|Z')")
            if self.encoder2.shape[0] != self.p_xp_given_y.shape[1]:
                raise DimensionError("encoder2 rows must match |X'|")
            if self.channel2.shape[0] != self.encoder2.shape[1]:
                raise DimensionError("encoder2/channel2 shapes do not chain")

    @property
    def has_second_branch(self) -> bool:
        return self.encoder2 is not None

    def with_encoder(self, encoder, channel=None) -> "Pgm":
        return Pgm(
            self.p_y,
            self.p_x_given_y,
            self.p_xp_given_y,
            encoder,
            self.channel if channel is None else channel,
            self.encoder2,
            self.channel2,
        )

    def joint(self) -> DiscreteJoint:
        ny, nx = self.p_x_given_y.shape
        nxp = self.p_xp_given_y.shape[1]
        nz, nzh = self.channel.shape
        table = np.einsum(
            "y,yx,yw,xz,zh->yxwzh", self.p_y, self.p_x_given_y, self.p_xp_given_y, self.encoder, self.channel
        )
        variables = [(Y, ny), (X, nx), (XP, nxp), (Z, nz), (ZHAT, nzh)]
        if self.has_second_branch:
            table = np.einsum("yxwzh,wu,uv->yxwzhuv", table, self.encoder2, self.channel2)
            variables += [(ZP, self.channel2.shape[0]), (ZHATP, self.channel2.shape[1])]
        table = table / table.sum()
        return DiscreteJoint(variables, table)

    def joint_y_x_xp(self) -> DiscreteJoint:
        table = np.einsum("y,yx,yw->yxw", self.p_y, self.p_x_given_y, self.p_xp_given_y)
        return DiscreteJoint([(Y, self.p_y.size), (X, table.shape[1]), (XP, table.shape[2])], table / table.sum())


def deterministic_encoder(mapping: Sequence[int], nz: int) -> np.ndarray:
    return np.eye(nz)[list(mapping)]


def random_stochastic(rng: np.random.Generator, rows: int, cols: int, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(cols, concentration), size=rows)


def random_channel(rng: np.random.Generator, n: int) -> np.ndarray:
    """alpha * I + (1 - alpha) * random rows, alpha ~ U(0, 1)."""
    alpha = rng.uniform()
    return alpha * np.eye(n) + (1 - alpha) * random_stochastic(rng, n, n, 0.5)


def random_pgm(
    rng: np.random.Generator,
    alphabet=(2, 4),
    second_branch: bool = False,
    deterministic: bool = False,
    z_size: int | None = None,
) -> Pgm:
    lo, hi = alphabet
    ny, nx, nxp = (int(v) for v in rng.integers(lo, hi + 1, size=3))
    nz = int(rng.integers(lo, hi + 1)) if z_size is None else z_size
    if deterministic:
        encoder = deterministic_encoder(rng.integers(nz, size=nx), nz)
    else:
        encoder = random_stochastic(rng, nx, nz)
    kwargs = {}
    if second_branch:
        nz2 = int(rng.integers(lo, hi + 1))
        kwargs = dict(encoder2=random_stochastic(rng, nxp, nz2), channel2=random_channel(rng, nz2))
    return Pgm(
        rng.dirichlet(np.ones(ny)),
        random_stochastic(rng, ny, nx),
        random_stochastic(rng, ny, nxp),
        encoder,
        random_channel(rng, nz),
        **kwargs,
    )


def random_joint(rng: np.random.Generator, n_vars: int = 3, alphabet=(2, 4)) -> DiscreteJoint:
    lo, hi = alphabet
    sizes = [int(s) for s in rng.integers(lo, hi + 1, size=n_vars)]
    names = [f"V{i}" for i in range(n_vars)]
    return DiscreteJoint.from_unnormalized(list(zip(names, sizes)), rng.dirichlet(np.ones(int(np.prod(sizes)))).reshape(sizes))


# --------------------------------------------------------------------- checks


@dataclass(frozen=True)
class Check:
    """Outcome of one exact check; ``slack`` is the worst margin (negative = violated)."""

    name: str
    holds: bool
    slack: float
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.holds


def _equality(name, pairs: Iterable[tuple[str, float, float]], tol) -> Check:
    details = {label: lhs - rhs for label, lhs, rhs in pairs}
    worst = max(abs(v) for v in details.values())
    return Check(name, worst <= tol, -worst, details)


def verify_decomposition(pgm: Pgm, tol: float = TOL) -> Check:
    """I(X;Zhat) = I(X,X';Zhat) = I(X;Zhat|X') + I(X';Zhat)."""
    j = pgm.joint()
    i_x = mutual_information(j, X, ZHAT)
    i_both = mutual_information(j, [X, XP], ZHAT)
    redundant = conditional_mi(j, X, ZHAT, XP)
    shared = mutual_information(j, XP, ZHAT)
    check = _equality("decomposition", [("a", i_x, i_both), ("b", i_both, redundant + shared)], tol)
    check.details.update(redundant=redundant, shared=shared)
    return check


def verify_surrogate_bound(pgm: Pgm, tol: float = TOL) -> Check:
    """I(Zhat;X') >= I(Zhat;Zhat'), together with the identities behind it."""
    if not pgm.has_second_branch:
        raise DomainError("the surrogate bound needs the second branch p(Z'|X'), p(Zhat'|Z')")
    j = pgm.joint()
    lhs = mutual_information(j, ZHAT, XP)
    rhs = mutual_information(j, ZHAT, ZHATP)
    joint_term = mutual_information(j, ZHAT, [XP, ZHATP])
    cross = conditional_mi(j, ZHAT, ZHATP, XP)
    residual = conditional_mi(j, ZHAT, XP, ZHATP)
    identities = [
        ("chain_a", lhs, joint_term - cross),
        ("cond_indep", cross, 0.0),
        ("chain_c", joint_term, rhs + residual),
    ]
    worst_identity = max(abs(a - b) for _, a, b in identities)
    slack = min(lhs - rhs, -worst_identity)
    holds = lhs - rhs >= -tol and worst_identity <= tol
    return Check("surrogate_bound", holds, slack, {"I(Zhat;X')": lhs, "I(Zhat;Zhat')": rhs})


def d_separation_check(source: Pgm | DiscreteJoint, tol: float = TOL) -> Check:
    """I(Zhat;X'|Y) evaluated on the exact joint; zero when the PGM holds."""
    j = source.joint() if isinstance(source, Pgm) else source
    value = conditional_mi(j, ZHAT, XP, Y)
    return Check("d_separation", value <= tol, -value, {"I(Zhat;X'|Y)": value})


def dpi_check(pgm: Pgm, tol: float = TOL) -> Check:
    """I(Y;X) >= I(Y;Z) >= I(Y;Zhat)."""
    j = pgm.joint()
    iyx, iyz, iyzh = (mutual_information(j, Y, v) for v in (X, Z, ZHAT))
    slack = min(iyx - iyz, iyz - iyzh)
    return Check("dpi", slack >= -tol, slack, {"I(Y;X)": iyx, "I(Y;Z)": iyz, "I(Y;Zhat)": iyzh})


def chain_rule_check(j: DiscreteJoint, a, b, c, tol: float = TOL) -> Check:
    """I(A,B;C) = I(A;C) + I(B;C|A)."""
    a, b, c = _names(a), _names(b), _names(c)
    return _equality(
        "chain_rule",
        [("chain", mutual_information(j, a + b, c), mutual_information(j, a, c) + conditional_mi(j, b, c, a))],
        tol,
    )


def nonnegativity_check(j: DiscreteJoint, a, b, c=None, tol: float = TOL) -> Check:
    """0 <= I(A;B) <= min(H(A), H(B)) and I(A;B|C) >= 0."""
    i_ab = mutual_information(j, a, b)
    slack = min(i_ab, min(j.entropy(a), j.entropy(b)) - i_ab)
    details = {"I(A;B)": i_ab}
    if c is not None:
        i_cond = conditional_mi(j, a, b, c)
        slack = min(slack, i_cond)
        details["I(A;B|C)"] = i_cond
    return Check("nonnegativity", slack >= -tol, slack, details)


# ------------------------------------------------------- encoder enumeration

TARGETS = {"Y": Y, "X'": XP, Y: Y, XP: XP}


def _target_by_x(pgm: Pgm, target: str) -> np.ndarray:
    """p(T, X) as a [|T|, |X|] matrix."""
    if target not in TARGETS:
        raise DomainError(f"target must be Y or X', got {target!r}")
    p_yx = pgm.p_y[:, None] * pgm.p_x_given_y
    if TARGETS[target] == Y:
        return p_yx
    return np.einsum("yw,yx->wx", pgm.p_xp_given_y, p_yx)


def enumerate_optimal_encoder(
    pgm: Pgm,
    target: str,
    channel: np.ndarray | None = None,
    z_size: int | None = None,
    limit: int = SEARCH_LIMIT,
) -> tuple[np.ndarray, float]:
    """Exhaustive search over deterministic encoders X -> Z maximising
    I(Zhat; target) through ``channel`` (defaults to the template's).

    Encoders are visited in lexicographic order of their symbol maps; the
    first one reaching the maximum (within 1e-12) wins.
    """
    channel = pgm.channel if channel is None else _check_stochastic(channel, "channel")
    nz = channel.shape[0] if z_size is None else z_size
    if channel.shape[0] != nz:
        raise DimensionError("channel rows must equal |Z|")
    nx = pgm.p_x_given_y.shape[1]
    if nz**nx > limit:
        raise SizeError(f"{nz}^{nx} = {nz**nx} deterministic encoders exceed the limit of {limit}")
    p_tx = _target_by_x(pgm, target)
    best_val, best_map = -np.inf, None
    for mapping in itertools.product(range(nz), repeat=nx):
        p_tz = np.zeros((p_tx.shape[0], nz))
        np.add.at(p_tz.T, list(mapping), p_tx.T)
        value = _mi_from_table(p_tz @ channel)
        if value > best_val + 1e-12:
            best_val, best_map = value, mapping
    return deterministic_encoder(best_map, nz), float(best_val)


# --------------------------------------------------------------- the theorem


@dataclass(frozen=True)
class TheoremReport:
    i_xy: float
    i_sup_y: float
    i_ssl_y: float
    i_xy_given_xp: float
    eps_c: float
    eps_c_at_optimum: float
    i_ssl_xp: float
    lower_bound: float
    h_sup_given_y: float
    h_ssl_given_y: float
    slacks: tuple
    chain_holds: bool
    sup_encoder: np.ndarray = field(repr=False, compare=False, default=None)
    ssl_encoder: np.ndarray = field(repr=False, compare=False, default=None)


def verify_theorem1(pgm: Pgm, ssl_channel: np.ndarray, tol: float = TOL, limit: int = SEARCH_LIMIT) -> TheoremReport:
    """Check  I(X;Y) >= I(Zsup;Y) >= I(Zssl;Y) >= I(X;Y) - I(X;Y|X') - eps_c.

    The supervised branch sees a noiseless channel and maximises I(Zhat;Y);
    the self-supervised branch sees ``ssl_channel`` and maximises I(Zhat;X').
    ``eps_c`` is the information the channel costs the best SSL encoder,
    max_enc I(Z;X') - max_enc I(Zhat;X'); ``eps_c_at_optimum`` is
    I(Z;X') - I(Zhat;X') measured at the SSL-optimal encoder and is reported
    for audit only.
    """
    ssl_channel = _check_stochastic(ssl_channel, "ssl channel")
    nz = ssl_channel.shape[0]
    noiseless = np.eye(nz)
    base = pgm.joint_y_x_xp()
    i_xy = mutual_information(base, X, Y)
    i_xy_given_xp = conditional_mi(base, X, Y, XP)

    sup_enc, i_sup_y = enumerate_optimal_encoder(pgm, Y, noiseless, limit=limit)
    ssl_enc, i_ssl_xp = enumerate_optimal_encoder(pgm, XP, ssl_channel, limit=limit)
    _, best_z_xp = enumerate_optimal_encoder(pgm, XP, noiseless, limit=limit)

    ssl_joint = pgm.with_encoder(ssl_enc, ssl_channel).joint()
    sup_joint = pgm.with_encoder(sup_enc, noiseless).joint()
    i_ssl_y = mutual_information(ssl_joint, ZHAT, Y)
    eps_c = best_z_xp - i_ssl_xp
    eps_c_at_optimum = mutual_information(ssl_joint, Z, XP) - i_ssl_xp
    lower = i_xy - i_xy_given_xp - eps_c
    slacks = (i_xy - i_sup_y, i_sup_y - i_ssl_y, i_ssl_y - lower)
    return TheoremReport(
        i_xy=i_xy,
        i_sup_y=i_sup_y,
        i_ssl_y=i_ssl_y,
        i_xy_given_xp=i_xy_given_xp,
        eps_c=eps_c,
        eps_c_at_optimum=eps_c_at_optimum,
        i_ssl_xp=i_ssl_xp,
        lower_bound=lower,
        h_sup_given_y=sup_joint.conditional_entropy(ZHAT, Y),
        h_ssl_given_y=ssl_joint.conditional_entropy(ZHAT, Y),
        slacks=slacks,
        chain_holds=min(slacks) >= -tol,
        sup_encoder=sup_enc,
        ssl_encoder=ssl_enc,
    )


def theorem_instance(rng: np.random.Generator, alphabet=(2, 4)) -> tuple[Pgm, np.ndarray]:
    """Random template with |Z| = |X| (rich enough for a sufficient code) and
    a random noisy channel for the self-supervised branch."""
    pgm = random_pgm(rng, alphabet, deterministic=True, z_size=None)
    nx = pgm.p_x_given_y.shape[1]
    pgm = pgm.with_encoder(np.eye(nx), np.eye(nx))
    return pgm, random_channel(rng, nx)


# ---------------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    """Worst slack and failure count per named inequality."""

    worst: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    failing_instances: list = field(default_factory=list)

    def add(self, check: Check, instance=None):
        name = check.name
        self.counts[name] = self.counts.get(name, 0) + 1
        self.worst[name] = min(self.worst.get(name, np.inf), check.slack)
        if not check.holds:
            self.failures[name] = self.failures.get(name, 0) + 1
            if instance is not None:
                self.failing_instances.append((name, instance))
        else:
            self.failures.setdefault(name, 0)

    @property
    def passed(self) -> bool:
        return not any(self.failures.values())


def run_sweep(seed: int = 0, n_joints: int = 200, n_pgms: int = 200, n_theorem: int = 100, alphabet=(2, 4)) -> SweepResult:
    rng = np.random.default_rng(seed)
    result = SweepResult()
    for _ in range(n_joints):
        j = random_joint(rng, 3, alphabet)
        a, b, c = j.names
        result.add(chain_rule_check(j, a, b, c), j)
        result.add(nonnegativity_check(j, a, c, b), j)
    for _ in range(n_pgms):
        pgm = random_pgm(rng, alphabet, second_branch=True)
        for check in (verify_decomposition(pgm), verify_surrogate_bound(pgm), dpi_check(pgm), d_separation_check(pgm)):
            result.add(check, pgm)
    for _ in range(n_theorem):
        pgm, channel = theorem_instance(rng, alphabet)
        report = verify_theorem1(pgm, channel)
        result.add(Check("theorem1", report.chain_holds, min(report.slacks), {"report": report}), (pgm, channel))
    return result
