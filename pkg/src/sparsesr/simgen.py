"""Synthetic benchmark generators.

* Cancer PKPD trajectories (tumour volume with chemo- and radiotherapy).
* Five perturbed PKPD variants with extra forcing terms.
* The collinearity and interaction-only pruning stress datasets.

Every patient draws from its own Philox stream keyed by ``(seed, label,
patient)``, so a trajectory does not depend on how many others are simulated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import rng_for
from .data import Dataset, concat_splits, split_dataset, write_table

NONE = "none"
CHEMO = "chemo"
CHEMO_RADIO = "chemo_radio"
PKPD_VARIANTS = (NONE, CHEMO, CHEMO_RADIO)

X, C, UC, D = "cancer_volume", "chemo_concentration", "chemo_dosage", "radiotherapy_dosage"
DV, DC = "dv_dt", "dc_dt"


@dataclass(frozen=True)
class PkpdParams:
    rho: float = 7.00e-5
    K: float = 30.0
    alpha_r: float = 0.0398
    beta_r: float = 0.00398
    beta_c: float = 0.028
    d_max: float = 13.0
    gamma_c: float = 2.0
    gamma_r: float = 2.0
    delta_c: float = 6.5
    delta_r: float = 6.5
    chemo_bolus: float = 5.0
    radio_fraction: float = 2.0
    dt: float = 1.0
    horizon: int = 60
    x0_max: float = 1149.0
    volume_floor: float = 1e-4
    chemo_decay: float = 0.5


def sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def mean_diameter(volume: float, p: PkpdParams = PkpdParams()) -> float:
    """Diameter of the sphere with this volume, capped at ``d_max``."""
    return min((6.0 * volume / math.pi) ** (1.0 / 3.0), p.d_max)


def policy_probs(diameter: float, p: PkpdParams = PkpdParams()) -> tuple[float, float]:
    pc = sigmoid(p.gamma_c / p.d_max * (diameter - p.delta_c))
    pr = sigmoid(p.gamma_r / p.d_max * (diameter - p.delta_r))
    return pc, pr


def pkpd_rhs(x: float, c: float, d: float, uc: float, p: PkpdParams = PkpdParams(), extra: float = 0.0,
             log_shift: float = 0.0) -> tuple[float, float]:
    """Tumour-volume and concentration derivatives.

    ``extra`` is added inside the bracket multiplying ``x`` and ``log_shift``
    is added to ``x`` inside the Gompertz log; both are zero for the base model.
    """
    growth = p.rho * math.log(p.K / (x + log_shift))
    kill = p.beta_c * c + p.alpha_r * d + p.beta_r * d * d
    dv = (growth - kill + extra) * x
    dc = -p.chemo_decay * c + uc
    return dv, dc


@dataclass(frozen=True)
class SyntheticSpec:
    variant: int
    gamma: float = 0.01
    omega: float = 0.5
    delta: float = 0.01
    epsilon: float = 0.01
    phi: float = 0.5
    theta: float = 0.01
    n_max: float = 5.0  # N(t) ~ U(0, n_max), drawn once per patient

    def __post_init__(self):
        if self.variant not in (1, 2, 3, 4, 5):
            raise ValueError(f"synthetic variant must be 1..5, got {self.variant}")

    @staticmethod
    def signal_i(t: float) -> float:
        return abs(math.sin(0.1 * t))


def _simulate(variant: str, n_patients: int, p: PkpdParams, seed: int, spec: SyntheticSpec | None) -> Dataset:
    chemo_on = variant in (CHEMO, CHEMO_RADIO)
    radio_on = variant == CHEMO_RADIO
    cols: dict[str, list[float]] = {k: [] for k in (X, C, UC, D, DV, DC, "time", "I_t", "N_t")}
    groups: list[str] = []
    for i in range(n_patients):
        rng = rng_for(seed, "pkpd", i)
        x = max(rng.uniform(0.0, p.x0_max), p.volume_floor)
        c = 0.0
        n_t = 0.0
        if spec is not None:
            n_t = rng_for(seed, "synthetic-N", i).uniform(0.0, spec.n_max) if spec.n_max > 0 else 0.0
        for day in range(p.horizon):
            t = day * p.dt
            pc, pr = policy_probs(mean_diameter(x, p), p)
            u1, u2 = rng.random(2)
            uc = p.chemo_bolus if chemo_on and u1 < pc else 0.0
            d = p.radio_fraction if radio_on and u2 < pr else 0.0
            extra, shift = 0.0, 0.0
            if spec is not None:
                v = spec.variant
                if v == 1:
                    extra = spec.gamma * math.sin(spec.omega * t)
                elif v == 2:
                    extra = -spec.delta * spec.signal_i(t)
                elif v == 3:
                    shift = n_t
                elif v == 4:
                    extra = spec.epsilon * math.cos(spec.phi * t)
                else:
                    extra = -spec.theta * c * d
            dv, dc = pkpd_rhs(x, c, d, uc, p, extra, shift)
            x_next = max(x + p.dt * dv, p.volume_floor)
            c_next = c + p.dt * dc
            cols[X].append(x)
            cols[C].append(c)
            cols[UC].append(uc)
            cols[D].append(d)
            # Targets are the finite difference of the stored states, so they
            # match the Euler update to the last bit.
            cols[DV].append((x_next - x) / p.dt)
            cols[DC].append((c_next - c) / p.dt)
            cols["time"].append(t)
            cols["I_t"].append(spec.signal_i(t) if spec else 0.0)
            cols["N_t"].append(n_t)
            groups.append(str(i))
            x, c = x_next, c_next

    names = {NONE: [X, UC, D], CHEMO: [X, C, UC], CHEMO_RADIO: [X, C, UC, D]}[variant]
    if spec is not None:
        names = names + ["time", "I_t", "N_t"]
    targets = [DV] if variant == NONE else [DV, DC]
    feats = {k: np.array(cols[k]) for k in names}
    targs = {k: np.array(cols[k]) for k in targets}
    return Dataset(feats, targs, groups=np.array(groups))


def simulate_pkpd(variant: str = CHEMO_RADIO, n_patients: int = 1000, params: PkpdParams = PkpdParams(),
                  seed: int = 0) -> Dataset:
    """Euler-integrated PKPD trajectories, one row per patient-day."""
    if variant not in PKPD_VARIANTS:
        raise ValueError(f"unknown PKPD variant '{variant}'")
    if n_patients < 1:
        raise ValueError("need at least one patient")
    d = _simulate(variant, n_patients, params, seed, None)
    return replace(d, meta={"generator": "pkpd", "variant": variant, "params": asdict(params), "seed": seed,
                            "ground_truth": pkpd_ground_truth(variant)})


def simulate_synthetic_variant(spec: SyntheticSpec, n_patients: int = 1000, params: PkpdParams = PkpdParams(),
                               seed: int = 0) -> Dataset:
    d = _simulate(CHEMO_RADIO, n_patients, params, seed, spec)
    return replace(d, meta={"generator": "synthetic", "variant": spec.variant, "spec": asdict(spec),
                            "params": asdict(params), "seed": seed,
                            "ground_truth": synthetic_ground_truth(spec.variant)})


def pkpd_ground_truth(variant: str) -> list[str]:
    kill = {NONE: "0", CHEMO: "beta_c*C", CHEMO_RADIO: "beta_c*C + alpha_r*d + beta_r*d**2"}[variant]
    out = [f"dv_dt = (rho*log(K/x) - ({kill}))*x"]
    if variant != NONE:
        out.append("dc_dt = -0.5*C + u_c")
    return out


def synthetic_ground_truth(variant: int) -> list[str]:
    extra = {
        1: "+ gamma*sin(omega*t)",
        2: "- delta*I(t)",
        3: "",
        4: "+ epsilon*cos(phi*t)",
        5: "- theta*C*d",
    }[variant]
    log_arg = "K/(x + N(t))" if variant == 3 else "K/x"
    return [f"dv_dt = (rho*log({log_arg}) - (beta_c*C + alpha_r*d + beta_r*d**2) {extra})*x".replace("  ", " "),
            "dc_dt = -0.5*C + u_c"]


def add_distractors(d: Dataset, k: int, seed: int) -> Dataset:
    """Append ``k`` irrelevant N(0,1) feature columns named noise_1..noise_k."""
    rng = rng_for(seed, "distractors")
    return d.with_features({f"noise_{j + 1}": rng.standard_normal(d.n_rows) for j in range(k)})


def write_manifest(d: Dataset, path: str | Path, **extra) -> None:
    manifest = dict(d.meta)
    manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export(d: Dataset, directory: str | Path, stem: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, man_path = directory / f"{stem}.csv", directory / f"{stem}.json"
    write_table(d, csv_path)
    write_manifest(d, man_path, n_rows=d.n_rows, columns=d.feature_names + d.target_names)
    return csv_path, man_path


# ---------------------------------------------------------------------------
# collinearity stress data


SIGNAL_TERMS = {
    X: 1,
    f"{X} * log({X})": 2,
    f"{X} * {C}": 3,
    f"{X} * {D}": 4,
    C: 5,
    UC: 6,
}
CLONE_TERMS = {
    f"{C}_rho": 5,
    f"{UC}_rho": 6,
    f"{X} * {C}_rho": 3,
    f"{X} * {D}_rho": 4,
}
DISTRACTOR_TERMS = [f"sqrt({X})", f"log({X})", f"{X}**2", f"{UC} * {D}"]


@dataclass(frozen=True)
class StressData:
    dataset: Dataset
    pool: list[str]
    groups: dict[str, int] = field(default_factory=dict)
    signal: list[str] = field(default_factory=list)


def make_clone(v: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """``v + sd(v) sqrt(rho^-2 - 1) eps`` so that corr(v, clone) is about ``rho``."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0, 1]")
    eps = rng.standard_normal(len(v))
    return v + np.std(v) * math.sqrt(rho**-2 - 1.0) * eps


def gen_collinearity(rho: float, seed: int, n_patients: int = 200,
                     fractions=(0.7, 0.15, 0.15)) -> StressData:
    """PKPD data with noiseless analytic targets, three clone columns and the 14-term pool."""
    p = PkpdParams()
    base = _simulate(CHEMO_RADIO, n_patients, p, seed, None)
    f = base.features
    x, c, uc, d = f[X], f[C], f[UC], f[D]
    dv = (p.rho * np.log(p.K / x) - (p.beta_c * c + p.alpha_r * d + p.beta_r * d * d)) * x
    dc = -p.chemo_decay * c + uc
    rng = rng_for(seed, "clones", rho)
    feats = dict(f)
    for name in (C, UC, D):
        feats[f"{name}_rho"] = make_clone(f[name], rho, rng)
    data = Dataset(feats, {DV: dv, DC: dc}, groups=base.groups,
                   meta={"generator": "collinearity", "rho": rho, "seed": seed})
    data = split_dataset(data, fractions, seed)
    groups = {**SIGNAL_TERMS, **CLONE_TERMS}
    pool = list(SIGNAL_TERMS) + list(CLONE_TERMS) + DISTRACTOR_TERMS
    return StressData(data, pool, groups, list(SIGNAL_TERMS))


# ---------------------------------------------------------------------------
# interaction-only stress data

EPISTASIS_POOL_1 = ["x1", "x2", "x1 + x2", "x1 * x2", "x1 * x3", "x2 * x4", "x1**2", "x2**2", "x3", "x4"]
EPISTASIS_POOL_2 = EPISTASIS_POOL_1[:4] + ["x3 * x4"] + EPISTASIS_POOL_1[4:]
NOISE_SD = 0.05


def gen_epistasis(experiment: int, seed: int, n_per_split: int = 2000, noise_sd: float = NOISE_SD) -> StressData:
    """Ten iid N(0,1) features and a target made only of pairwise products plus noise."""
    if experiment not in (1, 2):
        raise ValueError("experiment must be 1 or 2")
    parts = {}
    for split in ("train", "val", "test"):
        rng = rng_for(seed, "epistasis", experiment, split)
        xs = {f"x{j}": rng.standard_normal(n_per_split) for j in range(1, 11)}
        y = xs["x1"] * xs["x2"]
        if experiment == 2:
            y = y + xs["x3"] * xs["x4"]
        y = y + noise_sd * rng.standard_normal(n_per_split)
        parts[split] = Dataset(xs, {"y": y})
    data = concat_splits(parts)
    data = replace(data, meta={"generator": "epistasis", "experiment": experiment, "seed": seed})
    pool = EPISTASIS_POOL_1 if experiment == 1 else EPISTASIS_POOL_2
    signal = ["x1 * x2"] if experiment == 1 else ["x1 * x2", "x3 * x4"]
    return StressData(data, list(pool), {s: i + 1 for i, s in enumerate(signal)}, signal)


# ---------------------------------------------------------------------------
# term-local optimization proof of concept

TLO_CONSTANT = 0.123
TLO_POOL = ["1 / (x_1**2 + c(0.5))"]


def gen_rational(seed: int, n_per_split: int = 200, constant: float = TLO_CONSTANT) -> Dataset:
    """Noiseless ``y = 1 / (constant + x_1^2)`` with ``x_1 ~ U(-2, 2)``."""
    parts = {}
    for split in ("train", "val", "test"):
        rng = rng_for(seed, "rational", split)
        x = rng.uniform(-2.0, 2.0, n_per_split)
        parts[split] = Dataset({"x_1": x}, {"y": 1.0 / (constant + x**2)})
    data = concat_splits(parts)
    return replace(data, meta={"generator": "rational", "constant": constant, "seed": seed})


# Ground-truth right-hand-side terms for the chemo+radio variant, as an oracle pool.
PKPD_ORACLE_POOL = [
    X,
    f"{X} * np.log({X})",
    f"{X} * {C}",
    f"{X} * {D}",
    C,
    UC,
]

DESCRIPTIONS = {
    "synthetic": ("Tumour volume dynamics under chemotherapy and radiotherapy with an additional unknown time-dependent "
                  "effect. time is the day index, I_t and N_t are auxiliary signals."),
    "rational": "A single input x_1 and a smooth, bounded, even response y.",
}


def describe(generator: str) -> str:
    """Natural-language problem description for a built-in generator."""
    if generator == "pkpd":
        from importlib.resources import files
        return files("sparsesr.templates").joinpath("pkpd_description.txt").read_text(encoding="utf-8").strip()
    return DESCRIPTIONS.get(generator, "")
