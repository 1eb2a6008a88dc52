"""Problem primitives, derived workload-scale scalars and the n-th scaled system.

Classes are stored in canonical order (holding cost times service rate,
nonincreasing). ``ModelSpec.perm`` maps canonical positions back to the
labels used in the input so that reports can use original class numbers.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, CriticalLoadViolation, NegativeRate, OrderingViolation, ModelError

LOAD_TOL = 1e-12

ARRAY_KEYS = (
    "lambda", "mu", "lambda_hat", "mu_hat", "b_hat", "h_hat", "r_hat", "kappa1", "kappa2",
)
SCALAR_KEYS = ("varrho", "delta0")


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelSpec:
    lam: np.ndarray
    mu: np.ndarray
    lam_hat: np.ndarray
    mu_hat: np.ndarray
    b_hat: np.ndarray
    h_hat: np.ndarray
    r_hat: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    varrho: float
    delta0: float
    perm: np.ndarray = field(default=None)

    @property
    def I(self) -> int:
        return len(self.lam)

    @property
    def rho(self) -> np.ndarray:
        return self.lam / self.mu

    @classmethod
    def create(cls, lam, mu, b_hat, h_hat, r_hat, kappa1, kappa2, varrho, delta0,
               lam_hat=None, mu_hat=None, reorder=True) -> "ModelSpec":
        """Build a validated spec, reordering classes so that h_hat*mu is nonincreasing."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        I = len(lam)

        def vec(v, name, default=None):
            if v is None:
                v = np.zeros(I) if default is None else default
            v = np.atleast_1d(np.asarray(v, dtype=float))
            if v.shape == (1,) and I > 1:
                v = np.full(I, v[0])
            if v.shape != (I,):
                raise ModelError(f"{name} has length {len(v)}, expected I={I}")
            return v

        arrays = dict(
            lam=lam, mu=vec(mu, "mu"), lam_hat=vec(lam_hat, "lambda_hat"),
            mu_hat=vec(mu_hat, "mu_hat"), b_hat=vec(b_hat, "b_hat"), h_hat=vec(h_hat, "h_hat"),
            r_hat=vec(r_hat, "r_hat"), kappa1=vec(kappa1, "kappa1"), kappa2=vec(kappa2, "kappa2"),
        )
        if reorder:
            # stable sort keeps the input order among ties
            perm = np.argsort(-(arrays["h_hat"] * arrays["mu"]), kind="stable")
        else:
            perm = np.arange(I)
        arrays = {k: _frozen(v[perm]) for k, v in arrays.items()}
        spec = cls(**arrays, varrho=float(varrho), delta0=float(delta0), perm=_frozen(perm, int))
        spec.validate()
        return spec

    def validate(self) -> None:
        I = self.I
        if I < 1:
            raise ModelError("need at least one class")
        for name in ("lam", "mu", "b_hat", "h_hat", "r_hat", "kappa1", "kappa2"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ModelError(f"{name} must be finite and positive, got {v.tolist()}")
        for name in ("lam_hat", "mu_hat"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} must be finite")
        if not (self.varrho > 0):
            raise ModelError("varrho must be positive")
        if not (self.delta0 >= 0):
            raise ModelError("delta0 must be nonnegative")
        load = float(np.sum(self.lam / self.mu))
        if abs(load - 1.0) > LOAD_TOL:
            raise CriticalLoadViolation(f"sum(lambda/mu) = {load!r}, system is not critically loaded")
        hm = self.h_hat * self.mu
        bad = np.nonzero(hm[:-1] < hm[1:])[0]
        if bad.size:
            pairs = [(int(i), int(i) + 1) for i in bad]
            raise OrderingViolation(f"h_hat*mu not nonincreasing at canonical positions {pairs}", pairs)
        if self.delta0 >= np.min(self.b_hat):
            raise ModelError(f"delta0={self.delta0} must be below min(b_hat)={np.min(self.b_hat)}")

    def with_(self, **changes) -> "ModelSpec":
        """Copy with some primitives replaced (given in canonical order); revalidates."""
        fields = dict(lam=self.lam, mu=self.mu, lam_hat=self.lam_hat, mu_hat=self.mu_hat,
                      b_hat=self.b_hat, h_hat=self.h_hat, r_hat=self.r_hat, kappa1=self.kappa1,
                      kappa2=self.kappa2, varrho=self.varrho, delta0=self.delta0)
        fields.update(changes)
        new = ModelSpec.create(**fields)
        # compose with the existing labelling
        return replace(new, perm=_frozen(self.perm[new.perm], int))

    def original_order(self, values):
        """Map a canonical per-class array back to input class order."""
        values = np.asarray(values)
        out = np.empty_like(values)
        out[..., self.perm] = values
        return out


@dataclass(frozen=True)
class DerivedModel:
    rho: np.ndarray
    theta: np.ndarray
    sigma_hat: np.ndarray
    sigma: float
    m_hat: np.ndarray
    m: float
    b: float
    eps_hat: np.ndarray
    epsilon: float
    i_star: int
    r: float
    a_hat: np.ndarray
    a_upper: float
    h_hat: np.ndarray
    b_hat: np.ndarray
    varrho: float
    a: float | None = None

    @property
    def I(self) -> int:
        return len(self.rho)

    def with_cutoff(self, beta_eps: float) -> "DerivedModel":
        """Fill in the rejection cutoff a = min(beta_eps, theta . a_hat)."""
        return replace(self, a=float(min(beta_eps, self.a_upper)))


def derive(spec: ModelSpec) -> DerivedModel:
    lam, mu = spec.lam, spec.mu
    rho = lam / mu
    theta = 1.0 / mu
    sigma_hat = np.sqrt(2.0 * lam)
    ts = theta * sigma_hat
    sigma = float(np.sqrt(np.sum(ts ** 2)))
    m_hat = spec.lam_hat - rho * spec.mu_hat
    eps_hat = 0.5 * (spec.kappa1 + spec.kappa2)
    epsilon = float(np.sum(ts ** 2 * eps_hat) / sigma ** 2)
    rm = spec.r_hat * mu
    i_star = int(np.argmin(rm))  # first index on ties
    a_hat = spec.b_hat - spec.delta0
    return DerivedModel(
        rho=_frozen(rho), theta=_frozen(theta), sigma_hat=_frozen(sigma_hat), sigma=sigma,
        m_hat=_frozen(m_hat), m=float(theta @ m_hat), b=float(theta @ spec.b_hat),
        eps_hat=_frozen(eps_hat), epsilon=epsilon, i_star=i_star, r=float(rm[i_star]),
        a_hat=_frozen(a_hat), a_upper=float(theta @ a_hat), h_hat=spec.h_hat, b_hat=spec.b_hat,
        varrho=spec.varrho,
    )


@dataclass(frozen=True)
class ScaledModel:
    n: int
    lam_n: np.ndarray
    mu_n: np.ndarray
    b_n: np.ndarray
    theta_n: np.ndarray
    m_hat_n: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    b_hat: np.ndarray
    h_hat: np.ndarray
    r_hat: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    varrho: float

    @property
    def I(self) -> int:
        return len(self.lam_n)

    @property
    def sqrt_n(self) -> float:
        return float(np.sqrt(self.n))


def scale(spec: ModelSpec, derived: DerivedModel, n: int) -> ScaledModel:
    if int(n) != n or n < 1:
        raise ModelError(f"n must be a positive integer, got {n}")
    n = int(n)
    rn = np.sqrt(n)
    lam_n = spec.lam * n + spec.lam_hat * rn
    mu_n = spec.mu * n + spec.mu_hat * rn
    bad = np.nonzero((lam_n <= 0) | (mu_n <= 0))[0]
    if bad.size:
        raise NegativeRate(f"nonpositive rate at n={n} for classes {bad.tolist()}")
    # tiny slack so that e.g. 7 * 10 is not floored to 69
    b_n = np.floor(spec.b_hat * rn + 1e-9).astype(np.int64)
    return ScaledModel(
        n=n, lam_n=_frozen(lam_n), mu_n=_frozen(mu_n), b_n=_frozen(b_n, np.int64),
        theta_n=_frozen(n / mu_n), m_hat_n=_frozen((lam_n - derived.rho * mu_n) / rn),
        lam=spec.lam, mu=spec.mu, b_hat=spec.b_hat, h_hat=spec.h_hat, r_hat=spec.r_hat,
        kappa1=spec.kappa1, kappa2=spec.kappa2, varrho=float(spec.varrho),
    )


# --- model files -----------------------------------------------------------

def _key_lines(text):
    lines = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:#;]+?)\s*[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def parse_model(text: str, source: str = "<string>") -> ModelSpec:
    """Parse an INI-style model file with a ``[model]`` section."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}",
                          line=getattr(exc, "lineno", None)) from exc
    if not cp.has_section("model"):
        raise ConfigError(f"{source}: missing [model] section")
    lines = _key_lines(text)
    sec = cp["model"]

    def get(key, conv):
        line = lines.get(("model", key))
        if key not in sec:
            raise ConfigError(f"{source}: missing key", line=None, key=f"model.{key}")
        raw = sec[key]
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: cannot parse {raw!r}: {exc}", line=line, key=f"model.{key}") from exc

    def floats(raw):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty array")
        return [float(p) for p in parts]

    I = get("i", int)
    values = {}
    for key in ARRAY_KEYS:
        if key in ("lambda_hat", "mu_hat") and key not in sec:
            values[key] = [0.0] * I
            continue
        v = get(key, floats)
        if len(v) == 1 and I > 1 and key.startswith("kappa"):
            v = v * I
        if len(v) != I:
            raise ConfigError(f"{source}: expected {I} entries, got {len(v)}",
                              line=lines.get(("model", key)), key=f"model.{key}")
        values[key] = v
    scalars = {k: get(k, float) for k in SCALAR_KEYS}
    try:
        return ModelSpec.create(
            lam=values["lambda"], mu=values["mu"], lam_hat=values["lambda_hat"],
            mu_hat=values["mu_hat"], b_hat=values["b_hat"], h_hat=values["h_hat"],
            r_hat=values["r_hat"], kappa1=values["kappa1"], kappa2=values["kappa2"], **scalars,
        )
    except ModelError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_model(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read(), source=str(path))


def dump_model(spec: ModelSpec) -> str:
    """Render a spec back to model-file text, in original class order."""
    def fmt(v):
        return ", ".join(repr(float(x)) for x in spec.original_order(v))
    rows = ["[model]", f"I = {spec.I}"]
    for key, attr in zip(ARRAY_KEYS, ("lam", "mu", "lam_hat", "mu_hat", "b_hat", "h_hat",
                                      "r_hat", "kappa1", "kappa2")):
        rows.append(f"{key} = {fmt(getattr(spec, attr))}")
    rows.append(f"varrho = {spec.varrho!r}")
    rows.append(f"delta0 = {spec.delta0!r}")
    return "\n".join(rows) + "\n"


def figure1_model(delta0: float = 0.5, kappa: float = 0.5, varrho: float = 1.0) -> ModelSpec:
    """Three-class example with a_hat = (4, 7, 6), i.e. b_hat = a_hat + delta0."""
    return ModelSpec.create(
        lam=[0.9, 0.4, 0.45], mu=[3.0, 1.0, 1.5], h_hat=[1.0, 2.5, 1.5], r_hat=[2.0, 3.0, 4.0],
        b_hat=np.array([4.0, 7.0, 6.0]) + delta0, kappa1=kappa, kappa2=kappa,
        varrho=varrho, delta0=delta0,
    )
