"""Parameter-level mapping from a LayerNorm source to an RMSNorm target.

Everything except the normalizers is copied bit-for-bit (NPM). Each norm
site takes ``theta <- gamma`` and drops ``beta`` (OPM). :func:`opm_closed_form`
gives the exact per-vector optimum and is used as a diagnostic, never as the
mapping rule.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import ModelConfig, ParameterStore, check_store, norm_sites, param_shapes
from .tensor import NORM_EPS, Tensor

NPM = "NPM"
OPM = "OPM"


class MappingError(ValueError):
    pass


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray | None = None
    theta: np.ndarray | None = None

    def __post_init__(self):
        n = np.shape(self.gamma)
        for name in ("beta", "theta"):
            v = getattr(self, name)
            if v is not None and np.shape(v) != n:
                raise MappingError(f"{name} shape {np.shape(v)} does not match gamma {n}")


@dataclass
class MappingPlan:
    entries: list[tuple[str, str, str]]
    unmapped_source_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        targets = [t for _, t, _ in self.entries]
        if len(set(targets)) != len(targets):
            raise MappingError("target path mapped more than once")
        for source, target, rule in self.entries:
            # OPM is exactly the gamma -> theta move; everything else is a same-path copy
            opm_shaped = source.endswith(".gamma") and target.endswith(".theta")
            if rule not in (NPM, OPM) or (rule == OPM) != opm_shaped:
                raise MappingError(f"rule {rule} is invalid for {source} -> {target}")
        for path in self.unmapped_source_paths:
            if not path.endswith(".beta"):
                raise MappingError(f"only beta paths may be discarded, got {path}")

    @property
    def opm_entries(self):
        return [e for e in self.entries if e[2] == OPM]

    @property
    def npm_entries(self):
        return [e for e in self.entries if e[2] == NPM]


@dataclass
class MappingReport:
    n_copied: int = 0
    n_opm_sites: int = 0
    discarded_beta_l2: dict[str, float] = field(default_factory=dict)
    max_shape_mismatch: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MappingReport":
        return cls(**json.loads(text))


def build_mapping_plan(source_config: ModelConfig, target_config: ModelConfig) -> MappingPlan:
    src, tgt = source_config.to_dict(), target_config.to_dict()
    src_kind, tgt_kind = src.pop("norm_kind"), tgt.pop("norm_kind")
    if src != tgt:
        diff = {k: (src[k], tgt[k]) for k in src if src[k] != tgt[k]}
        raise MappingError(f"source and target configs must match except norm_kind; differ in {diff}")
    if tgt_kind != "rms_norm":
        raise MappingError("target family must use rms_norm")

    target_paths = param_shapes(target_config)
    if src_kind == "rms_norm":
        return MappingPlan(entries=[(p, p, NPM) for p in target_paths])

    entries = []
    for path in target_paths:
        if path.endswith(".theta"):
            entries.append((path[: -len("theta")] + "gamma", path, OPM))
        else:
            entries.append((path, path, NPM))
    betas = [f"{site}.beta" for site in norm_sites(source_config)]
    return MappingPlan(entries=entries, unmapped_source_paths=betas)


def npm_map(source: ParameterStore, plan: MappingPlan, report: MappingReport | None = None) -> ParameterStore:
    """Bit-for-bit copy of every NPM entry; norm parameters are left out."""
    out = ParameterStore()
    for src_path, tgt_path, _ in plan.npm_entries:
        if src_path not in source:
            raise MappingError(f"source has no parameter {src_path!r}")
        arr = source[src_path].data
        out[tgt_path] = Tensor(arr.copy(), requires_grad=True)
        if report is not None:
            report.n_copied += 1
    return out


def opm_map(source_norm: NormParams, report: MappingReport | None = None, site: str = "") -> np.ndarray:
    """theta <- gamma; the discarded beta's L2 norm goes to ``report``."""
    theta = np.array(source_norm.gamma, copy=True)
    if report is not None:
        report.n_opm_sites += 1
        beta = source_norm.beta
        report.discarded_beta_l2[site] = float(np.linalg.norm(np.asarray(beta, dtype=np.float64))) if beta is not None else 0.0
    return theta


def convert(
    source: ParameterStore,
    source_config: ModelConfig,
    target_config: ModelConfig | None = None,
) -> tuple[ParameterStore, MappingReport]:
    """Full NPM + OPM conversion into a complete target store."""
    if target_config is None:
        target_config = source_config.replace(norm_kind="rms_norm")
    check_store(source, source_config)
    plan = build_mapping_plan(source_config, target_config)
    report = MappingReport()
    partial = npm_map(source, plan, report)
    for src_path, tgt_path, _ in plan.opm_entries:
        site = tgt_path[: -len(".theta")]
        gamma = source[src_path].data
        beta_path = f"{site}.beta"
        beta = source[beta_path].data if beta_path in source else None
        partial[tgt_path] = Tensor(opm_map(NormParams(gamma, beta), report, site), requires_grad=True)
    # keep canonical ordering of the target family
    shapes = param_shapes(target_config)
    target = ParameterStore((p, partial[p]) for p in shapes)
    report.max_shape_mismatch = max(
        (abs(int(np.prod(source[s].shape)) - int(np.prod(shapes[t]))) for s, t, _ in plan.entries),
        default=0,
    )
    check_store(target, target_config)
    return target, report


def opm_closed_form(x, gamma, beta, eps: float = NORM_EPS) -> np.ndarray:
    """Per-coordinate minimizer of ``||LN(x; gamma, beta) - RN(x; theta)||^2``.

    ``theta_i = RMS/sigma * (x_i - mu)/x_i * gamma_i + RMS/x_i * beta_i``,
    with ``RMS`` and ``sigma`` taken under the same ``eps`` guard as the
    norm kernels (``eps=0`` gives the unguarded expression).
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise MappingError("x must be a vector with at least 2 entries")
    if gamma.shape != x.shape or beta.shape != x.shape:
        raise MappingError("x, gamma and beta must have equal length")
    if np.any(x == 0):
        raise MappingError("x has a zero coordinate; theta* is undefined there")
    if eps < 0:
        raise MappingError("eps must be nonnegative")
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    if var == 0:
        raise MappingError("constant x: sigma is zero")
    rms = np.sqrt((x * x).mean() + eps)
    sigma = np.sqrt(var + eps)
    return rms / sigma * (x - mu) / x * gamma + rms / x * beta


def norm_alignment_objective(x, gamma, beta, theta, eps: float = NORM_EPS) -> float:
    """``||LN(x; gamma, beta) - RN(x; theta)||^2`` in double precision."""
    from .tensor import layer_norm, no_grad, rms_norm

    with no_grad():
        ln = layer_norm(Tensor(np.asarray(x, np.float64)), Tensor(np.asarray(gamma, np.float64)), Tensor(np.asarray(beta, np.float64)), eps)
        rn = rms_norm(Tensor(np.asarray(x, np.float64)), Tensor(np.asarray(theta, np.float64)), eps)
    d = ln.data - rn.data
    return float(d @ d)
