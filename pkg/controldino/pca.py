"""Projection bases for feature ablations and the style-disentanglement report.

All linear algebra runs in float64 numpy. Bases are D×K matrices with
orthonormal columns; each column is sign-normalised so that its
largest-magnitude entry is positive.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange

from .errors import ContractError, NumericError
from .features import FeatureGrid

logger = logging.getLogger(__name__)

KIND_STANDARD = "standard_pca"
KIND_STYLE_INVARIANT = "style_invariant"
KIND_BOTTOM = "bottom_eigen"
KIND_RANDOM = "random_orthogonal"
KIND_TAIL_DROP = "tail_drop"
BASIS_KINDS = (KIND_STANDARD, KIND_STYLE_INVARIANT, KIND_BOTTOM, KIND_RANDOM, KIND_TAIL_DROP)

TAIL_DROP_KS = (8, 16, 32, 64)


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # M × D
    centered: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ContractError(f"feature matrix must be M×D, got shape {self.rows.shape}")
        if self.rows.shape[0] < 2:
            raise ContractError("feature matrix needs at least 2 rows")
        if not np.isfinite(self.rows).all():
            raise NumericError("feature matrix has non-finite entries")
        if self.centered and np.abs(self.rows.mean(axis=0)).max() >= 1e-8:
            raise ContractError("matrix flagged as centered has non-zero column means")

    @classmethod
    def from_grid(cls, grid: FeatureGrid) -> "FeatureMatrix":
        data = grid.data if isinstance(grid, FeatureGrid) else grid
        return cls(rearrange(data.detach().cpu().double(), "t d h w -> (t h w) d").numpy())

    @property
    def shape(self):
        return self.rows.shape

    def mean(self) -> np.ndarray:
        return self.rows.mean(axis=0)

    def center(self) -> np.ndarray:
        return self.rows if self.centered else self.rows - self.mean()

    def covariance(self) -> np.ndarray:
        xc = self.center()
        return xc.T @ xc / xc.shape[0]


@dataclass
class ProjectionBasis:
    vectors: np.ndarray  # D × K
    kind: str
    explained_variance_pct: float
    mean: np.ndarray | None = None
    removed: np.ndarray | None = None  # style directions for style_invariant

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ContractError(f"unknown basis kind {self.kind!r}")
        gram = self.vectors.T @ self.vectors
        if not np.allclose(gram, np.eye(gram.shape[0]), atol=1e-8, rtol=0):
            raise NumericError("basis columns are not orthonormal")
        self.explained_variance_pct = float(np.clip(self.explained_variance_pct, 0.0, 100.0))

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    def prefix(self, k: int) -> "ProjectionBasis":
        return ProjectionBasis(self.vectors[:, :k].copy(), self.kind, self.explained_variance_pct, self.mean)


def covariance_eigh(cov: np.ndarray):
    """Eigenvalues (descending) and matching eigenvectors of a symmetric matrix."""
    vals, vecs = np.linalg.eigh(cov)
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def explained_variance(X: FeatureMatrix, vectors: np.ndarray) -> float:
    """Share (%) of the total variance of X captured by the span of `vectors`."""
    cov = X.covariance()
    total = np.trace(cov)
    if total <= 0:
        raise ContractError("feature matrix has zero variance")
    return float(100.0 * np.trace(vectors.T @ cov @ vectors) / total)


def _check_k(X: FeatureMatrix, k: int):
    m, d = X.shape
    if not 1 <= k <= min(m - 1, d):
        raise ContractError(f"K={k} outside [1, min(M-1, D)] = [1, {min(m - 1, d)}]")


def _ratio(vals: np.ndarray, chosen: np.ndarray) -> float:
    vals = np.clip(vals, 0.0, None)
    total = vals.sum()
    if total <= 0:
        raise ContractError("feature matrix has zero variance")
    return float(100.0 * np.clip(chosen, 0.0, None).sum() / total)


def standard_pca(X: FeatureMatrix, k: int) -> ProjectionBasis:
    _check_k(X, k)
    vals, vecs = covariance_eigh(X.covariance())
    ev = _ratio(vals, vals[:k])
    return ProjectionBasis(_fix_signs(vecs[:, :k]), KIND_STANDARD, ev, mean=X.mean())


def bottom_eigen_basis(X: FeatureMatrix, k: int) -> ProjectionBasis:
    """The K eigendirections of least variance, smallest first."""
    _check_k(X, k)
    vals, vecs = np.linalg.eigh(X.covariance())
    ev = _ratio(vals, vals[:k])
    return ProjectionBasis(_fix_signs(vecs[:, :k]), KIND_BOTTOM, ev, mean=X.mean())


def random_orthogonal_basis(dim: int, k: int, rng: np.random.Generator,
                            X: FeatureMatrix | None = None) -> ProjectionBasis:
    """Haar-distributed orthonormal K-frame in R^dim."""
    if not 1 <= k <= dim:
        raise ContractError(f"K={k} outside [1, {dim}]")
    q, r = np.linalg.qr(rng.standard_normal((dim, k)))
    q = q * np.sign(np.diag(r))
    ev = 100.0 * k / dim if X is None else explained_variance(X, q)
    return ProjectionBasis(q, KIND_RANDOM, ev, mean=None if X is None else X.mean())


def style_invariant_basis(F_real: FeatureMatrix, F_style: FeatureMatrix, k_style: int,
                          d_out: int) -> ProjectionBasis:
    """PCA of the real features after projecting out the top style directions.

    Style directions are the top eigenvectors of S = DᵀD / M over the row-wise
    differences f_real − f_style (uncentered). The PCA then runs inside the
    orthogonal complement of those directions. Explained variance is reported
    against the raw real features.
    """
    if F_real.shape != F_style.shape:
        raise ContractError(f"unpaired feature matrices {F_real.shape} vs {F_style.shape}")
    m, d = F_real.shape
    if k_style < 1 or d_out < 1 or k_style + d_out > d:
        raise ContractError(f"need 1 ≤ K_style, 1 ≤ D_out and K_style + D_out ≤ D={d}; "
                            f"got {k_style} + {d_out}")
    if d_out > m - 1:
        raise ContractError(f"D_out={d_out} exceeds M-1={m - 1}")

    diff = F_real.rows - F_style.rows
    S = diff.T @ diff / m
    if not np.abs(S).max() > 0:
        raise ContractError("zero style covariance")
    _, svecs = covariance_eigh(S)
    style_dirs = _fix_signs(svecs[:, :k_style])
    complement = svecs[:, k_style:]

    cleaned = F_real.center() @ complement
    _, cvecs = covariance_eigh(cleaned.T @ cleaned / m)
    vectors = _fix_signs(complement @ cvecs[:, :d_out])
    ev = explained_variance(F_real, vectors)
    logger.debug("style-invariant basis: removed %d style directions, kept %d, EV %.2f%%", k_style, d_out, ev)
    return ProjectionBasis(vectors, KIND_STYLE_INVARIANT, ev, mean=F_real.mean(), removed=style_dirs)


def style_projector(basis: ProjectionBasis) -> np.ndarray:
    """P = I − V_k V_kᵀ for the style directions removed by `basis`."""
    if basis.removed is None:
        raise ContractError(f"{basis.kind} basis carries no style directions")
    v = basis.removed
    return np.eye(v.shape[0]) - v @ v.T


def tail_drop_basis(X: FeatureMatrix, k: int | None = None, rng: np.random.Generator | None = None,
                    full: int = 64, choices=TAIL_DROP_KS) -> ProjectionBasis:
    """First k columns of the `full`-component PCA basis; k drawn from `choices` when None."""
    choices = tuple(c for c in choices if c <= full)
    if k is None:
        if rng is None:
            raise ContractError("tail drop needs either k or an rng")
        k = int(rng.choice(choices))
    if k not in choices:
        raise ContractError(f"tail-drop k={k} not in {list(choices)}")
    base = standard_pca(X, full)
    vals, _ = covariance_eigh(X.covariance())
    out = base.prefix(k)
    out.kind = KIND_TAIL_DROP if k != full else KIND_STANDARD
    out.explained_variance_pct = _ratio(vals, vals[:k])
    return out


def disentanglement_report(F_real: FeatureMatrix, F_style: FeatureMatrix, basis: ProjectionBasis,
                           eps: float = 1e-12) -> dict:
    """Mean cosine similarity between projected real and stylised rows."""
    if F_real.shape != F_style.shape:
        raise ContractError(f"unpaired feature matrices {F_real.shape} vs {F_style.shape}")
    pr = F_real.rows @ basis.vectors
    ps = F_style.rows @ basis.vectors
    nr = np.linalg.norm(pr, axis=1)
    ns = np.linalg.norm(ps, axis=1)
    valid = (nr > eps) & (ns > eps)
    excluded = int((~valid).sum())
    if not valid.any():
        raise ContractError("every projected row has zero norm")
    cos = (pr[valid] * ps[valid]).sum(axis=1) / (nr[valid] * ns[valid])
    if excluded:
        logger.warning("excluded %d zero-norm projected rows from the cosine similarity", excluded)
    return {
        "basis_kind": basis.kind,
        "K": basis.k,
        "cosine_similarity": float(cos.mean()),
        "explained_variance_pct": basis.explained_variance_pct,
        "excluded_rows": excluded,
    }


def project_features(grid: FeatureGrid, basis: ProjectionBasis, pad_to: int | None = None) -> FeatureGrid:
    """Project the channels of a (T, D, h, w) grid onto the basis (mean removed when known).

    With `pad_to`, the K projected channels are zero-padded to that width.
    """
    if grid.feature_dim != basis.dim:
        raise ContractError(f"basis of dim {basis.dim} for features of dim {grid.feature_dim}")
    data = grid.data.double()
    if basis.mean is not None:
        data = data - torch.from_numpy(basis.mean)[None, :, None, None]
    out = torch.einsum("dk,tdhw->tkhw", torch.from_numpy(basis.vectors), data)
    if pad_to is not None:
        if pad_to < basis.k:
            raise ContractError(f"pad_to={pad_to} smaller than K={basis.k}")
        out = torch.cat([out, out.new_zeros(out.shape[0], pad_to - basis.k, *out.shape[2:])], dim=1)
    return grid.replace(out.to(grid.data.dtype))


def features_to_rgb(grid: FeatureGrid, basis: ProjectionBasis | None = None) -> torch.Tensor:
    """(T, 3, h, w) preview in [0, 1]: top three principal components, min-max scaled over the clip."""
    if basis is None:
        basis = standard_pca(FeatureMatrix.from_grid(grid), 3)
    if basis.k != 3:
        raise ContractError(f"RGB preview needs a 3-component basis, got K={basis.k}")
    comp = project_features(grid, basis).data.double()
    lo = comp.amin(dim=(0, 2, 3), keepdim=True)
    hi = comp.amax(dim=(0, 2, 3), keepdim=True)
    span = hi - lo
    rgb = torch.where(span > 0, (comp - lo) / span.clamp_min(1e-12), torch.full_like(comp, 0.5))
    return rgb.float()
