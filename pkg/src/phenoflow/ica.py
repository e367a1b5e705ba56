"""Whitening plus symmetric fixed-point ICA, X - mu = A S.

The fitted model keeps the whitening path explicitly: ``S = W V (X - mu)``
and ``A = V_plus W^T``. Since A is n x k with n > k in general, ``W V`` is
the Moore-Penrose pseudoinverse of A on the retained subspace, which is the
inverse used to project new data into phenotype space.
"""

from __future__ import annotations

import io
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seeding import derive_rng
from .cross_section import CODE, CrossSectionMatrix, VariableCatalog

log = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-12


class RankError(ValueError):
    """The data cannot support the requested number of components."""

    def __init__(self, requested: int, achievable: int, reason: str = ""):
        msg = f"requested rank {requested} but the data supports at most rank {achievable}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)
        self.requested = requested
        self.achievable = achievable


@dataclass(eq=False)
class IcaModel:
    mean: np.ndarray          # (n,)
    whitener: np.ndarray      # (k, n)
    dewhitener: np.ndarray    # (n, k)
    unmixing: np.ndarray      # (k, k), orthonormal
    mixing: np.ndarray        # (n, k)
    seed: int = 0
    tol: float = 1e-4
    max_iter: int = 500
    n_iter: int = 0
    final_delta: float = float("nan")
    converged: bool = False
    standardize: bool = False
    scale: np.ndarray | None = None
    deltas: list = field(default_factory=list, repr=False)

    @property
    def rank(self) -> int:
        return self.unmixing.shape[0]

    @property
    def n_variables(self) -> int:
        return self.mean.shape[0]

    @property
    def projector(self) -> np.ndarray:
        """k x n map from centered data to expressions (pseudoinverse of A)."""
        return self.unmixing @ self.whitener


@dataclass(frozen=True, eq=False)
class ExpressionMatrix:
    S: np.ndarray
    record_ids: tuple = ()
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def _as_array(X) -> np.ndarray:
    if isinstance(X, CrossSectionMatrix):
        X = X.X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    return X


def _wrap(S, X) -> ExpressionMatrix:
    if isinstance(X, CrossSectionMatrix):
        return ExpressionMatrix(S, X.record_ids, X.times, X.labels)
    return ExpressionMatrix(S)


def symmetric_decorrelation(W: np.ndarray) -> np.ndarray:
    """W <- (W W^T)^(-1/2) W."""
    s, u = np.linalg.eigh(W @ W.T)
    s = np.clip(s, np.finfo(float).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def whiten(Xc: np.ndarray, k: int):
    """Top-k eigen whitening of centered rows; returns (V, V_plus, eigenvalues)."""
    n, m = Xc.shape
    cov = (Xc @ Xc.T) / m
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    top = evals[0]
    achievable = int(np.sum(evals > EIGEN_FLOOR * top)) if top > 0 else 0
    if achievable < k:
        raise RankError(k, achievable, "covariance eigenvalues below 1e-12 x largest")
    lam, E = evals[:k], evecs[:, :k]
    # deterministic eigenvector signs: largest-magnitude entry positive
    flip = np.sign(E[np.argmax(np.abs(E), axis=0), np.arange(k)])
    E = E * flip
    V = (E / np.sqrt(lam)).T
    V_plus = E * np.sqrt(lam)
    return V, V_plus, lam


def fit_ica(X, k: int, seed: int = 0, tol: float = 1e-4, max_iter: int = 500,
            standardize: bool = False) -> tuple[IcaModel, ExpressionMatrix]:
    """Fit X - mu = A S with k components.

    Parameters
    ----------
    X : CrossSectionMatrix or ndarray, shape (n, m)
    k : int
        Number of components, 1 <= k <= min(n, m).
    seed : int
        Seeds the orthonormal initial unmixing matrix.
    tol, max_iter :
        Converged once ``max_i |1 - |<w_i_new, w_i_old>|| < tol``. Running out
        of iterations returns a model with ``converged=False``.
    standardize : bool
        Scale rows to unit variance before whitening (folded into the
        whitening maps, so projection and reconstruction stay in raw units).

    Returns
    -------
    (IcaModel, ExpressionMatrix)
        The model and the training expressions ``S = W V (X - mu)``.
    """
    data = _as_array(X)
    if not np.all(np.isfinite(data)):
        raise ValueError("X contains non-finite entries")
    n, m = data.shape
    if k < 1:
        raise ValueError("rank must be at least 1")
    if k > min(n, m):
        raise RankError(k, min(n, m), f"matrix is {n} x {m}")

    mean = data.mean(axis=1)
    Xc = data - mean[:, None]
    scale = None
    if standardize:
        scale = Xc.std(axis=1)
        scale[scale == 0] = 1.0
        V, V_plus, _ = whiten(Xc / scale[:, None], k)
        V = V / scale[None, :]
        V_plus = V_plus * scale[:, None]
    else:
        V, V_plus, _ = whiten(Xc, k)
    Z = V @ Xc

    rng = derive_rng(seed, "ica-init")
    W = symmetric_decorrelation(rng.standard_normal((k, k)))
    deltas = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        G = np.tanh(W @ Z)
        g_prime = 1.0 - G * G
        W_new = (G @ Z.T) / m - g_prime.mean(axis=1)[:, None] * W
        W_new = symmetric_decorrelation(W_new)
        delta = float(np.max(np.abs(1.0 - np.abs(np.einsum("ij,ij->i", W_new, W)))))
        deltas.append(delta)
        W = W_new
        if delta < tol:
            converged = True
            break
    if not converged:
        log.warning("ICA did not converge in %d iterations (last delta %.3g)", max_iter, deltas[-1])

    model = IcaModel(mean=mean, whitener=V, dewhitener=V_plus, unmixing=W,
                     mixing=V_plus @ W.T, seed=seed, tol=tol, max_iter=max_iter,
                     n_iter=n_iter, final_delta=deltas[-1], converged=converged,
                     standardize=standardize, scale=scale, deltas=deltas)
    return model, project(model, X)


def project(model: IcaModel, X_new) -> ExpressionMatrix:
    """S = W V (X_new - mu)."""
    data = _as_array(X_new)
    if data.shape[0] != model.n_variables:
        raise ValueError(f"X has {data.shape[0]} rows, model expects {model.n_variables}")
    S = model.unmixing @ (model.whitener @ (data - model.mean[:, None]))
    return _wrap(S, X_new)


def reconstruct(model: IcaModel, S) -> np.ndarray:
    """X_hat = A S + mu."""
    if isinstance(S, ExpressionMatrix):
        S = S.S
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != model.rank:
        raise ValueError(f"S must have {model.rank} rows")
    return model.mixing @ S + model.mean[:, None]


@dataclass(frozen=True)
class ComponentLoadings:
    component: int
    entries: tuple  # (variable_id, kind, loading), by descending |loading|
    flipped: bool

    @property
    def codes(self):
        return tuple(e for e in self.entries if e[1] == CODE)

    @property
    def labs(self):
        return tuple(e for e in self.entries if e[1] != CODE)


@dataclass(frozen=True)
class PhenotypeReport:
    components: tuple

    def __getitem__(self, j) -> ComponentLoadings:
        return self.components[j]

    def __len__(self):
        return len(self.components)

    def to_text(self) -> str:
        lines = []
        for c in self.components:
            lines.append(f"component {c.component}" + (" (sign flipped)" if c.flipped else ""))
            for vid, kind, w in c.entries:
                lines.append(f"  {kind}\t{vid}\t{w:+.6f}")
        return "\n".join(lines) + "\n"


def component_loadings(column, catalog: VariableCatalog, q: int, component: int = 0):
    column = np.asarray(column, dtype=np.float64)
    flipped = bool(column[np.argmax(np.abs(column))] < 0)
    if flipped:
        column = -column
    q = min(q, len(column))
    order = np.argsort(-np.abs(column), kind="stable")[:q]
    entries = tuple((catalog.ids[i], catalog.kinds[i], float(column[i])) for i in order)
    return ComponentLoadings(component, entries, flipped)


def phenotype_report(model: IcaModel, catalog: VariableCatalog, q: int = 20) -> PhenotypeReport:
    """Top-q signed loadings per component, sign-normalized so the largest is positive."""
    if len(catalog) != model.n_variables:
        raise ValueError("catalog size does not match the model")
    return PhenotypeReport(tuple(component_loadings(model.mixing[:, j], catalog, q, j)
                                 for j in range(model.rank)))


_ARRAYS = ("mean", "whitener", "dewhitener", "unmixing", "mixing")
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_model(path, model: IcaModel) -> None:
    """Zip container: ``manifest.txt`` plus one little-endian float64 ``.npy`` per array.

    Entry timestamps are fixed, so identical models give identical bytes.
    """
    manifest = {
        "n": model.n_variables, "k": model.rank, "seed": model.seed,
        "tol": repr(model.tol), "max_iter": model.max_iter, "iterations": model.n_iter,
        "final_delta": repr(model.final_delta), "converged": int(model.converged),
        "standardize": int(model.standardize),
    }
    text = "".join(f"{key}={val}\n" for key, val in manifest.items())
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "manifest.txt", text.encode("utf-8"))
        arrays = {name: getattr(model, name) for name in _ARRAYS}
        if model.scale is not None:
            arrays["scale"] = model.scale
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype="<f8"),
                                      allow_pickle=False)
            _zip_write(zf, f"{name}.npy", buf.getvalue())


def load_model(path) -> IcaModel:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = dict(line.split("=", 1)
                        for line in zf.read("manifest.txt").decode("utf-8").splitlines() if line)
        arrays = {}
        for name in _ARRAYS + ("scale",):
            if f"{name}.npy" in zf.namelist():
                arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")),
                                                        allow_pickle=False).astype(np.float64)
    model = IcaModel(
        **{name: arrays[name] for name in _ARRAYS},
        seed=int(manifest["seed"]), tol=float(manifest["tol"]),
        max_iter=int(manifest["max_iter"]), n_iter=int(manifest["iterations"]),
        final_delta=float(manifest["final_delta"]), converged=bool(int(manifest["converged"])),
        standardize=bool(int(manifest["standardize"])), scale=arrays.get("scale"),
    )
    if model.mixing.shape != (int(manifest["n"]), int(manifest["k"])):
        raise ValueError(f"{path}: array shapes disagree with manifest")
    return model
