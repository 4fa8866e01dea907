"""Linear multi-view renderer standing in for a differentiable 3D field.

Each camera k is an orthogonal D x D matrix P_k; the view is P_k @ theta,
optionally passed through a pointwise sigmoid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError


@dataclass(frozen=True)
class Asset:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise ValueError("asset parameters must be finite")
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class CameraRig:
    transforms: np.ndarray  # (K, D, D)
    encodings: np.ndarray  # (K, K) one-hot rows
    sigmoid: bool = False

    def __post_init__(self):
        P = np.asarray(self.transforms, dtype=np.float64)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ShapeError(f"transforms must be (K, D, D), got {P.shape}")
        eye = np.eye(P.shape[1])
        for k in range(P.shape[0]):
            if np.abs(P[k].T @ P[k] - eye).max() > 1e-10:
                raise ValueError(f"camera {k} transform is not orthogonal")
        enc = np.asarray(self.encodings, dtype=np.float64)
        if enc.shape[0] != P.shape[0] or len({tuple(r) for r in enc}) != enc.shape[0]:
            raise ValueError("camera encodings must be distinct, one per camera")
        object.__setattr__(self, "transforms", P)
        object.__setattr__(self, "encodings", enc)

    @property
    def K(self) -> int:
        return self.transforms.shape[0]

    @property
    def D(self) -> int:
        return self.transforms.shape[1]

    def to_json(self) -> dict:
        return {"K": self.K, "D": self.D, "sigmoid": self.sigmoid,
                "transforms": [p.tolist() for p in self.transforms],
                "encodings": self.encodings.tolist()}

    @classmethod
    def from_json(cls, doc) -> "CameraRig":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(np.array(doc["transforms"], dtype=float),
                   np.array(doc["encodings"], dtype=float), bool(doc.get("sigmoid", False)))


def make_rig(D: int, K: int = 4, plane=(0, 1), sigmoid=False) -> CameraRig:
    """K rotations at 360/K degree steps inside one coordinate plane."""
    if D < 2:
        raise ValueError("rotating rig needs D >= 2")
    i, j = plane
    P = np.repeat(np.eye(D)[None], K, axis=0)
    for k in range(K):
        ang = 2.0 * np.pi * k / K
        c, s = np.cos(ang), np.sin(ang)
        P[k, i, i], P[k, i, j], P[k, j, i], P[k, j, j] = c, -s, s, c
    return CameraRig(P, np.eye(K), sigmoid)


def identity_rig(D: int, K: int = 1) -> CameraRig:
    return CameraRig(np.repeat(np.eye(D)[None], K, axis=0), np.eye(K))


def random_rig(D: int, K: int, rng, sigmoid=False) -> CameraRig:
    """Haar-random orthogonal cameras (QR with sign fix)."""
    P = np.empty((K, D, D))
    for k in range(K):
        q, r = np.linalg.qr(rng.standard_normal((D, D)))
        P[k] = q * np.sign(np.diag(r))
    return CameraRig(P, np.eye(K), sigmoid)


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def render(asset: Asset, rig: CameraRig, k: int) -> np.ndarray:
    if not 0 <= k < rig.K:
        raise IndexError(f"camera {k} out of range for a {rig.K}-camera rig")
    if asset.dim != rig.D:
        raise ShapeError(f"asset dim {asset.dim} != rig dim {rig.D}")
    z = rig.transforms[k] @ asset.theta
    return _sig(z) if rig.sigmoid else z


def render_all(asset: Asset, rig: CameraRig) -> np.ndarray:
    """(K, D) stack of every camera's view."""
    if asset.dim != rig.D:
        raise ShapeError(f"asset dim {asset.dim} != rig dim {rig.D}")
    z = rig.transforms @ asset.theta
    return _sig(z) if rig.sigmoid else z


def render_vjp(rig: CameraRig, upstream, asset: Asset | None = None) -> np.ndarray:
    """sum_k J_k^T upstream_k. The sigmoid rig needs ``asset`` for its Jacobian."""
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (rig.K, rig.D):
        raise ShapeError(f"upstream shape {up.shape} != {(rig.K, rig.D)}")
    if rig.sigmoid:
        if asset is None:
            raise ValueError("sigmoid rig VJP needs the asset")
        y = _sig(rig.transforms @ asset.theta)
        up = up * y * (1.0 - y)
    return np.einsum("kij,ki->j", rig.transforms, up)
