"""4D Gaussian primitives: parameterization, covariance, temporal slicing and 4DSH color.

Each Gaussian lives in (x, y, z, t).  Its covariance is ``R diag(s^2) R^T`` with
``R`` an SO(4) rotation built from a left/right unit-quaternion pair.  Rendering
at a time ``t`` uses the temporal marginal (unnormalized, peak 1) as an opacity
multiplier and the conditional 3D Gaussian as the spatial footprint.

The module exposes two layers:

* single-Gaussian reference functions (``build_rotation4``, ``build_covariance4``,
  ``temporal_weight``, ``conditional_spatial``, ``eval_color_4dsh``), written for
  clarity and used by the brute-force oracle renderer;
* batched forward/backward (``evaluate`` / ``evaluate_backward``) used on the hot
  path, with hand-written reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolation,
    DegenerateRotation,
    DegenerateTemporalVariance,
    NonFiniteParameter,
)

PARAM_NAMES = ("mean4", "log_scale4", "quat_left", "quat_right", "raw_opacity", "sh_coeffs")

PARAM_GROUPS = {
    "position": ("mean4",),
    "scaling": ("log_scale4",),
    "rotation": ("quat_left", "quat_right"),
    "opacity": ("raw_opacity",),
    "sh": ("sh_coeffs",),
}

COLOR_OFFSET = 0.5
FOURIER_PERIOD = 1.0
MIN_TEMPORAL_VARIANCE = 1e-12

# real SH normalization constants (degree 0..3)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def n_sh_basis(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_for(n_basis: int) -> int:
    degree = int(round(np.sqrt(n_basis))) - 1
    if degree < 0 or degree > 3 or n_sh_basis(degree) != n_basis:
        raise ContractViolation(f"unsupported SH basis count {n_basis}")
    return degree


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian4DCloud:
    mean4: np.ndarray
    log_scale4: np.ndarray
    quat_left: np.ndarray
    quat_right: np.ndarray
    raw_opacity: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        n = self.mean4.shape[0]
        shapes = {
            "mean4": (n, 4),
            "log_scale4": (n, 4),
            "quat_left": (n, 4),
            "quat_right": (n, 4),
            "raw_opacity": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ContractViolation(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        sh = self.sh_coeffs
        if sh.ndim != 4 or sh.shape[0] != n or sh.shape[3] != 3:
            raise ContractViolation(f"sh_coeffs has shape {sh.shape}, expected (N, F, B, 3)")
        sh_degree_for(sh.shape[2])

    @property
    def n(self) -> int:
        return self.mean4.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh_coeffs.shape[2])

    @property
    def n_fourier(self) -> int:
        return self.sh_coeffs.shape[1] - 1

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "Gaussian4DCloud":
        return Gaussian4DCloud(**{k: v.copy() for k, v in self.params().items()})

    def check_finite(self):
        for name, value in self.params().items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteParameter(f"non-finite values in {name}")

    # activations
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale4)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    def unit_quats(self) -> tuple[np.ndarray, np.ndarray]:
        return _normalize_rows(self.quat_left), _normalize_rows(self.quat_right)

    @classmethod
    def empty(cls, sh_degree: int = 2, n_fourier: int = 2) -> "Gaussian4DCloud":
        return cls.zeros(0, sh_degree, n_fourier)

    @classmethod
    def zeros(cls, n: int, sh_degree: int = 2, n_fourier: int = 2) -> "Gaussian4DCloud":
        ql = np.zeros((n, 4))
        ql[:, 0] = 1.0
        return cls(
            mean4=np.zeros((n, 4)),
            log_scale4=np.zeros((n, 4)),
            quat_left=ql,
            quat_right=ql.copy(),
            raw_opacity=np.zeros(n),
            sh_coeffs=np.zeros((n, n_fourier + 1, n_sh_basis(sh_degree), 3)),
        )

    @classmethod
    def random(
        cls,
        n: int,
        bbox_min,
        bbox_max,
        rng: np.random.Generator,
        sh_degree: int = 2,
        n_fourier: int = 2,
        spatial_scale: float | None = None,
        time_scale: float = 0.1,
        opacity: float = 0.1,
    ) -> "Gaussian4DCloud":
        """Uniform random initialization inside a spatial box and over t in [0, 1]."""
        lo = np.asarray(bbox_min, dtype=np.float64)
        hi = np.asarray(bbox_max, dtype=np.float64)
        if spatial_scale is None:
            volume = float(np.prod(hi - lo))
            spatial_scale = 0.5 * (volume / max(n, 1)) ** (1.0 / 3.0)
        cloud = cls.zeros(n, sh_degree, n_fourier)
        cloud.mean4[:, :3] = lo + rng.random((n, 3)) * (hi - lo)
        cloud.mean4[:, 3] = rng.random(n)
        cloud.log_scale4[:, :3] = np.log(spatial_scale)
        cloud.log_scale4[:, 3] = np.log(time_scale)
        cloud.raw_opacity[:] = logit(opacity)
        return cloud


def _normalize_rows(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# SO(4) from a quaternion pair


def left_matrix(q):
    """Matrix of p -> q * p (Hamilton product), batched over leading axes."""
    a, b, c, d = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([a, -b, -c, -d], -1),
        np.stack([b, a, -d, c], -1),
        np.stack([c, d, a, -b], -1),
        np.stack([d, -c, b, a], -1),
    ], -2)


def right_matrix(q):
    """Matrix of p -> p * q (Hamilton product), batched over leading axes."""
    a, b, c, d = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([a, -b, -c, -d], -1),
        np.stack([b, a, d, -c], -1),
        np.stack([c, -d, a, b], -1),
        np.stack([d, c, -b, a], -1),
    ], -2)


# d(left_matrix)/dq_k and d(right_matrix)/dq_k as constant 4x4x4 tensors [k, i, j]
_LEFT_BASIS = np.stack([left_matrix(e) for e in np.eye(4)])
_RIGHT_BASIS = np.stack([right_matrix(e) for e in np.eye(4)])


def _checked_unit(q, name):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ContractViolation(f"{name} must be a 4-vector")
    if not np.all(np.isfinite(q)):
        raise NonFiniteParameter(f"{name} is not finite")
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise DegenerateRotation(f"{name} has zero norm")
    if abs(norm - 1.0) > 1e-3:
        raise ContractViolation(f"{name} is not unit length (norm {norm:.6g})")
    return q / norm


def build_rotation4(quat_left, quat_right) -> np.ndarray:
    """SO(4) rotation ``L(l) @ Rr(r)`` from two unit quaternions."""
    l = _checked_unit(quat_left, "quat_left")
    r = _checked_unit(quat_right, "quat_right")
    return left_matrix(l) @ right_matrix(r)


def build_covariance4(log_scale4, quat_left, quat_right) -> np.ndarray:
    log_scale4 = np.asarray(log_scale4, dtype=np.float64)
    ql = np.asarray(quat_left, dtype=np.float64)
    qr = np.asarray(quat_right, dtype=np.float64)
    for name, v in (("log_scale4", log_scale4), ("quat_left", ql), ("quat_right", qr)):
        if not np.all(np.isfinite(v)):
            raise NonFiniteParameter(f"{name} is not finite")
    for name, q in (("quat_left", ql), ("quat_right", qr)):
        if np.linalg.norm(q) < 1e-12:
            raise DegenerateRotation(f"{name} has zero norm")
    rot = build_rotation4(ql / np.linalg.norm(ql), qr / np.linalg.norm(qr))
    s2 = np.exp(2.0 * log_scale4)
    return (rot * s2) @ rot.T


def _temporal_variance(sigma):
    var_t = float(sigma[3, 3])
    if not var_t > MIN_TEMPORAL_VARIANCE:
        raise DegenerateTemporalVariance(f"temporal variance {var_t:.3g} is degenerate")
    return var_t


def temporal_weight(sigma, mu_t: float, t: float) -> float:
    """Peak-normalized temporal marginal exp(-(t - mu_t)^2 / (2 var_t))."""
    sigma = np.asarray(sigma, dtype=np.float64)
    var_t = _temporal_variance(sigma)
    return float(np.exp(-((t - mu_t) ** 2) / (2.0 * var_t)))


def conditional_spatial(sigma, mean4, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the spatial slice of a 4D Gaussian at time ``t``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    mean4 = np.asarray(mean4, dtype=np.float64)
    var_t = _temporal_variance(sigma)
    cross = sigma[:3, 3]
    mean3 = mean4[:3] + cross * (t - mean4[3]) / var_t
    cov3 = sigma[:3, :3] - np.outer(cross, cross) / var_t
    return mean3, 0.5 * (cov3 + cov3.T)


# ---------------------------------------------------------------------------
# spherical harmonics x Fourier


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs, degree: int) -> np.ndarray:
    """d sh_basis / d(x, y, z) treating the direction components as free; shape (..., B, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        rows += [(zero, -c + zero, zero), (zero, zero, c + zero), (-c + zero, zero, zero)]
    if degree >= 2:
        c = SH_C2
        rows += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2.0 * c[4] * x, -2.0 * c[4] * y, zero),
        ]
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (-2.0 * c[2] * x * y, c[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c[2] * y * z),
            (-6.0 * c[3] * x * z, -6.0 * c[3] * y * z, c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            (c[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c[4] * x * y, 8.0 * c[4] * x * z),
            (2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)),
            (c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def fourier_basis(t: float, n_fourier: int, period: float = FOURIER_PERIOD) -> np.ndarray:
    n = np.arange(n_fourier + 1, dtype=np.float64)
    return np.cos(2.0 * np.pi * n * t / period)


def eval_color_4dsh(sh_coeffs, view_dir, t: float, period: float = FOURIER_PERIOD) -> np.ndarray:
    """HDR color of one Gaussian; ``sh_coeffs`` has shape (F, B, 3)."""
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    degree = sh_degree_for(coeffs.shape[1])
    phi = fourier_basis(t, coeffs.shape[0] - 1, period)
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)
    raw = COLOR_OFFSET + np.einsum("f,b,fbc->c", phi, basis, coeffs)
    return np.maximum(raw, 0.0)


def colors_at(cloud: Gaussian4DCloud, t: float, dirs, period: float = FOURIER_PERIOD) -> np.ndarray:
    """Batched 4DSH color for all Gaussians; ``dirs`` is (N, 3) or a single 3-vector."""
    dirs = np.broadcast_to(np.asarray(dirs, dtype=np.float64), (cloud.n, 3))
    phi = fourier_basis(t, cloud.n_fourier, period)
    basis = sh_basis(dirs, cloud.sh_degree)
    coef_t = np.einsum("f,nfbc->nbc", phi, cloud.sh_coeffs)
    return np.maximum(COLOR_OFFSET + np.einsum("nb,nbc->nc", basis, coef_t), 0.0)


# ---------------------------------------------------------------------------
# batched evaluation with reverse-mode gradients


@dataclass
class SceneEval:
    t: float
    scales: np.ndarray
    ql: np.ndarray
    qr: np.ndarray
    ql_norm: np.ndarray
    qr_norm: np.ndarray
    lmat: np.ndarray
    rmat: np.ndarray
    rot: np.ndarray
    sigma: np.ndarray
    delta_t: np.ndarray
    var_t: np.ndarray
    cross: np.ndarray
    ptime: np.ndarray
    alpha: np.ndarray
    mean3: np.ndarray
    cov3: np.ndarray
    dirs: np.ndarray = field(default=None)
    dir_norm: np.ndarray = field(default=None)
    basis: np.ndarray = field(default=None)
    phi: np.ndarray = field(default=None)
    coef_t: np.ndarray = field(default=None)
    raw_color: np.ndarray = field(default=None)
    color: np.ndarray = field(default=None)


def evaluate(cloud: Gaussian4DCloud, t: float, cam_center=None, period: float = FOURIER_PERIOD) -> SceneEval:
    """Time-slice every Gaussian; with ``cam_center`` also evaluates view-dependent color."""
    ql_norm = np.linalg.norm(cloud.quat_left, axis=1)
    qr_norm = np.linalg.norm(cloud.quat_right, axis=1)
    if np.any(ql_norm < 1e-12) or np.any(qr_norm < 1e-12):
        raise DegenerateRotation("zero-norm quaternion in cloud")
    ql = cloud.quat_left / ql_norm[:, None]
    qr = cloud.quat_right / qr_norm[:, None]
    lmat = left_matrix(ql)
    rmat = right_matrix(qr)
    rot = lmat @ rmat
    scales = np.exp(cloud.log_scale4)
    m = rot * scales[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    var_t = sigma[:, 3, 3]
    if np.any(var_t <= MIN_TEMPORAL_VARIANCE):
        raise DegenerateTemporalVariance("degenerate temporal variance in cloud")
    cross = sigma[:, :3, 3]
    delta_t = t - cloud.mean4[:, 3]
    ptime = np.exp(-0.5 * delta_t**2 / var_t)
    mean3 = cloud.mean4[:, :3] + cross * (delta_t / var_t)[:, None]
    cov3 = sigma[:, :3, :3] - cross[:, :, None] * cross[:, None, :] / var_t[:, None, None]
    ev = SceneEval(
        t=t, scales=scales, ql=ql, qr=qr, ql_norm=ql_norm, qr_norm=qr_norm,
        lmat=lmat, rmat=rmat, rot=rot, sigma=sigma, delta_t=delta_t, var_t=var_t,
        cross=cross, ptime=ptime, alpha=sigmoid(cloud.raw_opacity), mean3=mean3, cov3=cov3,
    )
    if cam_center is not None:
        v = mean3 - np.asarray(cam_center, dtype=np.float64)
        ev.dir_norm = np.maximum(np.linalg.norm(v, axis=1), 1e-12)
        ev.dirs = v / ev.dir_norm[:, None]
        ev.basis = sh_basis(ev.dirs, cloud.sh_degree)
        ev.phi = fourier_basis(t, cloud.n_fourier, period)
        ev.coef_t = np.einsum("f,nfbc->nbc", ev.phi, cloud.sh_coeffs)
        ev.raw_color = COLOR_OFFSET + np.einsum("nb,nbc->nc", ev.basis, ev.coef_t)
        ev.color = np.maximum(ev.raw_color, 0.0)
    return ev


def evaluate_backward(
    cloud: Gaussian4DCloud,
    ev: SceneEval,
    g_mean3=None,
    g_cov3=None,
    g_ptime=None,
    g_alpha=None,
    g_color=None,
) -> dict[str, np.ndarray]:
    """Pull gradients on time-sliced quantities back to the raw cloud parameters."""
    n = cloud.n
    grads = {name: np.zeros_like(v) for name, v in cloud.params().items()}
    g_mean3 = np.zeros((n, 3)) if g_mean3 is None else np.array(g_mean3, dtype=np.float64)
    g_cov3 = np.zeros((n, 3, 3)) if g_cov3 is None else np.asarray(g_cov3, dtype=np.float64)
    g_ptime = np.zeros(n) if g_ptime is None else np.asarray(g_ptime, dtype=np.float64)

    if g_color is not None:
        g_raw = np.where(ev.raw_color > 0.0, g_color, 0.0)
        grads["sh_coeffs"] = np.einsum("f,nb,nc->nfbc", ev.phi, ev.basis, g_raw)
        g_basis = np.einsum("nbc,nc->nb", ev.coef_t, g_raw)
        g_dir = np.einsum("nb,nbk->nk", g_basis, sh_basis_jacobian(ev.dirs, cloud.sh_degree))
        radial = np.sum(g_dir * ev.dirs, axis=1, keepdims=True)
        g_mean3 += (g_dir - ev.dirs * radial) / ev.dir_norm[:, None]

    if g_alpha is not None:
        grads["raw_opacity"] = g_alpha * ev.alpha * (1.0 - ev.alpha)

    var_t, delta, cross = ev.var_t, ev.delta_t, ev.cross
    g_cross = np.zeros((n, 3))
    g_var = np.zeros(n)
    g_mu_t = np.zeros(n)

    # mean3 = mu_xyz + cross * delta / var
    grads["mean4"][:, :3] = g_mean3
    gm_dot_c = np.sum(g_mean3 * cross, axis=1)
    g_cross += g_mean3 * (delta / var_t)[:, None]
    g_mu_t -= gm_dot_c / var_t
    g_var -= gm_dot_c * delta / var_t**2

    # cov3 = A - cross cross^T / var
    g_cov3_sym = g_cov3 + np.swapaxes(g_cov3, 1, 2)
    g_cross -= np.einsum("nij,nj->ni", g_cov3_sym, cross) / var_t[:, None]
    g_var += np.einsum("ni,nij,nj->n", cross, g_cov3, cross) / var_t**2

    # ptime = exp(-delta^2 / (2 var))
    g_mu_t += g_ptime * ev.ptime * delta / var_t
    g_var += g_ptime * ev.ptime * delta**2 / (2.0 * var_t**2)
    grads["mean4"][:, 3] = g_mu_t

    g_sigma = np.zeros((n, 4, 4))
    g_sigma[:, :3, :3] = g_cov3
    g_sigma[:, :3, 3] = g_cross
    g_sigma[:, 3, 3] = g_var

    # sigma = M M^T, M = rot * s
    m = ev.rot * ev.scales[:, None, :]
    g_m = (g_sigma + np.swapaxes(g_sigma, 1, 2)) @ m
    g_s = np.sum(g_m * ev.rot, axis=1)
    grads["log_scale4"] = g_s * ev.scales
    g_rot = g_m * ev.scales[:, None, :]

    # rot = L(ql) Rr(qr)
    g_l = g_rot @ np.swapaxes(ev.rmat, 1, 2)
    g_r = np.swapaxes(ev.lmat, 1, 2) @ g_rot
    g_ql = np.einsum("kij,nij->nk", _LEFT_BASIS, g_l)
    g_qr = np.einsum("kij,nij->nk", _RIGHT_BASIS, g_r)
    grads["quat_left"] = (g_ql - ev.ql * np.sum(g_ql * ev.ql, axis=1, keepdims=True)) / ev.ql_norm[:, None]
    grads["quat_right"] = (g_qr - ev.qr * np.sum(g_qr * ev.qr, axis=1, keepdims=True)) / ev.qr_norm[:, None]
    return grads
