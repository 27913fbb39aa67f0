"""
Differentiable deformation fields x = X + d(X; theta, z) with analytic spatial
Jacobians.

Jacobians are carried forward through every layer next to the values (the
`compute_grad` pattern), so they stay differentiable in the parameters and
can feed losses that are themselves back-propagated. Everything runs in
float64 on the CPU.
"""

import logging
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DomainError, InvalidInputError, UsageError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DOMAIN_TOL = 1e-9
FACE_INSET = 1e-3

Tensor = torch.Tensor


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def identity_jacobians(n: int) -> Tensor:
    return torch.eye(3, dtype=DTYPE).expand(n, 3, 3).clone()


# ============================================================================
# FIELDS
# ============================================================================

class DeformationField(nn.Module):
    """Base class: a box domain and a latent code of fixed width."""

    kind = "base"

    def __init__(self, lo, hi, latent_dim: int, displacement_scale: float = 1.0):
        super().__init__()
        lo = as_tensor(lo).reshape(3)
        hi = as_tensor(hi).reshape(3)
        if torch.any(hi <= lo):
            raise InvalidInputError("field box must have positive extent")
        self.register_buffer("lo", lo)
        self.register_buffer("hi", hi)
        self.latent_dim = int(latent_dim)
        self.displacement_scale = float(displacement_scale)

    def check_domain(self, x: Tensor) -> None:
        with torch.no_grad():
            out = (x < self.lo - DOMAIN_TOL) | (x > self.hi + DOMAIN_TOL)
            if torch.any(out):
                bad = int(torch.nonzero(out.any(dim=1))[0, 0])
                raise DomainError(f"point {x[bad].tolist()} lies outside the field box")

    def _latent(self, z: Optional[Tensor]) -> Tensor:
        if z is None:
            return torch.zeros(self.latent_dim, dtype=DTYPE, device=self.lo.device)
        z = as_tensor(z).reshape(-1)
        if z.shape[0] != self.latent_dim:
            raise InvalidInputError(f"latent code needs {self.latent_dim} entries, got {z.shape[0]}")
        return z

    def forward(self, x: Tensor, z: Optional[Tensor] = None, compute_grad: bool = False):
        raise NotImplementedError

    def eval(self, x, z=None) -> Tensor:
        return self.forward(as_tensor(x), z, compute_grad=False)[0]

    def jacobian(self, x, z=None) -> Tensor:
        return self.forward(as_tensor(x), z, compute_grad=True)[1]

    def eval_with_jacobian(self, x, z=None) -> Tuple[Tensor, Tensor]:
        return self.forward(as_tensor(x), z, compute_grad=True)


def _bspline2(u: Tensor) -> Tuple[Tensor, Tensor]:
    """Uniform quadratic B-spline centred at 0 and its derivative."""
    a = u.abs()
    inner = 0.75 - u * u
    outer = 0.5 * (1.5 - a).clamp(min=0.0) ** 2
    value = torch.where(a <= 0.5, inner, outer)
    deriv = torch.where(a <= 0.5, -2.0 * u, -(1.5 - a).clamp(min=0.0) * torch.sign(u))
    return value, deriv


class GridField(DeformationField):
    """
    Control lattice of displacement vectors over the box. Controls are
    C0 + P z, so the latent code shifts every control value.
    """

    kind = "grid"

    def __init__(self, lo, hi, latent_dim: int, resolution: Sequence[int] = (8, 8, 8),
                 mode: Literal["trilinear", "bspline"] = "trilinear", displacement_scale: float = 10.0):
        super().__init__(lo, hi, latent_dim, displacement_scale)
        res = tuple(int(r) for r in resolution)
        if len(res) != 3 or min(res) < 2:
            raise InvalidInputError("grid resolution needs three counts >= 2")
        if mode not in ("trilinear", "bspline"):
            raise InvalidInputError(f"unknown grid mode {mode!r}")
        self.resolution = res
        self.mode = mode
        n_ctrl = res[0] * res[1] * res[2]
        self.controls = nn.Parameter(torch.zeros(n_ctrl, 3, dtype=DTYPE))
        self.projection = nn.Parameter(torch.zeros(n_ctrl * 3, max(self.latent_dim, 1), dtype=DTYPE))
        self.register_buffer("spacing", (self.hi - self.lo) / torch.tensor(res, dtype=DTYPE).sub(1.0))
        self.register_buffer("strides", torch.tensor([1, res[0], res[0] * res[1]], dtype=torch.long))

    def control_values(self, z: Optional[Tensor] = None) -> Tensor:
        if self.latent_dim == 0:
            return self.controls
        return self.controls + (self.projection @ self._latent(z)).view(-1, 3)

    def control_points(self) -> Tensor:
        """Rest positions of the controls, in storage order."""
        axes = [torch.linspace(float(self.lo[i]), float(self.hi[i]), self.resolution[i], dtype=DTYPE) for i in range(3)]
        gz, gy, gx = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)

    def _stencil(self, x: Tensor):
        """Control ids (n, S), weights (n, S) and spatial weight gradients (n, S, 3)."""
        t = (x - self.lo) / self.spacing
        res = torch.tensor(self.resolution, dtype=torch.long)
        if self.mode == "trilinear":
            base = torch.floor(t).long().clamp(min=torch.zeros(3, dtype=torch.long), max=res - 2)
            local = t - base
            offsets = torch.tensor([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=torch.long)
            bits = offsets.to(DTYPE)
            le = local[:, None, :]
            factors = bits * le + (1.0 - bits) * (1.0 - le)
            dfactors = (2.0 * bits - 1.0).expand_as(factors) / self.spacing
        else:
            base = torch.floor(t + 0.5).long() - 1
            ticks = torch.tensor([0, 1, 2], dtype=torch.long)
            offsets = torch.stack(torch.meshgrid(ticks, ticks, ticks, indexing="ij"), dim=-1).reshape(-1, 3).flip(-1)
            u = t[:, None, :] - (base[:, None, :] + offsets).to(DTYPE)
            factors, df = _bspline2(u)
            dfactors = df / self.spacing
        idx = (base[:, None, :] + offsets).clamp(min=torch.zeros(3, dtype=torch.long), max=res - 1)
        ids = (idx * self.strides).sum(-1)
        weights = factors.prod(-1)
        grads = torch.stack([
            dfactors[..., 0] * factors[..., 1] * factors[..., 2],
            factors[..., 0] * dfactors[..., 1] * factors[..., 2],
            factors[..., 0] * factors[..., 1] * dfactors[..., 2],
        ], dim=-1)
        return ids, weights, grads

    def forward(self, x: Tensor, z: Optional[Tensor] = None, compute_grad: bool = False):
        x = as_tensor(x).reshape(-1, 3)
        self.check_domain(x)
        ids, weights, grads = self._stencil(x)
        ctrl = self.control_values(z)[ids]
        out = x + self.displacement_scale * torch.einsum("ns,nsi->ni", weights, ctrl)
        if not compute_grad:
            return out, None
        jac = identity_jacobians(len(x)) + self.displacement_scale * torch.einsum("nsi,nsj->nij", ctrl, grads)
        return out, jac

    def cell_local(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        t = (as_tensor(x) - self.lo) / self.spacing
        res = torch.tensor(self.resolution, dtype=torch.long)
        base = torch.floor(t).long().clamp(min=torch.zeros(3, dtype=torch.long), max=res - 2)
        return base, t - base


class FiLMSine(nn.Linear):
    """Sine layer with per-feature frequency scale and phase shift from the latent."""

    def __init__(self, in_features: int, out_features: int, omega0: float, is_first: bool):
        super().__init__(in_features, out_features, dtype=DTYPE)
        self.omega0 = omega0
        with torch.no_grad():
            bound = 1.0 / in_features if is_first else np.sqrt(6.0 / in_features) / omega0
            self.weight.uniform_(-bound, bound)

    def forward(self, x: Tensor, x_grad: Optional[Tensor], scale: Tensor, shift: Tensor, compute_grad: bool = False):
        pre = super().forward(x)
        arg = self.omega0 * scale * pre + shift
        out = torch.sin(arg)
        if not compute_grad:
            return out, None
        pre_grad = torch.einsum("oi,nid->nod", self.weight, x_grad)
        return out, (torch.cos(arg) * self.omega0 * scale)[..., None] * pre_grad


class SirenField(DeformationField):
    """Sinusoidal MLP displacement, conditioned per layer by feature-wise scale and shift."""

    kind = "sinusoidal"

    def __init__(self, lo, hi, latent_dim: int, n_layers: int = 4, width: int = 32,
                 omega0: float = 30.0, displacement_scale: float = 10.0):
        super().__init__(lo, hi, latent_dim, displacement_scale)
        if n_layers < 2:
            raise InvalidInputError("sinusoidal field needs at least 2 layers")
        self.width = int(width)
        self.n_hidden = n_layers - 1
        self.hidden = nn.ModuleList(
            FiLMSine(3 if i == 0 else width, width, omega0, is_first=(i == 0)) for i in range(self.n_hidden)
        )
        self.out = nn.Linear(width, 3, dtype=DTYPE)
        self.film = nn.Linear(max(self.latent_dim, 1), 2 * width * self.n_hidden, dtype=DTYPE)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()
            self.film.weight.zero_()
            self.film.bias.zero_()

    def forward(self, x: Tensor, z: Optional[Tensor] = None, compute_grad: bool = False):
        x = as_tensor(x).reshape(-1, 3)
        self.check_domain(x)
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        h = (x - center) / half
        h_grad = torch.diag(1.0 / half).expand(len(x), 3, 3) if compute_grad else None

        code = self._latent(z) if self.latent_dim else torch.zeros(1, dtype=DTYPE)
        film = self.film(code).view(self.n_hidden, 2, self.width)
        for layer, (ds, shift) in zip(self.hidden, film):
            h, h_grad = layer(h, h_grad, 1.0 + ds, shift, compute_grad)

        out = x + self.displacement_scale * self.out(h)
        if not compute_grad:
            return out, None
        jac = identity_jacobians(len(x)) + self.displacement_scale * torch.einsum("oi,nid->nod", self.out.weight, h_grad)
        return out, jac


def inset_points(points, field: DeformationField) -> Tensor:
    """Move samples off trilinear cell faces, where the Jacobian jumps."""
    x = as_tensor(points)
    if not (isinstance(field, GridField) and field.mode == "trilinear"):
        return x
    base, local = field.cell_local(x)
    local = local.clamp(FACE_INSET, 1.0 - FACE_INSET)
    return field.lo + (base.to(DTYPE) + local) * field.spacing


# ============================================================================
# BOUND AND COMPOSED MAPS
# ============================================================================

class BoundField:
    """A field with its latent code fixed, exposing the map interface."""

    def __init__(self, field: DeformationField, z: Optional[Tensor] = None):
        self.field = field
        self.z = z

    def eval(self, x) -> Tensor:
        return self.field.eval(x, self.z)

    def jacobian(self, x) -> Tensor:
        return self.field.jacobian(x, self.z)

    def eval_with_jacobian(self, x) -> Tuple[Tensor, Tensor]:
        return self.field.eval_with_jacobian(x, self.z)


class ComposedField:
    """outer after inner: the expression field consumes identity-field outputs."""

    def __init__(self, outer, inner):
        self.outer = outer
        self.inner = inner

    def eval(self, x) -> Tensor:
        return self.outer.eval(self.inner.eval(x))

    def jacobian(self, x) -> Tensor:
        return self.eval_with_jacobian(x)[1]

    def eval_with_jacobian(self, x) -> Tuple[Tensor, Tensor]:
        y, jy = self.inner.eval_with_jacobian(x)
        out, jo = self.outer.eval_with_jacobian(y)
        return out, jo @ jy


class PosedMap:
    """Rigid head pose applied after a map: x -> R phi(X) + t."""

    def __init__(self, base, rotation: Tensor, translation: Tensor):
        self.base = base
        self.rotation = rotation
        self.translation = translation

    def eval(self, x) -> Tensor:
        return self.base.eval(x) @ self.rotation.T + self.translation

    def jacobian(self, x) -> Tensor:
        return self.rotation @ self.base.jacobian(x)

    def eval_with_jacobian(self, x) -> Tuple[Tensor, Tensor]:
        y, j = self.base.eval_with_jacobian(x)
        return y @ self.rotation.T + self.translation, self.rotation @ j


class AffineMap:
    """x = M X + b everywhere."""

    def __init__(self, matrix, offset=(0.0, 0.0, 0.0)):
        self.matrix = as_tensor(matrix).reshape(3, 3)
        self.offset = as_tensor(offset).reshape(3)

    def eval(self, x) -> Tensor:
        return as_tensor(x) @ self.matrix.T + self.offset

    def jacobian(self, x) -> Tensor:
        return self.matrix.expand(len(as_tensor(x).reshape(-1, 3)), 3, 3).clone()

    def eval_with_jacobian(self, x) -> Tuple[Tensor, Tensor]:
        return self.eval(x), self.jacobian(x)


class AnalyticMap:
    """Wraps a numpy map with an `eval_with_jacobian` method (e.g. a ground-truth map)."""

    def __init__(self, source):
        self.source = source

    def eval_with_jacobian(self, x) -> Tuple[Tensor, Tensor]:
        arr = as_tensor(x).detach().cpu().numpy()
        out, jac = self.source.eval_with_jacobian(arr)
        return as_tensor(out), as_tensor(jac)

    def eval(self, x) -> Tensor:
        return self.eval_with_jacobian(x)[0]

    def jacobian(self, x) -> Tensor:
        return self.eval_with_jacobian(x)[1]


def axis_angle_matrix(omega: Tensor) -> Tensor:
    """Rodrigues rotation, differentiable through zero."""
    theta2 = (omega * omega).sum()
    zero = torch.zeros((), dtype=DTYPE)
    k = torch.stack([
        torch.stack([zero, -omega[2], omega[1]]),
        torch.stack([omega[2], zero, -omega[0]]),
        torch.stack([-omega[1], omega[0], zero]),
    ])
    if float(theta2) < 1e-12:
        return torch.eye(3, dtype=DTYPE) + k + 0.5 * k @ k
    theta = torch.sqrt(theta2)
    return torch.eye(3, dtype=DTYPE) + torch.sin(theta) / theta * k + (1.0 - torch.cos(theta)) / theta2 * (k @ k)


# ============================================================================
# LATENT PARAMETERIZER
# ============================================================================

class LipschitzLinear(nn.Linear):
    """Linear layer whose rows are rescaled so the infinity norm stays below softplus(c)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__(in_features, out_features, dtype=DTYPE)
        with torch.no_grad():
            row = self.weight.abs().sum(dim=1).max()
            self.bound_param = nn.Parameter(torch.log(torch.expm1(row)).reshape(()))

    def bound(self) -> Tensor:
        return F.softplus(self.bound_param)

    def forward(self, x: Tensor) -> Tensor:
        rows = self.weight.abs().sum(dim=1)
        scale = torch.clamp(self.bound() / rows, max=1.0)
        return F.linear(x, self.weight * scale[:, None], self.bias)


class LatentMLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int = 32, n_layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(LipschitzLinear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x) -> Tensor:
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.gelu(h)
        return h


class LatentParameterizer(nn.Module):
    """P_id maps identity parameters to beta, P_exp maps expression codes to gamma."""

    def __init__(self, id_in: int, ex_in: int, d_id: int, d_ex: int, hidden: int = 32):
        super().__init__()
        self.d_id = d_id
        self.d_ex = d_ex
        self.p_id = LatentMLP(id_in, d_id, hidden)
        self.p_exp = LatentMLP(ex_in, d_ex, hidden)

    def forward(self, id_params, expr_code) -> Tuple[Tensor, Tensor]:
        return self.p_id(id_params), self.p_exp(expr_code)


def lipschitz_penalty(module: nn.Module) -> Tensor:
    """Product of the per-layer Lipschitz bounds of every LipschitzLinear in `module`."""
    bounds = [m.bound() for m in module.modules() if isinstance(m, LipschitzLinear)]
    if not bounds:
        return torch.ones((), dtype=DTYPE)
    return torch.stack(bounds).prod()


# ============================================================================
# GRADIENTS
# ============================================================================

class GradientTape:
    """One scalar loss and the named inputs its gradients are wanted for."""

    def __init__(self, loss: Tensor, inputs: Mapping[str, Union[Tensor, Sequence[Tensor]]]):
        if loss.numel() != 1:
            raise InvalidInputError("a gradient tape records exactly one scalar loss")
        self.loss = loss.reshape(())
        self.inputs = {k: ([v] if isinstance(v, Tensor) else list(v)) for k, v in inputs.items()}
        self.consumed = False


def backprop(tape: GradientTape) -> Dict[str, List[Tensor]]:
    """Gradients of the recorded loss, one list per named input group."""
    if tape.consumed:
        raise UsageError("gradient tape already consumed")
    tape.consumed = True
    names = list(tape.inputs)
    flat = [t for n in names for t in tape.inputs[n]]
    grads = torch.autograd.grad(tape.loss, flat, allow_unused=True)
    out: Dict[str, List[Tensor]] = {}
    pos = 0
    for n in names:
        k = len(tape.inputs[n])
        out[n] = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads[pos:pos + k], flat[pos:pos + k])]
        pos += k
    return out
