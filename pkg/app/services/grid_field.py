"""
Geometria de grid denso e operações de campo não aprendidas.

Interpolação multilinear com clamping na borda, warp, composição de
deslocamentos, integração scaling-and-squaring, gradientes espaciais,
determinante jacobiano e redimensionamento por fator 2.

Todas as coordenadas estão em unidades de voxel. O espaçamento físico
só entra nas métricas de distância de superfície.

Convenção de arrays:
    volume        (C, *dims)
    campo vetorial (D, *dims), componente d = deslocamento no eixo d
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import List, Literal, Tuple, Union

import numpy as np

from app.config import INTEGRATION_STEPS, MIN_GRID_DIM
from app.services.exceptions import ContractViolationError, GridMismatchError

FieldKind = Literal["velocity", "displacement"]
FIELD_KINDS = ("velocity", "displacement")


# =============================================================================
# Tipos
# =============================================================================

@dataclass(frozen=True)
class Grid:
    """Grid regular D-dimensional (D em {2, 3})."""

    dims: Tuple[int, ...]
    spacing: Tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ContractViolationError(f"Grid precisa de 2 ou 3 dimensões, recebeu {len(dims)}")
        if any(d < MIN_GRID_DIM for d in dims):
            raise ContractViolationError(f"Toda dimensão do grid deve ser >= {MIN_GRID_DIM}: {dims}")

        spacing = tuple(float(s) for s in self.spacing) if self.spacing else (1.0,) * len(dims)
        if len(spacing) != len(dims) or any(s <= 0 for s in spacing):
            raise ContractViolationError(f"Espaçamento inválido {spacing} para grid {dims}")

        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


@dataclass
class Volume:
    """Grid escalar multicanal: intensidades ou probabilidades por rótulo."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != self.grid.ndim + 1 or self.data.shape[1:] != self.grid.dims:
            raise ContractViolationError(
                f"Volume com shape {self.data.shape} incompatível com grid {self.grid.dims}"
            )
        if self.data.shape[0] < 1:
            raise ContractViolationError("Volume precisa de pelo menos um canal")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolationError("Volume contém valores não finitos")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class LabelMap:
    """Mapa de rótulos inteiros; rótulo 0 reservado para o fundo."""

    grid: Grid
    labels: np.ndarray
    n_labels: int

    def __post_init__(self):
        if self.labels.shape != self.grid.dims:
            raise ContractViolationError(
                f"LabelMap com shape {self.labels.shape} incompatível com grid {self.grid.dims}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ContractViolationError("LabelMap precisa de dtype inteiro")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_labels):
            raise ContractViolationError(f"Rótulo fora de [0, {self.n_labels})")

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        return one_hot(self.labels, self.n_labels, dtype=dtype)

    def counts(self) -> np.ndarray:
        """Contagem de voxels por rótulo."""
        return np.bincount(self.labels.ravel(), minlength=self.n_labels)


@dataclass
class VectorField:
    """Campo D-componente no grid, interpretado como velocidade ou deslocamento."""

    grid: Grid
    data: np.ndarray
    kind: FieldKind = "displacement"

    def __post_init__(self):
        expected = (self.grid.ndim,) + self.grid.dims
        if self.data.shape != expected:
            raise ContractViolationError(f"Campo com shape {self.data.shape}, esperado {expected}")
        if self.kind not in FIELD_KINDS:
            raise ContractViolationError(f"Tipo de campo inválido: {self.kind}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolationError("Campo contém valores não finitos")

    @classmethod
    def zeros(cls, grid: Grid, kind: FieldKind = "displacement", dtype=np.float64) -> "VectorField":
        return cls(grid, np.zeros((grid.ndim,) + grid.dims, dtype=dtype), kind)


# =============================================================================
# Helpers
# =============================================================================

@lru_cache(maxsize=16)
def _cached_identity(dims: Tuple[int, ...], dtype_str: str) -> np.ndarray:
    grid = np.indices(dims, dtype=np.dtype(dtype_str))
    grid.setflags(write=False)
    return grid


def identity_grid(dims: Tuple[int, ...], dtype=np.float64) -> np.ndarray:
    """Coordenadas de voxel da identidade, shape (D, *dims). Somente leitura."""
    return _cached_identity(tuple(int(d) for d in dims), np.dtype(dtype).str)


def interior_mask(dims: Tuple[int, ...], margin: int = 1) -> np.ndarray:
    """Máscara booleana dos voxels a pelo menos `margin` voxels da borda."""
    mask = np.zeros(dims, dtype=bool)
    inner = tuple(slice(margin, n - margin) for n in dims)
    mask[inner] = True
    return mask


def one_hot(labels: np.ndarray, n_labels: int, dtype=np.float64) -> np.ndarray:
    """Codificação one-hot (C, *dims) de um mapa de rótulos."""
    return (np.arange(n_labels).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(dtype)


def _strides(dims: Tuple[int, ...]) -> List[int]:
    strides = []
    acc = 1
    for n in reversed(dims):
        strides.append(acc)
        acc *= n
    return strides[::-1]


def _stencil(coords: np.ndarray, dims: Tuple[int, ...]):
    """Índice inferior, fração e máscara 'dentro do grid' por eixo."""
    lo, frac, inside = [], [], []
    for d, n in enumerate(dims):
        c = coords[d]
        inside.append((c >= 0) & (c <= n - 1))
        cc = np.clip(c, 0, n - 1)
        i0 = np.minimum(np.floor(cc).astype(np.intp), n - 2)
        lo.append(i0)
        frac.append(cc - i0)
    return lo, frac, inside


def _check_sampling(data: np.ndarray, coords: np.ndarray) -> Tuple[int, ...]:
    dims = data.shape[1:]
    if coords.shape[0] != len(dims):
        raise ContractViolationError(
            f"Coordenadas com {coords.shape[0]} componentes para volume {len(dims)}D"
        )
    if any(n < 2 for n in dims):
        raise ContractViolationError(f"Interpolação requer >= 2 voxels por eixo: {dims}")
    return dims


# =============================================================================
# Kernels em arrays (usados também pelo autodiff)
# =============================================================================

def sample_linear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    Interpolação multilinear de cada canal nas coordenadas dadas.

    Coordenadas fora do grid são projetadas na face de borda antes
    da interpolação (clamp-to-edge).

    Args:
        data: Array (C, *dims)
        coords: Array (D, *out_dims) em unidades de voxel

    Returns:
        Array (C, *out_dims)
    """
    dims = _check_sampling(data, coords)
    lo, frac, _ = _stencil(coords, dims)
    strides = _strides(dims)
    flat = data.reshape(data.shape[0], -1)

    out = np.zeros((data.shape[0],) + coords.shape[1:], dtype=np.result_type(data, coords))
    for corner in product((0, 1), repeat=len(dims)):
        idx = 0
        weight = 1.0
        for d, bit in enumerate(corner):
            idx = idx + (lo[d] + bit) * strides[d]
            weight = weight * (frac[d] if bit else 1.0 - frac[d])
        out += flat[:, idx] * weight
    return out


def sample_linear_vjp(
    data: np.ndarray,
    coords: np.ndarray,
    grad_out: np.ndarray,
    need_data: bool = True,
    need_coords: bool = True,
):
    """
    Produto vetor-jacobiano da interpolação multilinear.

    A derivada em relação a uma coordenada fora do grid (clampada) é 0.

    Returns:
        (grad_data (C, *dims) ou None, grad_coords (D, *out_dims) ou None)
    """
    dims = _check_sampling(data, coords)
    n_ch = data.shape[0]
    D = len(dims)
    lo, frac, inside = _stencil(coords, dims)
    strides = _strides(dims)
    flat = data.reshape(n_ch, -1)
    n_vox = flat.shape[1]

    grad_data = np.zeros((n_ch, n_vox), dtype=np.float64) if need_data else None
    grad_coords = np.zeros((D,) + coords.shape[1:], dtype=np.result_type(data, coords)) if need_coords else None

    for corner in product((0, 1), repeat=D):
        idx = 0
        axis_w = []
        for d, bit in enumerate(corner):
            idx = idx + (lo[d] + bit) * strides[d]
            axis_w.append(frac[d] if bit else 1.0 - frac[d])

        if need_data:
            weight = axis_w[0]
            for w in axis_w[1:]:
                weight = weight * w
            flat_idx = np.ravel(idx)
            for c in range(n_ch):
                grad_data[c] += np.bincount(
                    flat_idx, weights=np.ravel(grad_out[c] * weight), minlength=n_vox
                )

        if need_coords:
            # Σ_c g_c * valor do canto
            gv = np.sum(grad_out * flat[:, idx], axis=0)
            for d, bit in enumerate(corner):
                partial = 1.0 if bit else -1.0
                for e in range(D):
                    if e != d:
                        partial = partial * axis_w[e]
                grad_coords[d] += gv * partial

    if need_data:
        grad_data = grad_data.reshape(data.shape).astype(data.dtype, copy=False)
    if need_coords:
        for d in range(D):
            grad_coords[d] *= inside[d]
    return grad_data, grad_coords


def warp_array(data: np.ndarray, u: np.ndarray) -> np.ndarray:
    """output(x) = data(x + u(x))."""
    return sample_linear(data, identity_grid(data.shape[1:], u.dtype) + u)


def compose_displacements(u_outer: np.ndarray, u_inner: np.ndarray) -> np.ndarray:
    """u(x) = u_inner(x) + u_outer(x + u_inner(x))."""
    if u_outer.shape != u_inner.shape:
        raise GridMismatchError(f"Campos em grids diferentes: {u_outer.shape} vs {u_inner.shape}")
    return u_inner + warp_array(u_outer, u_inner)


def integrate_velocity_array(v: np.ndarray, steps: int = INTEGRATION_STEPS) -> np.ndarray:
    """Scaling-and-squaring: u0 = v / 2^K, depois K composições u <- u ∘ u."""
    if steps < 1:
        raise ContractViolationError(f"Número de passos de integração deve ser >= 1: {steps}")
    u = v / (2.0 ** steps)
    for _ in range(steps):
        u = compose_displacements(u, u)
    return u


def spatial_gradient_array(f: np.ndarray) -> np.ndarray:
    """
    Diferenças progressivas por eixo; a última fatia usa diferença regressiva.

    Args:
        f: Array (C, *dims)

    Returns:
        Array (C, D, *dims) com out[c, d] = ∂f_c/∂x_d
    """
    dims = f.shape[1:]
    out = np.empty((f.shape[0], len(dims)) + dims, dtype=f.dtype)
    for d in range(len(dims)):
        ax = 1 + d
        diff = np.diff(f, axis=ax)
        last = np.take(diff, [-1], axis=ax)
        out[:, d] = np.concatenate([diff, last], axis=ax)
    return out


def spatial_gradient_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjunto de spatial_gradient_array: (C, D, *dims) -> (C, *dims)."""
    dims = g.shape[2:]
    acc = np.zeros((g.shape[0],) + dims, dtype=g.dtype)
    for d, n in enumerate(dims):
        ax = 1 + d
        gm = np.moveaxis(g[:, d], ax, -1)
        head = gm[..., : n - 1].copy()
        head[..., -1] += gm[..., n - 1]
        adj = np.zeros_like(gm)
        adj[..., 1:] += head
        adj[..., :-1] -= head
        acc += np.moveaxis(adj, -1, ax)
    return acc


def jacobian_determinant_array(u: np.ndarray) -> np.ndarray:
    """det(I + ∂u/∂x) por voxel, shape (*dims)."""
    D = u.shape[0]
    grad = spatial_gradient_array(u)  # grad[i, j] = ∂u_i/∂x_j
    jac = np.moveaxis(grad, (0, 1), (-2, -1)) + np.eye(D, dtype=u.dtype)
    return np.linalg.det(jac)


def downsample2(data: np.ndarray, reduce: str = "max") -> np.ndarray:
    """Pooling em janelas 2^D; dimensões ímpares são completadas por replicação."""
    dims = data.shape[1:]
    pad = [(0, 0)] + [(0, n % 2) for n in dims]
    if any(p[1] for p in pad):
        data = np.pad(data, pad, mode="edge")
        dims = data.shape[1:]

    shape = [data.shape[0]]
    for n in dims:
        shape.extend([n // 2, 2])
    blocks = data.reshape(shape)
    window_axes = tuple(range(2, 2 + 2 * len(dims), 2))
    if reduce == "max":
        return blocks.max(axis=window_axes)
    if reduce == "mean":
        return blocks.mean(axis=window_axes)
    raise ContractViolationError(f"Redução desconhecida: {reduce}")


def upsample2(data: np.ndarray) -> np.ndarray:
    """Vizinho mais próximo: repete cada voxel 2x por eixo."""
    out = data
    for ax in range(1, data.ndim):
        out = np.repeat(out, 2, axis=ax)
    return out


# =============================================================================
# Operações tipadas
# =============================================================================

def _require_same_grid(a: Grid, b: Grid) -> None:
    if a.dims != b.dims:
        raise GridMismatchError(f"Grids diferentes: {a.dims} vs {b.dims}")


def _require_kind(u: VectorField, kind: FieldKind) -> None:
    if u.kind != kind:
        raise ContractViolationError(f"Esperado campo de {kind}, recebeu {u.kind}")


def interpolate(vol: Volume, coords: np.ndarray) -> Volume:
    """Amostra `vol` nas coordenadas contínuas (D, *dims) do mesmo grid."""
    expected = (vol.grid.ndim,) + vol.grid.dims
    if coords.shape != expected:
        raise ContractViolationError(f"Coordenadas com shape {coords.shape}, esperado {expected}")
    if not np.all(np.isfinite(coords)):
        raise ContractViolationError("Coordenadas não finitas")
    return Volume(vol.grid, sample_linear(vol.data, coords))


def warp(vol: Volume, u: VectorField) -> Volume:
    """output(x) = vol(x + u(x))."""
    _require_kind(u, "displacement")
    _require_same_grid(vol.grid, u.grid)
    return Volume(vol.grid, warp_array(vol.data, u.data))


def compose(u_outer: VectorField, u_inner: VectorField) -> VectorField:
    """(Id + u) = (Id + u_outer) ∘ (Id + u_inner)."""
    _require_kind(u_outer, "displacement")
    _require_kind(u_inner, "displacement")
    _require_same_grid(u_outer.grid, u_inner.grid)
    return VectorField(u_inner.grid, compose_displacements(u_outer.data, u_inner.data), "displacement")


def integrate_velocity(v: VectorField, steps: int = INTEGRATION_STEPS) -> VectorField:
    """Deslocamento de φ = exp(v)."""
    _require_kind(v, "velocity")
    return VectorField(v.grid, integrate_velocity_array(v.data, steps), "displacement")


def invert_velocity(v: VectorField, steps: int = INTEGRATION_STEPS) -> VectorField:
    """Deslocamento de φ⁻¹ = exp(−v)."""
    _require_kind(v, "velocity")
    return VectorField(v.grid, integrate_velocity_array(-v.data, steps), "displacement")


def spatial_gradient(f: Union[Volume, VectorField]) -> np.ndarray:
    """Pilha de gradientes (C ou D, D, *dims)."""
    return spatial_gradient_array(f.data)


def jacobian_determinant(u: VectorField) -> Volume:
    _require_kind(u, "displacement")
    return Volume(u.grid, jacobian_determinant_array(u.data)[None])


def resize(
    x: Union[Volume, VectorField],
    factor: Literal["up", "down"],
    reduce: str = "max",
) -> Union[Volume, VectorField]:
    """
    Redimensiona por 2.

    Volumes: down = max-pool (ou mean-pool com reduce="mean"), up = repetição.
    Campos: down = mean-pool com vetores x0.5, up = repetição com vetores x2.
    """
    if factor not in ("up", "down"):
        raise ContractViolationError(f"Fator inválido: {factor}")

    is_field = isinstance(x, VectorField)
    if factor == "down":
        data = downsample2(x.data, "mean" if is_field else reduce)
        spacing = tuple(s * 2 for s in x.grid.spacing)
        if is_field:
            data = data * 0.5
    else:
        data = upsample2(x.data)
        spacing = tuple(s / 2 for s in x.grid.spacing)
        if is_field:
            data = data * 2.0

    grid = Grid(data.shape[1:], spacing)
    if is_field:
        return VectorField(grid, data, x.kind)
    return Volume(grid, data)


def warp_labels(labels: LabelMap, u: VectorField) -> LabelMap:
    """Warp de rótulos via one-hot interpolado + argmax (empate -> menor rótulo)."""
    _require_kind(u, "displacement")
    _require_same_grid(labels.grid, u.grid)
    probs = warp_array(labels.one_hot(u.data.dtype), u.data)
    return LabelMap(labels.grid, np.argmax(probs, axis=0).astype(np.int32), labels.n_labels)
