"""
Diferenciação automática em modo reverso sobre o conjunto de operações
usado pelos modelos e pelas losses, mais o otimizador Adam e a
verificação de gradiente por diferenças finitas.

Cada grafo vive em um Tape. Nós recebem ids crescentes, então os pais
sempre têm id menor e o backward percorre os nós em ordem reversa.
Grafos independentes podem rodar em paralelo; a atualização dos
parâmetros tem um único escritor.

Layout dos tensores: (C, *espaço), um exemplo por grafo (sem eixo de batch).
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    GRADCHECK_COORDS,
    GRADCHECK_STEP,
    GRADCHECK_TOL,
    INTEGRATION_STEPS,
    LEARNING_RATE,
)
from app.services import grid_field
from app.services.exceptions import ContractViolationError, NanGradientError

logger = logging.getLogger(__name__)

# Piso do denominador do erro relativo
REL_ERROR_FLOOR = 1e-8

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# =============================================================================
# Parâmetros
# =============================================================================

@dataclass
class Parameter:
    """Tensor aprendível com gradiente e estado do Adam."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0
    trainable: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        for attr in ("grad", "m", "v"):
            if getattr(self, attr).shape != self.value.shape:
                raise ContractViolationError(f"Parâmetro '{self.name}': shape de {attr} diverge do valor")

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        """Converte valor e estado do otimizador para outro dtype."""
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


# =============================================================================
# Grafo
# =============================================================================

class Node:
    """Nó do grafo: valor em cache, adjunto e função de backward."""

    __slots__ = ("id", "op", "parents", "value", "adjoint", "requires_grad", "tape", "_backward")

    def __init__(self, tape: "Tape", node_id: int, op: str, value: np.ndarray,
                 parents: Tuple["Node", ...], backward: Optional[BackwardFn], requires_grad: bool):
        self.tape = tape
        self.id = node_id
        self.op = op
        self.value = value
        self.parents = parents
        self.adjoint: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"


class Tape:
    """
    Registro de um grafo de computação.

    Uso:
        tape = Tape()
        w = tape.param(weight)
        loss = ops.sum(ops.square(w))
        tape.backward(loss)   # acumula em weight.grad
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._param_nodes: Dict[int, Tuple[Parameter, Node]] = {}

    def _add(self, op: str, value, parents: Sequence[Node], backward: Optional[BackwardFn],
             requires_grad: Optional[bool] = None) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ContractViolationError(f"Nó de outro grafo usado em '{op}'", [p.id])
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, np.asarray(value), tuple(parents), backward, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._add("const", value, (), None, requires_grad=False)

    def param(self, p: Parameter) -> Node:
        """Nó folha ligado a um Parameter (um único nó por parâmetro e grafo)."""
        key = id(p)
        if key not in self._param_nodes:
            node = self._add("param", p.value, (), None, requires_grad=True)
            self._param_nodes[key] = (p, node)
        return self._param_nodes[key][1]

    def record(self, value, parents: Sequence[Node], backward: BackwardFn, op: str = "custom") -> Node:
        """Registra um nó com backward arbitrário."""
        return self._add(op, value, parents, backward)

    def gradient_of(self, p: Parameter) -> np.ndarray:
        """Adjunto do parâmetro neste grafo (zeros se não alcançado)."""
        entry = self._param_nodes.get(id(p))
        if entry is None or entry[1].adjoint is None:
            return np.zeros_like(p.value)
        return entry[1].adjoint

    def backward(self, root: Node, accumulate: bool = True) -> None:
        """
        Propaga adjuntos a partir de uma loss escalar.

        Args:
            root: Nó escalar (um único elemento)
            accumulate: Soma os adjuntos em Parameter.grad
        """
        if root.tape is not self:
            raise ContractViolationError("Raiz pertence a outro grafo", [root.id])
        if root.value.size != 1:
            raise ContractViolationError(f"Loss precisa ser escalar, shape {root.value.shape}", [root.id])

        for node in self.nodes:
            node.adjoint = None
        root.adjoint = np.ones_like(root.value)

        for node in reversed(self.nodes[: root.id + 1]):
            if node.adjoint is None or node._backward is None or not node.requires_grad:
                continue
            grads = node._backward(node.adjoint)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g)
                if g.shape != parent.value.shape:
                    raise ContractViolationError(
                        f"Adjunto com shape {g.shape} para valor {parent.value.shape} em '{node.op}'",
                        [node.id, parent.id],
                    )
                parent.adjoint = g if parent.adjoint is None else parent.adjoint + g

        if accumulate:
            for p, node in self._param_nodes.values():
                if node.adjoint is not None:
                    p.grad += node.adjoint.astype(p.grad.dtype, copy=False)


# =============================================================================
# Operações
# =============================================================================

def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ContractViolationError(f"'{op}' com shapes {a.shape} e {b.shape}", [a.id, b.id])


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.tape._add("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.tape._add("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape._add("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def divide(a: Node, b: Node) -> Node:
    _same_shape("divide", a, b)
    av, bv = a.value, b.value
    return a.tape._add("divide", av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x: Node, s: float) -> Node:
    return x.tape._add("scale", x.value * s, (x,), lambda g: (g * s,))


def add_const(x: Node, c) -> Node:
    """x + c, com c escalar ou array de mesmo shape (não diferenciado)."""
    c = np.asarray(c, dtype=x.value.dtype)
    if c.ndim and c.shape != x.shape:
        raise ContractViolationError(f"'add_const' com shapes {x.shape} e {c.shape}", [x.id])
    return x.tape._add("add_const", x.value + c, (x,), lambda g: (g,))


def square(x: Node) -> Node:
    xv = x.value
    return x.tape._add("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))


def log(x: Node) -> Node:
    xv = x.value
    return x.tape._add("log", np.log(xv), (x,), lambda g: (g / xv,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape._add("relu", x.value * mask, (x,), lambda g: (g * mask,))


def sum(x: Node) -> Node:  # noqa: A001 - espelha o nome da operação
    shape, dtype = x.shape, x.value.dtype
    return x.tape._add("sum", np.sum(x.value), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Node) -> Node:
    shape, dtype, n = x.shape, x.value.dtype, x.value.size
    return x.tape._add("mean", np.mean(x.value), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def sum_spatial(x: Node) -> Node:
    """Soma por canal sobre todos os voxels: (C, *dims) -> (C,)."""
    shape = x.shape
    axes = tuple(range(1, x.value.ndim))
    expand = (slice(None),) + (None,) * len(axes)
    return x.tape._add(
        "sum_spatial", x.value.sum(axis=axes), (x,),
        lambda g: (np.broadcast_to(g[expand], shape).copy(),),
    )


def reshape(x: Node, shape: Tuple[int, ...]) -> Node:
    orig = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ContractViolationError(f"reshape de {orig} para {shape}", [x.id])
    return x.tape._add("reshape", value, (x,), lambda g: (g.reshape(orig),))


def concat(xs: Sequence[Node]) -> Node:
    """Concatenação no eixo de canais."""
    spatial = xs[0].shape[1:]
    for x in xs[1:]:
        if x.shape[1:] != spatial:
            raise ContractViolationError(
                f"'concat' com shapes espaciais {spatial} e {x.shape[1:]}", [xs[0].id, x.id]
            )
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]
    value = np.concatenate([x.value for x in xs], axis=0)
    return xs[0].tape._add("concat", value, tuple(xs), lambda g: tuple(np.split(g, splits, axis=0)))


def softmax(x: Node) -> Node:
    """Softmax no eixo de canais."""
    shifted = x.value - x.value.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=0, keepdims=True)),)

    return x.tape._add("softmax", s, (x,), backward)


def dense(x: Node, w: Node, b: Node) -> Node:
    """y = W x + b, com x (n_in,), W (n_out, n_in), b (n_out,)."""
    if x.value.ndim != 1 or w.shape != (b.shape[0], x.shape[0]):
        raise ContractViolationError(
            f"'dense' com x {x.shape}, W {w.shape}, b {b.shape}", [x.id, w.id, b.id]
        )
    xv, wv = x.value, w.value
    return x.tape._add(
        "dense", wv @ xv + b.value, (x, w, b),
        lambda g: (wv.T @ g, np.outer(g, xv), g),
    )


def _kernel_offsets(ndim: int):
    return list(product(range(3), repeat=ndim))


def conv(x: Node, w: Node, b: Node) -> Node:
    """
    Convolução kernel 3, stride 1, zero-padding 'same' (correlação cruzada).

    x (Cin, *S), w (Cout, Cin, 3, ..., 3), b (Cout,)
    """
    ndim = x.value.ndim - 1
    c_in, spatial = x.shape[0], x.shape[1:]
    c_out = w.shape[0]
    if w.shape != (c_out, c_in) + (3,) * ndim or b.shape != (c_out,):
        raise ContractViolationError(
            f"'conv' com x {x.shape}, w {w.shape}, b {b.shape}", [x.id, w.id, b.id]
        )

    offsets = _kernel_offsets(ndim)
    xp = np.pad(x.value, [(0, 0)] + [(1, 1)] * ndim)
    cols = np.stack(
        [xp[(slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, spatial))] for off in offsets],
        axis=1,
    ).reshape(c_in * len(offsets), -1)
    wm = w.value.reshape(c_out, -1)
    bias = b.value.reshape((c_out,) + (1,) * ndim)
    value = (wm @ cols).reshape((c_out,) + spatial) + bias

    def backward(g):
        gm = g.reshape(c_out, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        db = gm.sum(axis=1)
        dx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape((c_in, len(offsets)) + spatial)
            dxp = np.zeros_like(xp)
            for k, off in enumerate(offsets):
                dxp[(slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, spatial))] += dcols[:, k]
            dx = dxp[(slice(None),) + tuple(slice(1, n + 1) for n in spatial)]
        return dx, dw, db

    return x.tape._add("conv", value, (x, w, b), backward)


def _window_layout(shape: Tuple[int, ...]):
    c, dims = shape[0], shape[1:]
    ndim = len(dims)
    split = [c]
    for n in dims:
        split.extend([n // 2, 2])
    perm = [0] + [1 + 2 * i for i in range(ndim)] + [2 + 2 * i for i in range(ndim)]
    half = tuple(n // 2 for n in dims)
    return split, perm, half


def max_pool2(x: Node) -> Node:
    """Max-pool 2^D; empates resolvidos pelo menor índice linear da janela."""
    dims = x.shape[1:]
    if any(n % 2 for n in dims):
        raise ContractViolationError(f"'max_pool2' requer dimensões pares: {dims}", [x.id])
    split, perm, half = _window_layout(x.shape)
    n_win = 2 ** len(dims)
    win = x.value.reshape(split).transpose(perm).reshape((x.shape[0],) + half + (n_win,))
    arg = win.argmax(axis=-1)[..., None]
    value = np.take_along_axis(win, arg, axis=-1)[..., 0]
    inverse = np.argsort(perm)
    shape = x.shape

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        permuted = [split[p] for p in perm]
        return (gw.reshape(permuted).transpose(inverse).reshape(shape),)

    return x.tape._add("max_pool2", value, (x,), backward)


def upsample2(x: Node) -> Node:
    """Upsampling por vizinho mais próximo (x2 por eixo)."""
    value = grid_field.upsample2(x.value)
    split, _, _ = _window_layout(value.shape)
    window_axes = tuple(range(2, len(split), 2))
    return x.tape._add(
        "upsample2", value, (x,),
        lambda g: (g.reshape(split).sum(axis=window_axes),),
    )


def spatial_gradient(x: Node) -> Node:
    """Diferenças progressivas (regressiva na última fatia): (C, *dims) -> (C, D, *dims)."""
    return x.tape._add(
        "spatial_gradient", grid_field.spatial_gradient_array(x.value), (x,),
        lambda g: (grid_field.spatial_gradient_adjoint(g),),
    )


def warp(vol: Node, u: Node) -> Node:
    """
    vol(x + u(x)) com interpolação multilinear e clamping na borda.

    O backward propaga para o tensor amostrado e para o deslocamento.
    """
    dims = vol.shape[1:]
    if u.shape != (len(dims),) + dims:
        raise ContractViolationError(f"'warp' de {vol.shape} por campo {u.shape}", [vol.id, u.id])
    coords = grid_field.identity_grid(dims, u.value.dtype) + u.value
    value = grid_field.sample_linear(vol.value, coords).astype(vol.value.dtype, copy=False)

    def backward(g):
        return grid_field.sample_linear_vjp(
            vol.value, coords, g, need_data=vol.requires_grad, need_coords=u.requires_grad
        )

    return vol.tape._add("warp", value, (vol, u), backward)


def compose(u_outer: Node, u_inner: Node) -> Node:
    """u = u_inner + u_outer ∘ (Id + u_inner)."""
    return add(u_inner, warp(u_outer, u_inner))


def integrate_velocity(v: Node, steps: int = INTEGRATION_STEPS) -> Node:
    """Scaling-and-squaring desenrolado em K composições diferenciáveis."""
    if steps < 1:
        raise ContractViolationError(f"Número de passos de integração deve ser >= 1: {steps}", [v.id])
    u = scale(v, 1.0 / (2.0 ** steps))
    for _ in range(steps):
        u = compose(u, u)
    return u


# =============================================================================
# Otimizador
# =============================================================================

class Adam:
    """
    Adam com correção de viés; o estado vive em cada Parameter.

    Uso:
        opt = Adam(lr=1e-4)
        opt.step(params)   # atualiza e zera os gradientes
    """

    def __init__(self, lr: float = LEARNING_RATE, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params: Iterable[Parameter]) -> None:
        params = list(params)

        # Aborta antes de tocar em qualquer parâmetro
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                logger.error(f"Passo abortado: gradiente não finito em '{p.name}'")
                raise NanGradientError(p.name)

        for p in params:
            p.step += 1
            bc1 = 1.0 - self.beta1 ** p.step
            bc2 = 1.0 - self.beta2 ** p.step
            g = p.grad

            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * (g * g)

            m_hat = p.m / bc1
            v_hat = p.v / bc2
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype, copy=False)
            p.zero_grad()


def adam_step(params: Iterable[Parameter], lr: float = LEARNING_RATE, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Um passo de Adam sobre os parâmetros (gradientes zerados ao final)."""
    Adam(lr, beta1, beta2, eps).step(params)


# =============================================================================
# Verificação de gradiente
# =============================================================================

def relative_error(analytic: float, numeric: float, floor: float = REL_ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central_difference(loss_fn: Callable[[Tape], Node], p: Parameter, idx: int, h: float) -> float:
    orig = p.value.flat[idx]
    p.value.flat[idx] = orig + h
    plus = float(loss_fn(Tape()).value)
    p.value.flat[idx] = orig - h
    minus = float(loss_fn(Tape()).value)
    p.value.flat[idx] = orig
    return (plus - minus) / (2.0 * h)


def grad_check(
    loss_fn: Callable[[Tape], Node],
    param: Parameter,
    h: float = GRADCHECK_STEP,
    seed: int = 0,
    n_coords: int = GRADCHECK_COORDS,
    tol: float = GRADCHECK_TOL,
    retry_kinks: bool = True,
) -> float:
    """
    Compara o adjunto analítico com diferenças centrais em coordenadas sorteadas.

    Uma coordenada que excede `tol` é reavaliada com h/10: relu, max-pool e
    interpolação clampada não são suaves e a perturbação pode cruzar um
    ponto de quebra isolado.

    Args:
        loss_fn: Constrói o grafo da loss em um Tape novo e retorna a raiz
        param: Parâmetro verificado (valor perturbado in-place e restaurado)
        h: Passo da diferença central
        seed: Semente do sorteio de coordenadas
        n_coords: Coordenadas sorteadas (todas se o parâmetro for menor)

    Returns:
        Maior erro relativo encontrado
    """
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss, accumulate=False)
    analytic = np.array(tape.gradient_of(param), dtype=np.float64)

    rng = np.random.default_rng(seed)
    n = param.value.size
    coords = rng.choice(n, size=min(n_coords, n), replace=False)

    worst = 0.0
    for idx in coords:
        a = float(analytic.flat[idx])
        err = relative_error(a, _central_difference(loss_fn, param, int(idx), h))
        if err > tol and retry_kinks:
            err = min(err, relative_error(a, _central_difference(loss_fn, param, int(idx), h / 10)))
        worst = max(worst, err)
    return worst
