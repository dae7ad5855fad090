"""Central finite-difference checks for the autodiff engine."""

import numpy as np

from laviter.tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(evaluate, array: np.ndarray, step: float = STEP) -> np.ndarray:
    """Perturb ``array`` in place one entry at a time; ``evaluate()`` returns a float."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus = evaluate()
        array[index] = original - step
        minus = evaluate()
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def check_gradients(fn, *arrays, tolerance: float = TOLERANCE) -> None:
    """``fn`` maps Tensors built from ``arrays`` to a scalar Tensor."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    for position, leaf in enumerate(leaves):
        numeric = numeric_gradient(lambda: fn(*[Tensor(x.data) for x in leaves]).item(), leaf.data)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        error = relative_error(analytic, numeric)
        assert error <= tolerance, f"input {position}: relative error {error:.2e}"


def check_parameter_gradients(loss_fn, params, tolerance: float = TOLERANCE) -> None:
    """``loss_fn()`` rebuilds the graph from the current parameter values."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    for p in params:
        numeric = numeric_gradient(lambda: loss_fn().item(), p.data)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        error = relative_error(analytic, numeric)
        assert error <= tolerance, f"parameter {p.shape}: relative error {error:.2e}"
