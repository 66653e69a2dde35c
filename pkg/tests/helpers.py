"""Shared test utilities: independent oracles kept deliberately dumb."""

import numpy as np

from drbsde.nets import MlpParams, backward, forward


def loss_through_network(params: MlpParams, inputs: np.ndarray, weight: np.ndarray) -> float:
    """Scalar probe loss sum(output * weight); its output sensitivity is weight."""
    out, _ = forward(params, inputs)
    return float(np.sum(out * weight))


def finite_difference_gradients(params: MlpParams, inputs: np.ndarray,
                                weight: np.ndarray, step: float = 1e-6):
    """Central finite differences of the probe loss for every parameter entry.

    Brute force on purpose: perturbs one entry at a time through fresh
    MlpParams objects so nothing of the analytic path is reused.
    """
    grads_w, grads_b = [], []
    for layer in range(params.n_layers):
        for kind in ("weights", "biases"):
            base = getattr(params, kind)[layer]
            grad = np.empty_like(base)
            flat = grad.reshape(-1)
            for idx in range(base.size):
                plus = [w.copy() for w in params.weights]
                minus = [w.copy() for w in params.weights]
                bplus = [b.copy() for b in params.biases]
                bminus = [b.copy() for b in params.biases]
                target_p = plus if kind == "weights" else bplus
                target_m = minus if kind == "weights" else bminus
                target_p[layer].reshape(-1)[idx] += step
                target_m[layer].reshape(-1)[idx] -= step
                p_params = MlpParams(params.spec, tuple(plus), tuple(bplus))
                m_params = MlpParams(params.spec, tuple(minus), tuple(bminus))
                flat[idx] = (loss_through_network(p_params, inputs, weight)
                             - loss_through_network(m_params, inputs, weight)) / (2.0 * step)
            if kind == "weights":
                grads_w.append(grad)
            else:
                grads_b.append(grad)
    return tuple(grads_w), tuple(grads_b)


def max_relative_gradient_error(params: MlpParams, inputs: np.ndarray,
                                weight: np.ndarray, step: float = 1e-6) -> float:
    """Worst relative disagreement between analytic and FD gradients."""
    _, tape = forward(params, inputs)
    analytic = backward(params, tape, weight)
    fd_w, fd_b = finite_difference_gradients(params, inputs, weight, step)
    worst = 0.0
    for a, f in list(zip(analytic.weights, fd_w)) + list(zip(analytic.biases, fd_b)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst
