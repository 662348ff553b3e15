"""Central finite-difference gradient checking used across the NN tests."""

import numpy as np


def fd_grad(scalar_fn, array, eps=1e-6):
    """Central-difference gradient of scalar_fn() with respect to `array`,
    perturbing the array in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = scalar_fn()
        flat[i] = original - eps
        lower = scalar_fn()
        flat[i] = original
        gflat[i] = (upper - lower) / (2.0 * eps)
    return grad


def rel_error(a, b, atol=1e-7):
    """Relative gradient mismatch with an absolute floor.

    The floor covers gradients that are exactly zero analytically (e.g. the
    attention key bias, which cancels under softmax shift invariance): central
    differences return O(1e-10) noise there, which is agreement, not error.
    """
    diff = np.linalg.norm(a - b)
    if diff <= atol:
        return 0.0
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return diff / scale


def check_against_fd(build_loss, arrays, tol=1e-6, eps=1e-6):
    """build_loss() -> (loss_value, {name: analytic_grad}); arrays maps the
    same names to the float64 buffers the loss reads. Asserts every analytic
    gradient matches central differences within tol."""
    _, analytic = build_loss()
    for name, array in arrays.items():
        numeric = fd_grad(lambda: build_loss()[0], array, eps)
        err = rel_error(numeric, analytic[name])
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"
