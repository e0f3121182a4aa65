"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""
import numpy as np
import torch

from .exceptions import ConfigurationError, ContractError


def check_image(x, name="image"):
    """Return ``x`` as a float array of shape (C, H, W) with values in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ContractError(f"{name} must have shape (C, H, W), got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if x.size and (np.nanmin(x) < 0.0 or np.nanmax(x) > 1.0):
        raise ContractError(f"{name} values must lie in [0, 1]")
    return x


def check_images(X, name="images", allow_empty=False):
    """Return a (N, C, H, W) float32 array. Lists of (C, H, W) arrays are stacked."""
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    if isinstance(X, (list, tuple)):
        if not X:
            if allow_empty:
                return np.zeros((0, 3, 1, 1), dtype=np.float32)
            raise ConfigurationError(f"{name} is empty")
        X = np.stack([check_image(x, name) for x in X])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ContractError(f"{name} must have shape (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0 and not allow_empty:
        raise ConfigurationError(f"{name} is empty")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ContractError(f"{name} values must lie in [0, 1]")
    return X


def check_same_shape(x, y, names=("x", "y")):
    if tuple(x.shape) != tuple(y.shape):
        raise ContractError(
            f"{names[0]} and {names[1]} shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}"
        )


def check_power_of_two(n, minimum=16, name="resolution"):
    if not isinstance(n, (int, np.integer)) or n < minimum or n & (n - 1):
        raise ConfigurationError(f"{name} must be a power of two >= {minimum}, got {n}")
    return int(n)


def to_tensor(X, dtype=torch.float32):
    if isinstance(X, torch.Tensor):
        return X.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(X), dtype=dtype)
