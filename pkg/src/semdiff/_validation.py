import numpy as np

from .exceptions import ContractError, DimensionError


def check_instance_map(labels, name="mask"):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D label grid, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ContractError(f"{name} must hold integer instance ids")
        labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ContractError(f"{name} has negative labels")
    return labels


def check_rgb(image, name="image"):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"{name} must be (3, H, W), got {image.shape}")
    return image


def check_same_hw(*arrays):
    shapes = {a.shape[-2:] for a in arrays}
    if len(shapes) > 1:
        raise DimensionError(f"spatial sizes differ: {sorted(shapes)}")


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
