"""SGD with momentum."""

from .net import VELOCITY_PREFIX, ShapeMismatchError


def sgd_momentum_step(store, grads, lr, momentum):
    """In place: ``v <- momentum * v + g``; ``w <- w - lr * v``."""
    for name, g in grads.items():
        if name not in store:
            raise ShapeMismatchError(f"gradient for unknown tensor {name!r}")
        w = store[name]
        if g.shape != w.shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs weight {w.shape}")
        vname = VELOCITY_PREFIX + name
        v = store.get(vname)
        if v is None:
            v = store[vname] = g * 0.0
        v *= momentum
        v += g
        w -= lr * v
    store.generation += 1


def step_decay_lr(base_lr, epoch, epochs, factor=0.1, at=0.75):
    """Learning rate for ``epoch`` (0-based): ``base_lr`` then ``base_lr * factor``."""
    return base_lr * factor if epoch >= int(at * epochs) and epochs > 1 else base_lr
