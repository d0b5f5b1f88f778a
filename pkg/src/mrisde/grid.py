"""Complex image grids, the centered orthonormal 2D DFT, and seeded RNG streams.

Images are plain numpy arrays of shape (H, W): complex128 for complex-valued
images, float64 for real-valued ones.  All public operations return finite
arrays or raise.

Supported DFT sizes: any positive height/width (numpy FFT handles arbitrary
lengths); powers of two up to 512 are covered by the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SizeError

# Frozen RNG design: a counter-based Philox bit generator keyed through
# numpy's SeedSequence by (seed, stream, *path).  Identical keys reproduce
# identical draws; distinct keys give statistically independent streams, so
# parallel chains and coils can each own one.
_PHILOX = np.random.Philox


@dataclass(frozen=True)
class Rng:
    """A reproducible, splittable random stream identified by (seed, stream).

    ``Rng`` is a value, not a stateful generator: every call to
    :meth:`generator` starts the same sequence again.  Stateful consumption
    happens on the returned ``numpy.random.Generator``.  Children created
    with :meth:`child` are independent streams and never collide with the
    parent or with each other.
    """

    seed: int
    stream: int = 0
    _path: tuple = field(default=())

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *self._path))
        return np.random.Generator(_PHILOX(ss))

    def child(self, index: int) -> "Rng":
        return Rng(self.seed, self.stream, self._path + (int(index),))

    def label(self) -> str:
        """Compact identifier recorded in results for provenance."""
        parts = [str(self.seed), str(self.stream), *map(str, self._path)]
        return "/".join(parts)


def gaussian_noise(rng: Rng, shape, kind: str = "real"):
    """Draw i.i.d. standard normal entries; ``kind='complex'`` draws real and
    imaginary parts independently N(0, 1) each."""
    g = rng.generator()
    if kind == "real":
        return g.standard_normal(shape)
    if kind == "complex":
        return g.standard_normal(shape) + 1j * g.standard_normal(shape)
    raise ValueError(f"unknown noise kind: {kind!r}")


def _check_dims(img):
    if img.ndim != 2:
        raise SizeError(f"expected a 2D grid, got shape {img.shape}")
    h, w = img.shape
    if h < 1 or w < 1:
        raise SizeError(f"grid dimensions must be positive, got {img.shape}")


def dft_centered(img, direction: str = "forward"):
    """Orthonormal 2D DFT with the DC component at the grid center.

    Centering is realized as fftshift-style index reordering around the
    transform, so inverse(forward(x)) == x exactly up to float rounding.
    """
    img = np.asarray(img)
    _check_dims(img)
    if direction == "forward":
        out = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))
    elif direction == "inverse":
        out = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(img), norm="ortho"))
    else:
        raise ValueError(f"unknown direction: {direction!r}")
    if not np.all(np.isfinite(out)):
        raise SizeError("non-finite values in DFT output")
    return out


def dft2c(img):
    """Forward centered orthonormal DFT (image -> k-space)."""
    return dft_centered(img, "forward")


def idft2c(ksp):
    """Inverse centered orthonormal DFT (k-space -> image)."""
    return dft_centered(ksp, "inverse")


_AXES = (-2, -1)


def dft2c_stack(imgs):
    """Forward centered DFT applied over the last two axes of a stack."""
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(imgs, axes=_AXES), axes=_AXES, norm="ortho"),
        axes=_AXES,
    )


def idft2c_stack(ksps):
    """Inverse centered DFT applied over the last two axes of a stack."""
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(ksps, axes=_AXES), axes=_AXES, norm="ortho"),
        axes=_AXES,
    )
