import numpy as np


def extract_block(volume: np.ndarray, center, edge: int) -> np.ndarray:
    """Cube of side ``edge`` centered at ``center`` over the last three axes.

    Voxels outside the volume read as zero.  Leading axes (channels) are kept.
    """
    lead = volume.shape[:-3]
    spatial = volume.shape[-3:]
    half = edge // 2
    out = np.zeros(lead + (edge, edge, edge), dtype=volume.dtype)
    src, dst = [], []
    for c, size in zip(center, spatial):
        lo = int(c) - half
        hi = lo + edge
        s0, s1 = max(lo, 0), min(hi, size)
        if s1 <= s0:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - lo, s1 - lo))
    ell = (Ellipsis,)
    out[ell + tuple(dst)] = volume[ell + tuple(src)]
    return out
