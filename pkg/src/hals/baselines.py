"""Non-learned upsampling baselines."""

import numpy as np

from .rangeimg import ChannelMode, RangeImage, SensorModel, convert_mode, DEFAULT_DROP_THRESHOLD


def bilinear_rows(lr_image: RangeImage, lr_sensor: SensorModel, rate: int,
                  drop_threshold: float = DEFAULT_DROP_THRESHOLD) -> RangeImage:
    """Linear interpolation between LR rows, in polar channels.

    LR row i sits at HR row rate*i; HR rows after the last LR row repeat it.
    Empty bins enter the interpolation as zeros, as they would in a plain
    image resize.
    """
    polar = convert_mode(lr_image, lr_sensor, ChannelMode.POLAR)
    ch = polar.channels
    h = ch.shape[1]
    rows = np.arange(h * rate) / rate
    lo = np.minimum(np.floor(rows).astype(int), h - 1)
    hi = np.minimum(lo + 1, h - 1)
    w = (rows - lo)[None, :, None]
    out = ch[:, lo] * (1 - w) + ch[:, hi] * w
    return RangeImage.from_dense(out, ChannelMode.POLAR, drop_threshold)
