"""Unit conversions. Distances along the pipe are inches, LiDAR radial
math is centimeters, reported segment bounds are feet."""

IN_PER_FT = 12.0
CM_PER_IN = 2.54


def in_to_ft(x_in: float) -> float:
    return x_in / IN_PER_FT


def ft_to_in(x_ft: float) -> float:
    return x_ft * IN_PER_FT


def in_to_cm(x_in: float) -> float:
    return x_in * CM_PER_IN


def cm_to_in(x_cm: float) -> float:
    return x_cm / CM_PER_IN
