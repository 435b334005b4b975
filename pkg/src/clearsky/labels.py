"""Weather class labels shared across the whole stack."""

from enum import IntEnum


class Weather(IntEnum):
    """Label coding used everywhere: prompts, datasets, routing logs."""

    RAIN = 0
    HAZE = 1
    SNOW = 2


WEATHER_NAMES = ("rain", "haze", "snow")
