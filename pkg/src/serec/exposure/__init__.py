"""Exposure-prior providers pluggable into the EM engine."""

from serec.exposure.popularity import (
    FixedExposure,
    PopularityExposure,
    fixed_exposure_p,
    popularity_update_mu,
)
from serec.exposure.social_boost import BoostExposure, boost_update_mu, phi_social
from serec.exposure.social_regular import (
    RegularExposure,
    build_targets,
    fit_exposure,
    regular_mu,
    sgd_triplet_step,
)

__all__ = [
    "BoostExposure",
    "FixedExposure",
    "PopularityExposure",
    "RegularExposure",
    "boost_update_mu",
    "build_targets",
    "fit_exposure",
    "fixed_exposure_p",
    "phi_social",
    "popularity_update_mu",
    "regular_mu",
    "sgd_triplet_step",
]
