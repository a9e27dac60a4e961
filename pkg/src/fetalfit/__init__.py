"""Diffusion-relaxation model fitting, texture analysis and cohort statistics
for fetal and placental MRI, with a synthetic phantom for validation."""

__version__ = "0.1.0"

from .models import MODELS, get_model  # noqa: F401
from .volume_io import AcquisitionProtocol, FeatureTable, OrganMask, SubjectRecord, Volume4D  # noqa: F401
