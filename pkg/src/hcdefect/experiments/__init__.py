from .campaigns import (CAMPAIGNS, CampaignResult, Context, run_all, run_decay_study, run_defect_convergence,
                        run_essential_spectrum_check, run_gap_scan, run_homogenize)
from .config import ExperimentConfig
from .records import Assertion, RunManifest

__all__ = ["CAMPAIGNS", "Assertion", "CampaignResult", "Context", "ExperimentConfig", "RunManifest", "run_all",
           "run_decay_study", "run_defect_convergence", "run_essential_spectrum_check", "run_gap_scan",
           "run_homogenize"]
