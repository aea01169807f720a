from .common import (AGENT, CRITIC, DEFAULT, LearnerConfig, LearnerState, apply_gradients, critic_spec,
                     make_learner_state)
from .distill import DistillBatch, distill_batch_from_segments, distill_gradients, distill_update
from .svg0 import SVGNoise, draw_noise, kstep_targets, onpolicy_update, policy_objective, svg0_pass, svg0_update
from .vtrace import discrete_vtrace_update, latent_sources, vtrace_pass

__all__ = [
    "AGENT", "CRITIC", "DEFAULT", "LearnerConfig", "LearnerState", "apply_gradients", "critic_spec",
    "make_learner_state", "DistillBatch", "distill_batch_from_segments", "distill_gradients", "distill_update",
    "SVGNoise", "draw_noise", "kstep_targets", "onpolicy_update", "policy_objective", "svg0_pass", "svg0_update",
    "discrete_vtrace_update", "latent_sources", "vtrace_pass",
]
