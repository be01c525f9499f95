"""TCP rollout fabric: environment servers and the learner-side pool."""
