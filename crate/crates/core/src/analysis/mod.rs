//! Properties of solved fields: invariance of sublevel sets, recoverability
//! of the data density, control Lyapunov functions and audits of the
//! approximation bounds.

mod bounds;
mod clf;
mod invariance;
mod recoverability;

pub use bounds::{
    audit_fqi_bound, audit_reward_bound, audit_rollout_guarantee, best_reachable_density, fitted_residuals,
    greedy_density_trace, measure_eps_p, measure_eps_r, p_norm, rollout_lower_bound, sup_norm, BoundAudit,
    FqiBoundForm, FqiBoundInput, RewardAudit, RewardBoundInput, RolloutAudit, RolloutBoundInput, AUDIT_SLACK,
};
pub use clf::{extract_clf, ClfField, ClfReport};
pub use invariance::{verify_invariance, InvarianceReport};
pub use recoverability::{compute_recoverability, RecoverabilityReport};
