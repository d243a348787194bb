//! Fisher-information approximations of the denoiser: diagonal, K-FAC and
//! eigenvalue-corrected K-FAC, with damped inverse products and a dense oracle.

mod approx;
mod estimate;

pub use approx::{fisher_inv_vprod, fisher_vprod, FisherApprox, FisherKind, DEFAULT_RELATIVE_DAMPING};
pub use estimate::{
    brute_force_fisher, collect_samples, dense_from_samples, diag_from_samples, ekfac_correct, ekfac_from_samples,
    estimate_diag, estimate_kfac, kfac_eigen, kfac_from_samples, EigenBlock, FisherDiag, FisherPlan, KfacBlock,
    SampleStream, DENSE_LIMIT,
};
