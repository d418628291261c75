//! Temporal aggregation layers.
//!
//! Posterior pooling treats the frame estimates `z_t` as noisy observations
//! `z_t = h + ε_t` of one utterance-level latent `h` with a Gaussian prior
//! `N(μ_p, L_p⁻¹)` and per-frame noise `N(0, L_t⁻¹)`. With diagonal
//! precisions the posterior mean is a per-dimension convex combination of
//! the prior mean and the frames, weighted by the gains
//! `A_t[i] = L_t[i] / Σ_{t'} L_t'[i]`, with the prior taking index `t = 0`.
//! Since the encoder emits log-precisions, the gains are a softmax over the
//! temporal axis and the posterior log-precision is a log-sum-exp.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower bound on variances before taking a square root; keeps σ ≥ 1e-10.
pub const VARIANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    Full,
    NoPrior,
    Isotropic,
    NoPriorIsotropic,
}

impl PosteriorKind {
    pub fn uses_prior(self) -> bool {
        matches!(self, PosteriorKind::Full | PosteriorKind::Isotropic)
    }

    pub fn isotropic(self) -> bool {
        matches!(self, PosteriorKind::Isotropic | PosteriorKind::NoPriorIsotropic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolingMode {
    pub kind: PosteriorKind,
    /// Append the gain-weighted standard deviation to the posterior mean.
    pub with_weighted_std: bool,
}

impl PoolingMode {
    pub const fn new(kind: PosteriorKind, with_weighted_std: bool) -> Self {
        PoolingMode {
            kind,
            with_weighted_std,
        }
    }
}

/// Which temporal pooling a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Frame mean, optionally followed by the frame standard deviation.
    Statistics { with_std: bool },
    /// Gaussian posterior mean using the predicted frame precisions.
    Posterior(PoolingMode),
}

impl Pooling {
    pub const XVECTOR: Pooling = Pooling::Statistics { with_std: true };
    pub const XIVECTOR: Pooling = Pooling::Posterior(PoolingMode::new(PosteriorKind::Full, false));

    pub fn output_dim(self, d: usize) -> usize {
        match self {
            Pooling::Statistics { with_std: true } => 2 * d,
            Pooling::Statistics { with_std: false } => d,
            Pooling::Posterior(m) if m.with_weighted_std => 2 * d,
            Pooling::Posterior(_) => d,
        }
    }

    pub fn has_uncertainty_head(self) -> bool {
        matches!(self, Pooling::Posterior(_))
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, Pooling::Posterior(m) if m.kind.uses_prior())
    }

    pub fn isotropic(self) -> bool {
        matches!(self, Pooling::Posterior(m) if m.kind.isotropic())
    }

    /// Short system name used in configs and result tables.
    pub fn name(self) -> &'static str {
        use PosteriorKind::*;
        match self {
            Pooling::Statistics { with_std: true } => "xvector",
            Pooling::Statistics { with_std: false } => "xvector_mu",
            Pooling::Posterior(PoolingMode { kind, with_weighted_std: s }) => match (kind, s) {
                (Full, false) => "xivector",
                (Full, true) => "xivector_sigma",
                (NoPrior, false) => "no_prior",
                (NoPrior, true) => "no_prior_sigma",
                (NoPriorIsotropic, false) => "isotropic",
                (NoPriorIsotropic, true) => "isotropic_sigma",
                (Isotropic, false) => "isotropic_prior",
                (Isotropic, true) => "isotropic_prior_sigma",
            },
        }
    }

    pub const ALL: [Pooling; 10] = {
        use PosteriorKind::*;
        [
            Pooling::Statistics { with_std: true },
            Pooling::Statistics { with_std: false },
            Pooling::Posterior(PoolingMode::new(Full, false)),
            Pooling::Posterior(PoolingMode::new(Full, true)),
            Pooling::Posterior(PoolingMode::new(NoPrior, false)),
            Pooling::Posterior(PoolingMode::new(NoPrior, true)),
            Pooling::Posterior(PoolingMode::new(NoPriorIsotropic, false)),
            Pooling::Posterior(PoolingMode::new(NoPriorIsotropic, true)),
            Pooling::Posterior(PoolingMode::new(Isotropic, false)),
            Pooling::Posterior(PoolingMode::new(Isotropic, true)),
        ]
    };
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown pooling system `{s}`")))
    }
}

/// Trainable Gaussian prior on the utterance latent, `[D]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub mean: Tensor,
    pub log_precision: Tensor,
}

impl PriorParams {
    pub fn zeros(dim: usize) -> Self {
        PriorParams {
            mean: Tensor::zeros(&[dim]),
            log_precision: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledPosterior {
    /// Posterior mean `[D]`.
    pub phi: Tensor,
    /// Posterior log-precision `[D]`.
    pub log_precision: Tensor,
}

/// Prior parameters placed on a tape as `[1×D]` rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PriorVars {
    pub mean: Var,
    pub log_precision: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PosteriorVars {
    /// `[1×D]`
    pub phi: Var,
    /// `[1×D]`
    pub log_precision: Var,
    /// `[(T+1)×D]` with the prior row, `[T×D]` without.
    pub gains: Var,
    /// Frame estimates stacked to match `gains` (prior mean as row 0).
    pub points: Var,
}

fn check_pair(z: &Tensor, log_precision: &Tensor, op: &'static str) -> Result<()> {
    if z.shape().len() != 2 || z.shape() != log_precision.shape() {
        return Err(Error::dim(
            op,
            format!("z {:?} vs log-precision {:?}", z.shape(), log_precision.shape()),
        ));
    }
    Ok(())
}

/// Gains and stacked points, prepending the prior as row 0 when present.
pub(crate) fn gains_on(
    tape: &mut Tape,
    z: Var,
    log_precision: Var,
    prior: Option<PriorVars>,
) -> Result<(Var, Var, Var)> {
    let (stacked_lp, points) = match prior {
        Some(p) => (
            tape.concat_rows(p.log_precision, log_precision)?,
            tape.concat_rows(p.mean, z)?,
        ),
        None => {
            if tape.value(log_precision).rows() == 0 {
                return Err(Error::EmptyPool("no frames and no prior"));
            }
            (log_precision, z)
        }
    };
    let gains = tape.softmax_axis(stacked_lp, 0)?;
    Ok((gains, points, stacked_lp))
}

pub(crate) fn posterior_on(
    tape: &mut Tape,
    z: Var,
    log_precision: Var,
    prior: Option<PriorVars>,
) -> Result<PosteriorVars> {
    let (gains, points, stacked_lp) = gains_on(tape, z, log_precision, prior)?;
    let weighted = tape.mul(gains, points)?;
    let phi = tape.sum_axis(weighted, 0)?;
    let log_precision = tape.logsumexp_axis(stacked_lp, 0)?;
    Ok(PosteriorVars {
        phi,
        log_precision,
        gains,
        points,
    })
}

/// `sqrt(Σ_t A_t z_t² − φ²)` per dimension.
pub(crate) fn weighted_std_on(tape: &mut Tape, post: &PosteriorVars) -> Result<Var> {
    let sq = tape.square(post.points)?;
    let weighted = tape.mul(post.gains, sq)?;
    let second = tape.sum_axis(weighted, 0)?;
    let phi_sq = tape.square(post.phi)?;
    let var = tape.sub(second, phi_sq)?;
    tape.sqrt_clamped(var, VARIANCE_FLOOR)
}

/// Frame mean and population standard deviation, each `[1×D]`.
pub(crate) fn stat_pool_on(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    if tape.value(z).rows() == 0 {
        return Err(Error::EmptyPool("statistics pooling needs at least one frame"));
    }
    let mu = tape.mean_axis(z, 0)?;
    let sq = tape.square(z)?;
    let second = tape.mean_axis(sq, 0)?;
    let mu_sq = tape.square(mu)?;
    let var = tape.sub(second, mu_sq)?;
    let sigma = tape.sqrt_clamped(var, VARIANCE_FLOOR)?;
    Ok((mu, sigma))
}

/// Pooled utterance vector `[1×output_dim]` for the configured pooling.
pub(crate) fn pool_on(
    tape: &mut Tape,
    pooling: Pooling,
    z: Var,
    log_precision: Option<Var>,
    prior: Option<PriorVars>,
) -> Result<Var> {
    match pooling {
        Pooling::Statistics { with_std } => {
            let (mu, sigma) = stat_pool_on(tape, z)?;
            if with_std {
                tape.concat_cols(mu, sigma)
            } else {
                Ok(mu)
            }
        }
        Pooling::Posterior(mode) => {
            let lp = log_precision
                .ok_or_else(|| Error::Config("posterior pooling needs log-precisions".into()))?;
            let prior = if mode.kind.uses_prior() { prior } else { None };
            if mode.kind.uses_prior() && prior.is_none() {
                return Err(Error::Config("pooling mode needs prior parameters".into()));
            }
            let post = posterior_on(tape, z, lp, prior)?;
            if mode.with_weighted_std {
                let sigma = weighted_std_on(tape, &post)?;
                tape.concat_cols(post.phi, sigma)
            } else {
                Ok(post.phi)
            }
        }
    }
}

fn prior_on(tape: &mut Tape, prior: &PriorParams, d: usize) -> Result<PriorVars> {
    if prior.mean.len() != d || prior.log_precision.len() != d {
        return Err(Error::dim(
            "prior",
            format!(
                "prior has {}/{} dims, frames have {d}",
                prior.mean.len(),
                prior.log_precision.len()
            ),
        ));
    }
    let mean = tape.constant(prior.mean.clone().reshape(vec![1, d])?)?;
    let log_precision = tape.constant(prior.log_precision.clone().reshape(vec![1, d])?)?;
    Ok(PriorVars {
        mean,
        log_precision,
    })
}

fn as_vector(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

/// Gain factors `[(T+1)×D]` (prior in row 0) or `[T×D]` for prior-free
/// modes. Every column sums to one.
pub fn gain_factors(log_precision: &Tensor, prior: &PriorParams, kind: PosteriorKind) -> Result<Tensor> {
    if log_precision.shape().len() != 2 {
        return Err(Error::dim("gain_factors", "log-precisions must be [T×D]"));
    }
    let d = log_precision.cols();
    let mut tape = Tape::new();
    let lp = tape.constant(log_precision.clone())?;
    let z = tape.constant(Tensor::zeros(log_precision.shape()))?;
    let prior = if kind.uses_prior() {
        Some(prior_on(&mut tape, prior, d)?)
    } else {
        None
    };
    let (gains, _, _) = gains_on(&mut tape, z, lp, prior)?;
    Ok(tape.value(gains).clone())
}

pub fn gaussian_posterior_pool(
    enc: &EncoderOutput,
    prior: &PriorParams,
    kind: PosteriorKind,
) -> Result<PooledPosterior> {
    check_pair(&enc.z, &enc.log_precision, "gaussian_posterior_pool")?;
    let d = enc.z.cols();
    let mut tape = Tape::new();
    let z = tape.constant(enc.z.clone())?;
    let lp = tape.constant(enc.log_precision.clone())?;
    let prior = if kind.uses_prior() {
        Some(prior_on(&mut tape, prior, d)?)
    } else {
        None
    };
    let post = posterior_on(&mut tape, z, lp, prior)?;
    Ok(PooledPosterior {
        phi: as_vector(tape.value(post.phi)),
        log_precision: as_vector(tape.value(post.log_precision)),
    })
}

/// Frame mean and population standard deviation (floored at 1e-10).
pub fn stat_pool(z: &Tensor) -> Result<(Tensor, Tensor)> {
    if z.shape().len() != 2 {
        return Err(Error::dim("stat_pool", "frames must be [T×D]"));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let (mu, sigma) = stat_pool_on(&mut tape, zv)?;
    Ok((as_vector(tape.value(mu)), as_vector(tape.value(sigma))))
}

/// Gain-weighted standard deviation `[D]`.
///
/// `gains` comes from [`gain_factors`] over the same frames. When it has one
/// more row than `z`, row 0 belongs to the prior and `prior_mean` supplies
/// the matching point.
pub fn weighted_std(z: &Tensor, gains: &Tensor, prior_mean: Option<&Tensor>) -> Result<Tensor> {
    if z.shape().len() != 2 || gains.shape().len() != 2 || z.cols() != gains.cols() {
        return Err(Error::dim(
            "weighted_std",
            format!("z {:?} vs gains {:?}", z.shape(), gains.shape()),
        ));
    }
    let d = z.cols();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let points = if gains.rows() == z.rows() + 1 {
        let mean = prior_mean.ok_or_else(|| {
            Error::dim("weighted_std", "gains include a prior row but no prior mean given")
        })?;
        if mean.len() != d {
            return Err(Error::dim("weighted_std", "prior mean dimension"));
        }
        let m = tape.constant(mean.clone().reshape(vec![1, d])?)?;
        tape.concat_rows(m, zv)?
    } else if gains.rows() == z.rows() {
        zv
    } else {
        return Err(Error::dim(
            "weighted_std",
            format!("{} gain rows for {} frames", gains.rows(), z.rows()),
        ));
    };
    let gv = tape.constant(gains.clone())?;
    let weighted = tape.mul(gv, points)?;
    let phi = tape.sum_axis(weighted, 0)?;
    let post = PosteriorVars {
        phi,
        log_precision: phi,
        gains: gv,
        points,
    };
    let sigma = weighted_std_on(&mut tape, &post)?;
    Ok(as_vector(tape.value(sigma)))
}
