//! Exact discrete model of target `X`, co-occurring object `Z`, mediator
//! `O = o(X, Z)` and per-class outcome `Y^k`, used to check the algebra
//! that turns the total direct effect into additive logit fusion.
//!
//! Index 0 of `X` and `Z` is the factual value (`x`, `z`); index 1 is the
//! masked value (`x0`, `z0`).

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

pub const FACTUAL: usize = 0;
pub const MASKED: usize = 1;

const JOINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    /// `joint[x][z] = P(X = x, Z = z)`.
    pub joint: [[f64; 2]; 2],
    /// `mediator[x][z] = o(x, z)`, an index into `0..mediator_values`.
    pub mediator: [[usize; 2]; 2],
    pub mediator_values: usize,
    /// `outcome[[k, x, o]] = P(Y^k = 1 | X = x, O = o)`.
    pub outcome: Array3<f64>,
}

impl DiscreteScm {
    pub fn classes(&self) -> usize {
        self.outcome.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let flat = self.joint.iter().flatten();
        if flat.clone().any(|&p| !(p >= 0.0)) {
            return Err(Error::Model("joint probabilities must be nonnegative".into()));
        }
        let total: f64 = flat.sum();
        if (total - 1.0).abs() > JOINT_TOL {
            return Err(Error::Model(format!("joint probabilities sum to {total}")));
        }
        let (_, xs, os) = self.outcome.dim();
        if xs != 2 || os != self.mediator_values {
            return Err(Error::Model(format!(
                "outcome table is {:?}, expected (_, 2, {})",
                self.outcome.dim(),
                self.mediator_values
            )));
        }
        if self.mediator.iter().flatten().any(|&o| o >= self.mediator_values) {
            return Err(Error::Model("mediator value outside its table".into()));
        }
        if self.outcome.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Model("outcome probabilities must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// `P(Y^k = 1 | X = x, O = o(mx, mz))`: the outcome for `x` with the
    /// mediator held at the value it takes under `(mx, mz)`.
    pub fn outcome_with_mediator(&self, k: usize, x: usize, mx: usize, mz: usize) -> Result<f64> {
        if k >= self.classes() {
            return Err(Error::Model(format!("class {k} has no outcome table")));
        }
        let o = self.mediator[mx][mz];
        self.outcome
            .get([k, x, o])
            .copied()
            .ok_or_else(|| Error::Model(format!("no outcome entry for x={x}, o={o}")))
    }
}

/// `P(Y|x, o(x,z)) - P(Y|x0, o(x,z))`.
pub fn tde_exact(scm: &DiscreteScm, k: usize) -> Result<f64> {
    let factual = scm.outcome_with_mediator(k, FACTUAL, FACTUAL, FACTUAL)?;
    let masked = scm.outcome_with_mediator(k, MASKED, FACTUAL, FACTUAL)?;
    Ok(factual - masked)
}

/// `P(Y|x, o(x,z)) + lambda * P(Y|x, o(x,z0))`.
pub fn tde_transformed(scm: &DiscreteScm, k: usize, lambda: f64) -> Result<f64> {
    let (t1, t2) = fusion_terms(scm, k)?;
    Ok(t1 + lambda * t2)
}

fn fusion_terms(scm: &DiscreteScm, k: usize) -> Result<(f64, f64)> {
    Ok((
        scm.outcome_with_mediator(k, FACTUAL, FACTUAL, FACTUAL)?,
        scm.outcome_with_mediator(k, FACTUAL, FACTUAL, MASKED)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdeReport {
    pub tde_direct: f64,
    pub term1: f64,
    pub term2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `None` when `alpha == 1`.
    pub lambda: Option<f64>,
    /// `1 - alpha`; the fused score only ranks like the effect when this is positive.
    pub scale: f64,
    pub premise_residual: f64,
    pub chain_residual: f64,
    pub degenerate: bool,
}

/// Evaluates every quantity of the decomposition
///
/// ```text
/// alpha = P(x,z) / P(x0,z)     beta = P(x,z0) / P(x0,z)     lambda = beta / (1 - alpha)
/// TDE   = (1 - alpha) * (P(Y|x,z) + lambda * P(Y|x,z0))
/// ```
///
/// which holds whenever the premise
/// `P(Y|x0,z) P(x0,z) = P(Y|x,z) P(x,z) - P(Y|x,z0) P(x,z0)` does. Both
/// the premise and the final identity are reported as residuals. When
/// `alpha == 1` the identity is checked in its `beta` form instead.
pub fn tde_chain_check(scm: &DiscreteScm, k: usize) -> Result<TdeReport> {
    scm.validate()?;
    let p_x0z = scm.joint[MASKED][FACTUAL];
    if !(p_x0z > 0.0) {
        return Err(Error::Model("P(x0, z) must be positive".into()));
    }
    let p_xz = scm.joint[FACTUAL][FACTUAL];
    let p_xz0 = scm.joint[FACTUAL][MASKED];
    let (term1, term2) = fusion_terms(scm, k)?;
    let masked = scm.outcome_with_mediator(k, MASKED, FACTUAL, FACTUAL)?;
    let tde_direct = term1 - masked;

    let alpha = p_xz / p_x0z;
    let beta = p_xz0 / p_x0z;
    let scale = 1.0 - alpha;
    let degenerate = scale == 0.0;
    let lambda = (!degenerate).then(|| beta / scale);
    let predicted = match lambda {
        Some(l) => scale * (term1 + l * term2),
        None => beta * term2,
    };
    Ok(TdeReport {
        tde_direct,
        term1,
        term2,
        alpha,
        beta,
        lambda,
        scale,
        premise_residual: (masked * p_x0z - (term1 * p_xz - term2 * p_xz0)).abs(),
        chain_residual: (tde_direct - predicted).abs(),
        degenerate,
    })
}

fn random_joint<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 2]; 2] {
    // normalized exponentials are uniform on the simplex
    let e: [f64; 4] = std::array::from_fn(|_| Exp1.sample(rng));
    let total: f64 = e.iter().sum();
    [[e[0] / total, e[1] / total], [e[2] / total, e[3] / total]]
}

/// Uniform joint, random mediator map and uniform outcome tables.
pub fn random_scm<R: Rng + ?Sized>(rng: &mut R, classes: usize, mediator_values: usize) -> DiscreteScm {
    let mediator_values = mediator_values.max(1);
    let joint = random_joint(rng);
    let mediator = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0..mediator_values)));
    let outcome = Array3::from_shape_simple_fn((classes, 2, mediator_values), || rng.random::<f64>());
    DiscreteScm {
        joint,
        mediator,
        mediator_values,
        outcome,
    }
}

/// A random model whose masked outcome entries are solved from the premise,
/// resampling until every solved entry lands in `[0,1]`.
///
/// The masked entry `(x0, o(x,z))` must be distinct from the two factual
/// entries it is solved from, which holds because they differ in `X`.
pub fn premise_scm<R: Rng + ?Sized>(
    rng: &mut R,
    classes: usize,
    mediator_values: usize,
    max_attempts: usize,
) -> Result<DiscreteScm> {
    for _ in 0..max_attempts {
        let mut scm = random_scm(rng, classes, mediator_values);
        let [[p_xz, p_xz0], [p_x0z, _]] = scm.joint;
        let o = scm.mediator[FACTUAL][FACTUAL];
        let o0 = scm.mediator[FACTUAL][MASKED];
        let mut ok = p_x0z > 0.0;
        for k in 0..classes {
            let t1 = scm.outcome[[k, FACTUAL, o]];
            let t2 = scm.outcome[[k, FACTUAL, o0]];
            let solved = (t1 * p_xz - t2 * p_xz0) / p_x0z;
            if !(0.0..=1.0).contains(&solved) {
                ok = false;
                break;
            }
            scm.outcome[[k, MASKED, o]] = solved;
        }
        if ok {
            return Ok(scm);
        }
    }
    Err(Error::Generation(format!(
        "no premise-satisfying model found in {max_attempts} attempts"
    )))
}
