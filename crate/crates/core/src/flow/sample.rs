//! Sequential inversion: dimension `i` is recovered once `x_{<i}` is known,
//! so the conditioner runs once per dimension over the whole batch.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::heads::shared_phi;
use super::{mix_name, BaseDistribution, FlowError, FlowModel, HeadType};
use crate::conditioner::{condition, project_head};
use crate::diffcore::{Tape, Tensor};
use crate::transforms::{
    affine_inv, cdf_inv, shared_cdf_inv, spline_inv, AffinePsi, CdfPsi, LowerMixL, SplinePsi, TransformError,
};

/// Bisection tolerance used when inverting CDF heads.
pub const INVERSION_TOL: f64 = 1e-6;

/// `n` independent base draws, row-major `[n, D]`.
pub fn draw_base(base: BaseDistribution, n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim)
        .map(|_| match base {
            BaseDistribution::StandardNormal => rng.sample::<f64, _>(StandardNormal),
            BaseDistribution::UnitUniform => rng.sample::<f64, _>(Open01),
        })
        .collect();
    Tensor::matrix(n, dim, data).expect("shape")
}

/// Redraws allowed per coordinate when a uniform draw falls outside the
/// image of a CDF head.
pub const MAX_REDRAWS: usize = 1000;

/// Draw `n` samples; deterministic in `seed`.
pub fn sample(model: &FlowModel, n: usize, seed: u64) -> Result<Tensor, FlowError> {
    Ok(sample_with_noise(model, n, seed)?.0)
}

/// Samples together with the base noise they were produced from.
///
/// A CDF head maps the real line onto a strict sub-interval of (0, 1). A
/// uniform draw outside that interval has no preimage, so it is redrawn from
/// a separate seeded stream; the result follows the model density
/// renormalized per dimension.
pub fn sample_with_noise(model: &FlowModel, n: usize, seed: u64) -> Result<(Tensor, Tensor), FlowError> {
    if n == 0 {
        return Err(FlowError::Config("sample count must be at least 1".into()));
    }
    let mut noise = draw_base(model.base(), n, model.dim(), seed);
    let mut redraw = ChaCha8Rng::seed_from_u64(seed);
    redraw.set_stream(1);
    let x = invert_with(model, &mut noise, Some(&mut redraw))?;
    Ok((x, noise))
}

/// Per-position pseudo-parameter rows for one conditioner pass.
struct Pass {
    /// One `[N·D, width]` buffer per projection head (hidden rows for the
    /// shared CDF head).
    outputs: Vec<Tensor>,
}

impl Pass {
    fn row(&self, head: usize, sample: usize, dim: usize, pos: usize) -> &[f64] {
        self.outputs[head].row(sample * dim + pos)
    }
}

fn run_pass(model: &FlowModel, x: &Tensor) -> Result<Pass, FlowError> {
    let cond = model.config.conditioner();
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let hidden = condition(&mut tape, &bound, &cond, x)?;
    let count = match model.head_type() {
        HeadType::Spline => model.config.spline_blocks,
        _ => 1,
    };
    let mut outputs = Vec::with_capacity(count);
    for j in 0..count {
        let psi = project_head(&mut tape, &bound, &cond, hidden, j)?;
        outputs.push(tape.value(psi).clone());
    }
    Ok(Pass { outputs })
}

/// Inverse of the flow: maps base points `y: [N, D]` back to data space.
pub fn invert(model: &FlowModel, y: &Tensor) -> Result<Tensor, FlowError> {
    invert_with(model, &mut y.clone(), None)
}

fn invert_with(model: &FlowModel, y: &mut Tensor, mut redraw: Option<&mut ChaCha8Rng>) -> Result<Tensor, FlowError> {
    let d = model.dim();
    if y.rank() != 2 || y.shape()[1] != d {
        return Err(FlowError::Invariant(format!("inverse input has shape {:?}", y.shape())));
    }
    let n = y.shape()[0];
    let cfg = &model.config;
    let phi = (model.head_type() == HeadType::SharedCdf).then(|| shared_phi(&model.params));
    let mixes: Vec<LowerMixL> = if model.head_type() == HeadType::Spline && d > 1 {
        (0..cfg.spline_blocks)
            .map(|j| LowerMixL::new(d, model.params.value(&mix_name(j)).data().to_vec()))
            .collect()
    } else {
        Vec::new()
    };
    // Spline outputs per sample, block and dimension, needed to undo mixing.
    let mut levels = vec![vec![vec![0.0; d]; cfg.spline_blocks]; n];

    let mut x = Tensor::zeros(&[n, d]);
    for i in 0..d {
        let pass = run_pass(model, &x)?;
        for s in 0..n {
            let mut attempts = 0;
            let xi = loop {
                let target = y.at(s, i);
                let result = match model.head_type() {
                    HeadType::Affine => {
                        let psi = pass.row(0, s, d, i);
                        let psi = AffinePsi {
                            mu: psi[0],
                            log_sigma: psi[1],
                        };
                        Ok(affine_inv(target, &psi))
                    }
                    HeadType::Cdf => cdf_inv(target, &CdfPsi::from_slice(pass.row(0, s, d, i)), INVERSION_TOL),
                    HeadType::SharedCdf => shared_cdf_inv(
                        target,
                        pass.row(0, s, d, i),
                        phi.as_ref().expect("shared weights"),
                        INVERSION_TOL,
                    ),
                    HeadType::Spline => invert_spline_stack(target, &pass, &mut levels[s], &mixes, cfg, s, i),
                };
                match (result, redraw.as_deref_mut()) {
                    (Ok(v), _) => break v,
                    (Err(TransformError::BracketNotFound { .. }), Some(rng)) if attempts < MAX_REDRAWS => {
                        attempts += 1;
                        y.data_mut()[s * d + i] = rng.sample::<f64, _>(Open01);
                    }
                    (Err(source), _) => return Err(FlowError::Inversion { index: s, source }),
                }
            };
            x.data_mut()[s * d + i] = xi;
        }
    }
    Ok(x)
}

/// Undo the blocks from last to first. `levels[j][k]` holds the spline output
/// of block `j` at dimension `k`; entries below `pos` are already known.
fn invert_spline_stack(
    target: f64,
    pass: &Pass,
    levels: &mut [Vec<f64>],
    mixes: &[LowerMixL],
    cfg: &super::FlowConfig,
    sample: usize,
    pos: usize,
) -> Result<f64, TransformError> {
    let mut t = target;
    for j in (0..cfg.spline_blocks).rev() {
        let level = &mut levels[j];
        if let Some(l) = mixes.get(j) {
            t -= (0..pos).map(|k| l.get(pos, k) * level[k]).sum::<f64>();
        }
        level[pos] = t;
        let psi = SplinePsi::from_slice(pass.row(j, sample, cfg.dim, pos), cfg.spline_bins, cfg.spline_bound);
        t = spline_inv(t, &psi)?;
    }
    Ok(t)
}
