//! Analytic-versus-numeric gradient comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{HeadGrads, Network, Record};
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar objective over the outputs of a forward pass.
pub trait Objective {
    /// Loss value and its gradient with respect to head outputs.
    fn evaluate(&self, record: &Record) -> Result<(f64, HeadGrads)>;
}

impl<F> Objective for F
where
    F: Fn(&Record) -> Result<(f64, HeadGrads)>,
{
    fn evaluate(&self, record: &Record) -> Result<(f64, HeadGrads)> {
        self(record)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Parameters checked per block (all of them when the block is smaller).
    pub samples_per_block: usize,
    pub seed: u64,
    /// Times the step is divided by 10 when a perturbation crosses a
    /// ReLU or max-pool switch.
    pub max_refinements: u32,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-3,
            tolerance: 1e-4,
            samples_per_block: 12,
            seed: 0,
            max_refinements: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub block: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Samples whose perturbation crossed a switch at the base step.
    pub refined: usize,
    /// Samples that still crossed a switch at the smallest step; excluded.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare backward-pass gradients against central finite differences on a
/// seeded subsample of every parameter block. Passes iff every relative
/// error is strictly below the tolerance.
///
/// A sample whose perturbation flips a ReLU or max-pool decision sits on a
/// kink where the finite difference is meaningless; it is retried with the
/// step divided by 10, up to `max_refinements` times, then skipped.
pub fn gradcheck(
    net: &mut Network,
    objective: &dyn Objective,
    input: &Tensor,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    net.zero_grad();
    let record = net.forward(input)?;
    let (_, head_grads) = objective.evaluate(&record)?;
    net.backward(&record, &head_grads)?;
    let analytic: Vec<(String, Vec<f64>)> = net
        .params()
        .into_iter()
        .map(|(name, _, g)| (name, g.data().to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut blocks = Vec::new();
    for (block, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let picks: Vec<usize> = if n <= opts.samples_per_block {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.samples_per_block).into_vec()
        };
        let mut worst = 0.0f64;
        let (mut refined, mut skipped) = (0, 0);
        for &i in &picks {
            let mut step = opts.step;
            let mut tries = 0;
            loop {
                let (numeric, smooth) = central_difference(net, objective, input, &record, block, i, step)?;
                if smooth {
                    worst = worst.max(relative_error(grads[i], numeric));
                    break;
                }
                if tries == 0 {
                    refined += 1;
                }
                if tries == opts.max_refinements {
                    skipped += 1;
                    break;
                }
                tries += 1;
                step /= 10.0;
            }
        }
        blocks.push(BlockError {
            block: name.clone(),
            checked: picks.len() - skipped,
            max_rel_error: worst,
            refined,
            skipped,
        });
    }
    let passed = opts.tolerance > 0.0
        && blocks
            .iter()
            .all(|b| b.max_rel_error < opts.tolerance && (b.checked > 0 || b.skipped == 0));
    Ok(GradcheckReport {
        blocks,
        tolerance: opts.tolerance,
        passed,
    })
}

/// Central difference of one parameter, and whether both perturbed passes
/// took the same ReLU/max-pool branches as the unperturbed `base` pass.
fn central_difference(
    net: &mut Network,
    objective: &dyn Objective,
    input: &Tensor,
    base: &Record,
    block: usize,
    index: usize,
    step: f64,
) -> Result<(f64, bool)> {
    let original = net.params()[block].1.data()[index];
    let mut loss_at = |value: f64| -> Result<(f64, bool)> {
        net.params_mut()[block].0.data_mut()[index] = value;
        let rec = net.forward(input)?;
        let smooth = net.same_branches(base, &rec);
        Ok((objective.evaluate(&rec)?.0, smooth))
    };
    let plus = loss_at(original + step);
    let minus = loss_at(original - step);
    net.params_mut()[block].0.data_mut()[index] = original;
    let ((plus, s1), (minus, s2)) = (plus?, minus?);
    Ok(((plus - minus) / (2.0 * step), s1 && s2))
}
