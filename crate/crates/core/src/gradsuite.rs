//! Finite-difference suite over every loss and both networks.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{geometric_scales, pad_box, BoxTransform};
use crate::losses::{segmentation_loss, smooth_l1, softmax_ce};
use crate::pipeline::{crop_warp, BcnObjective, PipelineConfig, RpnObjective};
use crate::supervision::{proposal_mask, WeakMask};
use crate::synthdata::{generate_scene, SceneConfig};
use crate::tinynet::arch::{build_bcn, build_rpn};
use crate::tinynet::gradcheck::{gradcheck, relative_error, GradcheckOptions};
use crate::tinynet::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

struct Acc {
    name: String,
    checked: usize,
    worst: f64,
}

impl Acc {
    fn new(name: &str) -> Self {
        Acc { name: name.into(), checked: 0, worst: 0.0 }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.worst = self.worst.max(relative_error(analytic, numeric));
    }

    fn done(self) -> SuiteEntry {
        SuiteEntry { name: self.name, checked: self.checked, max_rel_error: self.worst }
    }
}

const STEP: f64 = 1e-5;

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> SuiteEntry {
    let mut acc = Acc::new("softmax_ce");
    for _ in 0..50 {
        let logits = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        let label = rng.random_range(0..2usize);
        let weight = rng.random_range(0.5..3.0);
        let (_, g) = softmax_ce(logits, label, weight);
        for k in 0..2 {
            let mut f = |v: f64| {
                let mut l = logits;
                l[k] = v;
                softmax_ce(l, label, weight).0
            };
            acc.push(g[k], central(&mut f, logits[k], STEP));
        }
    }
    acc.done()
}

fn check_smooth_l1(rng: &mut ChaCha8Rng) -> SuiteEntry {
    let mut acc = Acc::new("smooth_l1");
    for _ in 0..50 {
        let t = BoxTransform::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        // keep every residual off the |d| = 1 kink
        let p = BoxTransform::from_array(std::array::from_fn(|k| {
            let d = loop {
                let d: f64 = rng.random_range(-3.0..3.0);
                if (d.abs() - 1.0).abs() > 1e-3 {
                    break d;
                }
            };
            t.as_array()[k] + d
        }));
        let (_, g) = smooth_l1(&p, &t);
        for k in 0..4 {
            let mut f = |v: f64| {
                let mut a = p.as_array();
                a[k] = v;
                smooth_l1(&BoxTransform::from_array(a), &t).0
            };
            acc.push(g[k], central(&mut f, p.as_array()[k], STEP));
        }
    }
    acc.done()
}

fn check_segmentation_loss(rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let mut acc = Acc::new("segmentation_loss");
    for _ in 0..5 {
        let (h, w) = (rng.random_range(2..7usize), rng.random_range(2..7usize));
        let mut mask = WeakMask::empty(w, h);
        for k in 0..w * h {
            mask.values[k] = rng.random_range(0..2u8);
            mask.weights[k] = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(1.0..2.5) };
        }
        let logits = Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rng.random_range(-4.0..4.0)).collect())?;
        let (_, g) = segmentation_loss(&logits, &mask)?;
        for k in 0..logits.len() {
            let mut f = |v: f64| {
                let mut l = logits.clone();
                l.data_mut()[k] = v;
                segmentation_loss(&l, &mask).map(|r| r.0).unwrap_or(f64::NAN)
            };
            acc.push(g.data()[k], central(&mut f, logits.data()[k], STEP));
        }
    }
    Ok(acc.done())
}

fn suite_scene(w: usize, h: usize, seed: u64) -> Result<(crate::image::GrayImage, Vec<crate::supervision::Annotation>)> {
    let cfg = SceneConfig {
        image_w: w,
        image_h: h,
        min_height: 24.0,
        max_height: 60.0,
        min_pedestrians: 1,
        max_pedestrians: 2,
        seed,
        ..Default::default()
    };
    generate_scene(&cfg, "gradcheck", 0)
}

fn network_entry(name: &str, reports: &[crate::tinynet::gradcheck::GradcheckReport]) -> SuiteEntry {
    let mut acc = Acc::new(name);
    for r in reports {
        for b in &r.blocks {
            acc.checked += b.checked;
            acc.worst = acc.worst.max(b.max_rel_error);
        }
    }
    acc.done()
}

/// Every layer of the proposal network (trunk, proposal and segmentation
/// heads) under the proposal-stage joint loss.
fn check_rpn(cfg: &PipelineConfig, seed: u64, opts: &GradcheckOptions) -> Result<SuiteEntry> {
    let mut reports = Vec::new();
    for s in 0..2 {
        let (img, gts) = suite_scene(64, 64, seed + s)?;
        let grid = cfg.anchor_grid(64, 64)?;
        let objective = RpnObjective::new(&grid, &gts, cfg, Some(40.0), seed + s);
        let mut net = build_rpn(&cfg.arch, cfg.num_anchors(), seed + s)?;
        reports.push(gradcheck(&mut net, &objective, &img.to_tensor(), opts)?);
    }
    Ok(network_entry("rpn_joint_loss", &reports))
}

/// Every layer of the classifier network under the classifier-stage joint
/// loss, for a foreground and a background crop.
fn check_bcn(cfg: &PipelineConfig, seed: u64, opts: &GradcheckOptions) -> Result<SuiteEntry> {
    let size = cfg.arch.bcn_input;
    let mut reports = Vec::new();
    for label in 0..2 {
        let (img, gts) = suite_scene(size, size, seed + label as u64)?;
        let crop = crop_warp(&img.to_tensor(), &gts[0].bbox, cfg.pad_fraction, size)?;
        let region = pad_box(&gts[0].bbox, cfg.pad_fraction, size as f64, size as f64).unwrap_or(gts[0].bbox);
        let mask = proposal_mask(&region, &gts, cfg.arch.bcn_grid(), Some(40.0));
        let objective = BcnObjective {
            label,
            cost_weight: 1.0 + gts[0].bbox.h / 40.0,
            active_cells: mask.active_cells(),
            mask,
            weights: cfg.bcn_weights,
            crops: 3,
        };
        let mut net = build_bcn(&cfg.arch, seed + label as u64)?;
        reports.push(gradcheck(&mut net, &objective, &crop, opts)?);
    }
    Ok(network_entry("bcn_joint_loss", &reports))
}

/// Runs all checks with the architecture and loss weights of `cfg`. The
/// proposal network uses three small anchor scales so that 64x64 scenes hold
/// foreground anchors.
pub fn run_suite(cfg: &PipelineConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions { tolerance: TOLERANCE, seed, ..Default::default() };
    let rpn_cfg = PipelineConfig { anchor_scales: geometric_scales(24.0, 64.0, 3), ..cfg.clone() };
    Ok(vec![
        check_softmax_ce(&mut rng),
        check_smooth_l1(&mut rng),
        check_segmentation_loss(&mut rng)?,
        check_rpn(&rpn_cfg, seed, &opts)?,
        check_bcn(cfg, seed, &opts)?,
    ])
}
