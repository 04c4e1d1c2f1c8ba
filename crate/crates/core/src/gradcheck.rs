//! Finite-difference verification of every parameter group's gradient.

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::GradBuffer;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Predictions closer than this to their label sit near the kink of |·|.
pub const KINK_MARGIN: f64 = 1e-2;
/// Entries whose analytic and numeric gradients are both below this magnitude
/// are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
    /// Analytic and numeric values of the entry with the largest error.
    pub worst: (f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub groups: Vec<GroupCheck>,
    /// Smallest |prediction − label| over all checked terms.
    pub min_kink_distance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tolerance: 1e-4,
            step: FD_STEP,
            samples: 3,
            seed: 0,
        }
    }
}

/// Rejects configs too large for an exhaustive check.
pub fn check_tiny(cfg: &ModelConfig) -> Result<()> {
    let l = cfg.validate()?;
    let d = cfg.width();
    if d > 8 || l > 4 || cfg.xadjust.blocks_per_stage != 1 {
        return Err(Error::Config(format!(
            "gradcheck needs a tiny model (d <= 8, l <= 4, one block per stage); got d = {d}, l = {l}, blocks = {}",
            cfg.xadjust.blocks_per_stage
        )));
    }
    Ok(())
}

/// Relative error of one entry.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of the mean joint loss on a few synthetic
/// records against central differences, in double precision and with
/// dropout disabled. Labels are pushed to 2.5 and −2.0 so every L1 term stays
/// away from its kink.
pub fn gradcheck(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    check_tiny(cfg)?;
    let mut model = Model::<f64>::new(cfg.clone(), opts.seed)?;
    let mut data = generate_synthetic(&SyntheticSpec {
        n_records: opts.samples.max(1),
        text_len: (cfg.input.text_len, cfg.input.text_len),
        audio_len: (cfg.input.audio_len, cfg.input.audio_len),
        d_text: cfg.input.d_text,
        d_audio: cfg.input.d_audio,
        seed: opts.seed,
        noise_sigma: 0.0,
        ..Default::default()
    })?;
    for (i, r) in data.records.iter_mut().enumerate() {
        r.label = if i % 2 == 0 { 2.5 } else { -2.0 };
    }
    let n = data.len() as f64;

    let mut analytic = GradBuffer::zeros_like(model.params());
    let mut min_kink = f64::INFINITY;
    for r in &data.records {
        let (_, g) = model.sample_loss_grad(&r.text, &r.audio, r.label, 1.0 / n, None)?;
        analytic.merge(&g);
        let p = model.predict(&r.text, &r.audio)?;
        for y in [p.y_tap, p.y_tpa, p.y_ta] {
            min_kink = min_kink.min((y - r.label).abs());
        }
    }

    let loss = |m: &Model<f64>| -> Result<f64> {
        let mut total = 0.0;
        for r in &data.records {
            total += m.sample_loss(&r.text, &r.audio, r.label)?;
        }
        Ok(total / n)
    };

    let groups = model.params().groups();
    let mut checks: Vec<GroupCheck> = groups
        .iter()
        .map(|g| GroupCheck {
            group: g.clone(),
            entries: 0,
            max_rel_error: 0.0,
            max_abs_gradient: 0.0,
            worst: (0.0, 0.0),
            passed: true,
        })
        .collect();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let gi = groups
            .iter()
            .position(|g| g == model.params().group(id))
            .expect("group registered");
        for k in 0..model.params().value(id).len() {
            let orig = model.params().value(id).as_slice()[k];
            model.params_mut().value_mut(id).as_mut_slice()[k] = orig + opts.step;
            let up = loss(&model)?;
            model.params_mut().value_mut(id).as_mut_slice()[k] = orig - opts.step;
            let down = loss(&model)?;
            model.params_mut().value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(id).as_slice()[k];
            let c = &mut checks[gi];
            c.entries += 1;
            let err = rel_error(a, numeric);
            if err > c.max_rel_error {
                c.max_rel_error = err;
                c.worst = (a, numeric);
            }
            c.max_abs_gradient = c.max_abs_gradient.max(a.abs());
        }
    }
    for c in &mut checks {
        c.passed = c.max_rel_error < opts.tolerance;
    }
    let passed = checks.iter().all(|c| c.passed) && min_kink > KINK_MARGIN;
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        groups: checks,
        min_kink_distance: min_kink,
        passed,
    })
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.groups {
            out.push_str(&format!(
                "{:<28} {:>5} entries  max rel err {:.3e}  {}\n",
                c.group,
                c.entries,
                c.max_rel_error,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "tolerance {:.1e}, step {:.1e}, min |pred - label| {:.3}: {}\n",
            self.tolerance,
            self.step,
            self.min_kink_distance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}
