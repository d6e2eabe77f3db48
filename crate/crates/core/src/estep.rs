//! Hard-EM label estimation: the E-steps that turn network scores plus a weak
//! annotation into a per-pixel label map the M-step trains against.
//!
//! * [`em_fixed_estep`] adds constant biases to the present labels.
//! * [`em_adapt_estep`] chooses per-image biases so that each present label
//!   covers at least a prescribed fraction of the image, and suppresses absent
//!   labels outright.
//! * [`bbox_em_fixed_estep`] is the fixed-bias variant where the foreground
//!   boost only applies inside boxes of the matching class.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{argmax_lowest, BoxAnnotation, LabelMap, ScoreMap, WeakLabels, BACKGROUND};

/// Default biases for the fixed-bias E-step.
pub const DEFAULT_B_FG: f64 = 5.0;
pub const DEFAULT_B_BG: f64 = 3.0;

/// Default area quotas for the adaptive E-step.
pub const DEFAULT_RHO_FG: f64 = 0.2;
pub const DEFAULT_RHO_BG: f64 = 0.4;

/// Relative margin added on top of each adaptive threshold so the pixel that
/// sits exactly on the percentile is won by the visited label rather than by
/// a lower-index label through the tie-break.
const QUOTA_MARGIN: f64 = 1e-9;

/// Per-label additive biases `b_l`; `-inf` suppresses a label.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVector(Vec<f64>);

impl BiasVector {
    pub fn new(biases: Vec<f64>) -> Result<Self> {
        if biases.iter().any(|b| b.is_nan() || *b == f64::INFINITY) {
            return Err(Error::invalid("biases must be finite or -inf"));
        }
        if !biases.iter().any(|b| b.is_finite()) {
            return Err(Error::invalid("at least one bias must be finite"));
        }
        Ok(BiasVector(biases))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, label: usize) -> f64 {
        self.0[label]
    }

    /// Per-pixel argmax of `scores + b`, lowest label on ties.
    pub fn apply(&self, scores: &ScoreMap) -> Result<LabelMap> {
        if scores.num_labels() != self.len() {
            return Err(Error::invalid(format!(
                "bias vector has {} entries, scores have {} labels",
                self.len(),
                scores.num_labels()
            )));
        }
        let mut buf = vec![0.0; self.len()];
        let labels = scores
            .pixels()
            .map(|px| {
                for ((o, s), b) in buf.iter_mut().zip(px).zip(&self.0) {
                    *o = s + b;
                }
                argmax_lowest(&buf)
            })
            .collect();
        LabelMap::new(scores.height(), scores.width(), labels)
    }
}

/// Area quotas for the adaptive E-step and the seed of its foreground visit
/// order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptParams {
    pub rho_fg: f64,
    pub rho_bg: f64,
    pub seed: u64,
}

impl AdaptParams {
    pub fn new(rho_fg: f64, rho_bg: f64, seed: u64) -> Result<Self> {
        let p = AdaptParams {
            rho_fg,
            rho_bg,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [("rho_fg", self.rho_fg), ("rho_bg", self.rho_bg)] {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::invalid(format!("{name} = {rho} outside (0, 1)")));
            }
        }
        // both quotas must fit at once when a single foreground label is present
        if self.rho_fg + self.rho_bg > 1.0 {
            return Err(Error::invalid(format!(
                "rho_fg + rho_bg = {} exceeds 1",
                self.rho_fg + self.rho_bg
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        AdaptParams { seed, ..self }
    }
}

impl Default for AdaptParams {
    fn default() -> Self {
        AdaptParams {
            rho_fg: DEFAULT_RHO_FG,
            rho_bg: DEFAULT_RHO_BG,
            seed: 0,
        }
    }
}

fn check_label_count(scores: &ScoreMap, z: &WeakLabels) -> Result<()> {
    if scores.num_labels() != z.num_labels() {
        return Err(Error::invalid(format!(
            "scores have {} labels, weak labels cover {}",
            scores.num_labels(),
            z.num_labels()
        )));
    }
    Ok(())
}

fn warn_bias_order(b_fg: f64, b_bg: f64) {
    if !(b_fg > b_bg && b_bg > 0.0) {
        warn!("expected b_fg > b_bg > 0, got b_fg = {b_fg}, b_bg = {b_bg}");
    }
}

/// Fixed-bias E-step: present labels get `b_bg` (background) or `b_fg`
/// (foreground) added to their score; absent labels keep their raw score.
pub fn em_fixed_estep(scores: &ScoreMap, z: &WeakLabels, b_fg: f64, b_bg: f64) -> Result<LabelMap> {
    check_label_count(scores, z)?;
    warn_bias_order(b_fg, b_bg);
    let biases = (0..z.num_labels())
        .map(|l| match (z.contains(l), l == BACKGROUND as usize) {
            (false, _) => 0.0,
            (true, true) => b_bg,
            (true, false) => b_fg,
        })
        .collect();
    BiasVector::new(biases)?.apply(scores)
}

/// The `k`-th smallest entry of `diffs` with `k = ceil(rho * len)`: the
/// smallest bias for which at least a `rho` fraction of entries satisfy
/// `d <= b`. Runs in expected linear time.
pub fn quota_threshold(diffs: &[f64], rho: f64) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::invalid("quota threshold of an empty difference list"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho = {rho} outside (0, 1]")));
    }
    if diffs.iter().any(|d| d.is_nan() || *d < 0.0 || d.is_infinite()) {
        return Err(Error::invalid("score differences must be finite and non-negative"));
    }
    let k = quota_count(diffs.len(), rho);
    let mut work = diffs.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// `ceil(rho * n)`, at least 1. The product is rounded before taking the
/// ceiling so that e.g. `0.7 * 10` counts as 7 rather than 8.
pub fn quota_count(n: usize, rho: f64) -> usize {
    let exact = rho * n as f64;
    let k = (exact - exact.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n)
}

/// Biases chosen by the adaptive E-step together with the order in which the
/// present labels were visited.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub biases: BiasVector,
    pub visit_order: Vec<u8>,
}

/// Background first, then the present foreground labels shuffled by `seed`.
pub fn visit_order(z: &WeakLabels, seed: u64) -> Vec<u8> {
    let mut fg: Vec<u8> = z.foreground().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fg.shuffle(&mut rng);
    let mut order = Vec::with_capacity(fg.len() + 1);
    order.push(BACKGROUND);
    order.extend(fg);
    order
}

/// Adaptive biases. Absent labels get `-inf`. Present labels are visited in
/// [`visit_order`]; when label `l` is visited, every pixel's best competing
/// score is taken over the labels' current biases (already-visited labels at
/// their assigned bias, unvisited present labels at 0), and `b_l` is set so
/// that at least `ceil(rho_l * M)` pixels prefer `l`.
pub fn em_adapt_biases(scores: &ScoreMap, z: &WeakLabels, params: &AdaptParams) -> Result<BiasVector> {
    Ok(em_adapt_biases_traced(scores, z, params)?.biases)
}

pub fn em_adapt_biases_traced(
    scores: &ScoreMap,
    z: &WeakLabels,
    params: &AdaptParams,
) -> Result<AdaptOutcome> {
    check_label_count(scores, z)?;
    params.validate()?;
    if !scores.is_finite() {
        return Err(Error::invalid("score map contains non-finite values"));
    }
    let n_labels = scores.num_labels();
    let mut biases: Vec<f64> = (0..n_labels)
        .map(|l| if z.contains(l) { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let order = visit_order(z, params.seed);
    let scale = 1.0 + scores.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut diffs = vec![0.0; scores.num_pixels()];

    for &label in &order {
        let l = label as usize;
        biases[l] = 0.0;
        for (d, px) in diffs.iter_mut().zip(scores.pixels()) {
            let f_max = px
                .iter()
                .zip(&biases)
                .map(|(s, b)| s + b)
                .fold(f64::NEG_INFINITY, f64::max);
            // clamp guards the rounding of `f_max - f_l` when f_max == f_l + 0
            *d = (f_max - px[l]).max(0.0);
        }
        let rho = if label == BACKGROUND {
            params.rho_bg
        } else {
            params.rho_fg
        };
        let t = quota_threshold(&diffs, rho)?;
        biases[l] = t + QUOTA_MARGIN * (scale + t);
    }

    Ok(AdaptOutcome {
        biases: BiasVector::new(biases)?,
        visit_order: order,
    })
}

/// Adaptive E-step: argmax of the scores plus [`em_adapt_biases`].
pub fn em_adapt_estep(scores: &ScoreMap, z: &WeakLabels, params: &AdaptParams) -> Result<LabelMap> {
    em_adapt_biases(scores, z, params)?.apply(scores)
}

/// Box-gated fixed-bias E-step. Background gets `b_bg` everywhere; class `l`
/// gets `b_fg` only at pixels covered by some box of class `l`.
pub fn bbox_em_fixed_estep(
    scores: &ScoreMap,
    boxes: &BoxAnnotation,
    b_fg: f64,
    b_bg: f64,
) -> Result<LabelMap> {
    let (h, w, n_labels) = (scores.height(), scores.width(), scores.num_labels());
    boxes.validate(h, w, n_labels)?;
    warn_bias_order(b_fg, b_bg);

    let mut boosted = scores.clone();
    for px in boosted.data_mut().chunks_exact_mut(n_labels) {
        px[BACKGROUND as usize] += b_bg;
    }
    // one boost per (pixel, class) even when same-class boxes overlap
    let mut covered = vec![false; h * w * n_labels];
    for b in &boxes.boxes {
        let c = b.class as usize;
        for y in b.rect.y0..=b.rect.y1 {
            for x in b.rect.x0..=b.rect.x1 {
                let idx = (y * w + x) * n_labels + c;
                if !covered[idx] {
                    covered[idx] = true;
                    boosted.data_mut()[idx] += b_fg;
                }
            }
        }
    }
    Ok(crate::tensor::argmax_labels(&boosted))
}
