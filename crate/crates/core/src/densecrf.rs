//! Fully-connected CRF with Potts compatibility and a Gaussian spatial plus a
//! bilateral (position and color) pairwise kernel, inferred by mean field.
//!
//! Messages are computed by exact pairwise summation over all pixel pairs,
//! accumulating `j` in row-major order so the result does not depend on how
//! the per-pixel work is scheduled across threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{pixel_distribution, softmax_in_place, Image, LabelMap, ProbMap, ScoreMap};

/// Kernel matrices up to this many entries are computed once per call and
/// reused across iterations; larger images recompute rows on the fly.
const KERNEL_CACHE_LIMIT: usize = 2500 * 2500;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    pub w_spatial: f64,
    /// Spatial kernel bandwidth in pixels.
    pub theta_gamma: f64,
    pub w_bilateral: f64,
    /// Bilateral kernel position bandwidth in pixels.
    pub theta_alpha: f64,
    /// Bilateral kernel color bandwidth, colors in `[0, 1]`.
    pub theta_beta: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_spatial: 3.0,
            theta_gamma: 3.0,
            w_bilateral: 5.0,
            theta_alpha: 30.0,
            theta_beta: 0.1,
            iterations: 10,
        }
    }
}

impl CrfParams {
    /// Parameters with both pairwise weights zero; inference reduces to the
    /// unary softmax.
    pub fn unary_only() -> Self {
        CrfParams {
            w_spatial: 0.0,
            w_bilateral: 0.0,
            ..CrfParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_spatial", self.w_spatial),
            ("w_bilateral", self.w_bilateral),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        for (name, v) in [
            ("theta_gamma", self.theta_gamma),
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be finite and > 0")));
            }
        }
        Ok(())
    }

    fn is_inert(&self) -> bool {
        self.w_spatial == 0.0 && self.w_bilateral == 0.0
    }
}

struct Kernel<'a> {
    image: &'a Image,
    width: usize,
    n: usize,
    inv_spatial: f64,
    inv_bilateral_pos: f64,
    inv_bilateral_color: f64,
    w_spatial: f64,
    w_bilateral: f64,
    cache: Option<Vec<f64>>,
}

impl<'a> Kernel<'a> {
    fn new(image: &'a Image, params: &CrfParams) -> Self {
        let n = image.num_pixels();
        let mut kernel = Kernel {
            image,
            width: image.width(),
            n,
            inv_spatial: 1.0 / (2.0 * params.theta_gamma * params.theta_gamma),
            inv_bilateral_pos: 1.0 / (2.0 * params.theta_alpha * params.theta_alpha),
            inv_bilateral_color: 1.0 / (2.0 * params.theta_beta * params.theta_beta),
            w_spatial: params.w_spatial,
            w_bilateral: params.w_bilateral,
            cache: None,
        };
        if n * n <= KERNEL_CACHE_LIMIT {
            let mut full = vec![0.0; n * n];
            full.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| kernel.fill_row(i, row));
            kernel.cache = Some(full);
        }
        kernel
    }

    /// `k(i, j)` for every `j`, with the self term set to zero.
    fn fill_row(&self, i: usize, row: &mut [f64]) {
        let (yi, xi) = ((i / self.width) as f64, (i % self.width) as f64);
        let ci = self.image.pixel(i);
        for (j, k) in row.iter_mut().enumerate() {
            if j == i {
                *k = 0.0;
                continue;
            }
            let dy = (j / self.width) as f64 - yi;
            let dx = (j % self.width) as f64 - xi;
            let d2 = dy * dy + dx * dx;
            let c2: f64 = ci
                .iter()
                .zip(self.image.pixel(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let mut v = 0.0;
            if self.w_spatial != 0.0 {
                v += self.w_spatial * (-d2 * self.inv_spatial).exp();
            }
            if self.w_bilateral != 0.0 {
                v += self.w_bilateral
                    * (-d2 * self.inv_bilateral_pos - c2 * self.inv_bilateral_color).exp();
            }
            *k = v;
        }
    }

    fn row<'b>(&'b self, i: usize, scratch: &'b mut Vec<f64>) -> &'b [f64] {
        match &self.cache {
            Some(full) => &full[i * self.n..(i + 1) * self.n],
            None => {
                scratch.resize(self.n, 0.0);
                self.fill_row(i, scratch);
                scratch
            }
        }
    }
}

/// Mean-field inference. Returns the approximate marginals after
/// `params.iterations` updates starting from the unary softmax.
pub fn mean_field(unary: &ScoreMap, image: &Image, params: &CrfParams) -> Result<ProbMap> {
    mean_field_observed(unary, image, params, |_, _| {})
}

/// [`mean_field`] with a callback invoked after every iteration with the
/// 1-based iteration index and the current marginals.
pub fn mean_field_observed(
    unary: &ScoreMap,
    image: &Image,
    params: &CrfParams,
    mut observe: impl FnMut(usize, &ProbMap),
) -> Result<ProbMap> {
    if unary.height() != image.height() || unary.width() != image.width() {
        return Err(Error::invalid(format!(
            "unary {}x{} does not match image {}x{}",
            unary.height(),
            unary.width(),
            image.height(),
            image.width()
        )));
    }
    params.validate()?;
    let mut q = pixel_distribution(unary)?;
    if params.iterations == 0 || params.is_inert() {
        for it in 1..=params.iterations {
            observe(it, &q);
        }
        return Ok(q);
    }

    let n_labels = unary.num_labels();
    let kernel = Kernel::new(image, params);
    let (h, w) = (unary.height(), unary.width());
    for it in 1..=params.iterations {
        let prev = q.data();
        let mut next = vec![0.0; prev.len()];
        next.par_chunks_mut(n_labels)
            .enumerate()
            .for_each_init(Vec::new, |scratch, (i, out)| {
                let row = kernel.row(i, scratch);
                // out <- sum_j k(i, j) Q_j
                for (k, qj) in row.iter().zip(prev.chunks_exact(n_labels)) {
                    if *k != 0.0 {
                        for (o, p) in out.iter_mut().zip(qj) {
                            *o += k * p;
                        }
                    }
                }
                // Potts: label l pays the kernel-weighted mass of every other label
                let total: f64 = out.iter().sum();
                for (o, u) in out.iter_mut().zip(unary.pixel(i)) {
                    *o = u - (total - *o);
                }
                softmax_in_place(out);
            });
        q = ProbMap::from_raw(h, w, n_labels, next);
        observe(it, &q);
    }
    Ok(q)
}

/// Test-time refinement: argmax of the mean-field marginals.
pub fn crf_refine(scores: &ScoreMap, image: &Image, params: &CrfParams) -> Result<LabelMap> {
    Ok(mean_field(scores, image, params)?.argmax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::argmax_labels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(h: usize, w: usize, n: usize, seed: u64) -> (ScoreMap, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unary: Vec<f64> = (0..h * w * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let img: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        (
            ScoreMap::new(h, w, n, unary).unwrap(),
            Image::new(h, w, 3, img).unwrap(),
        )
    }

    /// Straight transcription of the update, no caching or parallelism.
    fn reference(unary: &ScoreMap, image: &Image, p: &CrfParams) -> Vec<f64> {
        let (w, n, l) = (image.width(), image.num_pixels(), unary.num_labels());
        let mut q = pixel_distribution(unary).unwrap().into_data();
        for _ in 0..p.iterations {
            let mut next = vec![0.0; q.len()];
            for i in 0..n {
                for lab in 0..l {
                    let mut penalty = 0.0;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let dy = (i / w) as f64 - (j / w) as f64;
                        let dx = (i % w) as f64 - (j % w) as f64;
                        let d2 = dy * dy + dx * dx;
                        let c2: f64 = (0..3)
                            .map(|c| (image.pixel(i)[c] - image.pixel(j)[c]).powi(2))
                            .sum();
                        let k = p.w_spatial * (-d2 / (2.0 * p.theta_gamma.powi(2))).exp()
                            + p.w_bilateral
                                * (-d2 / (2.0 * p.theta_alpha.powi(2))
                                    - c2 / (2.0 * p.theta_beta.powi(2)))
                                .exp();
                        for other in 0..l {
                            if other != lab {
                                penalty += k * q[j * l + other];
                            }
                        }
                    }
                    next[i * l + lab] = unary.pixel(i)[lab] - penalty;
                }
                softmax_in_place(&mut next[i * l..(i + 1) * l]);
            }
            q = next;
        }
        q
    }

    #[test]
    fn zero_weights_reproduce_unary_softmax() {
        let (u, img) = random_problem(5, 6, 4, 1);
        let soft = pixel_distribution(&u).unwrap();
        for iterations in [0, 1, 10] {
            let p = CrfParams {
                iterations,
                ..CrfParams::unary_only()
            };
            let q = mean_field(&u, &img, &p).unwrap();
            for (a, b) in q.data().iter().zip(soft.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_iterations_is_initialization() {
        let (u, img) = random_problem(4, 4, 3, 2);
        let p = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        assert_eq!(mean_field(&u, &img, &p).unwrap(), pixel_distribution(&u).unwrap());
    }

    #[test]
    fn matches_reference_transcription() {
        let (u, img) = random_problem(5, 4, 3, 3);
        let p = CrfParams {
            w_spatial: 0.7,
            w_bilateral: 1.3,
            theta_alpha: 4.0,
            theta_beta: 0.3,
            iterations: 4,
            ..CrfParams::default()
        };
        let fast = mean_field(&u, &img, &p).unwrap();
        for (a, b) in fast.data().iter().zip(reference(&u, &img, &p)) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn isolated_center_pixel_is_smoothed_away() {
        let mut unary = ScoreMap::zeros(3, 3, 3);
        for m in 0..9 {
            let px = unary.pixel_mut(m);
            if m == 4 {
                px.copy_from_slice(&[0.0, 0.0, 1.0]);
            } else {
                px.copy_from_slice(&[0.0, 1.0, 0.0]);
            }
        }
        let img = Image::filled(3, 3, 3, 0.5);
        assert_eq!(argmax_labels(&unary).get(1, 1), 2);
        let p = CrfParams {
            w_spatial: 3.0,
            w_bilateral: 0.0,
            ..CrfParams::default()
        };
        let out = crf_refine(&unary, &img, &p).unwrap();
        assert_eq!(out.get(1, 1), 1);
        assert_eq!(out.count(1), 9);
    }

    #[test]
    fn stays_normalized_every_iteration() {
        let (u, img) = random_problem(6, 6, 5, 4);
        let mut seen = 0;
        mean_field_observed(&u, &img, &CrfParams::default(), |_, q| {
            assert!(q.max_normalization_error() <= 1e-9);
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 10);
    }

    #[test]
    fn label_permutation_is_equivariant() {
        let (u, img) = random_problem(4, 5, 3, 5);
        let perm = [2usize, 0, 1];
        let mut permuted = ScoreMap::zeros(4, 5, 3);
        for m in 0..20 {
            for l in 0..3 {
                permuted.pixel_mut(m)[perm[l]] = u.pixel(m)[l];
            }
        }
        let p = CrfParams::default();
        let a = mean_field(&u, &img, &p).unwrap();
        let b = mean_field(&permuted, &img, &p).unwrap();
        for m in 0..20 {
            for l in 0..3 {
                assert!((a.pixel(m)[l] - b.pixel(m)[perm[l]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (u, _) = random_problem(4, 4, 3, 6);
        let img = Image::filled(4, 5, 3, 0.0);
        assert!(matches!(
            mean_field(&u, &img, &CrfParams::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn uncached_rows_match_cached_rows() {
        let (_, img) = random_problem(5, 5, 2, 7);
        let p = CrfParams::default();
        let kernel = Kernel::new(&img, &p);
        let cached = kernel.cache.as_ref().unwrap();
        let mut row = vec![0.0; 25];
        for i in 0..25 {
            kernel.fill_row(i, &mut row);
            assert_eq!(&cached[i * 25..(i + 1) * 25], row.as_slice());
        }
    }
}
