//! Synthetic corpus: class-conditional features on low-dimensional affine
//! subspaces plus isotropic noise, in labeled splits and two unlabeled pools.
//!
//! Frames come in segments of one class, so a stacked context window can
//! straddle two classes. Each class `k` has a centroid `c_k` and a basis
//! `B_k` of `subspace_dim` directions; a frame is
//! `c_k + B_k u + noise_level · ε` with `u`, `ε` standard normal. The
//! shifted pool adds `domain_shift` along a fixed unit direction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eigenposterior::softmax;
use crate::error::{invalid, Result};
use crate::linalg::{cholesky, cholesky_solve, dot, norm2, Matrix};
use crate::posterior::{Alignment, PosteriorVector};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub subspace_dim: usize,
    pub noise_level: f64,
    pub frames_train: usize,
    pub frames_dev: usize,
    pub frames_test: usize,
    pub frames_untranscribed: usize,
    pub domain_shift: f64,
    pub seed: u64,
    /// Standard deviation of centroid coordinates.
    pub centroid_spread: f64,
    /// Length of every subspace direction.
    pub subspace_scale: f64,
    /// Mean segment length in frames; lengths are uniform on `1..=2m-1`.
    pub mean_segment_frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            feature_dim: 30,
            subspace_dim: 3,
            noise_level: 1.25,
            frames_train: 8000,
            frames_dev: 1000,
            frames_test: 1000,
            frames_untranscribed: 8000,
            domain_shift: 1.0,
            seed: 1,
            centroid_spread: 0.5,
            subspace_scale: 1.0,
            mean_segment_frames: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return invalid("corpus: need at least two classes");
        }
        if self.feature_dim == 0 {
            return invalid("corpus: feature_dim must be positive");
        }
        if self.subspace_dim >= self.classes {
            return invalid("corpus: subspace_dim must be below the class count");
        }
        if self.subspace_dim > self.feature_dim {
            return invalid("corpus: subspace_dim exceeds feature_dim");
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("domain_shift", self.domain_shift),
            ("centroid_spread", self.centroid_spread),
            ("subspace_scale", self.subspace_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("corpus: {name} must be finite and non-negative"));
            }
        }
        if self.mean_segment_frames == 0 {
            return invalid("corpus: mean_segment_frames must be positive");
        }
        Ok(())
    }
}

/// Per-class density `N(c_k, B_k B_kᵀ + s² I)`, precomputed for scoring.
#[derive(Debug, Clone)]
struct ClassDensity {
    /// Cholesky factor of `s² I + BᵀB` (or of `BᵀB` when `s = 0`).
    chol: Option<Matrix>,
    log_det: f64,
}

/// Ground-truth generator parameters.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub centroids: Vec<Vec<f64>>,
    /// `F × subspace_dim` per class.
    pub bases: Vec<Matrix>,
    pub shift_direction: Vec<f64>,
    pub noise_level: f64,
    densities: Vec<ClassDensity>,
}

impl GenerativeModel {
    fn build(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (k, f, d) = (cfg.classes, cfg.feature_dim, cfg.subspace_dim);
        let centroids: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                gaussian(rng, f)
                    .into_iter()
                    .map(|v| v * cfg.centroid_spread)
                    .collect()
            })
            .collect();
        let bases: Vec<Matrix> = (0..k)
            .map(|_| {
                let cols: Vec<Vec<f64>> = (0..d)
                    .map(|_| {
                        unit(rng, f)
                            .into_iter()
                            .map(|v| v * cfg.subspace_scale)
                            .collect()
                    })
                    .collect();
                if d == 0 {
                    Matrix::zeros(f, 0)
                } else {
                    Matrix::from_columns(&cols).expect("finite basis")
                }
            })
            .collect();
        let shift_direction = unit(rng, f);
        let mut model = Self {
            centroids,
            bases,
            shift_direction,
            noise_level: cfg.noise_level,
            densities: Vec::new(),
        };
        model.densities = model
            .bases
            .iter()
            .map(|b| model.density(b))
            .collect::<Result<_>>()?;
        Ok(model)
    }

    fn density(&self, b: &Matrix) -> Result<ClassDensity> {
        let d = b.cols();
        let f = b.rows();
        let s2 = self.noise_level * self.noise_level;
        if d == 0 {
            let log_det = if s2 > 0.0 { f as f64 * s2.ln() } else { 0.0 };
            return Ok(ClassDensity {
                chol: None,
                log_det,
            });
        }
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let g = dot(&b.col(i), &b.col(j)) + if i == j { s2 } else { 0.0 };
                m.set(i, j, g);
            }
        }
        let chol = cholesky(&m)?;
        let log_det_m: f64 = (0..d).map(|i| 2.0 * chol.get(i, i).ln()).sum();
        let log_det = if s2 > 0.0 {
            (f - d) as f64 * s2.ln() + log_det_m
        } else {
            log_det_m
        };
        Ok(ClassDensity {
            chol: Some(chol),
            log_det,
        })
    }

    pub fn class_count(&self) -> usize {
        self.centroids.len()
    }

    /// Class log-likelihoods up to a shared constant; requires noise > 0.
    fn log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        let s2 = self.noise_level * self.noise_level;
        (0..self.class_count())
            .map(|k| {
                let r: Vec<f64> = x
                    .iter()
                    .zip(&self.centroids[k])
                    .map(|(a, c)| a - c)
                    .collect();
                let rr = dot(&r, &r);
                let dens = &self.densities[k];
                let quad = match &dens.chol {
                    None => rr / s2,
                    Some(l) => {
                        let w = self.bases[k].tr_mat_vec(&r).expect("dims");
                        let sol = cholesky_solve(l, &w);
                        (rr - dot(&w, &sol)) / s2
                    }
                };
                -0.5 * (quad + dens.log_det)
            })
            .collect()
    }

    /// Noise-free scoring: distance to each class's affine subspace, then the
    /// latent density among classes whose subspace contains `x`.
    fn noiseless_class(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
        for k in 0..self.class_count() {
            let r: Vec<f64> = x
                .iter()
                .zip(&self.centroids[k])
                .map(|(a, c)| a - c)
                .collect();
            let (resid, latent) = match &self.densities[k].chol {
                None => (dot(&r, &r), 0.0),
                Some(l) => {
                    let w = self.bases[k].tr_mat_vec(&r).expect("dims");
                    let a = cholesky_solve(l, &w);
                    let fit = self.bases[k].mat_vec(&a).expect("dims");
                    let e: Vec<f64> = r.iter().zip(&fit).map(|(u, v)| u - v).collect();
                    (
                        dot(&e, &e),
                        -0.5 * dot(&a, &a) - 0.5 * self.densities[k].log_det,
                    )
                }
            };
            let tol = 1e-9 * (1.0 + dot(&r, &r));
            let on_manifold = resid <= tol;
            let best_on = best.0 <= 1e-9 * (1.0 + norm2(x).powi(2));
            let better = match (on_manifold, best_on) {
                (true, false) => true,
                (true, true) => latent > best.1,
                (false, false) => resid < best.0,
                (false, true) => false,
            };
            if better {
                best = (resid, latent, k);
            }
        }
        best.2
    }

    /// Maximum-likelihood class under uniform priors, lowest index on ties.
    pub fn classify(&self, x: &[f64]) -> usize {
        if self.noise_level == 0.0 {
            return self.noiseless_class(x);
        }
        let ll = self.log_likelihoods(x);
        let mut best = 0;
        for (k, v) in ll.iter().enumerate() {
            if *v > ll[best] {
                best = k;
            }
        }
        best
    }

    /// Class posterior of a single frame under uniform priors. Without noise
    /// the posterior is one-hot.
    pub fn ideal_posterior(&self, x: &[f64]) -> PosteriorVector {
        if self.noise_level == 0.0 {
            return PosteriorVector::one_hot(self.classify(x), self.class_count())
                .expect("in range");
        }
        softmax(&self.log_likelihoods(x))
    }
}

/// One split: per-frame features (rows) and, when transcribed, labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub features: Matrix,
    pub labels: Option<Alignment>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Result<&Alignment> {
        self.labels
            .as_ref()
            .ok_or_else(|| crate::Error::InvalidInput("split has no labels".into()))
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub model: GenerativeModel,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
    /// Untranscribed, same domain as the labeled splits.
    pub pool_same: Split,
    /// Untranscribed, offset by `domain_shift`.
    pub pool_shifted: Split,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n);
        let s = norm2(&v);
        if s > 1e-12 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

fn generate_split(
    cfg: &CorpusConfig,
    model: &GenerativeModel,
    frames: usize,
    stream: u64,
    shift: f64,
    labeled: bool,
) -> Result<Split> {
    let mut rng = seeded(cfg.seed, stream);
    let f = cfg.feature_dim;
    let mut data = Vec::with_capacity(frames * f);
    let mut labels = Vec::with_capacity(frames);
    let max_len = 2 * cfg.mean_segment_frames - 1;
    while labels.len() < frames {
        let class = rng.random_range(0..cfg.classes);
        let len = rng.random_range(1..=max_len).min(frames - labels.len());
        for _ in 0..len {
            let mut x = model.centroids[class].clone();
            let u = gaussian(&mut rng, cfg.subspace_dim);
            let b = &model.bases[class];
            for (xi, row) in x.iter_mut().enumerate().map(|(i, v)| (v, b.row(i))) {
                *xi += dot(row, &u);
            }
            for xi in x.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *xi += cfg.noise_level * e;
            }
            if shift != 0.0 {
                x.iter_mut()
                    .zip(&model.shift_direction)
                    .for_each(|(xi, d)| *xi += shift * d);
            }
            data.extend_from_slice(&x);
            labels.push(class as u32);
        }
    }
    Ok(Split {
        features: Matrix::new(frames, f, data)?,
        labels: if labeled {
            Some(Alignment::new(labels, cfg.classes)?)
        } else {
            None
        },
    })
}

/// Builds the corpus; a pure function of `cfg`. Each split draws from its own
/// stream under `cfg.seed`.
pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let model = GenerativeModel::build(cfg, &mut seeded(cfg.seed, 0))?;
    Ok(Corpus {
        train: generate_split(cfg, &model, cfg.frames_train, 1, 0.0, true)?,
        dev: generate_split(cfg, &model, cfg.frames_dev, 2, 0.0, true)?,
        test: generate_split(cfg, &model, cfg.frames_test, 3, 0.0, true)?,
        pool_same: generate_split(cfg, &model, cfg.frames_untranscribed, 4, 0.0, false)?,
        pool_shifted: generate_split(
            cfg,
            &model,
            cfg.frames_untranscribed,
            5,
            cfg.domain_shift,
            false,
        )?,
        config: cfg.clone(),
        model,
    })
}

/// Frame accuracy of the generative classifier on a labeled split.
pub fn split_bayes_accuracy(model: &GenerativeModel, split: &Split) -> Result<f64> {
    let labels = split.labels()?;
    if split.is_empty() {
        return invalid("oracle accuracy: empty split");
    }
    let hits = (0..split.len())
        .filter(|&t| model.classify(split.features.row(t)) == labels.get(t))
        .count();
    Ok(hits as f64 / split.len() as f64)
}

/// Frame accuracy of the generative classifier on the test split.
pub fn oracle_bayes_accuracy(corpus: &Corpus) -> Result<f64> {
    split_bayes_accuracy(&corpus.model, &corpus.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenposterior::log_domain_rank;
    use crate::linalg::{covariance, sym_eig};
    use crate::posterior::SenoneMatrix;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            classes: 5,
            feature_dim: 8,
            subspace_dim: 2,
            frames_train: 300,
            frames_dev: 50,
            frames_test: 200,
            frames_untranscribed: 100,
            seed,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.pool_shifted.features, b.pool_shifted.features);
        assert_eq!(a.train.len(), 300);
        assert_eq!(a.dev.len(), 50);
        assert_eq!(a.test.len(), 200);
        assert_eq!(a.pool_same.len(), 100);
        assert!(a.pool_same.labels.is_none());
        assert_ne!(
            generate(&small(4)).unwrap().train.features,
            a.train.features
        );
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small(0);
        c.subspace_dim = 5;
        assert!(generate(&c).is_err());
        let mut c = small(0);
        c.noise_level = -1.0;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn noiseless_rank_one_classes_lie_on_lines() {
        let mut c = small(5);
        c.noise_level = 0.0;
        c.subspace_dim = 1;
        let corpus = generate(&c).unwrap();
        let labels = corpus.train.labels().unwrap();
        for class in 0..c.classes {
            let rows: Vec<Vec<f64>> = (0..corpus.train.len())
                .filter(|&t| labels.get(t) == class)
                .map(|t| corpus.train.features.row(t).to_vec())
                .collect();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..c.feature_dim)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            let centered: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
                .collect();
            // rows of `centered` are points; covariance wants dims × points
            let m = Matrix::from_columns(&centered).unwrap();
            let eig = sym_eig(&covariance(&m).unwrap(), 1e-14).unwrap();
            let residual: f64 = eig.clamped_eigenvalues()[1..].iter().sum();
            assert!(
                residual <= 1e-9 * eig.eigenvalues[0],
                "class {class}: {residual}"
            );
        }
    }

    #[test]
    fn noiseless_separated_classes_are_perfectly_classified() {
        let mut c = small(6);
        c.noise_level = 0.0;
        c.centroid_spread = 3.0;
        let corpus = generate(&c).unwrap();
        assert_eq!(oracle_bayes_accuracy(&corpus).unwrap(), 1.0);
    }

    /// Φ(x) by composite Simpson quadrature of the normal density.
    fn normal_cdf(x: f64) -> f64 {
        let lo = -12.0;
        let n = 20_000;
        let h = (x - lo) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(lo) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn two_gaussians_match_closed_form_error() {
        let c = CorpusConfig {
            classes: 2,
            feature_dim: 4,
            subspace_dim: 0,
            noise_level: 1.0,
            centroid_spread: 0.6,
            frames_train: 0,
            frames_dev: 0,
            frames_test: 40_000,
            frames_untranscribed: 0,
            mean_segment_frames: 1,
            seed: 21,
            ..CorpusConfig::default()
        };
        let corpus = generate(&c).unwrap();
        let gap: Vec<f64> = corpus.model.centroids[0]
            .iter()
            .zip(&corpus.model.centroids[1])
            .map(|(a, b)| a - b)
            .collect();
        let delta = norm2(&gap);
        let expected = 1.0 - normal_cdf(-delta / (2.0 * c.noise_level));
        let got = oracle_bayes_accuracy(&corpus).unwrap();
        let sd = (expected * (1.0 - expected) / c.frames_test as f64).sqrt();
        assert!(
            (got - expected).abs() <= 4.0 * sd,
            "got {got}, closed form {expected} (Δ = {delta})"
        );
        assert!(expected < 0.95, "instance should overlap, Δ = {delta}");
    }

    #[test]
    fn huge_noise_approaches_chance() {
        let mut c = small(8);
        c.noise_level = 500.0;
        c.frames_test = 4000;
        let corpus = generate(&c).unwrap();
        let acc = oracle_bayes_accuracy(&corpus).unwrap();
        assert!((acc - 0.2).abs() < 0.04, "{acc}");
    }

    #[test]
    fn unshifted_pool_matches_train_statistics() {
        let c = CorpusConfig {
            frames_train: 4000,
            frames_untranscribed: 4000,
            frames_dev: 0,
            frames_test: 0,
            domain_shift: 0.0,
            mean_segment_frames: 1,
            seed: 13,
            ..CorpusConfig::default()
        };
        let corpus = generate(&c).unwrap();
        let (a, b) = (&corpus.train.features, &corpus.pool_same.features);
        for j in 0..c.feature_dim {
            let col_a: Vec<f64> = (0..a.rows()).map(|t| a.get(t, j)).collect();
            let col_b: Vec<f64> = (0..b.rows()).map(|t| b.get(t, j)).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb) = (mean(&col_a), mean(&col_b));
            let var =
                col_a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (col_a.len() - 1) as f64;
            let bound =
                3.0 * var.sqrt() * (1.0 / col_a.len() as f64 + 1.0 / col_b.len() as f64).sqrt();
            assert!(
                (ma - mb).abs() <= bound,
                "dim {j}: gap {} > {bound}",
                (ma - mb).abs()
            );
        }
    }

    #[test]
    fn shifted_pool_is_offset_along_shift_direction() {
        let mut c = small(2);
        c.domain_shift = 4.0;
        c.frames_untranscribed = 3000;
        c.mean_segment_frames = 1;
        let corpus = generate(&c).unwrap();
        let proj = |m: &Matrix| {
            (0..m.rows())
                .map(|t| dot(m.row(t), &corpus.model.shift_direction))
                .sum::<f64>()
                / m.rows() as f64
        };
        let gap = proj(&corpus.pool_shifted.features) - proj(&corpus.pool_same.features);
        assert!((gap - 4.0).abs() < 0.3, "{gap}");
    }

    #[test]
    fn noiseless_ideal_posteriors_have_low_log_rank() {
        // frames drawn without noise; posteriors scored with the noisy model
        let mut c = CorpusConfig {
            frames_train: 4000,
            frames_dev: 0,
            frames_test: 0,
            frames_untranscribed: 0,
            noise_level: 0.0,
            seed: 17,
            ..CorpusConfig::default()
        };
        let clean = generate(&c).unwrap();
        c.noise_level = 1.0;
        let scorer = GenerativeModel::build(&c, &mut seeded(c.seed, 0)).unwrap();
        let labels = clean.train.labels().unwrap();
        for class in 0..c.classes {
            let frames: Vec<usize> = (0..clean.train.len())
                .filter(|&t| labels.get(t) == class)
                .collect();
            let posts: Vec<PosteriorVector> = frames
                .iter()
                .map(|&t| scorer.ideal_posterior(clean.train.features.row(t)))
                .collect();
            let m = SenoneMatrix::from_posteriors(class, &posts, frames).unwrap();
            let rank = log_domain_rank(&m, 1e-8, 0.95).unwrap();
            assert!(rank <= c.subspace_dim + 1, "class {class}: rank {rank}");
        }
    }
}
