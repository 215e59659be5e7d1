//! Online dictionary learning with sufficient statistics and block
//! coordinate-descent atom updates.
//!
//! The learner keeps `A = Σ α αᵀ` and `B = Σ x αᵀ` over the most recent code
//! of every sample. Revisiting a sample in a later epoch swaps its old code
//! out of the statistics, so `A` and `B` always describe the current codes and
//! every step (recoding a sample, updating an atom) lowers the summed
//! objective.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::lasso::{gram, solve};
use super::{squared_residual, SparseDictionary, DEFAULT_LAMBDA};
use crate::error::{invalid, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::posterior::SenoneMatrix;
use crate::rng::seeded;

/// `ceil(K / 8)`, at least one.
pub fn default_atom_count(class_count: usize) -> usize {
    class_count.div_ceil(8).max(1)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DictionaryConfig {
    pub atoms: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
}

impl DictionaryConfig {
    pub fn for_classes(class_count: usize, seed: u64) -> Self {
        Self {
            atoms: default_atom_count(class_count),
            lambda: DEFAULT_LAMBDA,
            epochs: 10,
            batch: 64,
            seed,
            lasso_tol: super::DEFAULT_LASSO_TOL,
            lasso_max_iter: super::DEFAULT_LASSO_MAX_ITER,
        }
    }
}

/// A learned dictionary and the per-epoch mean objective over current codes.
#[derive(Debug, Clone)]
pub struct LearnedDictionary {
    pub dictionary: SparseDictionary,
    pub surrogate: Vec<f64>,
}

/// Learns a dictionary over the columns of one class matrix.
pub fn learn_dictionary(m: &SenoneMatrix, cfg: &DictionaryConfig) -> Result<LearnedDictionary> {
    learn_dictionary_from_data(m.matrix(), m.class_id, cfg)
}

/// Learns a dictionary over the columns of `data` (`K × N`).
pub fn learn_dictionary_from_data(
    data: &Matrix,
    class_id: usize,
    cfg: &DictionaryConfig,
) -> Result<LearnedDictionary> {
    let (k, n) = (data.rows(), data.cols());
    let d = cfg.atoms;
    if d == 0 {
        return invalid("learn_dictionary: need at least one atom");
    }
    if n == 0 || k == 0 {
        return invalid("learn_dictionary: no data");
    }
    if !(cfg.lambda > 0.0) {
        return invalid(format!(
            "learn_dictionary: lambda {} must be positive",
            cfg.lambda
        ));
    }
    if cfg.batch == 0 {
        return invalid("learn_dictionary: batch must be at least 1");
    }
    let samples = data.columns();
    if samples.iter().all(|x| x.iter().all(|v| *v == 0.0)) {
        return invalid("learn_dictionary: all data columns are zero");
    }

    let mut atoms = initial_atoms(&samples, k, d, cfg.seed);
    let mut a_stat = Matrix::zeros(d, d);
    let mut b_stat = Matrix::zeros(k, d);
    let mut codes: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut surrogate = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = seeded(cfg.seed, 1);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        for batch in order.chunks(cfg.batch) {
            let g = gram(&atoms);
            for &i in batch {
                let x = &samples[i];
                let corr = atoms.tr_mat_vec(x)?;
                let mut alpha = codes[i].clone().unwrap_or_else(|| vec![0.0; d]);
                solve(
                    &g,
                    &corr,
                    cfg.lambda,
                    cfg.lasso_tol,
                    cfg.lasso_max_iter,
                    &mut alpha,
                )?;
                if let Some(old) = codes[i].take() {
                    accumulate(&mut a_stat, &mut b_stat, x, &old, -1.0);
                }
                accumulate(&mut a_stat, &mut b_stat, x, &alpha, 1.0);
                codes[i] = Some(alpha);
            }
            update_atoms(&mut atoms, &a_stat, &b_stat, batch, &samples, &codes);
            separate_duplicates(
                &mut atoms,
                &mut a_stat,
                &mut b_stat,
                &mut codes,
                batch,
                &samples,
            );
        }
        surrogate.push(mean_objective(&samples, &atoms, &codes, cfg.lambda));
    }

    Ok(LearnedDictionary {
        dictionary: SparseDictionary {
            class_id,
            atoms,
            lambda_train: cfg.lambda,
        },
        surrogate,
    })
}

/// Nonzero data columns in seeded random order, scaled to unit norm and
/// skipping directions already taken; seeded random unit vectors fill any
/// shortfall.
fn initial_atoms(samples: &[Vec<f64>], k: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed, 0);
    let candidates: Vec<usize> = (0..samples.len())
        .filter(|&i| norm2(&samples[i]) > 0.0)
        .collect();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in sample(&mut rng, candidates.len(), candidates.len()) {
        if cols.len() == d {
            break;
        }
        let x = &samples[candidates[i]];
        let s = norm2(x);
        let u: Vec<f64> = x.iter().map(|v| v / s).collect();
        if cols.iter().all(|c| dot(c, &u) < DUPLICATE_COSINE) {
            cols.push(u);
        }
    }
    while cols.len() < d {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let s = norm2(&v);
        if s == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= s);
        cols.push(v);
    }
    Matrix::from_columns(&cols).expect("atoms are finite")
}

fn accumulate(a: &mut Matrix, b: &mut Matrix, x: &[f64], alpha: &[f64], sign: f64) {
    let d = alpha.len();
    for p in 0..d {
        if alpha[p] == 0.0 {
            continue;
        }
        for q in 0..d {
            a.set(p, q, a.get(p, q) + sign * alpha[p] * alpha[q]);
        }
        for (r, xr) in x.iter().enumerate() {
            b.set(r, p, b.get(r, p) + sign * xr * alpha[p]);
        }
    }
}

/// One block coordinate-descent pass over the atoms, each column minimized
/// exactly over the unit ball.
fn update_atoms(
    atoms: &mut Matrix,
    a: &Matrix,
    b: &Matrix,
    batch: &[usize],
    samples: &[Vec<f64>],
    codes: &[Option<Vec<f64>>],
) {
    let (k, d) = (atoms.rows(), atoms.cols());
    for j in 0..d {
        let ajj = a.get(j, j);
        if ajj <= 1e-15 {
            // unused atom
            continue;
        }
        let mut u = vec![0.0; k];
        for (r, ur) in u.iter_mut().enumerate() {
            let da: f64 = atoms.row(r).iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
            *ur = atoms.get(r, j) + (b.get(r, j) - da) / ajj;
        }
        let norm = norm2(&u);
        if norm <= 1e-12 {
            let worst = worst_reconstructed(atoms, batch, samples, codes);
            let x = &samples[worst];
            let s = norm2(x);
            for (r, v) in x.iter().enumerate() {
                atoms.set(r, j, v / s);
            }
            continue;
        }
        let scale = norm.max(1.0);
        for (r, v) in u.iter().enumerate() {
            atoms.set(r, j, v / scale);
        }
    }
}

/// Cosine above which two atoms count as the same direction.
const DUPLICATE_COSINE: f64 = 1.0 - 1e-9;

/// Folds the codes of an atom that duplicates an earlier atom into that atom,
/// then reseeds it from the worst-reconstructed batch sample. Near-identical
/// atoms make the coding problem too ill-conditioned to solve to tolerance.
fn separate_duplicates(
    atoms: &mut Matrix,
    a: &mut Matrix,
    b: &mut Matrix,
    codes: &mut [Option<Vec<f64>>],
    batch: &[usize],
    samples: &[Vec<f64>],
) {
    let d = atoms.cols();
    for j in 1..d {
        let dj = atoms.col(j);
        let nj = norm2(&dj);
        let twin = (0..j).find(|&i| {
            let di = atoms.col(i);
            let ni = norm2(&di);
            ni > 0.0 && nj > 0.0 && dot(&di, &dj) >= DUPLICATE_COSINE * ni * nj
        });
        let Some(i) = twin else { continue };
        let ratio = nj / norm2(&atoms.col(i));
        for (x, code) in samples.iter().zip(codes.iter_mut()) {
            let Some(c) = code else { continue };
            if c[j] == 0.0 {
                continue;
            }
            let old = c.clone();
            c[i] += c[j] * ratio;
            c[j] = 0.0;
            accumulate(a, b, x, &old, -1.0);
            accumulate(a, b, x, c, 1.0);
        }
        // no code uses atom j now; clear cancellation residue
        for r in 0..d {
            a.set(r, j, 0.0);
            a.set(j, r, 0.0);
        }
        for r in 0..atoms.rows() {
            b.set(r, j, 0.0);
        }
        let worst = worst_reconstructed(atoms, batch, samples, codes);
        let x = &samples[worst];
        let s = norm2(x);
        for (r, v) in x.iter().enumerate() {
            atoms.set(r, j, v / s);
        }
    }
}

fn worst_reconstructed(
    atoms: &Matrix,
    batch: &[usize],
    samples: &[Vec<f64>],
    codes: &[Option<Vec<f64>>],
) -> usize {
    let mut worst = batch[0];
    let mut worst_err = f64::NEG_INFINITY;
    for &i in batch {
        if norm2(&samples[i]) == 0.0 {
            continue;
        }
        let err = match &codes[i] {
            Some(c) => squared_residual(&samples[i], atoms, c),
            None => f64::INFINITY,
        };
        if err > worst_err {
            worst_err = err;
            worst = i;
        }
    }
    worst
}

fn mean_objective(
    samples: &[Vec<f64>],
    atoms: &Matrix,
    codes: &[Option<Vec<f64>>],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, code) in samples.iter().zip(codes) {
        if let Some(c) = code {
            total +=
                squared_residual(x, atoms, c) + lambda * c.iter().map(|v| v.abs()).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
