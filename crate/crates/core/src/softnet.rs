//! Feed-forward softmax classifier trained by mini-batch SGD on soft
//! (distribution) or hard (one-hot) targets under cross-entropy.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eigenposterior::softmax;
use crate::error::{invalid, Result};
use crate::linalg::{dot, Matrix};
use crate::posterior::{Alignment, PosteriorVector};
use crate::rng::seeded;

/// Floor applied to predicted probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Stacked per-frame features fed to the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("feature entries must be finite");
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Stacks each frame with its neighbours, `context` frames in total centred
/// on the current one. Edge frames are repeated at the sequence ends.
pub fn stack_context(frames: &Matrix, context: usize) -> Result<Vec<FeatureVector>> {
    if context == 0 || context.is_multiple_of(2) {
        return invalid(format!("context must be odd and positive, got {context}"));
    }
    let t_len = frames.rows();
    let half = (context / 2) as isize;
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len as isize {
        let mut values = Vec::with_capacity(frames.cols() * context);
        for off in -half..=half {
            let src = (t + off).clamp(0, t_len as isize - 1) as usize;
            values.extend_from_slice(frames.row(src));
        }
        out.push(FeatureVector { values });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Rectifier hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Dense>,
    pub seed: u64,
    pub epochs_trained: u64,
}

/// Weights uniform in `±√(6 / fan_in)`, biases zero.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MlpModel> {
    if layer_sizes.len() < 3 {
        return invalid("init_mlp: need input, at least one hidden layer, and output");
    }
    if layer_sizes.contains(&0) {
        return invalid("init_mlp: layer sizes must be positive");
    }
    let mut rng = seeded(seed, 0);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Dense {
                weights: Matrix::new(fan_out, fan_in, data).expect("finite weights"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpModel {
        layer_sizes: layer_sizes.to_vec(),
        layers,
        seed,
        epochs_trained: 0,
    })
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`MlpModel::params`].
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return invalid("set_params: wrong parameter count");
        }
        let mut at = 0;
        for l in &mut self.layers {
            let (r, c) = (l.weights.rows(), l.weights.cols());
            l.weights = Matrix::new(r, c, flat[at..at + r * c].to_vec())?;
            at += r * c;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &FeatureVector) -> Result<()> {
        if x.len() != self.input_dim() {
            return invalid(format!(
                "forward: model expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        Ok(())
    }

    /// Activations after every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut out: Vec<f64> = (0..layer.weights.rows())
                .map(|o| layer.bias[o] + dot(layer.weights.row(o), input))
                .collect();
            if idx != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }
}

/// Softmax output of the network.
pub fn forward(model: &MlpModel, x: &FeatureVector) -> Result<PosteriorVector> {
    model.check_input(x)?;
    let acts = model.activations(x.values());
    Ok(softmax(acts.last().unwrap()))
}

/// `−Σ target_k ln(max(pred_k, 1e-12))`.
pub fn soft_cross_entropy(pred: &PosteriorVector, target: &PosteriorVector) -> Result<f64> {
    if pred.class_count() != target.class_count() {
        return invalid("soft_cross_entropy: length mismatch");
    }
    Ok(-pred
        .probs()
        .iter()
        .zip(target.probs())
        .map(|(p, t)| {
            if *t == 0.0 {
                0.0
            } else {
                t * p.max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>())
}

/// Adds `d loss / d params` for one sample into `grad` (flattened like
/// [`MlpModel::params`]) and returns the sample loss.
fn accumulate_gradient(model: &MlpModel, x: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
    let acts = model.activations(x);
    let pred = softmax(acts.last().unwrap());
    let loss = -pred
        .probs()
        .iter()
        .zip(target)
        .map(|(p, t)| {
            if *t == 0.0 {
                0.0
            } else {
                t * p.max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>();
    let mass: f64 = target.iter().sum();
    let mut delta: Vec<f64> = pred
        .probs()
        .iter()
        .zip(target)
        .map(|(p, t)| p * mass - t)
        .collect();

    // offsets of each layer's block in the flat gradient
    let mut offsets = Vec::with_capacity(model.layers.len());
    let mut at = 0;
    for l in &model.layers {
        offsets.push(at);
        at += l.weights.as_slice().len() + l.bias.len();
    }

    for li in (0..model.layers.len()).rev() {
        let layer = &model.layers[li];
        let input = &acts[li];
        let (n_out, n_in) = (layer.weights.rows(), layer.weights.cols());
        let base = offsets[li];
        for o in 0..n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[base + o * n_in..base + (o + 1) * n_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * a;
            }
        }
        let bias_base = base + n_out * n_in;
        for o in 0..n_out {
            grad[bias_base + o] += delta[o];
        }
        if li > 0 {
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(layer.weights.row(o)) {
                    *p += w * d;
                }
            }
            // rectifier derivative, taken as 0 at the kink
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    loss
}

/// Loss and full parameter gradient for one `(input, target)` pair.
pub fn loss_and_gradient(
    model: &MlpModel,
    x: &FeatureVector,
    target: &PosteriorVector,
) -> Result<(f64, Vec<f64>)> {
    model.check_input(x)?;
    if target.class_count() != model.output_dim() {
        return invalid("loss_and_gradient: target has wrong class count");
    }
    let mut grad = vec![0.0; model.param_count()];
    let loss = accumulate_gradient(model, x.values(), target.probs(), &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Share of the data held out for loss monitoring; never trained on.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            shuffle: true,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return invalid("train: learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return invalid("train: batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return invalid("train: holdout_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// Frames held out from `n`; at least one frame is always trained on.
    pub fn holdout_size(&self, n: usize) -> usize {
        ((n as f64 * self.holdout_fraction).floor() as usize).min(n.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss of each epoch, accumulated during the pass.
    pub loss_history: Vec<f64>,
    /// Mean holdout loss after each epoch; empty without a holdout.
    pub holdout_loss_history: Vec<f64>,
    pub train_frames: usize,
    pub holdout_frames: usize,
}

/// Mini-batch SGD on soft cross-entropy. Deterministic given `cfg.seed`.
pub fn train(
    model: &MlpModel,
    features: &[FeatureVector],
    targets: &[PosteriorVector],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.len() != targets.len() {
        return invalid(format!(
            "train: {} feature vectors vs {} targets",
            features.len(),
            targets.len()
        ));
    }
    if features.is_empty() {
        return invalid("train: empty dataset");
    }
    for x in features {
        model.check_input(x)?;
    }
    if let Some(t) = targets
        .iter()
        .find(|t| t.class_count() != model.output_dim())
    {
        return invalid(format!(
            "train: target has K={}, model outputs {}",
            t.class_count(),
            model.output_dim()
        ));
    }

    let n = features.len();
    let mut split: Vec<usize> = (0..n).collect();
    split.shuffle(&mut seeded(cfg.seed, 100));
    let n_hold = cfg.holdout_size(n);
    let holdout: Vec<usize> = split[..n_hold].to_vec();
    let mut order: Vec<usize> = split[n_hold..].to_vec();
    order.sort_unstable();

    let mut model = model.clone();
    let mut params = model.params();
    let mut grad = vec![0.0; params.len()];
    let mut rng = seeded(cfg.seed, 1);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut holdout_loss_history = Vec::new();

    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                epoch_loss += accumulate_gradient(
                    &model,
                    features[i].values(),
                    targets[i].probs(),
                    &mut grad,
                );
            }
            let step = cfg.learning_rate / batch.len() as f64;
            if step != 0.0 {
                params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= step * g);
                model.set_params(&params)?;
            }
        }
        loss_history.push(epoch_loss / order.len() as f64);
        if !holdout.is_empty() {
            let mut total = 0.0;
            for &i in &holdout {
                total += soft_cross_entropy(&forward(&model, &features[i])?, &targets[i])?;
            }
            holdout_loss_history.push(total / holdout.len() as f64);
        }
        model.epochs_trained += 1;
    }

    Ok(TrainOutcome {
        model,
        loss_history,
        holdout_loss_history,
        train_frames: order.len(),
        holdout_frames: holdout.len(),
    })
}

/// [`train`] with integer labels turned into one-hot targets.
pub fn train_hard(
    model: &MlpModel,
    features: &[FeatureVector],
    labels: &Alignment,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let k = model.output_dim();
    let targets = labels
        .labels()
        .iter()
        .map(|l| PosteriorVector::one_hot(*l as usize, k))
        .collect::<Result<Vec<_>>>()?;
    train(model, features, &targets, cfg)
}

/// Fraction of frames whose argmax posterior equals the label.
pub fn frame_accuracy(
    model: &MlpModel,
    features: &[FeatureVector],
    labels: &Alignment,
) -> Result<f64> {
    if features.len() != labels.len() {
        return invalid("frame_accuracy: length mismatch");
    }
    if features.is_empty() {
        return invalid("frame_accuracy: empty input");
    }
    let mut hits = 0usize;
    for (t, x) in features.iter().enumerate() {
        if forward(model, x)?.argmax() == labels.get(t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::make_posterior;
    use rand_distr::StandardNormal;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let a = init_mlp(&[6, 5, 3], 9).unwrap();
        let b = init_mlp(&[6, 5, 3], 9).unwrap();
        assert_eq!(a, b);
        for l in &a.layers {
            assert!(l.bias.iter().all(|v| *v == 0.0));
            let bound = (6.0 / l.weights.cols() as f64).sqrt();
            assert!(l.weights.as_slice().iter().all(|w| w.abs() <= bound));
        }
        assert_ne!(a, init_mlp(&[6, 5, 3], 10).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_mlp(&[4, 3], 0).is_err());
        assert!(init_mlp(&[4, 0, 3], 0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut m = init_mlp(&[3, 4, 5], 1).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_params(&zeros).unwrap();
        let p = forward(&m, &fv(&[1.0, -2.0, 0.5])).unwrap();
        for v in p.probs() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn smallest_net_matches_hand_rolled_oracle() {
        let mut m = init_mlp(&[2, 2, 2], 0).unwrap();
        // W1 = [[1,-1],[0.5,2]], b1 = [0.1,-3]; W2 = [[1,2],[-1,0.5]], b2 = [0, 0.2]
        m.set_params(&[
            1.0, -1.0, 0.5, 2.0, 0.1, -3.0, 1.0, 2.0, -1.0, 0.5, 0.0, 0.2,
        ])
        .unwrap();
        let x = [0.7, 0.4];
        let h = [
            (1.0 * x[0] - 1.0 * x[1] + 0.1f64).max(0.0),
            (0.5 * x[0] + 2.0 * x[1] - 3.0f64).max(0.0),
        ];
        let z = [h[0] + 2.0 * h[1], -h[0] + 0.5 * h[1] + 0.2];
        let e = [z[0].exp(), z[1].exp()];
        let p = forward(&m, &fv(&x)).unwrap();
        assert!((p.probs()[0] - e[0] / (e[0] + e[1])).abs() < 1e-15);
        assert!((p.probs()[1] - e[1] / (e[0] + e[1])).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = init_mlp(&[3, 4, 2], 1).unwrap();
        assert!(forward(&m, &fv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let one = PosteriorVector::one_hot(1, 3).unwrap();
        assert_eq!(soft_cross_entropy(&one, &one).unwrap(), 0.0);
        let u = PosteriorVector::uniform(5);
        assert!((soft_cross_entropy(&u, &u).unwrap() - 5f64.ln()).abs() < 1e-14);
        let pred = make_posterior(&[0.5, 0.5]).unwrap();
        let target = make_posterior(&[0.3, 0.7]).unwrap();
        let want = -0.3 * 0.5f64.ln() - 0.7 * 0.5f64.ln();
        assert!((soft_cross_entropy(&pred, &target).unwrap() - want).abs() < 1e-15);
        assert!((want - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let m = init_mlp(&[2, 3, 2], 4).unwrap();
        let xs = vec![fv(&[1.0, 0.0]), fv(&[0.0, 1.0]), fv(&[0.5, 0.5])];
        let ts = vec![
            PosteriorVector::one_hot(0, 2).unwrap(),
            PosteriorVector::one_hot(1, 2).unwrap(),
            PosteriorVector::uniform(2),
        ];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            holdout_fraction: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&m, &xs, &ts, &cfg).unwrap();
        assert_eq!(out.model.params(), m.params());
        assert!(out.loss_history.windows(2).all(|w| w[0] == w[1]));
    }

    fn separable(n: usize, seed: u64) -> (Vec<FeatureVector>, Alignment) {
        let mut rng = seeded(seed, 0);
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u32;
            let shift = if c == 0 { -2.0 } else { 2.0 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            xs.push(fv(&[shift + 0.3 * a, 0.3 * b]));
            labels.push(c);
        }
        (xs, Alignment::new(labels, 2).unwrap())
    }

    #[test]
    fn separable_loss_decreases_and_training_is_deterministic() {
        let (xs, labels) = separable(200, 3);
        let m = init_mlp(&[2, 8, 2], 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train_hard(&m, &xs, &labels, &cfg).unwrap();
        for w in a.loss_history.windows(2) {
            assert!(w[1] < w[0], "{:?}", a.loss_history);
        }
        let b = train_hard(&m, &xs, &labels, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.train_frames, 180);
        assert_eq!(a.holdout_frames, 20);
        assert_eq!(a.holdout_loss_history.len(), 5);
        assert_eq!(frame_accuracy(&a.model, &xs, &labels).unwrap(), 1.0);
    }

    #[test]
    fn hard_targets_equal_one_hot_soft_targets() {
        let (xs, labels) = separable(50, 8);
        let m = init_mlp(&[2, 4, 2], 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 2,
            ..TrainConfig::default()
        };
        let hard = train_hard(&m, &xs, &labels, &cfg).unwrap();
        let one_hot: Vec<_> = labels
            .labels()
            .iter()
            .map(|l| PosteriorVector::one_hot(*l as usize, 2).unwrap())
            .collect();
        let soft = train(&m, &xs, &one_hot, &cfg).unwrap();
        assert_eq!(hard.model, soft.model);
        assert_eq!(hard.loss_history, soft.loss_history);
    }

    #[test]
    fn train_rejects_empty_and_mismatch() {
        let m = init_mlp(&[2, 2, 2], 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(&m, &[], &[], &cfg).is_err());
        assert!(train(&m, &[fv(&[1.0, 2.0])], &[], &cfg).is_err());
    }

    #[test]
    fn frame_accuracy_hand_case() {
        let mut m = init_mlp(&[2, 2, 2], 0).unwrap();
        // identity hidden layer, identity output: argmax follows the larger input
        m.set_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let xs = vec![fv(&[2.0, 1.0]), fv(&[0.0, 3.0]), fv(&[1.0, 0.5])];
        let labels = Alignment::new(vec![0, 0, 0], 2).unwrap();
        let acc = frame_accuracy(&m, &xs, &labels).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert!(frame_accuracy(&m, &[], &Alignment::new(vec![], 2).unwrap()).is_err());
    }

    #[test]
    fn context_stacking_repeats_edges() {
        let frames = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = stack_context(&frames, 3).unwrap();
        assert_eq!(s[0].values(), &[1.0, 1.0, 2.0]);
        assert_eq!(s[1].values(), &[1.0, 2.0, 3.0]);
        assert_eq!(s[2].values(), &[2.0, 3.0, 3.0]);
        assert!(stack_context(&frames, 2).is_err());
    }
}
