//! Feedforward binary classifier: rectified hidden layers, sigmoid
//! output, binary cross-entropy loss with an L2 weight penalty, trained
//! by mini-batch gradient descent with momentum. Hyperparameters (layer
//! count, layer widths, regularization strength) are tuned by random
//! search scored with k-fold cross-validation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::{schema_hash, FeatureMode};

/// Sigmoid pre-activation clamp; keeps the output strictly inside (0, 1)
/// in f64 and the loss finite.
const Z_CLAMP: f64 = 36.0;

fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-Z_CLAMP, Z_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Architecture and regularization choice (the random-search unknowns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Hidden layer widths, input to output order.
    pub hidden: Vec<usize>,
    /// L2 regularization strength.
    pub lambda: f64,
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(CoreError::Training(
                "epochs and batch size must be >= 1 and learning rate positive".into(),
            ));
        }
        Ok(())
    }
}

/// Random-search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub hidden_layers: (usize, usize),
    pub nodes_per_layer: (usize, usize),
    /// log10 bounds of the regularization strength.
    pub lambda_log10: (f64, f64),
    pub trials: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            hidden_layers: (1, 3),
            nodes_per_layer: (4, 200),
            lambda_log10: (-8.0, -2.0),
            trials: 50,
            seed: 0,
        }
    }
}

/// Provenance embedded in saved model files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub seed: u64,
    pub epochs: usize,
    pub dataset_hash: String,
}

/// The trained detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// Input width, hidden widths, then the single sigmoid output.
    pub layer_sizes: Vec<usize>,
    /// Row-major weight matrices, one per layer (out x in).
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    /// Per-column affine input transform fitted on the training split:
    /// the network sees (x - offset) * scale. Identity until trained.
    input_offset: Vec<f64>,
    input_scale: Vec<f64>,
    pub lambda: f64,
    pub feature_mode: FeatureMode,
    pub schema_hash: String,
    pub manifest: TrainManifest,
}

impl MlpModel {
    /// Fan-in-scaled symmetric uniform initialization, seeded.
    pub fn init(spec: &MlpSpec, input_dim: usize, mode: FeatureMode, seed: u64) -> MlpModel {
        let mut sizes = Vec::with_capacity(spec.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 1..sizes.len() {
            let fan_in = sizes[l - 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..sizes[l] * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(w);
            let b: Vec<f64> = (0..sizes[l]).map(|_| rng.gen_range(-bound..bound)).collect();
            biases.push(b);
        }
        MlpModel {
            layer_sizes: sizes.clone(),
            weights,
            biases,
            input_offset: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            lambda: spec.lambda,
            feature_mode: mode,
            schema_hash: schema_hash(mode),
            manifest: TrainManifest::default(),
        }
    }

    /// Fit the input transform to column means and standard deviations
    /// of the given rows (near-constant columns are left unscaled).
    pub fn fit_standardization(&mut self, xs: &[Vec<f64>]) {
        if xs.is_empty() {
            return;
        }
        let dim = self.input_dim();
        let n = xs.len() as f64;
        for c in 0..dim {
            let mean = xs.iter().map(|x| x[c]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[c] - mean) * (x[c] - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.input_offset[c] = mean;
            self.input_scale[c] = if sd > 1e-9 { 1.0 / sd } else { 1.0 };
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_offset)
            .zip(&self.input_scale)
            .map(|((v, o), s)| (v - o) * s)
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(CoreError::Schema(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass: probability that the update is malicious.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut a = self.standardize(x);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let out_dim = self.layer_sizes[l + 1];
            let in_dim = self.layer_sizes[l];
            let mut z = vec![0.0; out_dim];
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(&a) {
                    acc += wi * ai;
                }
                z[o] = acc;
            }
            if l == last {
                return Ok(sigmoid(z[0]));
            }
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
            a = z;
        }
        unreachable!("network has at least one layer");
    }

    /// Hard decision at `threshold` (1 on ties).
    pub fn predict(&self, x: &[f64], threshold: f64) -> Result<u8> {
        Ok(u8::from(self.forward(x)? >= threshold))
    }

    /// Regularized mean loss and exact gradients over a batch.
    pub fn gradients(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(f64, Gradients)> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(CoreError::Training("empty or mismatched batch".into()));
        }
        let n_layers = self.weights.len();
        let mut grad_w: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut grad_b: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let inv_n = 1.0 / xs.len() as f64;
        let mut loss = 0.0;

        for (x, &y) in xs.iter().zip(ys) {
            self.check_input(x)?;
            // Forward with caches.
            let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
            activations.push(self.standardize(x));
            let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let in_dim = self.layer_sizes[l];
                let out_dim = self.layer_sizes[l + 1];
                let w = &self.weights[l];
                let b = &self.biases[l];
                let a_prev = &activations[l];
                let mut z = vec![0.0; out_dim];
                for o in 0..out_dim {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = b[o];
                    for (wi, ai) in row.iter().zip(a_prev) {
                        acc += wi * ai;
                    }
                    z[o] = acc;
                }
                let a: Vec<f64> = if l == n_layers - 1 {
                    vec![sigmoid(z[0])]
                } else {
                    z.iter().map(|v| v.max(0.0)).collect()
                };
                zs.push(z);
                activations.push(a);
            }
            let p = activations[n_layers][0];
            loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) * inv_n;

            // Backward. For the clamped sigmoid output the chain is
            // dL/dz = p - y (zero once the clamp engages).
            let z_out = zs[n_layers - 1][0];
            let mut delta = if z_out.abs() > Z_CLAMP {
                vec![0.0]
            } else {
                vec![(p - y) * inv_n]
            };
            for l in (0..n_layers).rev() {
                let in_dim = self.layer_sizes[l];
                let out_dim = self.layer_sizes[l + 1];
                let a_prev = &activations[l];
                for o in 0..out_dim {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut grad_w[l][o * in_dim..(o + 1) * in_dim];
                        for (g, ai) in row.iter_mut().zip(a_prev) {
                            *g += d * ai;
                        }
                        grad_b[l][o] += d;
                    }
                }
                if l > 0 {
                    let mut next = vec![0.0; in_dim];
                    let w = &self.weights[l];
                    for o in 0..out_dim {
                        let d = delta[o];
                        if d != 0.0 {
                            let row = &w[o * in_dim..(o + 1) * in_dim];
                            for (ni, wi) in next.iter_mut().zip(row) {
                                *ni += d * wi;
                            }
                        }
                    }
                    // Rectifier gate on the previous layer's pre-activation.
                    for (ni, zi) in next.iter_mut().zip(&zs[l - 1]) {
                        if *zi <= 0.0 {
                            *ni = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }

        // L2 penalty on weights only.
        let mut penalty = 0.0;
        for (w, gw) in self.weights.iter().zip(grad_w.iter_mut()) {
            for (wi, gi) in w.iter().zip(gw.iter_mut()) {
                penalty += wi * wi;
                *gi += 2.0 * self.lambda * wi;
            }
        }
        loss += self.lambda * penalty;
        if !loss.is_finite() {
            return Err(CoreError::Training(format!("non-finite loss {loss}")));
        }
        Ok((loss, Gradients { w: grad_w, b: grad_b }))
    }

    /// Mean regularized loss without gradients.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
        if xs.is_empty() {
            return Err(CoreError::Training("empty batch".into()));
        }
        let inv_n = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = self.forward(x)?;
            loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) * inv_n;
        }
        let penalty: f64 = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .map(|wi| wi * wi)
            .sum();
        Ok(loss + self.lambda * penalty)
    }

    /// Fraction of correct hard decisions at threshold 0.5.
    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
        if xs.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (x, &y) in xs.iter().zip(ys) {
            if f64::from(self.predict(x, 0.5)?) == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / xs.len() as f64)
    }

    // Flat parameter views, used by the finite-difference checks.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for w in &self.weights {
            if i < w.len() {
                return w[i];
            }
            i -= w.len();
        }
        for b in &self.biases {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for w in &mut self.weights {
            if i < w.len() {
                w[i] = value;
                return;
            }
            i -= w.len();
        }
        for b in &mut self.biases {
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn grad_at(grads: &Gradients, idx: usize) -> f64 {
        let mut i = idx;
        for w in &grads.w {
            if i < w.len() {
                return w[i];
            }
            i -= w.len();
        }
        for b in &grads.b {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Structured-text model file (TOML); lossless f64 round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| CoreError::Format(format!("model: {e}")))?;
        fs::File::create(path)?.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Load and validate a model file. Rejects files whose feature
    /// schema does not match this build's extractor.
    pub fn load(path: &Path) -> Result<MlpModel> {
        let model: MlpModel = toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CoreError::Format(format!("model file: {e}")))?;
        // Shape chain must be consistent.
        if model.layer_sizes.len() < 2 || *model.layer_sizes.last().unwrap() != 1 {
            return Err(CoreError::Format("model layer sizes are invalid".into()));
        }
        if model.weights.len() != model.layer_sizes.len() - 1
            || model.biases.len() != model.weights.len()
        {
            return Err(CoreError::Format("model layer count mismatch".into()));
        }
        for l in 0..model.weights.len() {
            if model.weights[l].len() != model.layer_sizes[l] * model.layer_sizes[l + 1]
                || model.biases[l].len() != model.layer_sizes[l + 1]
            {
                return Err(CoreError::Format(format!("layer {l} has wrong shape")));
            }
        }
        if model.input_offset.len() != model.layer_sizes[0]
            || model.input_scale.len() != model.layer_sizes[0]
        {
            return Err(CoreError::Format("input transform has wrong shape".into()));
        }
        if model.schema_hash != schema_hash(model.feature_mode) {
            return Err(CoreError::Schema(format!(
                "model was trained against schema {}, this build provides {}",
                model.schema_hash,
                schema_hash(model.feature_mode)
            )));
        }
        Ok(model)
    }
}

/// Per-parameter gradients, same layout as the model.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Mini-batch gradient descent with momentum; returns the parameters
/// with the best validation loss seen (training loss when no validation
/// set is supplied).
pub fn train(
    init: MlpModel,
    xs: &[Vec<f64>],
    ys: &[f64],
    val: Option<(&[Vec<f64>], &[f64])>,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    cfg.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(CoreError::Training("empty or mismatched training set".into()));
    }
    if ys.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(CoreError::Training("labels must be 0 or 1".into()));
    }
    let mut model = init;
    model.fit_standardization(xs);
    let mut vel_w: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut vel_b: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();

    let mut best = model.clone();
    let mut best_loss = match val {
        Some((vx, vy)) => model.loss(vx, vy)?,
        None => model.loss(xs, ys)?,
    };

    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let (_, grads) = model.gradients(&bx, &by)?;
            for l in 0..model.weights.len() {
                for (k, g) in grads.w[l].iter().enumerate() {
                    vel_w[l][k] = cfg.momentum * vel_w[l][k] - cfg.learning_rate * g;
                    model.weights[l][k] += vel_w[l][k];
                }
                for (k, g) in grads.b[l].iter().enumerate() {
                    vel_b[l][k] = cfg.momentum * vel_b[l][k] - cfg.learning_rate * g;
                    model.biases[l][k] += vel_b[l][k];
                }
            }
        }
        let epoch_loss = match val {
            Some((vx, vy)) => model.loss(vx, vy)?,
            None => model.loss(xs, ys)?,
        };
        if !epoch_loss.is_finite() {
            return Err(CoreError::Training(format!(
                "non-finite loss {epoch_loss} during training"
            )));
        }
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best = model.clone();
        }
    }
    best.manifest.seed = cfg.seed;
    best.manifest.epochs = cfg.epochs;
    Ok(best)
}

/// Training losses per epoch for a plain run (no best-snapshot logic);
/// used by convergence diagnostics.
pub fn train_loss_history(
    init: MlpModel,
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut model = init;
    model.fit_standardization(xs);
    let mut vel_w: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut vel_b: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let (_, grads) = model.gradients(&bx, &by)?;
            for l in 0..model.weights.len() {
                for (k, g) in grads.w[l].iter().enumerate() {
                    vel_w[l][k] = cfg.momentum * vel_w[l][k] - cfg.learning_rate * g;
                    model.weights[l][k] += vel_w[l][k];
                }
                for (k, g) in grads.b[l].iter().enumerate() {
                    vel_b[l][k] = cfg.momentum * vel_b[l][k] - cfg.learning_rate * g;
                    model.biases[l][k] += vel_b[l][k];
                }
            }
        }
        history.push(model.loss(xs, ys)?);
    }
    Ok(history)
}

/// Fold-role convention for cross-validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldProtocol {
    /// Each model trains on one fold and validates on the remaining
    /// k - 1 folds.
    PaperLiteral,
    /// Each model trains on k - 1 folds and validates on the held-out
    /// one.
    Conventional,
}

/// Cross-validation outcome.
#[derive(Clone, Debug)]
pub struct CvReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Set when a degenerate (single-class) fold forced a stratified
    /// re-deal.
    pub stratified: bool,
    pub folds: Vec<Vec<usize>>,
}

fn deal_folds(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    folds
}

/// k-fold cross-validation of one model spec.
pub fn kfold_cv(
    xs: &[Vec<f64>],
    ys: &[f64],
    k: usize,
    protocol: FoldProtocol,
    spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<CvReport> {
    if k < 2 {
        return Err(CoreError::Training("k must be at least 2".into()));
    }
    if xs.len() < k {
        return Err(CoreError::Training(format!(
            "dataset of {} rows cannot be split into {k} folds",
            xs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b66_6f6c_6421);
    let mut folds = deal_folds(xs.len(), k, &mut rng);
    let degenerate = |folds: &Vec<Vec<usize>>| {
        folds.iter().any(|f| {
            let mut has0 = false;
            let mut has1 = false;
            for &i in f {
                if ys[i] == 0.0 {
                    has0 = true;
                } else {
                    has1 = true;
                }
            }
            !(has0 && has1)
        })
    };
    let mut stratified = false;
    if degenerate(&folds) {
        // Re-deal class by class so every fold sees both labels.
        stratified = true;
        let mut folds2 = vec![Vec::new(); k];
        for class in [0.0, 1.0] {
            let mut idx: Vec<usize> = (0..xs.len()).filter(|&i| ys[i] == class).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            for (pos, i) in idx.into_iter().enumerate() {
                folds2[pos % k].push(i);
            }
        }
        folds = folds2;
    }

    let gather = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            ids.iter().map(|&i| xs[i].clone()).collect(),
            ids.iter().map(|&i| ys[i]).collect(),
        )
    };

    let mut fold_accuracies = Vec::with_capacity(k);
    for fold in 0..k {
        let (train_ids, val_ids): (Vec<usize>, Vec<usize>) = match protocol {
            FoldProtocol::PaperLiteral => {
                let t = folds[fold].clone();
                let v = folds
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != fold)
                    .flat_map(|(_, f)| f.iter().copied())
                    .collect();
                (t, v)
            }
            FoldProtocol::Conventional => {
                let t = folds
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != fold)
                    .flat_map(|(_, f)| f.iter().copied())
                    .collect();
                let v = folds[fold].clone();
                (t, v)
            }
        };
        let (tx, ty) = gather(&train_ids);
        let (vx, vy) = gather(&val_ids);
        let init = MlpModel::init(
            spec,
            xs[0].len(),
            FeatureMode::Monitored,
            cfg.seed ^ (fold as u64 + 1),
        );
        let model = train(init, &tx, &ty, Some((&vx, &vy)), cfg)?;
        fold_accuracies.push(model.accuracy(&vx, &vy)?);
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    Ok(CvReport {
        fold_accuracies,
        mean_accuracy,
        stratified,
        folds,
    })
}

/// One random-search trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

/// Random search over the hyperparameter space, scored by k-fold mean
/// accuracy. Deterministic in the space's seed; the best spec is the
/// first trial attaining the maximum score.
pub fn random_search(
    xs: &[Vec<f64>],
    ys: &[f64],
    space: &SearchSpace,
    protocol: FoldProtocol,
    k: usize,
    cfg: &TrainConfig,
) -> Result<(MlpSpec, Vec<TrialRecord>)> {
    if space.trials == 0 {
        return Err(CoreError::Training("search budget must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let mut log: Vec<TrialRecord> = Vec::with_capacity(space.trials);
    let mut best: Option<(f64, MlpSpec)> = None;
    for index in 0..space.trials {
        let n_layers = rng.gen_range(space.hidden_layers.0..=space.hidden_layers.1);
        let hidden: Vec<usize> = (0..n_layers)
            .map(|_| rng.gen_range(space.nodes_per_layer.0..=space.nodes_per_layer.1))
            .collect();
        let lambda = 10f64.powf(rng.gen_range(space.lambda_log10.0..=space.lambda_log10.1));
        let spec = MlpSpec { hidden, lambda };
        let trial_cfg = TrainConfig {
            seed: cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9),
            ..*cfg
        };
        let report = kfold_cv(xs, ys, k, protocol, &spec, &trial_cfg)?;
        log.push(TrialRecord {
            index,
            hidden: spec.hidden.clone(),
            lambda: spec.lambda,
            mean_accuracy: report.mean_accuracy,
            fold_accuracies: report.fold_accuracies,
        });
        let better = match &best {
            None => true,
            Some((score, _)) => report.mean_accuracy > *score,
        };
        if better {
            best = Some((report.mean_accuracy, spec));
        }
    }
    Ok((best.expect("at least one trial").1, log))
}

/// Persist a search log as a delimited table.
pub fn write_search_log(log: &[TrialRecord], path: &Path) -> Result<()> {
    let mut out = String::from("trial,hidden,lambda,mean_accuracy,fold_accuracies\n");
    for t in log {
        let hidden = t
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let folds = t
            .fold_accuracies
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.index, hidden, t.lambda, t.mean_accuracy, folds
        ));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> MlpSpec {
        MlpSpec {
            hidden: vec![4],
            lambda: 0.0,
        }
    }

    #[test]
    fn zero_network_outputs_half() {
        let mut m = MlpModel::init(&tiny_spec(), 3, FeatureMode::Monitored, 1);
        for i in 0..m.param_count() {
            m.set_param(i, 0.0);
        }
        let p = m.forward(&[0.3, -0.7, 2.0]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn saturated_output_stays_inside_unit_interval() {
        let spec = MlpSpec {
            hidden: vec![],
            lambda: 0.0,
        };
        let mut m = MlpModel::init(&spec, 1, FeatureMode::Monitored, 1);
        m.set_param(0, 1e6);
        let hi = m.forward(&[1.0]).unwrap();
        let lo = m.forward(&[-1.0]).unwrap();
        assert!(hi > 0.999 && hi < 1.0);
        assert!(lo < 0.001 && lo > 0.0);
    }

    #[test]
    fn forward_matches_hand_computed_chain() {
        // 3-4-1 network with explicit scalar arithmetic as the oracle.
        let spec = MlpSpec {
            hidden: vec![4],
            lambda: 0.0,
        };
        let m = MlpModel::init(&spec, 3, FeatureMode::Monitored, 42);
        let x = [0.5, -1.2, 0.8];

        let mut hidden = [0.0f64; 4];
        for o in 0..4 {
            let mut acc = m.biases[0][o];
            for i in 0..3 {
                acc += m.weights[0][o * 3 + i] * x[i];
            }
            hidden[o] = acc.max(0.0);
        }
        let mut z = m.biases[1][0];
        for o in 0..4 {
            z += m.weights[1][o] * hidden[o];
        }
        let expected = 1.0 / (1.0 + (-z).exp());
        let got = m.forward(&x).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn predict_threshold_boundary_is_inclusive() {
        let mut m = MlpModel::init(&tiny_spec(), 2, FeatureMode::Monitored, 1);
        for i in 0..m.param_count() {
            m.set_param(i, 0.0);
        }
        // forward = 0.5 exactly, threshold 0.5: label 1.
        assert_eq!(m.predict(&[0.0, 0.0], 0.5).unwrap(), 1);
        assert_eq!(m.predict(&[0.0, 0.0], 0.6).unwrap(), 0);
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let m = MlpModel::init(&tiny_spec(), 3, FeatureMode::Monitored, 1);
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(CoreError::Schema(_))
        ));
    }

    fn finite_difference_check(arch: &[usize], lambda: f64, seed: u64, n_samples: usize) {
        let spec = MlpSpec {
            hidden: arch.to_vec(),
            lambda,
        };
        let input_dim = 5;
        let mut model = MlpModel::init(&spec, input_dim, FeatureMode::Monitored, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
        let xs: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let ys: Vec<f64> = (0..n_samples)
            .map(|_| f64::from(rng.gen_bool(0.5)))
            .collect();
        let (_, grads) = model.gradients(&xs, &ys).unwrap();
        let h = 1e-6;
        for idx in 0..model.param_count() {
            let orig = model.param(idx);
            model.set_param(idx, orig + h);
            let up = model.loss(&xs, &ys).unwrap();
            model.set_param(idx, orig - h);
            let down = model.loss(&xs, &ys).unwrap();
            model.set_param(idx, orig);
            let fd = (up - down) / (2.0 * h);
            let an = MlpModel::grad_at(&grads, idx);
            let denom = an.abs().max(fd.abs()).max(1.0);
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "param {idx}: analytic {an}, fd {fd}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_architectures() {
        let cases: [(&[usize], f64); 10] = [
            (&[], 0.0),
            (&[3], 0.0),
            (&[5], 1e-4),
            (&[4, 3], 0.0),
            (&[6, 2], 1e-3),
            (&[2, 2, 2], 0.0),
            (&[8], 1e-6),
            (&[3, 5], 1e-5),
            (&[7, 4], 0.0),
            (&[4], 1e-2),
        ];
        for (i, (arch, lambda)) in cases.iter().enumerate() {
            finite_difference_check(arch, *lambda, 100 + i as u64, 4 + i % 3);
        }
    }

    #[test]
    fn regularization_gradient_is_exactly_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..6).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let lambda = 0.37;
        let spec0 = MlpSpec {
            hidden: vec![3],
            lambda: 0.0,
        };
        let spec1 = MlpSpec {
            hidden: vec![3],
            lambda,
        };
        let m0 = MlpModel::init(&spec0, 4, FeatureMode::Monitored, 9);
        let m1 = MlpModel::init(&spec1, 4, FeatureMode::Monitored, 9);
        let (_, g0) = m0.gradients(&xs, &ys).unwrap();
        let (_, g1) = m1.gradients(&xs, &ys).unwrap();
        for l in 0..g0.w.len() {
            for k in 0..g0.w[l].len() {
                let expected = g0.w[l][k] + 2.0 * lambda * m1.weights[l][k];
                assert!((g1.w[l][k] - expected).abs() < 1e-12);
            }
            for k in 0..g0.b[l].len() {
                assert!((g1.b[l][k] - g0.b[l][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn near_perfect_predictions_have_near_zero_gradients() {
        // A single linear unit with a huge weight saturates correctly on
        // labeled-by-sign data.
        let spec = MlpSpec {
            hidden: vec![],
            lambda: 0.0,
        };
        let mut m = MlpModel::init(&spec, 1, FeatureMode::Monitored, 1);
        m.set_param(0, 30.0); // weight
        m.set_param(1, 0.0); // bias
        let xs = vec![vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]];
        let ys = vec![1.0, 0.0, 1.0, 0.0];
        let (_, grads) = m.gradients(&xs, &ys).unwrap();
        for idx in 0..m.param_count() {
            assert!(MlpModel::grad_at(&grads, idx).abs() < 1e-8);
        }
    }

    fn separable_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.gen_bool(0.5);
            let (cx, cy) = if y { (1.5, 1.0) } else { (-1.5, -1.0) };
            xs.push(vec![
                cx + rng.gen_range(-0.5..0.5),
                cy + rng.gen_range(-0.5..0.5),
            ]);
            ys.push(f64::from(y));
        }
        (xs, ys)
    }

    #[test]
    fn separable_data_reaches_full_training_accuracy() {
        let (xs, ys) = separable_data(120, 2);
        let spec = MlpSpec {
            hidden: vec![6],
            lambda: 0.0,
        };
        let init = MlpModel::init(&spec, 2, FeatureMode::Monitored, 3);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 4,
        };
        let model = train(init, &xs, &ys, None, &cfg).unwrap();
        assert_eq!(model.accuracy(&xs, &ys).unwrap(), 1.0);
    }

    #[test]
    fn smoothed_training_loss_is_non_increasing_on_separable_data() {
        let (xs, ys) = separable_data(120, 6);
        let spec = MlpSpec {
            hidden: vec![6],
            lambda: 0.0,
        };
        let init = MlpModel::init(&spec, 2, FeatureMode::Monitored, 7);
        let cfg = TrainConfig {
            epochs: 120,
            batch_size: 120, // full batch keeps the trajectory smooth
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 8,
        };
        let history = train_loss_history(init, &xs, &ys, &cfg).unwrap();
        let window = 5;
        let smooth: Vec<f64> = history
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        for pair in smooth.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "loss rose: {pair:?}");
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (xs, ys) = separable_data(60, 9);
        let spec = MlpSpec {
            hidden: vec![5],
            lambda: 1e-5,
        };
        let cfg = TrainConfig {
            epochs: 30,
            ..Default::default()
        };
        let a = train(
            MlpModel::init(&spec, 2, FeatureMode::Monitored, 10),
            &xs,
            &ys,
            None,
            &cfg,
        )
        .unwrap();
        let b = train(
            MlpModel::init(&spec, 2, FeatureMode::Monitored, 10),
            &xs,
            &ys,
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kfold_folds_are_disjoint_exhaustive_and_balanced() {
        let (xs, ys) = separable_data(103, 12);
        let spec = tiny_spec();
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        for protocol in [FoldProtocol::PaperLiteral, FoldProtocol::Conventional] {
            let report = kfold_cv(&xs, &ys, 5, protocol, &spec, &cfg).unwrap();
            assert_eq!(report.fold_accuracies.len(), 5);
            let mut seen = vec![false; xs.len()];
            let sizes: Vec<usize> = report.folds.iter().map(Vec::len).collect();
            for fold in &report.folds {
                for &i in fold {
                    assert!(!seen[i], "index {i} appears twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
            let min = sizes.iter().min().unwrap();
            let max = sizes.iter().max().unwrap();
            assert!(max - min <= 1, "fold sizes {sizes:?}");
        }
    }

    #[test]
    fn degenerate_folds_trigger_stratified_redeal() {
        // 6 rows, 5 folds, a single positive: the positive cannot reach
        // every fold, so the class check must fire and re-deal.
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let ys = vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let spec = tiny_spec();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let report = kfold_cv(&xs, &ys, 2, FoldProtocol::Conventional, &spec, &cfg);
        // With k=2 and one positive, one fold lacks the positive class
        // whenever the positive lands alone; run a few seeds to hit it.
        let mut saw_stratified = false;
        for seed in 0..6 {
            let cfg = TrainConfig {
                seed,
                epochs: 1,
                ..Default::default()
            };
            if let Ok(r) = kfold_cv(&xs, &ys, 2, FoldProtocol::Conventional, &spec, &cfg) {
                saw_stratified |= r.stratified;
            }
        }
        assert!(saw_stratified || report.is_ok());
    }

    #[test]
    fn random_search_is_deterministic_and_reproduces_pinned_optimum() {
        let (xs, ys) = separable_data(60, 20);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        // Space pinned to the reported optimum architecture.
        let space = SearchSpace {
            hidden_layers: (2, 2),
            nodes_per_layer: (7, 7),
            lambda_log10: (5.2128e-7f64.log10(), 5.2128e-7f64.log10()),
            trials: 1,
            seed: 0,
        };
        let (best, log) = random_search(
            &xs,
            &ys,
            &space,
            FoldProtocol::PaperLiteral,
            5,
            &cfg,
        )
        .unwrap();
        assert_eq!(best.hidden, vec![7, 7]);
        assert!((best.lambda - 5.2128e-7).abs() / 5.2128e-7 < 1e-9);
        assert_eq!(log.len(), 1);

        let space2 = SearchSpace {
            hidden_layers: (1, 2),
            nodes_per_layer: (4, 16),
            lambda_log10: (-7.0, -3.0),
            trials: 4,
            seed: 33,
        };
        let (_, log_a) =
            random_search(&xs, &ys, &space2, FoldProtocol::PaperLiteral, 5, &cfg).unwrap();
        let (_, log_b) =
            random_search(&xs, &ys, &space2, FoldProtocol::PaperLiteral, 5, &cfg).unwrap();
        for (a, b) in log_a.iter().zip(&log_b) {
            assert_eq!(a.hidden, b.hidden);
            assert_eq!(a.lambda, b.lambda);
            assert_eq!(a.mean_accuracy, b.mean_accuracy);
        }
    }

    #[test]
    fn model_file_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.toml");
        let (xs, ys) = separable_data(40, 30);
        let spec = MlpSpec {
            hidden: vec![3],
            lambda: 1e-6,
        };
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let model = train(
            MlpModel::init(&spec, 2, FeatureMode::Monitored, 31),
            &xs,
            &ys,
            None,
            &cfg,
        )
        .unwrap();
        model.save(&path).unwrap();
        let back = MlpModel::load(&path).unwrap();
        assert_eq!(model, back);

        // Corrupt file.
        std::fs::write(&path, "not a model").unwrap();
        assert!(matches!(
            MlpModel::load(&path),
            Err(CoreError::Format(_) | CoreError::Io(_))
        ));

        // Schema mismatch.
        let mut tampered = model.clone();
        tampered.schema_hash = "0000".into();
        tampered.save(&path).unwrap();
        assert!(matches!(MlpModel::load(&path), Err(CoreError::Schema(_))));
    }
}
