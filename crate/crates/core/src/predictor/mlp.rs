use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{partial_log_lik, RiskScore};
use crate::data::{Normalization, SurvivalDataset};
use crate::error::{Error, Result};
use crate::numeric::{rng_for, LogSumExp};

/// Fully connected layer, `weights[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// Feedforward network with ReLU between layers and a scalar linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPredictor {
    pub layers: Vec<DenseLayer>,
    /// Training-time dropout on hidden activations; inactive at evaluation.
    pub dropout_rate: f64,
    /// Optional input standardization applied before the first layer.
    #[serde(default)]
    pub input_normalization: Option<Normalization>,
}

impl RiskScore for MlpPredictor {
    fn risk(&self, x: &[f64]) -> f64 {
        let mut a = match &self.input_normalization {
            Some(n) => n.apply(x),
            None => x.to_vec(),
        };
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.forward(&a);
            if l < last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        a[0]
    }
}

impl MlpPredictor {
    /// He-uniform initialization.
    pub fn init<R: Rng>(input_dim: usize, hidden: &[usize], dropout_rate: f64, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                DenseLayer {
                    weights: (0..w[1])
                        .map(|_| (0..w[0]).map(|_| rng.random_range(-bound..bound)).collect())
                        .collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self {
            layers,
            dropout_rate,
            input_normalization: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("invalid MLP: {m}")));
        if self.layers.is_empty() {
            return bad("no layers");
        }
        if self.layers.last().map(DenseLayer::output_dim) != Some(1) {
            return bad("output dimension must be 1");
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return bad("adjacent layer dimensions differ");
            }
        }
        if self
            .layers
            .iter()
            .any(|l| l.weights.iter().any(|r| r.len() != l.input_dim()))
        {
            return bad("ragged weight matrix");
        }
        if !self.flat_params().iter().all(|v| v.is_finite()) {
            return bad("non-finite weight");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate outside [0, 1)");
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.output_dim() * (l.input_dim() + 1))
            .sum()
    }

    /// Parameters layer by layer: weight rows, then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            l.weights.iter().for_each(|r| out.extend_from_slice(r));
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for r in &mut l.weights {
                r.iter_mut().for_each(|w| *w = it.next().unwrap_or(0.0));
            }
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap_or(0.0));
        }
    }

    /// Mask over `flat_params` marking weights (penalized) versus biases.
    fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.output_dim() * l.input_dim()));
            out.extend(std::iter::repeat_n(false, l.output_dim()));
        }
        out
    }

    /// Batch loss and its gradient with respect to `flat_params`.
    ///
    /// The loss is the negative partial log-likelihood averaged over events,
    /// with risk sets restricted to the batch, plus `penalty/2·Σw²` over the
    /// weights. Returns `None` for a batch without events. When `dropout` is
    /// given, hidden units are dropped at `self.dropout_rate` using that RNG.
    pub fn batch_loss_grad<R: Rng>(
        &self,
        inputs: &[Vec<f64>],
        times: &[f64],
        events: &[bool],
        penalty: f64,
        mut dropout: Option<&mut R>,
    ) -> Option<(f64, Vec<f64>)> {
        let n = inputs.len();
        let depth = self.layers.len();
        // activations[l] is the input to layer l; masks hold dropout scaling (0 or 1/(1-p))
        let mut activations: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
        let mut masks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let keep = 1.0 - self.dropout_rate;
        for x in inputs {
            let mut acts = vec![match &self.input_normalization {
                Some(norm) => norm.apply(x),
                None => x.clone(),
            }];
            let mut ms = Vec::with_capacity(depth.saturating_sub(1));
            for (l, layer) in self.layers.iter().enumerate() {
                let mut z = layer.forward(&acts[l]);
                if l + 1 < depth {
                    let mut m = vec![1.0; z.len()];
                    if let Some(rng) = dropout.as_deref_mut() {
                        if self.dropout_rate > 0.0 {
                            for v in &mut m {
                                *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                            }
                        }
                    }
                    for (v, s) in z.iter_mut().zip(&m) {
                        *v = v.max(0.0) * s;
                    }
                    ms.push(m);
                }
                acts.push(z);
            }
            g.push(acts[depth][0]);
            acts.pop();
            activations.push(acts);
            masks.push(ms);
        }

        let (loss, dg) = cox_batch_loss(&g, times, events)?;

        let mut grads: Vec<DenseLayer> = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weights: vec![vec![0.0; l.input_dim()]; l.output_dim()],
                bias: vec![0.0; l.output_dim()],
            })
            .collect();
        for s in 0..n {
            let mut delta = vec![dg[s]];
            for l in (0..depth).rev() {
                let input = &activations[s][l];
                let gl = &mut grads[l];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gl.bias[o] += d;
                    for (gw, a) in gl.weights[o].iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if l == 0 {
                    break;
                }
                let layer = &self.layers[l];
                let mask = &masks[s][l - 1];
                delta = (0..layer.input_dim())
                    .map(|i| {
                        // input[i] > 0 exactly when the ReLU was active and the unit was kept
                        if input[i] > 0.0 {
                            let back: f64 = delta
                                .iter()
                                .enumerate()
                                .map(|(o, d)| d * layer.weights[o][i])
                                .sum();
                            back * mask[i]
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        let tmp = MlpPredictor {
            layers: grads,
            dropout_rate: 0.0,
            input_normalization: None,
        };
        let mut grad = tmp.flat_params();
        let params = self.flat_params();
        let mut reg = 0.0;
        for ((gr, p), is_weight) in grad.iter_mut().zip(&params).zip(self.weight_mask()) {
            if is_weight {
                *gr += penalty * p;
                reg += p * p;
            }
        }
        Some((loss + 0.5 * penalty * reg, grad))
    }
}

/// Negative partial log-likelihood over a batch (mean over events) and its
/// gradient with respect to each `g`. `None` when the batch has no events.
fn cox_batch_loss(g: &[f64], times: &[f64], events: &[bool]) -> Option<(f64, Vec<f64>)> {
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    // descending pass: log denominators of each event's risk set
    let mut lse = vec![f64::NAN; g.len()];
    let mut acc = LogSumExp::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && times[order[j]] == times[order[i]] {
            acc.push(g[order[j]]);
            j += 1;
        }
        let v = acc.value();
        order[i..j].iter().for_each(|&k| lse[k] = v);
        i = j;
    }
    // ascending pass: log Σ_{event j, Y_j ≤ Y_k} exp(−lse_j)
    let mut hazard = LogSumExp::new();
    let mut dg = vec![0.0; g.len()];
    let mut loss = 0.0;
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && times[order[j - 1]] == times[order[i - 1]] {
            j -= 1;
            let k = order[j];
            if events[k] {
                hazard.push(-lse[k]);
                loss -= g[k] - lse[k];
            }
        }
        let log_h = hazard.value();
        for &k in &order[j..i] {
            let expected = (g[k] + log_h).exp();
            let observed = if events[k] { 1.0 } else { 0.0 };
            dg[k] = -(observed - expected) / n_events as f64;
        }
        i = j;
    }
    Some((loss / n_events as f64, dg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpOptions {
    pub hidden_sizes: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_penalty: f64,
    /// Standardize inputs with pool statistics stored in the model.
    pub standardize_inputs: bool,
}

impl Default for MlpOptions {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![16, 16],
            dropout: 0.1,
            learning_rate: 0.005,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            weight_penalty: 1e-4,
            standardize_inputs: false,
        }
    }
}

impl MlpOptions {
    /// Three hidden layers of 32 units, 10% dropout, batches of 128, 512 epochs.
    pub fn reference_scale() -> Self {
        Self {
            hidden_sizes: vec![32, 32, 32],
            dropout: 0.1,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 512,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpFit {
    pub model: MlpPredictor,
    /// Full-pool loss before training.
    pub initial_loss: f64,
    /// Full-pool loss (mean negative partial log-likelihood, no dropout) after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn pool_loss(model: &MlpPredictor, ds: &SurvivalDataset, pool: &[usize]) -> Result<f64> {
    let mut g = vec![0.0; ds.len()];
    for &k in pool {
        g[k] = model.risk(&ds.subject(k).covariates);
    }
    let events = pool.iter().filter(|&&k| ds.subject(k).event).count();
    Ok(-partial_log_lik(&g, ds, pool)? / events as f64)
}

/// Trains an MLP risk model with Adam on within-batch partial likelihood.
pub fn fit_mlp(ds: &SurvivalDataset, pool: &[usize], opts: &MlpOptions) -> Result<MlpFit> {
    let n_events = pool.iter().filter(|&&k| ds.subject(k).event).count();
    if n_events < 2 {
        return Err(Error::InsufficientData(format!(
            "MLP training needs at least 2 events, pool has {n_events}"
        )));
    }
    if opts.batch_size == 0 || !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::InvalidArgument(
            "batch size must be positive and dropout in [0, 1)".into(),
        ));
    }
    let mut rng = rng_for(opts.seed, 0x4d4c50);
    let mut model = MlpPredictor::init(ds.dim(), &opts.hidden_sizes, opts.dropout, &mut rng);
    if opts.standardize_inputs {
        model.input_normalization = Some(Normalization::fit(ds, pool)?);
    }

    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut params = model.flat_params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut step = 0i32;
    let initial_loss = pool_loss(&model, ds, pool)?;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut order = pool.to_vec();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut updated = false;
        for chunk in order.chunks(opts.batch_size) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|&k| ds.subject(k).covariates.clone()).collect();
            let times: Vec<f64> = chunk.iter().map(|&k| ds.subject(k).observed_time).collect();
            let events: Vec<bool> = chunk.iter().map(|&k| ds.subject(k).event).collect();
            let Some((_, grad)) =
                model.batch_loss_grad(&inputs, &times, &events, opts.weight_penalty, Some(&mut rng))
            else {
                continue;
            };
            updated = true;
            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            for i in 0..params.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                params[i] -= opts.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
            model.set_flat_params(&params);
        }
        if !updated {
            return Err(Error::InsufficientData(format!(
                "every batch in epoch {epoch} had zero events"
            )));
        }
        let loss = pool_loss(&model, ds, pool)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("MLP loss diverged at epoch {epoch}")));
        }
        epoch_losses.push(loss);
    }
    model.validate()?;
    Ok(MlpFit {
        model,
        initial_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_batch_loss(g: &[f64], times: &[f64], events: &[bool]) -> f64 {
        let e = events.iter().filter(|&&x| x).count() as f64;
        let mut loss = 0.0;
        for j in 0..g.len() {
            if events[j] {
                let denom: f64 = (0..g.len()).filter(|&k| times[k] >= times[j]).map(|k| g[k].exp()).sum();
                loss -= g[j] - denom.ln();
            }
        }
        loss / e
    }

    #[test]
    fn cox_batch_loss_matches_naive_and_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let g: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let times: Vec<f64> = (0..9).map(|_| rng.random_range(0..5) as f64).collect();
            let mut events: Vec<bool> = (0..9).map(|_| rng.random_bool(0.6)).collect();
            events[0] = true;
            let (loss, dg) = cox_batch_loss(&g, &times, &events).unwrap();
            assert!((loss - naive_batch_loss(&g, &times, &events)).abs() < 1e-12);
            for k in 0..9 {
                let mut hi = g.clone();
                let mut lo = g.clone();
                hi[k] += 1e-6;
                lo[k] -= 1e-6;
                let fd = (naive_batch_loss(&hi, &times, &events) - naive_batch_loss(&lo, &times, &events)) / 2e-6;
                assert!((fd - dg[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn eventless_batch_is_skipped() {
        assert!(cox_batch_loss(&[0.0, 1.0], &[1.0, 2.0], &[false, false]).is_none());
    }

    #[test]
    fn init_and_flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = MlpPredictor::init(4, &[5, 3], 0.1, &mut rng);
        m.validate().unwrap();
        assert_eq!(m.n_params(), 5 * 5 + 3 * 6 + 4);
        let p = m.flat_params();
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        m.set_flat_params(&doubled);
        assert_eq!(m.flat_params(), doubled);
    }

    #[test]
    fn invalid_networks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = MlpPredictor::init(2, &[3], 0.0, &mut rng);
        m.layers[1].weights[0][0] = f64::NAN;
        assert!(m.validate().is_err());
        let mut m = MlpPredictor::init(2, &[3], 0.0, &mut rng);
        m.layers[1].bias.push(0.0);
        m.layers[1].weights.push(vec![0.0; 3]);
        assert!(m.validate().is_err());
    }

    fn network_loss(m: &MlpPredictor, inputs: &[Vec<f64>], times: &[f64], events: &[bool], penalty: f64) -> f64 {
        let g: Vec<f64> = inputs.iter().map(|x| m.risk(x)).collect();
        let reg: f64 = m
            .flat_params()
            .iter()
            .zip(m.weight_mask())
            .filter(|(_, w)| *w)
            .map(|(p, _)| p * p)
            .sum();
        naive_batch_loss(&g, times, events) + 0.5 * penalty * reg
    }

    #[test]
    fn backprop_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = MlpPredictor::init(3, &[6, 4], 0.0, &mut rng);
        let mut p = m.flat_params();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        m.set_flat_params(&p);
        let inputs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let times: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..5.0)).collect();
        let events: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
        let penalty = 0.05;
        let (loss, grad) = m
            .batch_loss_grad::<ChaCha8Rng>(&inputs, &times, &events, penalty, None)
            .unwrap();
        assert!((loss - network_loss(&m, &inputs, &times, &events, penalty)).abs() < 1e-12);
        let h = 1e-5;
        for k in 0..p.len() {
            let mut hi = m.clone();
            let mut lo = m.clone();
            let mut ph = p.clone();
            ph[k] += h;
            hi.set_flat_params(&ph);
            ph[k] -= 2.0 * h;
            lo.set_flat_params(&ph);
            let fd = (network_loss(&hi, &inputs, &times, &events, penalty)
                - network_loss(&lo, &inputs, &times, &events, penalty))
                / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - grad[k]).abs() < 1e-9, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    fn synth_pool(n: usize, seed: u64) -> SurvivalDataset {
        use crate::synth::{generate, PredictorKind, SynthConfig};
        generate(&SynthConfig {
            n,
            predictor: PredictorKind::Linear { beta: vec![0.8, -0.5, 0.3] },
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = synth_pool(600, 1);
        let opts = MlpOptions {
            epochs: 10,
            seed: 4,
            ..MlpOptions::default()
        };
        let a = fit_mlp(&ds, &ds.all_indices(), &opts).unwrap();
        let b = fit_mlp(&ds, &ds.all_indices(), &opts).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.epoch_losses[4] < a.initial_loss);
        assert!(a.epoch_losses[9] < a.epoch_losses[0]);
    }

    #[test]
    fn no_hidden_layer_recovers_cox_regression() {
        use crate::predictor::{fit_linear, LinearOptions};
        let ds = synth_pool(800, 2);
        let pool = ds.all_indices();
        let opts = MlpOptions {
            hidden_sizes: vec![],
            dropout: 0.0,
            learning_rate: 0.02,
            batch_size: 800,
            epochs: 400,
            weight_penalty: 0.0,
            ..MlpOptions::default()
        };
        let mlp = fit_mlp(&ds, &pool, &opts).unwrap().model;
        let lin = fit_linear(&ds, &pool, &LinearOptions::default()).unwrap().predictor;
        let a = mlp.risks(&ds);
        let b = lin.risks(&ds);
        let (ma, sa) = crate::numeric::mean_sd(&a);
        let (mb, sb) = crate::numeric::mean_sd(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
        assert!(cov / (sa * sb) > 0.99, "correlation {}", cov / (sa * sb));
    }

    #[test]
    fn single_event_pool_is_rejected() {
        let ds = synth_pool(50, 3);
        let one_event: Vec<usize> = ds
            .all_indices()
            .into_iter()
            .filter(|&i| !ds.subject(i).event)
            .chain(ds.all_indices().into_iter().filter(|&i| ds.subject(i).event).take(1))
            .collect();
        assert!(fit_mlp(&ds, &one_event, &MlpOptions::default()).is_err());
    }
}
