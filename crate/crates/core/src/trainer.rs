//! Two-phase training: plain ZMLCE for the warmup epochs, then ZMLCE plus a
//! weighted mixed-loss term on paired `[MASK]` hiddens. Adam updates every
//! tensor; the dev Macro-F1 drives best-checkpoint selection and early
//! stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::{EncoderConfig, EncoderParams, HiddenStates, SequenceEncoder};
use crate::error::{Error, Result};
use crate::eval::{macro_f1, micro_f1, predict_all};
use crate::mixup::{make_pairs_lh, make_pairs_vanilla, mix_hidden, pair_batch, MixMode, MixPair, MixupConfig, SimilaritySource};
use crate::model::{Example, Model};
use crate::objective::{mixed_zmlce, mixed_zmlce_grad, zmlce, zmlce_grad};
use crate::taxonomy::Taxonomy;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub mix_loss_weight: f64,
    pub seed: u64,
    pub mixup: MixupConfig,
    pub encoder: EncoderConfig,
    pub min_freq: usize,
    /// Write measured seconds into the log's `wall_seconds` column. Off by
    /// default so logs are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 60,
            warmup_epochs: 5,
            patience: 5,
            mix_loss_weight: 1.0,
            seed: 13,
            mixup: MixupConfig::default(),
            encoder: EncoderConfig::default(),
            min_freq: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.warmup_epochs > self.max_epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.mix_loss_weight >= 0.0 && self.mix_loss_weight.is_finite()) {
            return bad(format!("mix_loss_weight must be >= 0, got {}", self.mix_loss_weight));
        }
        if self.encoder.d_model == 0 || self.encoder.layers == 0 || self.encoder.max_len == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        self.mixup.validate()
    }

    /// Mixing happens only after the warmup epochs (1-based `epoch`).
    pub fn mixes_at(&self, epoch: usize) -> bool {
        self.mixup.mode != MixMode::Off && epoch > self.warmup_epochs
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moments per tensor, in [`Model::tensors`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|(_, t)| vec![0.0; t.as_slice().len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update of every tensor of `model`.
pub fn adam_step(model: &mut Model, grads: &Model, state: &mut AdamState, lr: f64) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut params = model.tensors_mut();
    if grad_tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("gradient / optimizer state does not match model".into()));
    }
    for ((name, g), (_, p)) in grad_tensors.iter().zip(params.iter()) {
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, ((_, g), (_, p))) in grad_tensors.iter().zip(params.iter_mut()).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `supervised + μ·mixed`
    pub loss: f64,
    pub supervised: f64,
    /// Unweighted mixed term (0 when no pairs were given).
    pub mixed: f64,
    pub grads: Model,
}

/// Loss and gradients for one batch:
/// `Σ_d mean_i L^d_i + μ · Σ_d mean_pairs L̃^d`. Pair indices refer to
/// positions in `batch`. The pairs' ratios are constants here: no gradient
/// flows into whatever produced them.
pub fn batch_loss(model: &Model, batch: &[&Example], pairs: &[MixPair], mix_weight: f64) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let depth = model.depth();
    let d_model = model.encoder.d_model();
    let mut grads = model.zeros_like();
    let hiddens: Vec<HiddenStates> = batch
        .iter()
        .map(|ex| model.encoder.forward(&ex.sequence))
        .collect::<Result<_>>()?;
    let mut upstream: Vec<Matrix> = batch.iter().map(|ex| Matrix::zeros(ex.sequence.len(), d_model)).collect();

    let inv_b = 1.0 / batch.len() as f64;
    let mut supervised = 0.0;
    for (i, (ex, h)) in batch.iter().zip(&hiddens).enumerate() {
        for d in 1..=depth {
            let w = model.verbalizer.at_depth(d);
            let hm = h.h_mask(d);
            let p = w.matvec(hm);
            supervised += inv_b * zmlce(&p, &ex.splits[d - 1])?;
            let g: Vec<f64> = zmlce_grad(&p, &ex.splits[d - 1])?.into_iter().map(|v| v * inv_b).collect();
            grads.verbalizer.rows[d - 1].add_outer(1.0, &g, hm);
            w.matvec_t_add(&g, upstream[i].row_mut(h.mask_positions()[d - 1]));
        }
    }

    let mut mixed = 0.0;
    if !pairs.is_empty() && mix_weight > 0.0 {
        let inv_p = 1.0 / pairs.len() as f64;
        let scale = mix_weight * inv_p;
        for pair in pairs {
            let (i, j, lambda) = (pair.index_i, pair.index_j, pair.lambda);
            for d in 1..=depth {
                let w = model.verbalizer.at_depth(d);
                let h_mix = mix_hidden(lambda, hiddens[i].h_mask(d), hiddens[j].h_mask(d))?;
                let p = w.matvec(&h_mix);
                let (si, sj) = (&batch[i].splits[d - 1], &batch[j].splits[d - 1]);
                mixed += inv_p * mixed_zmlce(lambda, &p, si, sj)?;
                let g: Vec<f64> = mixed_zmlce_grad(lambda, &p, si, sj)?.into_iter().map(|v| v * scale).collect();
                grads.verbalizer.rows[d - 1].add_outer(1.0, &g, &h_mix);
                let mut dh = vec![0.0; d_model];
                w.matvec_t_add(&g, &mut dh);
                crate::tensor::axpy(lambda, &dh, upstream[i].row_mut(hiddens[i].mask_positions()[d - 1]));
                crate::tensor::axpy(1.0 - lambda, &dh, upstream[j].row_mut(hiddens[j].mask_positions()[d - 1]));
            }
        }
    }

    for (h, up) in hiddens.iter().zip(&upstream) {
        model.encoder.backward(h, up, &mut grads.encoder)?;
    }
    let loss = supervised + mix_weight * mixed;
    Ok(BatchOutput {
        loss,
        supervised,
        mixed: if mix_weight > 0.0 { mixed } else { 0.0 },
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub mixed_loss: f64,
    pub dev_micro_f1: f64,
    pub dev_macro_f1: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub epoch: usize,
    pub batch: usize,
    /// training-set indices
    pub instance_i: usize,
    pub instance_j: usize,
    pub s: Option<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub pairs: Vec<PairRecord>,
}

impl TrainingLog {
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,mixed_loss,dev_micro_f1,dev_macro_f1,wall_seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.mixed_loss, r.dev_micro_f1, r.dev_macro_f1, r.wall_seconds
            ));
        }
        out
    }

    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("epoch,batch,instance_i,instance_j,s,lambda\n");
        for r in &self.pairs {
            let s = r.s.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.batch, r.instance_i, r.instance_j, s, r.lambda
            ));
        }
        out
    }

    pub fn best_dev_macro(&self) -> Option<f64> {
        self.epochs.iter().map(|r| r.dev_macro_f1).max_by(f64::total_cmp)
    }
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub epoch: usize,
    pub model: Model,
    pub adam: AdamState,
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub phase_best: f64,
    pub stale_epochs: usize,
    pub stopped: bool,
    pub frozen_encoder: Option<EncoderParams>,
    pub log: TrainingLog,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub log: TrainingLog,
}

const STREAM_SHUFFLE: u64 = 1 << 60;
const STREAM_MIX: u64 = 2 << 60;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer<'a> {
    config: TrainConfig,
    tax: &'a Taxonomy,
    train: &'a [Example],
    dev: &'a [Example],
    state: TrainingState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, tax: &'a Taxonomy, vocab: &Vocabulary, train: &'a [Example], dev: &'a [Example]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::InvalidArgument("train and dev splits must be nonempty".into()));
        }
        if vocab.depth() != tax.max_depth() {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} depth tokens for a taxonomy of depth {}",
                vocab.depth(),
                tax.max_depth()
            )));
        }
        let mut rng = stream_rng(config.seed, 0);
        let model = Model::init(&config.encoder, tax, vocab, &mut rng)?;
        let state = TrainingState {
            epoch: 0,
            adam: AdamState::new(&model),
            best_model: model.clone(),
            model,
            best_epoch: 0,
            best_metric: f64::NEG_INFINITY,
            phase_best: f64::NEG_INFINITY,
            stale_epochs: 0,
            stopped: false,
            frozen_encoder: None,
            log: TrainingLog::default(),
        };
        Ok(Self {
            config,
            tax,
            train,
            dev,
            state,
        })
    }

    /// Continue from a saved state. The caller supplies the same data.
    pub fn resume(config: TrainConfig, tax: &'a Taxonomy, train: &'a [Example], dev: &'a [Example], state: TrainingState) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tax,
            train,
            dev,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn log(&self) -> &TrainingLog {
        &self.state.log
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.config.max_epochs
    }

    /// Batches of training indices for `epoch` (1-based).
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, STREAM_SHUFFLE | epoch as u64));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn similarity_encoder(&self) -> &EncoderParams {
        match (&self.config.mixup.similarity_source, &self.state.frozen_encoder) {
            (SimilaritySource::FrozenAtWarmupEnd, Some(frozen)) => frozen,
            _ => &self.state.model.encoder,
        }
    }

    /// Mixup pairs for batch `batch_index` of `epoch`; empty outside the
    /// mixing phase. Similarity hiddens come from a detached forward pass.
    pub fn pairs_for_batch(&self, batch: &[usize], epoch: usize, batch_index: usize) -> Result<Vec<MixPair>> {
        if !self.config.mixes_at(epoch) {
            return Ok(Vec::new());
        }
        let mut rng = stream_rng(self.config.seed, STREAM_MIX | ((epoch as u64) << 32) | batch_index as u64);
        let skeleton = pair_batch(batch.len(), &mut rng);
        match self.config.mixup.mode {
            MixMode::Off => Ok(Vec::new()),
            MixMode::Vanilla => make_pairs_vanilla(&skeleton, &mut rng, &self.config.mixup),
            MixMode::Lh => {
                let encoder = self.similarity_encoder();
                let cls = batch
                    .iter()
                    .map(|&k| Ok(encoder.detached_forward(&self.train[k].lh_sequence)?.h_cls().to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                make_pairs_lh(&skeleton, &cls, &self.config.mixup)
            }
        }
    }

    /// Pairs and loss/gradients of one batch at the current parameters.
    pub fn batch_gradients(&self, batch: &[usize], epoch: usize, batch_index: usize) -> Result<(Vec<MixPair>, BatchOutput)> {
        let pairs = self.pairs_for_batch(batch, epoch, batch_index)?;
        let examples: Vec<&Example> = batch.iter().map(|&k| &self.train[k]).collect();
        let out = batch_loss(&self.state.model, &examples, &pairs, self.config.mix_loss_weight)?;
        Ok((pairs, out))
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.state.epoch + 1;
        if self.config.mixes_at(epoch)
            && self.config.mixup.similarity_source == SimilaritySource::FrozenAtWarmupEnd
            && self.state.frozen_encoder.is_none()
        {
            self.state.frozen_encoder = Some(self.state.model.encoder.clone());
        }

        let batches = self.epoch_batches(epoch);
        let (mut loss_sum, mut mixed_sum) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let (pairs, out) = self.batch_gradients(batch, epoch, b)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("batch {b} loss is {}", out.loss),
                });
            }
            adam_step(&mut self.state.model, &out.grads, &mut self.state.adam, self.config.learning_rate).map_err(|e| {
                Error::Diverged {
                    epoch,
                    message: e.to_string(),
                }
            })?;
            loss_sum += out.loss;
            mixed_sum += self.config.mix_loss_weight * out.mixed;
            self.state.log.pairs.extend(pairs.iter().map(|p| PairRecord {
                epoch,
                batch: b,
                instance_i: batch[p.index_i],
                instance_j: batch[p.index_j],
                s: p.s,
                lambda: p.lambda,
            }));
        }

        let pred = predict_all(&self.state.model, self.tax, self.dev)?;
        let gold: Vec<Vec<usize>> = self.dev.iter().map(|e| e.gold.clone()).collect();
        let universe: Vec<usize> = (0..self.tax.len()).collect();
        let dev_micro = micro_f1(&pred, &gold)?;
        let dev_macro = macro_f1(&pred, &gold, &universe)?;

        let n_batches = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches,
            mixed_loss: mixed_sum / n_batches,
            dev_micro_f1: dev_micro,
            dev_macro_f1: dev_macro,
            wall_seconds: if self.config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.state.log.epochs.push(record.clone());
        self.state.epoch = epoch;
        self.update_stopping(epoch, dev_macro);
        log::info!(
            "epoch {epoch}: loss {:.5} mixed {:.5} dev micro {:.4} macro {:.4}",
            record.train_loss,
            record.mixed_loss,
            dev_micro,
            dev_macro
        );
        Ok(record)
    }

    // Warmup epochs never stop the run. The first post-warmup epoch opens the
    // patience window; after it, `patience` consecutive epochs without strict
    // improvement over the window's best stop training. The returned model is
    // the best over all epochs.
    fn update_stopping(&mut self, epoch: usize, metric: f64) {
        let st = &mut self.state;
        if metric > st.best_metric {
            st.best_metric = metric;
            st.best_epoch = epoch;
            st.best_model = st.model.clone();
        }
        if epoch <= self.config.warmup_epochs {
            return;
        }
        if epoch == self.config.warmup_epochs + 1 || metric > st.phase_best {
            st.phase_best = metric;
            st.stale_epochs = 0;
        } else {
            st.stale_epochs += 1;
            if st.stale_epochs >= self.config.patience {
                st.stopped = true;
            }
        }
    }

    pub fn fit(mut self) -> Result<FitResult> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(self.into_result())
    }

    pub fn into_result(self) -> FitResult {
        FitResult {
            best_model: self.state.best_model,
            best_epoch: self.state.best_epoch,
            best_dev_macro_f1: self.state.best_metric,
            log: self.state.log,
        }
    }

    pub fn into_state(self) -> TrainingState {
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::model::prepare_examples;

    #[test]
    fn adam_single_scalar_step() {
        let mut model = Model {
            encoder: EncoderParams::zeros(1, 1, 1, 1),
            verbalizer: crate::prompt::Verbalizer { rows: vec![Matrix::zeros(1, 1)] },
        };
        let mut grads = model.zeros_like();
        grads.verbalizer.rows[0][(0, 0)] = 1.0;
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, 0.01).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let expected = -0.01 * 1.0 / (1.0 + ADAM_EPS);
        assert!((model.verbalizer.rows[0][(0, 0)] - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
        // untouched tensors stay at zero
        assert!(model.encoder.token_embeddings.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model {
            encoder: EncoderParams::init(&EncoderConfig { d_model: 3, layers: 1, max_len: 4, init_std: 0.1 }, 5, &mut rng),
            verbalizer: crate::prompt::Verbalizer { rows: vec![Matrix::gaussian(2, 3, 0.1, &mut rng)] },
        };
        let before = model.clone();
        let grads = model.zeros_like();
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, 0.1).unwrap();
        assert_eq!(model, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut model = Model {
            encoder: EncoderParams::zeros(1, 1, 1, 1),
            verbalizer: crate::prompt::Verbalizer { rows: vec![Matrix::zeros(1, 1)] },
        };
        let mut grads = model.zeros_like();
        grads.encoder.token_embeddings[(0, 0)] = f64::NAN;
        let mut state = AdamState::new(&model);
        assert!(matches!(adam_step(&mut model, &grads, &mut state, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_epochs: 10, max_epochs: 5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { mix_loss_weight: -1.0, ..Default::default() }.validate().is_err());
    }

    fn tiny() -> (crate::corpus::SyntheticCorpus, Vocabulary) {
        let spec = SyntheticSpec {
            depth: 2,
            branching: 2,
            n_train: 24,
            n_dev: 8,
            n_test: 8,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let mut vocab = Vocabulary::build(&c.train, 1, c.taxonomy.max_depth());
        vocab.extend_with_label_names(&c.taxonomy);
        (c, vocab)
    }

    fn small_config(mode: MixMode) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            warmup_epochs: 1,
            encoder: EncoderConfig { d_model: 8, layers: 1, max_len: 32, init_std: 0.1 },
            mixup: MixupConfig { mode, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn mixing_is_gated_by_warmup_and_mode() {
        let (c, vocab) = tiny();
        let train = prepare_examples(&c.train, &c.taxonomy, &vocab, 32).unwrap();
        let dev = prepare_examples(&c.dev, &c.taxonomy, &vocab, 32).unwrap();
        let lh = Trainer::new(small_config(MixMode::Lh), &c.taxonomy, &vocab, &train, &dev).unwrap();
        let off = Trainer::new(small_config(MixMode::Off), &c.taxonomy, &vocab, &train, &dev).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        assert!(lh.pairs_for_batch(&batch, 1, 0).unwrap().is_empty());
        assert_eq!(lh.pairs_for_batch(&batch, 2, 0).unwrap().len(), 8);
        assert!(off.pairs_for_batch(&batch, 2, 0).unwrap().is_empty());

        // epoch-1 (warmup) loss identical across modes; same init seed
        let (_, a) = lh.batch_gradients(&batch, 1, 0).unwrap();
        let (_, b) = off.batch_gradients(&batch, 1, 0).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.mixed, 0.0);
    }

    #[test]
    fn zero_mix_weight_matches_off() {
        let (c, vocab) = tiny();
        let train = prepare_examples(&c.train, &c.taxonomy, &vocab, 32).unwrap();
        let dev = prepare_examples(&c.dev, &c.taxonomy, &vocab, 32).unwrap();
        let mut cfg = small_config(MixMode::Lh);
        cfg.mix_loss_weight = 0.0;
        let lh = Trainer::new(cfg, &c.taxonomy, &vocab, &train, &dev).unwrap();
        let off = Trainer::new(small_config(MixMode::Off), &c.taxonomy, &vocab, &train, &dev).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let (pairs, a) = lh.batch_gradients(&batch, 3, 0).unwrap();
        assert!(!pairs.is_empty());
        let (_, b) = off.batch_gradients(&batch, 3, 0).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let (c, vocab) = tiny();
        let train = prepare_examples(&c.train, &c.taxonomy, &vocab, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig { d_model: 4, layers: 2, max_len: 32, init_std: 0.3 };
        let model = Model::init(&cfg, &c.taxonomy, &vocab, &mut rng).unwrap();
        let batch: Vec<&Example> = train[..3].iter().collect();
        let pairs = vec![
            MixPair { index_i: 0, index_j: 1, s: None, lambda: 0.7 },
            MixPair { index_i: 2, index_j: 0, s: None, lambda: 0.55 },
        ];
        let out = batch_loss(&model, &batch, &pairs, 0.8).unwrap();
        let eps = 1e-6;
        let mut probe = model.clone();
        let n_tensors = probe.tensors().len();
        for t in 0..n_tensors {
            let analytic = out.grads.tensors()[t].1.as_slice().to_vec();
            let analytic_norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut diff = 0.0;
            for (i, a) in analytic.iter().enumerate() {
                let orig = probe.tensors()[t].1.as_slice()[i];
                probe.tensors_mut()[t].1.as_mut_slice()[i] = orig + eps;
                let up = batch_loss(&probe, &batch, &pairs, 0.8).unwrap().loss;
                probe.tensors_mut()[t].1.as_mut_slice()[i] = orig - eps;
                let down = batch_loss(&probe, &batch, &pairs, 0.8).unwrap().loss;
                probe.tensors_mut()[t].1.as_mut_slice()[i] = orig;
                diff += ((up - down) / (2.0 * eps) - a).powi(2);
            }
            let rel = diff.sqrt() / analytic_norm.max(1e-12);
            assert!(rel < 1e-5, "tensor {t}: relative error {rel}");
        }
    }

    #[test]
    fn patience_window_opens_after_warmup() {
        let (c, vocab) = tiny();
        let train = prepare_examples(&c.train, &c.taxonomy, &vocab, 32).unwrap();
        let dev = prepare_examples(&c.dev, &c.taxonomy, &vocab, 32).unwrap();
        let cfg = TrainConfig { patience: 1, warmup_epochs: 2, max_epochs: 10, ..small_config(MixMode::Off) };
        let mut t = Trainer::new(cfg, &c.taxonomy, &vocab, &train, &dev).unwrap();
        // strictly decreasing metric
        for (epoch, m) in [(1, 0.9), (2, 0.8), (3, 0.7)] {
            t.update_stopping(epoch, m);
            t.state.epoch = epoch;
            assert!(!t.is_done(), "stopped early at {epoch}");
        }
        t.update_stopping(4, 0.6);
        t.state.epoch = 4;
        assert!(t.is_done());
        assert_eq!(t.state.best_epoch, 1);
        // ties do not reset patience
        let cfg = TrainConfig { patience: 2, warmup_epochs: 0, max_epochs: 10, ..small_config(MixMode::Off) };
        let mut t = Trainer::new(cfg, &c.taxonomy, &vocab, &train, &dev).unwrap();
        for (epoch, m) in [(1, 0.5), (2, 0.5), (3, 0.5)] {
            t.update_stopping(epoch, m);
        }
        assert!(t.state.stopped);
    }
}
