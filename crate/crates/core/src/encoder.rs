//! Reference sequence encoder.
//!
//! `x⁰_p = E_tok[id_p] + E_pos[p]`, then per layer
//! `h_p = tanh(W_self·x_p + W_ctx·x̄ + W_prev·x_{p−1} + b)` with `x̄` the mean
//! over positions and `x_{−1} = 0`. Backward is exact and hand-derived.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptSequence;
use crate::tensor::{axpy, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            max_len: 256,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_self: Matrix,
    pub w_ctx: Matrix,
    pub w_prev: Matrix,
    /// 1 × d_model
    pub bias: Matrix,
}

impl LayerParams {
    fn zeros(d: usize) -> Self {
        Self {
            w_self: Matrix::zeros(d, d),
            w_ctx: Matrix::zeros(d, d),
            w_prev: Matrix::zeros(d, d),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_embeddings: Matrix,
    pub positional_embeddings: Matrix,
    pub layers: Vec<LayerParams>,
}

/// Activations kept by [`SequenceEncoder::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    token_ids: Vec<usize>,
    /// `acts[0]` is the embedding sum, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
    means: Vec<Vec<f64>>,
}

/// Per-position hidden vectors. Only values produced by `forward` carry a
/// tape; detached values cannot be differentiated.
#[derive(Debug, Clone)]
pub struct HiddenStates<T = Tape> {
    vectors: Matrix,
    cls_position: usize,
    mask_positions: Vec<usize>,
    tape: Option<T>,
}

impl<T> HiddenStates<T> {
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn h_cls(&self) -> &[f64] {
        self.vectors.row(self.cls_position)
    }

    /// Hidden at the `[MASK]` of depth `d` (1-based).
    pub fn h_mask(&self, d: usize) -> &[f64] {
        self.vectors.row(self.mask_positions[d - 1])
    }

    pub fn mask_positions(&self) -> &[usize] {
        &self.mask_positions
    }

    pub fn is_detached(&self) -> bool {
        self.tape.is_none()
    }

    pub fn detach(mut self) -> Self {
        self.tape = None;
        self
    }
}

/// Contract every encoder satisfies so the objective and trainer only touch
/// `h_[CLS]` and `h_[MASK]`.
pub trait SequenceEncoder: Sized {
    type Tape;

    fn hidden_size(&self) -> usize;

    fn forward(&self, seq: &PromptSequence) -> Result<HiddenStates<Self::Tape>>;

    /// Same values as `forward`, excluded from differentiation.
    fn detached_forward(&self, seq: &PromptSequence) -> Result<HiddenStates<Self::Tape>> {
        Ok(self.forward(seq)?.detach())
    }

    /// Accumulate into `grads` the gradient of `Σ_p upstream_p · h_p`.
    /// `upstream` has one row per position; all-zero rows contribute nothing.
    fn backward(&self, hidden: &HiddenStates<Self::Tape>, upstream: &Matrix, grads: &mut Self) -> Result<()>;
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, vocab_size: usize, rng: &mut R) -> Self {
        let d = config.d_model;
        let std = config.init_std;
        let token_embeddings = Matrix::gaussian(vocab_size, d, std, rng);
        let positional_embeddings = Matrix::gaussian(config.max_len, d, std, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_self: Matrix::gaussian(d, d, std, rng),
                w_ctx: Matrix::gaussian(d, d, std, rng),
                w_prev: Matrix::gaussian(d, d, std, rng),
                bias: Matrix::zeros(1, d),
            })
            .collect();
        Self {
            token_embeddings,
            positional_embeddings,
            layers,
        }
    }

    pub fn zeros(vocab_size: usize, d_model: usize, layers: usize, max_len: usize) -> Self {
        Self {
            token_embeddings: Matrix::zeros(vocab_size, d_model),
            positional_embeddings: Matrix::zeros(max_len, d_model),
            layers: (0..layers).map(|_| LayerParams::zeros(d_model)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.d_model(), self.layers.len(), self.max_len())
    }

    pub fn d_model(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positional_embeddings.rows()
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embeddings".to_string(), &self.token_embeddings),
            ("positional_embeddings".to_string(), &self.positional_embeddings),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.w_self"), &layer.w_self));
            out.push((format!("layers.{l}.w_ctx"), &layer.w_ctx));
            out.push((format!("layers.{l}.w_prev"), &layer.w_prev));
            out.push((format!("layers.{l}.bias"), &layer.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("token_embeddings".to_string(), &mut self.token_embeddings),
            ("positional_embeddings".to_string(), &mut self.positional_embeddings),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.w_self"), &mut layer.w_self));
            out.push((format!("layers.{l}.w_ctx"), &mut layer.w_ctx));
            out.push((format!("layers.{l}.w_prev"), &mut layer.w_prev));
            out.push((format!("layers.{l}.bias"), &mut layer.bias));
        }
        out
    }

    fn check(&self, seq: &PromptSequence) -> Result<()> {
        if seq.len() > self.max_len() {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max_len: self.max_len(),
            });
        }
        if let Some(&id) = seq.token_ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size(),
            });
        }
        Ok(())
    }

    fn run(&self, seq: &PromptSequence, keep_tape: bool) -> Result<HiddenStates> {
        self.check(seq)?;
        let n = seq.len();
        let d = self.d_model();
        let mut x = Matrix::zeros(n, d);
        for (p, &id) in seq.token_ids.iter().enumerate() {
            let row = x.row_mut(p);
            row.copy_from_slice(self.token_embeddings.row(id));
            axpy(1.0, self.positional_embeddings.row(p), row);
        }

        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut means = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mean = column_mean(&x);
            // shared term W_ctx·x̄ + b
            let mut shared = layer.bias.row(0).to_vec();
            layer.w_ctx.matvec_add(&mean, &mut shared);

            let mut h = Matrix::zeros(n, d);
            for p in 0..n {
                let out = h.row_mut(p);
                out.copy_from_slice(&shared);
                layer.w_self.matvec_add(x.row(p), out);
                if p > 0 {
                    layer.w_prev.matvec_add(x.row(p - 1), out);
                }
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            if keep_tape {
                means.push(mean);
                acts.push(std::mem::replace(&mut x, h));
            } else {
                x = h;
            }
        }
        let tape = keep_tape.then(|| {
            acts.push(x.clone());
            Tape {
                token_ids: seq.token_ids.clone(),
                acts,
                means,
            }
        });
        Ok(HiddenStates {
            vectors: x,
            cls_position: seq.cls_position,
            mask_positions: seq.mask_positions.clone(),
            tape,
        })
    }
}

impl SequenceEncoder for EncoderParams {
    type Tape = Tape;

    fn hidden_size(&self) -> usize {
        self.d_model()
    }

    fn forward(&self, seq: &PromptSequence) -> Result<HiddenStates> {
        self.run(seq, true)
    }

    fn detached_forward(&self, seq: &PromptSequence) -> Result<HiddenStates> {
        self.run(seq, false)
    }

    fn backward(&self, hidden: &HiddenStates, upstream: &Matrix, grads: &mut Self) -> Result<()> {
        let tape = hidden.tape.as_ref().ok_or(Error::DetachedBackward)?;
        let n = tape.token_ids.len();
        let d = self.d_model();
        if upstream.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "upstream {:?} for hidden states {:?}",
                upstream.shape(),
                (n, d)
            )));
        }
        if grads.vocab_size() != self.vocab_size()
            || grads.d_model() != d
            || grads.layers.len() != self.layers.len()
            || grads.max_len() != self.max_len()
        {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        if !upstream.is_finite() {
            return Err(Error::NonFinite("upstream gradient".into()));
        }

        let inv_n = 1.0 / n as f64;
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let gl = &mut grads.layers[l];
            let x = &tape.acts[l];
            let h = &tape.acts[l + 1];

            let mut dz = Matrix::zeros(n, d);
            let mut live = vec![false; n];
            let mut dz_sum = vec![0.0; d];
            for p in 0..n {
                let gp = g.row(p);
                if gp.iter().all(|&v| v == 0.0) {
                    continue;
                }
                live[p] = true;
                let out = dz.row_mut(p);
                for ((o, &gv), &hv) in out.iter_mut().zip(gp).zip(h.row(p)) {
                    *o = gv * (1.0 - hv * hv);
                }
                axpy(1.0, out, &mut dz_sum);
            }

            let mut dx = Matrix::zeros(n, d);
            for p in (0..n).filter(|&p| live[p]) {
                let dzp = dz.row(p);
                gl.w_self.add_outer(1.0, dzp, x.row(p));
                layer.w_self.matvec_t_add(dzp, dx.row_mut(p));
                if p > 0 {
                    gl.w_prev.add_outer(1.0, dzp, x.row(p - 1));
                    layer.w_prev.matvec_t_add(dzp, dx.row_mut(p - 1));
                }
            }
            gl.w_ctx.add_outer(1.0, &dz_sum, &tape.means[l]);
            axpy(1.0, &dz_sum, gl.bias.row_mut(0));

            let mut ctx_back = vec![0.0; d];
            layer.w_ctx.matvec_t_add(&dz_sum, &mut ctx_back);
            for p in 0..n {
                axpy(inv_n, &ctx_back, dx.row_mut(p));
            }
            g = dx;
        }

        for (p, &id) in tape.token_ids.iter().enumerate() {
            let gp = g.row(p);
            axpy(1.0, gp, grads.token_embeddings.row_mut(id));
            axpy(1.0, gp, grads.positional_embeddings.row_mut(p));
        }
        Ok(())
    }
}

fn column_mean(x: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for p in 0..x.rows() {
        axpy(1.0, x.row(p), &mut mean);
    }
    let inv = 1.0 / x.rows().max(1) as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[usize]) -> PromptSequence {
        PromptSequence {
            token_ids: ids.to_vec(),
            cls_position: 0,
            mask_positions: vec![2],
        }
    }

    fn random_params(seed: u64, vocab: usize, d: usize, layers: usize, max_len: usize, std: f64) -> EncoderParams {
        let cfg = EncoderConfig {
            d_model: d,
            layers,
            max_len,
            init_std: std,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::init(&cfg, vocab, &mut rng);
        for layer in &mut p.layers {
            layer.bias = Matrix::gaussian(1, d, std, &mut rng);
        }
        p
    }

    #[test]
    fn zero_params_give_zero_hiddens() {
        let p = EncoderParams::zeros(10, 4, 2, 8);
        let h = p.forward(&seq(&[2, 5, 4, 3])).unwrap();
        assert!(h.vectors().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_path_is_tanh_of_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EncoderParams::zeros(10, 3, 1, 8);
        p.token_embeddings = Matrix::gaussian(10, 3, 1.0, &mut rng);
        p.positional_embeddings = Matrix::gaussian(8, 3, 1.0, &mut rng);
        p.layers[0].w_self = Matrix::identity(3);
        let s = seq(&[2, 7, 4]);
        let h = p.forward(&s).unwrap();
        for (pos, &id) in s.token_ids.iter().enumerate() {
            for k in 0..3 {
                let x0 = p.token_embeddings[(id, k)] + p.positional_embeddings[(pos, k)];
                assert_eq!(h.vectors()[(pos, k)], x0.tanh());
            }
        }
    }

    #[test]
    fn context_mean_reaches_cls() {
        let p = random_params(3, 12, 6, 2, 16, 0.5);
        let a = p.forward(&seq(&[2, 5, 4, 3, 8, 9, 10, 3])).unwrap();
        let b = p.forward(&seq(&[2, 5, 4, 3, 10, 8, 9, 3])).unwrap();
        assert_ne!(a.h_cls(), b.h_cls());
        assert!(a.vectors().as_slice().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn input_validation() {
        let p = EncoderParams::zeros(5, 2, 1, 3);
        assert!(matches!(p.forward(&seq(&[0, 1, 2, 3])), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(p.forward(&seq(&[0, 9])), Err(Error::TokenOutOfRange { id: 9, .. })));
    }

    #[test]
    fn detached_values_match_and_refuse_backward() {
        let p = random_params(4, 10, 4, 2, 8, 0.3);
        let s = seq(&[2, 5, 4, 3]);
        let live = p.forward(&s).unwrap();
        let det = p.detached_forward(&s).unwrap();
        assert_eq!(live.vectors(), det.vectors());
        let mut g = p.zeros_like();
        let up = Matrix::zeros(4, 4);
        assert!(matches!(p.backward(&det, &up, &mut g), Err(Error::DetachedBackward)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(5, 10, 4, 2, 8, 0.3);
        let s = seq(&[2, 5, 4, 3]);
        let h = p.forward(&s).unwrap();
        let mut g = p.zeros_like();
        p.backward(&h, &Matrix::zeros(4, 4), &mut g).unwrap();
        assert_eq!(g, p.zeros_like());
    }

    #[test]
    fn token_gradient_support_is_sequence_ids() {
        let p = random_params(6, 10, 4, 1, 8, 0.3);
        let s = seq(&[2, 5, 4, 3]);
        let h = p.forward(&s).unwrap();
        let mut up = Matrix::zeros(4, 4);
        up.row_mut(2).copy_from_slice(&[1.0, -0.5, 0.25, 2.0]);
        let mut g = p.zeros_like();
        p.backward(&h, &up, &mut g).unwrap();
        for id in 0..10 {
            let nonzero = g.token_embeddings.row(id).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, s.token_ids.contains(&id), "id {id}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = random_params(7, 10, 4, 1, 8, 0.3);
        let h = p.forward(&seq(&[2, 5, 4])).unwrap();
        let mut g = p.zeros_like();
        assert!(matches!(p.backward(&h, &Matrix::zeros(2, 4), &mut g), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = random_params(8, 9, 5, 2, 10, 0.4);
        let s = seq(&[2, 5, 4, 6, 3, 7, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up = Matrix::gaussian(s.len(), 5, 1.0, &mut rng);
        let objective = |q: &EncoderParams| {
            let h = q.forward(&s).unwrap();
            crate::tensor::dot(h.vectors().as_slice(), up.as_slice())
        };
        let h = p.forward(&s).unwrap();
        let mut g = p.zeros_like();
        p.backward(&h, &up, &mut g).unwrap();

        let eps = 1e-6;
        let mut probe = p.clone();
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
        let count = probe.tensors().len();
        for t in 0..count {
            let len = probe.tensors()[t].1.as_slice().len();
            for i in 0..len {
                let orig = probe.tensors()[t].1.as_slice()[i];
                probe.tensors_mut()[t].1.as_mut_slice()[i] = orig + eps;
                let up_val = objective(&probe);
                probe.tensors_mut()[t].1.as_mut_slice()[i] = orig - eps;
                let down_val = objective(&probe);
                probe.tensors_mut()[t].1.as_mut_slice()[i] = orig;
                let fd = (up_val - down_val) / (2.0 * eps);
                let a = analytic[t][i];
                assert!((fd - a).abs() <= 1e-7 + 1e-5 * a.abs(), "tensor {t} entry {i}: {a} vs {fd}");
            }
        }
    }
}
