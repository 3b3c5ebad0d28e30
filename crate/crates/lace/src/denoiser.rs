//! The noise predictor: a permutation-equivariant transformer over layout
//! rows with adaptive layer-norm time conditioning.
//!
//! Architecture per forward pass (no positional encoding — layouts are
//! unordered sets, so the network is exactly equivariant to row permutation):
//!
//! ```text
//! encode: Linear(in→E) → ReLU → Linear(E→E)
//! n_layers x {
//!   AdaLN → multi-head self-attention → residual
//!   AdaLN → Linear(E→F) → ReLU → Linear(F→E) → residual
//! }
//! decode: Linear(E→E) → ReLU → Linear(E→in)
//! ```
//!
//! AdaLN is y = (1 + f_gamma(v_t)) ⊙ normalize(x) + f_beta(v_t), where v_t is
//! a sinusoidal embedding of the timestep and f_gamma/f_beta are
//! single-hidden-layer nets whose output layers start at zero, so training
//! begins from plain layer normalization.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Real, Tape, TapeGradients};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Network dimensions. `input_dim` is the layout state width (classes + 1
/// padding class + 4 geometry), `seq_len` the row count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_classes: usize,
    pub max_elements: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    /// Desk-scale configuration: small enough to train on a single core in
    /// minutes while exercising every architectural piece.
    fn default() -> Self {
        DenoiserConfig {
            n_classes: 5,
            max_elements: 25,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn input_dim(&self) -> usize {
        self.n_classes + 5
    }

    pub fn seq_len(&self) -> usize {
        self.max_elements
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.max_elements == 0
            || self.embed_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.time_embed_dim == 0
        {
            return Err(Error::Config("all denoiser dimensions must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// Parameter slots of one AdaLN modulation net: hidden weight/bias, output
/// weight/bias (output pair zero-initialized).
#[derive(Debug, Clone, Copy)]
pub struct ModNetIndex {
    pub w_hidden: usize,
    pub b_hidden: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Parameter slots of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub norm1_gamma: ModNetIndex,
    pub norm1_beta: ModNetIndex,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub norm2_gamma: ModNetIndex,
    pub norm2_beta: ModNetIndex,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

/// Slot map for the flat parameter list, derived deterministically from the
/// config. Shapes and names share the same order as the list itself.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub enc_w1: usize,
    pub enc_b1: usize,
    pub enc_w2: usize,
    pub enc_b2: usize,
    pub layers: Vec<LayerIndex>,
    pub dec_w1: usize,
    pub dec_b1: usize,
    pub dec_w2: usize,
    pub dec_b2: usize,
    pub shapes: Vec<(usize, usize)>,
    pub names: Vec<String>,
}

impl ParamIndex {
    pub fn new(config: &DenoiserConfig) -> Self {
        let e = config.embed_dim;
        let te = config.time_embed_dim;
        let f = config.ffn_dim;
        let d = config.input_dim();
        let mut shapes = Vec::new();
        let mut names = Vec::new();
        let mut add = |name: String, shape: (usize, usize)| -> usize {
            shapes.push(shape);
            names.push(name);
            shapes.len() - 1
        };
        let enc_w1 = add("enc.w1".into(), (d, e));
        let enc_b1 = add("enc.b1".into(), (1, e));
        let enc_w2 = add("enc.w2".into(), (e, e));
        let enc_b2 = add("enc.b2".into(), (1, e));
        let mut layers = Vec::with_capacity(config.n_layers);
        for li in 0..config.n_layers {
            let mut modnet = |tag: &str| ModNetIndex {
                w_hidden: add(format!("layer{}.{}.w_hidden", li, tag), (te, te)),
                b_hidden: add(format!("layer{}.{}.b_hidden", li, tag), (1, te)),
                w_out: add(format!("layer{}.{}.w_out", li, tag), (te, e)),
                b_out: add(format!("layer{}.{}.b_out", li, tag), (1, e)),
            };
            let norm1_gamma = modnet("norm1.gamma");
            let norm1_beta = modnet("norm1.beta");
            let wq = add(format!("layer{}.attn.wq", li), (e, e));
            let bq = add(format!("layer{}.attn.bq", li), (1, e));
            let wk = add(format!("layer{}.attn.wk", li), (e, e));
            let bk = add(format!("layer{}.attn.bk", li), (1, e));
            let wv = add(format!("layer{}.attn.wv", li), (e, e));
            let bv = add(format!("layer{}.attn.bv", li), (1, e));
            let wo = add(format!("layer{}.attn.wo", li), (e, e));
            let bo = add(format!("layer{}.attn.bo", li), (1, e));
            let mut modnet2 = |tag: &str| ModNetIndex {
                w_hidden: add(format!("layer{}.{}.w_hidden", li, tag), (te, te)),
                b_hidden: add(format!("layer{}.{}.b_hidden", li, tag), (1, te)),
                w_out: add(format!("layer{}.{}.w_out", li, tag), (te, e)),
                b_out: add(format!("layer{}.{}.b_out", li, tag), (1, e)),
            };
            let norm2_gamma = modnet2("norm2.gamma");
            let norm2_beta = modnet2("norm2.beta");
            let ffn_w1 = add(format!("layer{}.ffn.w1", li), (e, f));
            let ffn_b1 = add(format!("layer{}.ffn.b1", li), (1, f));
            let ffn_w2 = add(format!("layer{}.ffn.w2", li), (f, e));
            let ffn_b2 = add(format!("layer{}.ffn.b2", li), (1, e));
            layers.push(LayerIndex {
                norm1_gamma,
                norm1_beta,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                norm2_gamma,
                norm2_beta,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let dec_w1 = add("dec.w1".into(), (e, e));
        let dec_b1 = add("dec.b1".into(), (1, e));
        let dec_w2 = add("dec.w2".into(), (e, d));
        let dec_b2 = add("dec.b2".into(), (1, d));
        ParamIndex {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            layers,
            dec_w1,
            dec_b1,
            dec_w2,
            dec_b2,
            shapes,
            names,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.shapes.len()
    }

    pub fn total_scalars(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }
}

/// The denoiser model: config, slot map, and the flat parameter list.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub index: ParamIndex,
    pub params: Vec<Array2<T>>,
}

/// Sinusoidal features of a timestep: sin at geometrically spaced
/// frequencies in the first half, cos in the second.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        v[i] = arg.sin();
        v[half + i] = arg.cos();
    }
    v
}

impl<T: Real> Denoiser<T> {
    /// Fan-in-scaled uniform initialization for weights, zero biases, and
    /// zero output layers for the modulation nets so every AdaLN starts as a
    /// plain layer norm. Draws come from a seeded stream in slot order.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        let mut rng = crate::rng::rng_from_seed(seed);
        use rand::Rng;
        let mut params = Vec::with_capacity(index.n_slots());
        let zero_slots: std::collections::HashSet<usize> = index
            .layers
            .iter()
            .flat_map(|l| {
                [l.norm1_gamma, l.norm1_beta, l.norm2_gamma, l.norm2_beta]
                    .into_iter()
                    .flat_map(|m| [m.w_out, m.b_out])
            })
            .collect();
        for (slot, (rows, cols)) in index.shapes.iter().enumerate() {
            let (rows, cols) = (*rows, *cols);
            let is_bias = rows == 1;
            let value = if zero_slots.contains(&slot) || is_bias {
                Array2::zeros((rows, cols))
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| T::of_f64(rng.random_range(-bound..bound)))
            };
            params.push(value);
        }
        Ok(Denoiser { config, index, params })
    }

    /// Fails fast if any parameter is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (slot, p) in self.params.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter '{}' contains a non-finite value",
                    self.index.names[slot]
                )));
            }
        }
        Ok(())
    }

    fn modulation(
        &self,
        tape: &mut Tape<T>,
        t_feat: NodeId,
        net: &ModNetIndex,
    ) -> Result<NodeId> {
        let w_h = tape.param(net.w_hidden, self.params[net.w_hidden].clone());
        let b_h = tape.param(net.b_hidden, self.params[net.b_hidden].clone());
        let w_o = tape.param(net.w_out, self.params[net.w_out].clone());
        let b_o = tape.param(net.b_out, self.params[net.b_out].clone());
        let h = tape.matmul(t_feat, w_h)?;
        let h = tape.add_row(h, b_h)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w_o)?;
        tape.add_row(o, b_o)
    }

    fn adaln(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        t_feat: NodeId,
        gamma: &ModNetIndex,
        beta: &ModNetIndex,
        block: usize,
    ) -> Result<NodeId> {
        let g = self.modulation(tape, t_feat, gamma)?;
        let b = self.modulation(tape, t_feat, beta)?;
        let normed = tape.layer_norm_rows(x);
        let scale = tape.add_scalar(g, T::one());
        let scaled = tape.mul_block_rows(normed, scale, block)?;
        tape.add_block_rows(scaled, b, block)
    }

    fn linear(&self, tape: &mut Tape<T>, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let wn = tape.param(w, self.params[w].clone());
        let bn = tape.param(b, self.params[b].clone());
        let m = tape.matmul(x, wn)?;
        tape.add_row(m, bn)
    }

    /// Records the forward pass for a batch. `x` stacks the batch items
    /// vertically: (batch * seq_len) x input_dim; `ts` gives one timestep per
    /// item. Returns the tape, the input node, and the output node.
    pub fn forward_batch_traced(&self, x: Array2<T>, ts: &[usize]) -> Result<BatchForward<T>> {
        self.check_finite()?;
        let l = self.config.seq_len();
        let d = self.config.input_dim();
        let batch = ts.len();
        if x.dim() != (batch * l, d) {
            return Err(Error::Config(format!(
                "batch input is {}x{} but {} items need {}x{}",
                x.nrows(),
                x.ncols(),
                batch,
                batch * l,
                d
            )));
        }
        let te = self.config.time_embed_dim;
        let mut t_feat = Array2::zeros((batch, te));
        for (i, t) in ts.iter().enumerate() {
            for (j, v) in time_embedding(*t, te).into_iter().enumerate() {
                t_feat[[i, j]] = T::of_f64(v);
            }
        }
        let mut tape = Tape::new();
        let input = tape.input(x);
        let t_node = tape.constant(t_feat);

        let h = self.linear(&mut tape, input, self.index.enc_w1, self.index.enc_b1)?;
        let h = tape.relu(h);
        let mut h = self.linear(&mut tape, h, self.index.enc_w2, self.index.enc_b2)?;

        for layer in &self.index.layers {
            let n1 = self.adaln(&mut tape, h, t_node, &layer.norm1_gamma, &layer.norm1_beta, l)?;
            let q = self.linear(&mut tape, n1, layer.wq, layer.bq)?;
            let k = self.linear(&mut tape, n1, layer.wk, layer.bk)?;
            let v = self.linear(&mut tape, n1, layer.wv, layer.bv)?;
            let att = tape.attention(q, k, v, batch, l, self.config.n_heads)?;
            let o = self.linear(&mut tape, att, layer.wo, layer.bo)?;
            h = tape.add(h, o)?;

            let n2 = self.adaln(&mut tape, h, t_node, &layer.norm2_gamma, &layer.norm2_beta, l)?;
            let f = self.linear(&mut tape, n2, layer.ffn_w1, layer.ffn_b1)?;
            let f = tape.relu(f);
            let f = self.linear(&mut tape, f, layer.ffn_w2, layer.ffn_b2)?;
            h = tape.add(h, f)?;
        }

        let out = self.linear(&mut tape, h, self.index.dec_w1, self.index.dec_b1)?;
        let out = tape.relu(out);
        let out = self.linear(&mut tape, out, self.index.dec_w2, self.index.dec_b2)?;
        if tape.value(out).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "denoiser output contains non-finite values (timesteps {:?})",
                ts
            )));
        }
        Ok(BatchForward { tape, input, output: out, batch })
    }

    /// Forward without keeping gradients: returns the predicted noise for a
    /// stacked batch.
    pub fn predict_batch(&self, x: Array2<T>, ts: &[usize]) -> Result<Array2<T>> {
        let fwd = self.forward_batch_traced(x, ts)?;
        Ok(fwd.tape.value(fwd.output).clone())
    }
}

/// One recorded forward pass over a batch, ready for a single backward walk.
pub struct BatchForward<T> {
    pub tape: Tape<T>,
    pub input: NodeId,
    pub output: NodeId,
    pub batch: usize,
}

impl<T: Real> BatchForward<T> {
    pub fn output_values(&self) -> &Array2<T> {
        self.tape.value(self.output)
    }

    /// Backward with the given d(loss)/d(output) seed; returns gradients per
    /// parameter slot and optionally for the stacked input.
    pub fn backward(
        &mut self,
        seed: &Array2<T>,
        n_slots: usize,
        want_input_grad: bool,
    ) -> Result<TapeGradients<T>> {
        self.tape.backward(self.output, seed, n_slots, want_input_grad)
    }
}

/// Anything that predicts the forward-process noise from a state and
/// timestep; the sampling loops talk to models through this.
pub trait NoisePredictor {
    /// Predicts noise for a batch of same-shape states at per-item timesteps.
    fn predict_noise_batch(&self, xs: &[Array2<f64>], ts: &[usize]) -> Result<Vec<Array2<f64>>>;

    fn predict_noise(&self, x: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        Ok(self.predict_noise_batch(std::slice::from_ref(x), &[t])?.remove(0))
    }
}

impl<T: Real> NoisePredictor for Denoiser<T> {
    fn predict_noise_batch(&self, xs: &[Array2<f64>], ts: &[usize]) -> Result<Vec<Array2<f64>>> {
        if xs.len() != ts.len() {
            return Err(Error::Config("one timestep per batch item required".into()));
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let l = self.config.seq_len();
        let d = self.config.input_dim();
        let mut stacked = Array2::zeros((xs.len() * l, d));
        for (i, x) in xs.iter().enumerate() {
            if x.dim() != (l, d) {
                return Err(Error::Config(format!(
                    "state {} is {}x{}, expected {}x{}",
                    i,
                    x.nrows(),
                    x.ncols(),
                    l,
                    d
                )));
            }
            for r in 0..l {
                for c in 0..d {
                    stacked[[i * l + r, c]] = T::of_f64(x[[r, c]]);
                }
            }
        }
        let out = self.predict_batch(stacked, ts)?;
        let mut result = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let mut m = Array2::zeros((l, d));
            for r in 0..l {
                for c in 0..d {
                    m[[r, c]] = out[[i * l + r, c]].as_f64();
                }
            }
            result.push(m);
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, rng_from_seed};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            n_classes: 2,
            max_elements: 3,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.time_embed_dim = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn parameter_count_matches_hand_tally() {
        // Desk default: encoder 4864, decoder 4810, and per layer four
        // modulation nets (8320 each), four attention projections (4160
        // each), and the feed-forward pair (33088): 83008 per layer.
        let index = ParamIndex::new(&DenoiserConfig::default());
        assert_eq!(index.total_scalars(), 4864 + 2 * 83_008 + 4810);
    }

    #[test]
    fn init_zeroes_modulation_outputs_and_biases() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 7).unwrap();
        for layer in &model.index.layers {
            for net in [layer.norm1_gamma, layer.norm1_beta, layer.norm2_gamma, layer.norm2_beta] {
                assert!(model.params[net.w_out].iter().all(|v| *v == 0.0));
                assert!(model.params[net.b_out].iter().all(|v| *v == 0.0));
                assert!(model.params[net.w_hidden].iter().any(|v| *v != 0.0));
            }
        }
        assert!(model.params[model.index.enc_b1].iter().all(|v| *v == 0.0));
        assert!(model.params[model.index.enc_w1].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn forward_has_contract_shape_and_determinism() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 3).unwrap();
        let mut rng = rng_from_seed(5);
        let x = normal_matrix(&mut rng, 6, 7);
        let a = model.predict_batch(x.clone(), &[10, 500]).unwrap();
        let b = model.predict_batch(x, &[10, 500]).unwrap();
        assert_eq!(a.dim(), (6, 7));
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_decoder_output_layer_gives_zero_prediction() {
        let mut model: Denoiser<f64> = Denoiser::init(tiny_config(), 3).unwrap();
        model.params[model.index.dec_w2].fill(0.0);
        model.params[model.index.dec_b2].fill(0.0);
        let mut rng = rng_from_seed(6);
        let x = normal_matrix(&mut rng, 3, 7);
        let out = model.predict_batch(x, &[100]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 11).unwrap();
        let mut rng = rng_from_seed(12);
        let x = normal_matrix(&mut rng, 3, 7);
        let perm = [2usize, 0, 1];
        let mut xp = x.clone();
        for (dst, src) in perm.iter().enumerate() {
            for c in 0..7 {
                xp[[dst, c]] = x[[*src, c]];
            }
        }
        let base = model.predict_batch(x, &[400]).unwrap();
        let permuted = model.predict_batch(xp, &[400]).unwrap();
        for (dst, src) in perm.iter().enumerate() {
            for c in 0..7 {
                let a = permuted[[dst, c]];
                let b = base[[*src, c]];
                assert!((a - b).abs() < 1e-12, "row {} col {}: {} vs {}", dst, c, a, b);
            }
        }
    }

    #[test]
    fn nan_parameters_fail_fast_with_slot_name() {
        let mut model: Denoiser<f64> = Denoiser::init(tiny_config(), 13).unwrap();
        model.params[model.index.layers[0].wq][[0, 0]] = f64::NAN;
        let mut rng = rng_from_seed(14);
        let x = normal_matrix(&mut rng, 3, 7);
        let err = model.predict_batch(x, &[1]).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("layer0.attn.wq"), "unhelpful diagnostic: {}", msg);
    }

    #[test]
    fn zero_initialized_modulation_equals_plain_layer_norm() {
        // With f_gamma/f_beta outputs still at zero, AdaLN must reduce to a
        // plain per-row normalization regardless of timestep.
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 15).unwrap();
        let mut rng = rng_from_seed(16);
        let x = normal_matrix(&mut rng, 3, 8);
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let te = model.config.time_embed_dim;
        let mut tf = Array2::zeros((1, te));
        for (j, v) in time_embedding(700, te).into_iter().enumerate() {
            tf[[0, j]] = v;
        }
        let tn = tape.constant(tf);
        let layer = &model.index.layers[0];
        let out = model
            .adaln(&mut tape, xn, tn, &layer.norm1_gamma, &layer.norm1_beta, 3)
            .unwrap();
        let got = tape.value(out).clone();
        let mut plain = Tape::new();
        let xi = plain.input(x);
        let ln = plain.layer_norm_rows(xi);
        assert_eq!(&got, plain.value(ln));
    }

    #[test]
    fn constant_rows_normalize_to_modulation_shift() {
        // A constant feature row has zero variance; the epsilon floor keeps
        // the normalized core at zero, so AdaLN returns f_beta(v_t) alone.
        let mut model: Denoiser<f64> = Denoiser::init(tiny_config(), 17).unwrap();
        let layer = model.index.layers[0].clone();
        // Give the beta net a visible output.
        let mut rng = rng_from_seed(18);
        model.params[layer.norm1_beta.w_out] = normal_matrix(&mut rng, 8, 8);
        let x = Array2::from_elem((3, 8), 0.42);
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let te = model.config.time_embed_dim;
        let mut tf = Array2::zeros((1, te));
        for (j, v) in time_embedding(25, te).into_iter().enumerate() {
            tf[[0, j]] = v;
        }
        let tn = tape.constant(tf);
        let out = model
            .adaln(&mut tape, xn, tn, &layer.norm1_gamma, &layer.norm1_beta, 3)
            .unwrap();
        let beta = model.modulation(&mut tape, tn, &layer.norm1_beta).unwrap();
        let shift = tape.value(beta).clone();
        for r in 0..3 {
            for c in 0..8 {
                assert!((tape.value(out)[[r, c]] - shift[[0, c]]).abs() < 1e-9);
            }
        }
    }

    /// Central-difference check of d(sum of squares of output)/d(param) on a
    /// sampled subset of entries in one parameter.
    fn fd_check_param(model: &Denoiser<f64>, slot: usize, entries: &[(usize, usize)], x: &Array2<f64>, ts: &[usize]) {
        let mut fwd = model.forward_batch_traced(x.clone(), ts).unwrap();
        let seed = fwd.output_values().mapv(|v| 2.0 * v);
        let grads = fwd.backward(&seed, model.index.n_slots(), false).unwrap();
        let g = grads.by_param[slot].as_ref().expect("slot participates");
        let h = 1e-5;
        for &(r, c) in entries {
            let mut m = model.clone();
            m.params[slot][[r, c]] += h;
            let lp: f64 = m.predict_batch(x.clone(), ts).unwrap().iter().map(|v| v * v).sum();
            m.params[slot][[r, c]] -= 2.0 * h;
            let lm: f64 = m.predict_batch(x.clone(), ts).unwrap().iter().map(|v| v * v).sum();
            let fd = (lp - lm) / (2.0 * h);
            let a = g[[r, c]];
            assert!(
                (a - fd).abs() <= 1e-3 * fd.abs().max(1e-4),
                "slot {} ({}) [{},{}]: analytic {} vs fd {}",
                slot,
                model.index.names[slot],
                r,
                c,
                a,
                fd
            );
        }
    }

    #[test]
    fn every_parameter_group_matches_finite_differences() {
        let mut model: Denoiser<f64> = Denoiser::init(tiny_config(), 19).unwrap();
        // Perturb the zero-initialized modulation outputs so their hidden
        // layers see gradient flow in a generic position.
        let mut rng = rng_from_seed(20);
        for layer in model.index.layers.clone() {
            for net in [layer.norm1_gamma, layer.norm1_beta, layer.norm2_gamma, layer.norm2_beta] {
                model.params[net.w_out] = normal_matrix(&mut rng, 8, 8) * 0.05;
                model.params[net.b_out] = normal_matrix(&mut rng, 1, 8) * 0.05;
            }
        }
        let x = normal_matrix(&mut rng, 6, 7);
        let ts = [3usize, 800];
        let idx = model.index.clone();
        let layer = &idx.layers[1];
        let slots = [
            idx.enc_w1,
            idx.enc_b2,
            layer.norm1_gamma.w_hidden,
            layer.norm1_gamma.w_out,
            layer.norm1_beta.b_out,
            layer.wq,
            layer.bk,
            layer.wv,
            layer.wo,
            layer.norm2_beta.w_hidden,
            layer.ffn_w1,
            layer.ffn_b1,
            layer.ffn_w2,
            idx.dec_w1,
            idx.dec_w2,
            idx.dec_b2,
        ];
        for slot in slots {
            let (rows, cols) = idx.shapes[slot];
            let entries: Vec<(usize, usize)> =
                (0..3).map(|k| ((k * 7) % rows, (k * 13 + 1) % cols)).collect();
            fd_check_param(&model, slot, &entries, &x, &ts);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 21).unwrap();
        let mut rng = rng_from_seed(22);
        let x = normal_matrix(&mut rng, 3, 7);
        let ts = [250usize];
        let mut fwd = model.forward_batch_traced(x.clone(), &ts).unwrap();
        let seed = fwd.output_values().mapv(|v| 2.0 * v);
        let grads = fwd.backward(&seed, model.index.n_slots(), true).unwrap();
        let (_, gin) = &grads.by_input[0];
        let h = 1e-5;
        for &(r, c) in &[(0usize, 0usize), (1, 3), (2, 6), (0, 5)] {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let lp: f64 = model.predict_batch(xp, &ts).unwrap().iter().map(|v| v * v).sum();
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let lm: f64 = model.predict_batch(xm, &ts).unwrap().iter().map(|v| v * v).sum();
            let fd = (lp - lm) / (2.0 * h);
            let a = gin[[r, c]];
            assert!(
                (a - fd).abs() <= 1e-3 * fd.abs().max(1e-4),
                "input [{},{}]: analytic {} vs fd {}",
                r,
                c,
                a,
                fd
            );
        }
    }

    #[test]
    fn batch_prediction_agrees_with_single_item_runs() {
        let model: Denoiser<f64> = Denoiser::init(tiny_config(), 23).unwrap();
        let mut rng = rng_from_seed(24);
        let a = normal_matrix(&mut rng, 3, 7);
        let b = normal_matrix(&mut rng, 3, 7);
        let batch = model.predict_noise_batch(&[a.clone(), b.clone()], &[10, 900]).unwrap();
        let one_a = model.predict_noise(&a, 10).unwrap();
        let one_b = model.predict_noise(&b, 900).unwrap();
        let da = (&batch[0] - &one_a).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        let db = (&batch[1] - &one_b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(da < 1e-12 && db < 1e-12, "batching changed predictions: {} {}", da, db);
    }
}
