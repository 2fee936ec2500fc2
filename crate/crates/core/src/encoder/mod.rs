//! Conformer acoustic encoder with block self-attention and
//! self-conditioned CTC.
//!
//! Each block is macaron-style: half-step feed-forward, multi-head
//! self-attention (block-masked, relative sinusoidal position bias),
//! depthwise-convolution module (pointwise/GLU/depthwise/norm/swish/
//! pointwise), a second half-step feed-forward, and a final layer norm.
//! After the middle layer the intermediate CTC posteriors are fed back
//! into the trunk: `z = LayerNorm(x + softmax(inter_logits) W_fb)`.
//!
//! Checkpoints use the `enc.layer{i}.{sublayer}.{param}` naming scheme
//! (see the README for the full table).

mod ctc;

pub use ctc::{ctc_greedy_decode, ctc_loss, CtcResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    init_attention, init_layer_norm, init_linear, mask_to_bias, multi_head_attention,
    sinusoidal_rel_table, AttentionP, LayerNormP, LinearP,
};
use crate::scalar::Scalar;
use crate::store::NamedTensorStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use crate::nn::block_mask;

/// Encoder architecture; the reference configuration is 10 layers,
/// hidden 1024, 8 heads of 128, kernel 15, 42 output symbols.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub conv_kernel: usize,
    pub output_dim: usize,
    pub block_seconds: f64,
    pub frame_rate_hz: f64,
    /// Intermediate/final CTC loss weights; must sum to 1.
    pub w_inter: f64,
    pub w_final: f64,
}

impl EncoderConfig {
    /// Full-scale reference configuration.
    pub fn reference() -> Self {
        Self {
            input_dim: 160,
            num_layers: 10,
            hidden_dim: 1024,
            num_heads: 8,
            head_size: 128,
            conv_kernel: 15,
            output_dim: 42,
            block_seconds: 4.0,
            frame_rate_hz: 50.0,
            w_inter: 0.2,
            w_final: 0.8,
        }
    }

    /// Small configuration for desk-scale experiments.
    pub fn toy(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            head_size: 16,
            conv_kernel: 15,
            output_dim,
            block_seconds: 4.0,
            frame_rate_hz: 50.0,
            w_inter: 0.2,
            w_final: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads * self.head_size != self.hidden_dim {
            return Err(Error::Config(format!(
                "attention width {}x{} != hidden dim {}",
                self.num_heads, self.head_size, self.hidden_dim
            )));
        }
        if (self.w_inter + self.w_final - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "CTC weights {} + {} != 1",
                self.w_inter, self.w_final
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel {} must be odd", self.conv_kernel)));
        }
        if self.num_layers == 0 || self.output_dim < 2 {
            return Err(Error::Config("need >=1 layer and >=2 output symbols".into()));
        }
        Ok(())
    }

    /// Middle layer (1-based) after which self-conditioning applies;
    /// odd depths round up to the true middle.
    pub fn intermediate_layer(&self) -> usize {
        if self.num_layers % 2 == 0 {
            self.num_layers / 2
        } else {
            self.num_layers / 2 + 1
        }
    }

    /// Attention block size in frames (4 s at 50 Hz = 200).
    pub fn block_frames(&self) -> usize {
        ((self.block_seconds * self.frame_rate_hz).round() as usize).max(1)
    }

    fn ffn_dim(&self) -> usize {
        self.hidden_dim * 4
    }
}

/// Character inventory for CTC targets; blank fixed at index 0.
#[derive(Debug, Clone)]
pub struct Alphabet {
    /// `table[0]` is the blank (None); other entries are characters.
    table: Vec<Option<char>>,
    pub blank_index: usize,
}

impl Alphabet {
    pub fn new(chars: &str) -> Self {
        let mut table = vec![None];
        table.extend(chars.chars().map(Some));
        Self { table, blank_index: 0 }
    }

    /// The 42-symbol full-scale inventory: blank, space, a–z, 0–9, ' . , -
    pub fn full_scale() -> Self {
        let mut chars = String::from(" ");
        chars.extend('a'..='z');
        chars.extend('0'..='9');
        chars.push_str("'.,-");
        let a = Self::new(&chars);
        debug_assert_eq!(a.size(), 42);
        a
    }

    pub fn size(&self) -> usize {
        self.table.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.table
                    .iter()
                    .position(|&s| s == Some(c))
                    .ok_or_else(|| Error::Data(format!("character {:?} not in alphabet", c)))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter_map(|&i| self.table.get(i).copied().flatten())
            .collect()
    }
}

/// Parameters of one conformer block.
#[derive(Clone)]
pub struct ConformerLayer<E: Scalar> {
    pub ln_ffn1: LayerNormP<E>,
    pub ffn1_in: LinearP<E>,
    pub ffn1_out: LinearP<E>,
    pub ln_attn: LayerNormP<E>,
    pub attn: AttentionP<E>,
    pub ln_conv: LayerNormP<E>,
    pub conv_pw1: LinearP<E>,
    pub conv_dw: Tensor<E>,
    pub conv_norm: LayerNormP<E>,
    pub conv_pw2: LinearP<E>,
    pub ln_ffn2: LayerNormP<E>,
    pub ffn2_in: LinearP<E>,
    pub ffn2_out: LinearP<E>,
    pub ln_out: LayerNormP<E>,
}

impl<E: Scalar> ConformerLayer<E> {
    fn from_store(store: &NamedTensorStore, cfg: &EncoderConfig, i: usize) -> Result<Self> {
        let h = cfg.hidden_dim;
        let f = cfg.ffn_dim();
        let p = |s: &str| format!("enc.layer{}.{}", i, s);
        Ok(Self {
            ln_ffn1: LayerNormP::from_store(store, &p("ln_ffn1"), h)?,
            ffn1_in: LinearP::from_store(store, &p("ffn1.in"), h, f)?,
            ffn1_out: LinearP::from_store(store, &p("ffn1.out"), f, h)?,
            ln_attn: LayerNormP::from_store(store, &p("ln_attn"), h)?,
            attn: AttentionP::from_store(store, &p("attn"), h, h, h, h)?,
            ln_conv: LayerNormP::from_store(store, &p("ln_conv"), h)?,
            conv_pw1: LinearP::from_store(store, &p("conv.pw1"), h, 2 * h)?,
            conv_dw: store.tensor(&format!("enc.layer{}.conv.dw", i), &[cfg.conv_kernel, h])?,
            conv_norm: LayerNormP::from_store(store, &p("conv.norm"), h)?,
            conv_pw2: LinearP::from_store(store, &p("conv.pw2"), h, h)?,
            ln_ffn2: LayerNormP::from_store(store, &p("ln_ffn2"), h)?,
            ffn2_in: LinearP::from_store(store, &p("ffn2.in"), h, f)?,
            ffn2_out: LinearP::from_store(store, &p("ffn2.out"), f, h)?,
            ln_out: LayerNormP::from_store(store, &p("ln_out"), h)?,
        })
    }

    fn ffn(&self, x: &Tensor<E>, first: bool) -> Tensor<E> {
        let (ln, w_in, w_out) = if first {
            (&self.ln_ffn1, &self.ffn1_in, &self.ffn1_out)
        } else {
            (&self.ln_ffn2, &self.ffn2_in, &self.ffn2_out)
        };
        w_out.apply(&w_in.apply(&ln.apply(x)).swish())
    }

    /// Block-masked self-attention sub-layer (pre-norm, no residual).
    pub fn attention_forward(&self, x: &Tensor<E>, num_heads: usize, block_frames: usize) -> Tensor<E> {
        let t = x.dims2().0;
        let normed = self.ln_attn.apply(x);
        let bias = mask_to_bias::<E>(&block_mask(t, block_frames), t, t);
        let rel = sinusoidal_rel_table::<E>(t, self.attn.wq.w.dims2().1 / num_heads);
        multi_head_attention(&normed, &normed, &self.attn, num_heads, Some(&bias), Some(&rel), None, None)
            .output
    }

    fn conv_module(&self, x: &Tensor<E>) -> Tensor<E> {
        let normed = self.ln_conv.apply(x);
        let gated = self.conv_pw1.apply(&normed).glu();
        let conv = gated
            .depthwise_conv1d(&self.conv_dw)
            .expect("kernel oddness is checked at config time");
        self.conv_pw2.apply(&self.conv_norm.apply(&conv).swish())
    }

    /// One full conformer block.
    pub fn forward(&self, x: &Tensor<E>, num_heads: usize, block_frames: usize) -> Tensor<E> {
        let x = x.add(&self.ffn(x, true).scale(0.5));
        let x = x.add(&self.attention_forward(&x, num_heads, block_frames));
        let x = x.add(&self.conv_module(&x));
        let x = x.add(&self.ffn(&x, false).scale(0.5));
        self.ln_out.apply(&x)
    }
}

/// All encoder parameters bound to live tensors.
#[derive(Clone)]
pub struct EncoderParams<E: Scalar> {
    pub cfg: EncoderConfig,
    pub input_proj: LinearP<E>,
    pub layers: Vec<ConformerLayer<E>>,
    pub ctc_head: LinearP<E>,
    pub selfcond_feedback: Tensor<E>,
    pub selfcond_ln: LayerNormP<E>,
}

impl<E: Scalar> EncoderParams<E> {
    pub fn from_store(cfg: &EncoderConfig, store: &NamedTensorStore) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| ConformerLayer::from_store(store, cfg, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input_proj: LinearP::from_store(store, "enc.input_proj", cfg.input_dim, cfg.hidden_dim)?,
            layers,
            ctc_head: LinearP::from_store(store, "enc.ctc_head", cfg.hidden_dim, cfg.output_dim)?,
            selfcond_feedback: store.tensor("enc.selfcond.w_fb", &[cfg.output_dim, cfg.hidden_dim])?,
            selfcond_ln: LayerNormP::from_store(store, "enc.selfcond.ln", cfg.hidden_dim)?,
        })
    }
}

/// Fresh parameter store for an encoder configuration.
pub fn init_store(cfg: &EncoderConfig, seed: u64) -> NamedTensorStore {
    let mut store = NamedTensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.hidden_dim;
    let f = cfg.ffn_dim();
    init_linear(&mut store, "enc.input_proj", cfg.input_dim, h, &mut rng);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("enc.layer{}.{}", i, s);
        init_layer_norm(&mut store, &p("ln_ffn1"), h);
        init_linear(&mut store, &p("ffn1.in"), h, f, &mut rng);
        init_linear(&mut store, &p("ffn1.out"), f, h, &mut rng);
        init_layer_norm(&mut store, &p("ln_attn"), h);
        init_attention(&mut store, &p("attn"), h, h, h, h, &mut rng);
        init_layer_norm(&mut store, &p("ln_conv"), h);
        init_linear(&mut store, &p("conv.pw1"), h, 2 * h, &mut rng);
        let std = 1.0 / (cfg.conv_kernel as f64).sqrt();
        let dw: Vec<f32> = (0..cfg.conv_kernel * h)
            .map(|_| {
                let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                (z * std) as f32
            })
            .collect();
        store.insert(p("conv.dw"), vec![cfg.conv_kernel, h], dw);
        init_layer_norm(&mut store, &p("conv.norm"), h);
        init_linear(&mut store, &p("conv.pw2"), h, h, &mut rng);
        init_layer_norm(&mut store, &p("ln_ffn2"), h);
        init_linear(&mut store, &p("ffn2.in"), h, f, &mut rng);
        init_linear(&mut store, &p("ffn2.out"), f, h, &mut rng);
        init_layer_norm(&mut store, &p("ln_out"), h);
    }
    init_linear(&mut store, "enc.ctc_head", h, cfg.output_dim, &mut rng);
    let std = 0.02;
    let fb: Vec<f32> = (0..cfg.output_dim * h)
        .map(|_| {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            (z * std) as f32
        })
        .collect();
    store.insert("enc.selfcond.w_fb", vec![cfg.output_dim, h], fb);
    init_layer_norm(&mut store, "enc.selfcond.ln", h);
    store
}

/// Encoder forward pass.
///
/// Returns the final hidden sequence plus intermediate and final CTC
/// logits.  The intermediate logits are taken after the middle layer,
/// where the self-conditioning feedback is applied.
pub fn conformer_forward<E: Scalar>(
    params: &EncoderParams<E>,
    x: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let cfg = &params.cfg;
    let (_, d) = x.dims2();
    if d != cfg.input_dim {
        return Err(Error::Input(format!(
            "encoder expects {}-dim features, got {}",
            cfg.input_dim, d
        )));
    }
    let block_frames = cfg.block_frames();
    let inter_at = cfg.intermediate_layer();
    let mut h = params.input_proj.apply(x);
    let mut inter_logits = None;
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward(&h, cfg.num_heads, block_frames);
        if i + 1 == inter_at && cfg.num_layers > 1 {
            let logits = params.ctc_head.apply(&h);
            let feedback = logits.softmax(1).matmul(&params.selfcond_feedback);
            h = params.selfcond_ln.apply(&h.add(&feedback));
            inter_logits = Some(logits);
        }
    }
    let final_logits = params.ctc_head.apply(&h);
    let inter_logits = inter_logits.unwrap_or_else(|| final_logits.clone());
    Ok((h, inter_logits, final_logits))
}

/// Weighted self-conditioned CTC objective:
/// `w_inter * ctc(inter) + w_final * ctc(final)`, both through log-softmax.
///
/// Also returns the two component losses for logging.
pub fn self_conditioned_loss<E: Scalar>(
    inter_logits: &Tensor<E>,
    final_logits: &Tensor<E>,
    target: &[usize],
    blank: usize,
    w_inter: f64,
    w_final: f64,
) -> Result<(Tensor<E>, f64, f64)> {
    let inter = ctc_loss(&inter_logits.log_softmax(), target, blank)?;
    let fin = ctc_loss(&final_logits.log_softmax(), target, blank)?;
    let inter_value = inter.loss.scalar_value().to_f64();
    let final_value = fin.loss.scalar_value().to_f64();
    let combined = inter.loss.scale(w_inter).add(&fin.loss.scale(w_final));
    Ok((combined, inter_value, final_value))
}
