//! Window-level Q-former modality adapter and baseline projectors.
//!
//! The acoustic sequence `X[T × d]` is cut into `ceil(T/K)` windows of `K`
//! frames (the last window zero-padded); `N` shared trainable queries
//! cross-attend to each window and emit `N` vectors in the LLM embedding
//! space, so the output has exactly `N * ceil(T/K)` rows — a temporal
//! downsampling of `K/N`.
//!
//! Two comparison projectors share the same output width and rate for
//! stride `s = K/N`: a 2-layer MLP over `s` stacked frames, and
//! cross-attention from downsampled frames (queries) into the LLM text
//! embedding table (keys and values).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    init_attention, init_layer_norm, init_linear, multi_head_attention, AttentionP, LayerNormP,
    LinearP,
};
use crate::scalar::Scalar;
use crate::store::NamedTensorStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Projector variant selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    QFormer,
    Mlp,
    Xattn,
}

/// Q-former adapter configuration.  `window_frames mod num_queries == 0`
/// is a hard precondition (the downsampling factor K/N must be integral).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub window_frames: usize,
    pub num_layers: usize,
    pub enc_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub llm_dim: usize,
}

impl QFormerConfig {
    /// K=15 / N=3 default (5x downsampling).
    pub fn default_k15_n3(enc_dim: usize, llm_dim: usize) -> Self {
        Self {
            num_queries: 3,
            window_frames: 15,
            num_layers: 2,
            enc_dim,
            model_dim: 64,
            num_heads: 4,
            llm_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be >= 1".into()));
        }
        if self.window_frames < self.num_queries {
            return Err(Error::Config(format!(
                "window {} must be >= queries {}",
                self.window_frames, self.num_queries
            )));
        }
        if self.window_frames % self.num_queries != 0 {
            return Err(Error::Config(format!(
                "window {} must be divisible by queries {} (K mod N = 0)",
                self.window_frames, self.num_queries
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config("model_dim must be divisible by num_heads".into()));
        }
        Ok(())
    }

    /// Temporal downsampling factor K/N.
    pub fn downsample_factor(&self) -> usize {
        self.window_frames / self.num_queries
    }
}

/// One Q-former layer: query self-attention, cross-attention into the
/// window frames, feed-forward; pre-norm residual around each.
#[derive(Clone)]
pub struct QFormerLayer<E: Scalar> {
    pub ln_self: LayerNormP<E>,
    pub self_attn: AttentionP<E>,
    pub ln_cross: LayerNormP<E>,
    pub cross_attn: AttentionP<E>,
    pub ln_ffn: LayerNormP<E>,
    pub ffn_in: LinearP<E>,
    pub ffn_out: LinearP<E>,
}

/// Q-former parameters: shared query set, layers, output projection.
#[derive(Clone)]
pub struct QFormerParams<E: Scalar> {
    pub cfg: QFormerConfig,
    pub queries: Tensor<E>,
    pub layers: Vec<QFormerLayer<E>>,
    pub out: LinearP<E>,
}

impl<E: Scalar> QFormerParams<E> {
    pub fn from_store(cfg: &QFormerConfig, store: &NamedTensorStore) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.model_dim;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = |s: &str| format!("adapter.layer{}.{}", i, s);
            layers.push(QFormerLayer {
                ln_self: LayerNormP::from_store(store, &p("ln_self"), dm)?,
                self_attn: AttentionP::from_store(store, &p("self"), dm, dm, dm, dm)?,
                ln_cross: LayerNormP::from_store(store, &p("ln_cross"), dm)?,
                cross_attn: AttentionP::from_store(store, &p("cross"), dm, cfg.enc_dim, dm, dm)?,
                ln_ffn: LayerNormP::from_store(store, &p("ln_ffn"), dm)?,
                ffn_in: LinearP::from_store(store, &p("ffn.in"), dm, dm * 4)?,
                ffn_out: LinearP::from_store(store, &p("ffn.out"), dm * 4, dm)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            queries: store.tensor("adapter.queries", &[cfg.num_queries, dm])?,
            layers,
            out: LinearP::from_store(store, "adapter.out", dm, cfg.llm_dim)?,
        })
    }
}

/// Fresh Q-former parameter store.
pub fn init_qformer_store(cfg: &QFormerConfig, seed: u64) -> NamedTensorStore {
    let mut store = NamedTensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dm = cfg.model_dim;
    let q: Vec<f32> = (0..cfg.num_queries * dm)
        .map(|_| {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            (z * 0.5) as f32
        })
        .collect();
    store.insert("adapter.queries", vec![cfg.num_queries, dm], q);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("adapter.layer{}.{}", i, s);
        init_layer_norm(&mut store, &p("ln_self"), dm);
        init_attention(&mut store, &p("self"), dm, dm, dm, dm, &mut rng);
        init_layer_norm(&mut store, &p("ln_cross"), dm);
        init_attention(&mut store, &p("cross"), dm, cfg.enc_dim, dm, dm, &mut rng);
        init_layer_norm(&mut store, &p("ln_ffn"), dm);
        init_linear(&mut store, &p("ffn.in"), dm, dm * 4, &mut rng);
        init_linear(&mut store, &p("ffn.out"), dm * 4, dm, &mut rng);
    }
    init_linear(&mut store, "adapter.out", dm, cfg.llm_dim, &mut rng);
    store
}

/// Cut `x[T × d]` into `ceil(T/K)` windows of exactly `K` rows; the final
/// window is zero-padded past `T`.
pub fn window_partition<E: Scalar>(x: &Tensor<E>, k: usize) -> Vec<Tensor<E>> {
    let (t, d) = x.dims2();
    assert!(t >= 1, "window_partition on empty sequence");
    let num_windows = t.div_ceil(k);
    let mut windows = Vec::with_capacity(num_windows);
    for i in 0..num_windows {
        let start = i * k;
        let end = ((i + 1) * k).min(t);
        let slice = x.slice_rows(start, end);
        if end - start == k {
            windows.push(slice);
        } else {
            let pad = Tensor::zeros(&[k - (end - start), d]);
            windows.push(Tensor::concat_rows(&[slice, pad]));
        }
    }
    windows
}

/// Run the Q-former over one window: `[K × enc_dim] -> [N × llm_dim]`.
/// Padded zero frames are attended like any other frame.
pub fn qformer_window<E: Scalar>(params: &QFormerParams<E>, window: &Tensor<E>) -> Tensor<E> {
    let cfg = &params.cfg;
    assert_eq!(window.dims2().1, cfg.enc_dim, "window dim mismatch");
    let mut x = params.queries.clone();
    for layer in &params.layers {
        let normed = layer.ln_self.apply(&x);
        x = x.add(
            &multi_head_attention(&normed, &normed, &layer.self_attn, cfg.num_heads, None, None, None, None)
                .output,
        );
        let normed = layer.ln_cross.apply(&x);
        x = x.add(
            &multi_head_attention(&normed, window, &layer.cross_attn, cfg.num_heads, None, None, None, None)
                .output,
        );
        let normed = layer.ln_ffn.apply(&x);
        x = x.add(&layer.ffn_out.apply(&layer.ffn_in.apply(&normed).swish()));
    }
    params.out.apply(&x)
}

/// Adapter output: `M = N * ceil(T/K)` rows in the LLM embedding space.
pub struct AdapterOutput<E: Scalar> {
    pub y: Tensor<E>,
    pub num_windows: usize,
    pub num_queries: usize,
}

/// Full adapter pass; output rows `(i-1)N+1..iN` come from window `i`.
pub fn adapt<E: Scalar>(params: &QFormerParams<E>, x: &Tensor<E>) -> Result<AdapterOutput<E>> {
    params.cfg.validate()?;
    let windows = window_partition(x, params.cfg.window_frames);
    let outputs: Vec<Tensor<E>> = windows.iter().map(|w| qformer_window(params, w)).collect();
    let y = Tensor::concat_rows(&outputs);
    debug_assert_eq!(
        y.dims2().0,
        params.cfg.num_queries * x.dims2().0.div_ceil(params.cfg.window_frames)
    );
    Ok(AdapterOutput { y, num_windows: windows.len(), num_queries: params.cfg.num_queries })
}

/// 2-layer MLP projector over `stride` stacked frames.
#[derive(Clone)]
pub struct MlpProjectorParams<E: Scalar> {
    pub stride: usize,
    pub w_in: LinearP<E>,
    pub w_out: LinearP<E>,
}

impl<E: Scalar> MlpProjectorParams<E> {
    pub fn from_store(
        store: &NamedTensorStore,
        stride: usize,
        enc_dim: usize,
        hidden: usize,
        llm_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            stride,
            w_in: LinearP::from_store(store, "adapter.mlp.in", stride * enc_dim, hidden)?,
            w_out: LinearP::from_store(store, "adapter.mlp.out", hidden, llm_dim)?,
        })
    }
}

pub fn init_mlp_store(
    stride: usize,
    enc_dim: usize,
    hidden: usize,
    llm_dim: usize,
    seed: u64,
) -> NamedTensorStore {
    let mut store = NamedTensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_linear(&mut store, "adapter.mlp.in", stride * enc_dim, hidden, &mut rng);
    init_linear(&mut store, "adapter.mlp.out", hidden, llm_dim, &mut rng);
    store
}

/// Concatenate each group of `stride` consecutive frames (zero-padded at
/// the tail) and apply the 2-layer MLP: `[T × d] -> [ceil(T/s) × llm_dim]`.
pub fn mlp_projector<E: Scalar>(params: &MlpProjectorParams<E>, x: &Tensor<E>) -> Tensor<E> {
    let (t, d) = x.dims2();
    let s = params.stride;
    let groups = t.div_ceil(s);
    // Stacking is a reshape of (zero-padded) x; build it from live slices
    // so gradients route back to the frames.
    let mut rows = Vec::with_capacity(groups);
    for g in 0..groups {
        let start = g * s;
        let end = ((g + 1) * s).min(t);
        let mut parts = vec![x.slice_rows(start, end)];
        if end - start < s {
            parts.push(Tensor::zeros(&[s - (end - start), d]));
        }
        let window = Tensor::concat_rows(&parts); // [s × d]
        // flatten to a single row [1 × s*d]
        let mut cols = Vec::with_capacity(s);
        for j in 0..s {
            cols.push(window.slice_rows(j, j + 1));
        }
        rows.push(Tensor::concat_cols(&cols));
    }
    let flat = Tensor::concat_rows(&rows);
    params.w_out.apply(&params.w_in.apply(&flat).swish())
}

/// Cross-attention projector: downsampled acoustic frames become queries
/// into the LLM text embedding table (keys and values are the raw table
/// rows, so each output is a convex mixture of them).
#[derive(Clone)]
pub struct XattnProjectorParams<E: Scalar> {
    pub stride: usize,
    pub wq: LinearP<E>,
}

impl<E: Scalar> XattnProjectorParams<E> {
    pub fn from_store(store: &NamedTensorStore, stride: usize, enc_dim: usize, llm_dim: usize) -> Result<Self> {
        Ok(Self {
            stride,
            wq: LinearP::from_store(store, "adapter.xattn.q", enc_dim, llm_dim)?,
        })
    }
}

pub fn init_xattn_store(stride: usize, enc_dim: usize, llm_dim: usize, seed: u64) -> NamedTensorStore {
    let _ = stride;
    let mut store = NamedTensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_linear(&mut store, "adapter.xattn.q", enc_dim, llm_dim, &mut rng);
    store
}

pub struct XattnOutput<E: Scalar> {
    pub y: Tensor<E>,
    /// Attention weights `[ceil(T/s) × V]` over the embedding table.
    pub weights: Tensor<E>,
}

pub fn xattn_projector<E: Scalar>(
    params: &XattnProjectorParams<E>,
    x: &Tensor<E>,
    text_embedding_table: &Tensor<E>,
) -> XattnOutput<E> {
    let (t, _) = x.dims2();
    let s = params.stride;
    let groups = t.div_ceil(s);
    // Mean-pool each stride group of frames (dividing by the true member
    // count; zero-padding the tail would bias the mean).
    let mut rows = Vec::with_capacity(groups);
    for g in 0..groups {
        let start = g * s;
        let end = ((g + 1) * s).min(t);
        let mut acc = x.slice_rows(start, start + 1);
        for frame in start + 1..end {
            acc = acc.add(&x.slice_rows(frame, frame + 1));
        }
        rows.push(acc.scale(1.0 / (end - start) as f64));
    }
    let pooled = Tensor::concat_rows(&rows); // [groups × d]
    let llm_dim = text_embedding_table.dims2().1;
    let q = params.wq.apply(&pooled);
    let scores = q
        .matmul(&text_embedding_table.transpose())
        .scale(1.0 / (llm_dim as f64).sqrt());
    let weights = scores.softmax(1);
    XattnOutput { y: weights.matmul(text_embedding_table), weights }
}
