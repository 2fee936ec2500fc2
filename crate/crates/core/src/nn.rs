//! Shared neural building blocks: linear layers, multi-head attention with
//! optional additive masks, relative sinusoidal position bias, and LoRA
//! hooks on the query/value projections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::store::NamedTensorStore;
use crate::tensor::Tensor;
use crate::Result;

/// Linear layer parameters: `y = x W + b` with `W: [in × out]`.
#[derive(Clone)]
pub struct LinearP<E: Scalar> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Scalar> LinearP<E> {
    pub fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.matmul(&self.w).add_row(&self.b)
    }

    pub fn from_store(store: &NamedTensorStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.tensor(&format!("{}.w", name), &[fan_in, fan_out])?,
            b: store.tensor(&format!("{}.b", name), &[fan_out])?,
        })
    }
}

/// Write a fresh linear init into the store: `W ~ N(0, 1/fan_in)`, zero bias.
pub fn init_linear(store: &mut NamedTensorStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let std = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f32> = (0..fan_in * fan_out)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (z * std) as f32
        })
        .collect();
    store.insert(format!("{}.w", name), vec![fan_in, fan_out], w);
    store.insert(format!("{}.b", name), vec![fan_out], vec![0.0; fan_out]);
}

/// Layer-norm parameters (gain 1, bias 0 at init).
#[derive(Clone)]
pub struct LayerNormP<E: Scalar> {
    pub gain: Tensor<E>,
    pub bias: Tensor<E>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<E: Scalar> LayerNormP<E> {
    pub fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.layer_norm(&self.gain, &self.bias, LAYER_NORM_EPS)
    }

    pub fn from_store(store: &NamedTensorStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.tensor(&format!("{}.gain", name), &[dim])?,
            bias: store.tensor(&format!("{}.bias", name), &[dim])?,
        })
    }
}

pub fn init_layer_norm(store: &mut NamedTensorStore, name: &str, dim: usize) {
    store.insert(format!("{}.gain", name), vec![dim], vec![1.0; dim]);
    store.insert(format!("{}.bias", name), vec![dim], vec![0.0; dim]);
}

/// Boolean block mask: `mask[i][j]` true iff i and j share a block of
/// `block_frames` consecutive positions.
pub fn block_mask(t: usize, block_frames: usize) -> Vec<bool> {
    assert!(block_frames >= 1, "block_frames must be >= 1");
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            mask[i * t + j] = i / block_frames == j / block_frames;
        }
    }
    mask
}

/// Additive attention bias from a boolean mask: 0 where allowed,
/// -inf where masked.
pub fn mask_to_bias<E: Scalar>(mask: &[bool], t_q: usize, t_k: usize) -> Tensor<E> {
    assert_eq!(mask.len(), t_q * t_k);
    let data = mask
        .iter()
        .map(|&keep| if keep { E::ZERO } else { E::neg_infinity() })
        .collect();
    Tensor::from_vec(&[t_q, t_k], data)
}

/// Additive causal bias for decoder self-attention.
pub fn causal_bias<E: Scalar>(t: usize) -> Tensor<E> {
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            mask[i * t + j] = true;
        }
    }
    mask_to_bias(&mask, t, t)
}

/// Fixed sinusoidal embeddings of relative offsets `-(t-1)..=(t-1)`,
/// shaped `[(2t-1) × dim]` and laid out so that offset `delta` sits at row
/// `delta + t - 1` (the layout [`Tensor::rel_shift_gather`] expects).
pub fn sinusoidal_rel_table<E: Scalar>(t: usize, dim: usize) -> Tensor<E> {
    let rows = 2 * t - 1;
    let mut data = vec![E::ZERO; rows * dim];
    for r in 0..rows {
        let delta = r as f64 - (t as f64 - 1.0);
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = delta * rate;
            data[r * dim + i] = E::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(&[rows, dim], data)
}

/// Low-rank adapter applied to one projection: `W' = W + (alpha/rank) A B`.
#[derive(Clone)]
pub struct LoraP<E: Scalar> {
    pub a: Tensor<E>,
    pub b: Tensor<E>,
    pub scale: f64,
}

/// Attention projections for one site (self- or cross-attention).
///
/// The key projection carries no bias: a key bias shifts every score in a
/// row by the same amount, which softmax cancels exactly, so the
/// parameter could never train.
#[derive(Clone)]
pub struct AttentionP<E: Scalar> {
    pub wq: LinearP<E>,
    pub wk: Tensor<E>,
    pub wv: LinearP<E>,
    pub wo: LinearP<E>,
}

impl<E: Scalar> AttentionP<E> {
    pub fn from_store(
        store: &NamedTensorStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            wq: LinearP::from_store(store, &format!("{}.q", name), q_dim, inner_dim)?,
            wk: store.tensor(&format!("{}.k.w", name), &[kv_dim, inner_dim])?,
            wv: LinearP::from_store(store, &format!("{}.v", name), kv_dim, inner_dim)?,
            wo: LinearP::from_store(store, &format!("{}.o", name), inner_dim, out_dim)?,
        })
    }
}

pub fn init_attention(
    store: &mut NamedTensorStore,
    name: &str,
    q_dim: usize,
    kv_dim: usize,
    inner_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    init_linear(store, &format!("{}.q", name), q_dim, inner_dim, rng);
    let std = 1.0 / (kv_dim as f64).sqrt();
    let wk: Vec<f32> = (0..kv_dim * inner_dim)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (z * std) as f32
        })
        .collect();
    store.insert(format!("{}.k.w", name), vec![kv_dim, inner_dim], wk);
    init_linear(store, &format!("{}.v", name), kv_dim, inner_dim, rng);
    init_linear(store, &format!("{}.o", name), inner_dim, out_dim, rng);
}

/// Attention output plus the per-head attention probability matrices
/// (handy for convex-combination checks in tests).
pub struct AttentionOut<E: Scalar> {
    pub output: Tensor<E>,
    pub probs: Vec<Tensor<E>>,
}

/// Multi-head scaled dot-product attention.
///
/// `bias` is an additive `[Tq × Tk]` matrix (0 allowed / -inf masked);
/// `rel_table` enables the relative sinusoidal position term (requires
/// Tq == Tk); `lora_q`/`lora_v` add low-rank deltas to those projections.
pub fn multi_head_attention<E: Scalar>(
    q_src: &Tensor<E>,
    kv_src: &Tensor<E>,
    p: &AttentionP<E>,
    num_heads: usize,
    bias: Option<&Tensor<E>>,
    rel_table: Option<&Tensor<E>>,
    lora_q: Option<&LoraP<E>>,
    lora_v: Option<&LoraP<E>>,
) -> AttentionOut<E> {
    let inner_dim = p.wq.w.dims2().1;
    assert_eq!(inner_dim % num_heads, 0, "inner dim {} not divisible by heads {}", inner_dim, num_heads);
    let dh = inner_dim / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let apply_with_lora = |lin: &LinearP<E>, lora: Option<&LoraP<E>>, x: &Tensor<E>| -> Tensor<E> {
        let base = lin.apply(x);
        match lora {
            Some(l) => base.add(&x.matmul(&l.a).matmul(&l.b).scale(l.scale)),
            None => base,
        }
    };

    let q = apply_with_lora(&p.wq, lora_q, q_src);
    let k = kv_src.matmul(&p.wk);
    let v = apply_with_lora(&p.wv, lora_v, kv_src);

    let t_q = q.dims2().0;
    let mut head_outputs = Vec::with_capacity(num_heads);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh);
        let kh = k.slice_cols(h * dh, (h + 1) * dh);
        let vh = v.slice_cols(h * dh, (h + 1) * dh);
        let mut scores = qh.matmul(&kh.transpose()).scale(scale);
        if let Some(table) = rel_table {
            // Position term q_i . e(i-j), gathered into [Tq × Tq].
            let pos = qh.matmul(&table.transpose()).rel_shift_gather(t_q).scale(scale);
            scores = scores.add(&pos);
        }
        if let Some(bias) = bias {
            scores = scores.add(bias);
        }
        let attn = scores.softmax(1);
        head_outputs.push(attn.matmul(&vh));
        probs.push(attn);
    }
    let concat = Tensor::concat_cols(&head_outputs);
    AttentionOut { output: p.wo.apply(&concat), probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_attention(dim: usize, inner: usize) -> AttentionP<f64> {
        let mut store = NamedTensorStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        init_attention(&mut store, "attn", dim, dim, inner, dim, &mut rng);
        AttentionP::from_store(&store, "attn", dim, dim, inner, dim).unwrap()
    }

    #[test]
    fn block_mask_floor_rule() {
        // T=5, block=2 -> blocks {0,1} {2,3} {4}
        let m = block_mask(5, 2);
        let at = |i: usize, j: usize| m[i * 5 + j];
        assert!(at(0, 1) && at(1, 0) && at(2, 3));
        assert!(!at(1, 2) && !at(3, 4) && !at(0, 4));
        assert!(at(4, 4));
    }

    #[test]
    fn block_mask_block_geq_t_is_all_true() {
        assert!(block_mask(6, 6).iter().all(|&v| v));
        assert!(block_mask(6, 100).iter().all(|&v| v));
    }

    #[test]
    fn full_scale_block_is_200_frames() {
        // 4 s of 50 Hz frames.
        let block_frames = (4.0f64 * 50.0).round() as usize;
        assert_eq!(block_frames, 200);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let p = toy_attention(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[7, 8], 1.0, &mut rng);
        let bias = mask_to_bias::<f64>(&block_mask(7, 3), 7, 7);
        let out = multi_head_attention(&x, &x, &p, 2, Some(&bias), None, None, None);
        for attn in &out.probs {
            for i in 0..7 {
                let row = &attn.data()[i * 7..(i + 1) * 7];
                assert!(row.iter().all(|&w| w >= 0.0));
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "row {} sums to {}", i, sum);
            }
        }
    }

    #[test]
    fn masked_attention_matches_per_block_attention() {
        let p = toy_attention(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 10;
        let block = 4;
        let x = Tensor::<f64>::randn(&[t, 8], 1.0, &mut rng);
        let bias = mask_to_bias::<f64>(&block_mask(t, block), t, t);
        let rel = sinusoidal_rel_table::<f64>(t, 4);
        let full = multi_head_attention(&x, &x, &p, 2, Some(&bias), Some(&rel), None, None);

        let mut per_block_rows = Vec::new();
        let mut start = 0;
        while start < t {
            let end = (start + block).min(t);
            let xb = x.slice_rows(start, end);
            let relb = sinusoidal_rel_table::<f64>(end - start, 4);
            let out = multi_head_attention(&xb, &xb, &p, 2, None, Some(&relb), None, None);
            per_block_rows.push(out.output);
            start = end;
        }
        let stitched = Tensor::concat_rows(&per_block_rows);
        for (a, b) in full.output.data().iter().zip(stitched.data()) {
            assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn rel_table_rows_index_offsets() {
        let table = sinusoidal_rel_table::<f64>(3, 4);
        assert_eq!(table.dims(), &[5, 4]);
        // Offset 0 sits at row t-1 = 2: sin(0)=0, cos(0)=1.
        assert_eq!(table.data()[2 * 4], 0.0);
        assert_eq!(table.data()[2 * 4 + 1], 1.0);
    }

    #[test]
    fn lora_zero_b_leaves_attention_unchanged() {
        let p = toy_attention(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let lora = LoraP {
            a: Tensor::<f64>::randn(&[6, 2], 0.3, &mut rng),
            b: Tensor::<f64>::zeros(&[2, 6]),
            scale: 1.0,
        };
        let base = multi_head_attention(&x, &x, &p, 2, None, None, None, None);
        let with = multi_head_attention(&x, &x, &p, 2, None, None, Some(&lora), Some(&lora));
        for (a, b) in base.output.data().iter().zip(with.output.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
