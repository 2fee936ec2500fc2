//! Criterion benchmarks for the hot kernels: dense math, CTC
//! forward-backward, one conformer block, and a Q-former window.

use criterion::{criterion_group, criterion_main, Criterion};
use gspc_core::adapter::{init_qformer_store, qformer_window, QFormerConfig, QFormerParams};
use gspc_core::encoder::{conformer_forward, ctc_loss, init_store, EncoderConfig, EncoderParams};
use gspc_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f32>::randn(&[64, 64], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[64, 64], 1.0, &mut rng);
    c.bench_function("matmul_64x64", |bench| bench.iter(|| a.matmul(&b)));
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::randn(&[200, 200], 1.0, &mut rng);
    c.bench_function("softmax_200x200", |bench| bench.iter(|| x.softmax(1)));
}

fn bench_ctc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f32> = (0..50 * 42).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let log_probs = Tensor::from_vec(&[50, 42], logits).log_softmax();
    let target: Vec<usize> = (0..12).map(|_| rng.gen_range(1..42)).collect();
    c.bench_function("ctc_loss_t50_v42", |bench| {
        bench.iter(|| ctc_loss(&log_probs, &target, 0).unwrap().loss.scalar_value())
    });
}

fn bench_conformer(c: &mut Criterion) {
    let cfg = EncoderConfig::toy(160, 6);
    let store = init_store(&cfg, 4);
    let params = EncoderParams::<f32>::from_store(&cfg, &store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn(&[50, 160], 1.0, &mut rng);
    c.bench_function("conformer_toy_t50", |bench| {
        bench.iter(|| conformer_forward(&params, &x).unwrap().2.scalar_sum())
    });
}

fn bench_qformer(c: &mut Criterion) {
    let cfg = QFormerConfig {
        num_queries: 3,
        window_frames: 15,
        num_layers: 2,
        enc_dim: 64,
        model_dim: 64,
        num_heads: 4,
        llm_dim: 64,
    };
    let store = init_qformer_store(&cfg, 6);
    let params = QFormerParams::<f32>::from_store(&cfg, &store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let window = Tensor::<f32>::randn(&[15, 64], 1.0, &mut rng);
    c.bench_function("qformer_window_k15", |bench| bench.iter(|| qformer_window(&params, &window)));
}

trait ScalarSum {
    fn scalar_sum(&self) -> f32;
}

impl ScalarSum for Tensor<f32> {
    fn scalar_sum(&self) -> f32 {
        self.data().iter().sum()
    }
}

criterion_group!(benches, bench_matmul, bench_softmax, bench_ctc, bench_conformer, bench_qformer);
criterion_main!(benches);
