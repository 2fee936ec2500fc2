//! Audio frontend: 16 kHz waveforms to stacked log-mel feature sequences.
//!
//! Pipeline rates: 80-dim log-mels every 10 ms (100 Hz), then pairwise frame
//! stacking to 160-dim at 50 Hz.  Framing uses a 25 ms Hann window, 10 ms
//! hop, 512-point FFT, 80 triangular mel filters spanning 20–7600 Hz, and
//! reflective center padding so `T = floor(samples / 160)` exactly.
//!
//! Training-time augmentation (additive noise at a drawn SNR, SpecAugment
//! masking) is deterministic given the policy seed.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const NUM_MELS: usize = 80;
const WIN_SAMPLES: usize = 400; // 25 ms
const HOP_SAMPLES: usize = 160; // 10 ms
const FFT_SIZE: usize = 512;
const MEL_FMIN_HZ: f64 = 20.0;
const MEL_FMAX_HZ: f64 = 7600.0;
const LOG_FLOOR: f64 = 1e-10;

/// Mono waveform; the frontend requires 16 kHz input.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate_hz }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>()
            / self.samples.len() as f64
    }

    /// 16-bit PCM mono WAV reader.
    pub fn read_wav(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path.as_ref())
            .map_err(|e| Error::Input(format!("cannot open {}: {}", path.as_ref().display(), e)))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(Error::Input(format!(
                "expected 16-bit mono WAV, got {} ch / {} bit",
                spec.channels, spec.bits_per_sample
            )));
        }
        let samples: Vec<f32> = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("bad WAV data: {}", e)))?;
        Ok(Self::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)
            .map_err(|e| Error::Input(format!("cannot create wav: {}", e)))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Input(format!("wav write: {}", e)))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Input(format!("wav finalize: {}", e)))?;
        Ok(())
    }
}

/// Time-major feature matrix with frame-rate metadata.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// Row-major `[num_frames × dim]`.
    pub data: Vec<f32>,
    pub num_frames: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(data: Vec<f32>, num_frames: usize, dim: usize, frame_rate_hz: f64) -> Self {
        assert_eq!(data.len(), num_frames * dim);
        Self { data, num_frames, dim, frame_rate_hz }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        let data = self.data.iter().map(|&v| E::from_f64(v as f64)).collect();
        Tensor::from_vec(&[self.num_frames, self.dim], data)
    }

    fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Mel filter edge frequencies: `NUM_MELS + 2` points equally spaced on the
/// mel scale between [`MEL_FMIN_HZ`] and [`MEL_FMAX_HZ`].  Filter `m` is the
/// triangle over points `(m, m+1, m+2)` with peak 1 at point `m+1`.
pub fn mel_edge_frequencies() -> Vec<f64> {
    let lo = hz_to_mel(MEL_FMIN_HZ);
    let hi = hz_to_mel(MEL_FMAX_HZ);
    (0..NUM_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MELS + 1) as f64))
        .collect()
}

fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let edges = mel_edge_frequencies();
    let bin_hz = SAMPLE_RATE_HZ as f64 / FFT_SIZE as f64;
    let num_bins = FFT_SIZE / 2 + 1;
    let mut filters = Vec::with_capacity(NUM_MELS);
    for m in 0..NUM_MELS {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut taps = Vec::new();
        for k in 0..num_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f < center {
                (f - left) / (center - left)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// Reflective index into `0..len` (no edge repetition).
fn reflect(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// 80-dim natural-log mel energies at 100 Hz.
///
/// Frame `t` is centered at sample `t*160 + 80`; out-of-range window taps
/// use reflective padding, giving exactly `floor(len/160)` frames.
pub fn logmel(w: &Waveform) -> Result<FeatureSequence> {
    if w.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(Error::Config(format!(
            "frontend requires {} Hz input, got {}",
            SAMPLE_RATE_HZ, w.sample_rate_hz
        )));
    }
    if w.samples.is_empty() {
        return Err(Error::Input("empty audio".into()));
    }
    if w.samples.len() < WIN_SAMPLES {
        return Err(Error::Input(format!(
            "audio shorter than one {} ms analysis window",
            WIN_SAMPLES * 1000 / SAMPLE_RATE_HZ as usize
        )));
    }
    let num_frames = w.samples.len() / HOP_SAMPLES;
    let window: Vec<f64> = (0..WIN_SAMPLES)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN_SAMPLES as f64).cos())
        .collect();
    let filters = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);

    let mut data = Vec::with_capacity(num_frames * NUM_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for t in 0..num_frames {
        let center = (t * HOP_SAMPLES + HOP_SAMPLES / 2) as isize;
        let start = center - (WIN_SAMPLES / 2) as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = if n < WIN_SAMPLES {
                let s = w.samples[reflect(start + n as isize, w.samples.len())] as f64;
                s * window[n]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for taps in &filters {
            let e: f64 = taps.iter().map(|&(k, w)| w * power[k]).sum();
            data.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Ok(FeatureSequence::new(data, num_frames, NUM_MELS, 100.0))
}

/// Stack every two consecutive frames: 80-dim @ 100 Hz -> 160-dim @ 50 Hz.
/// Odd frame counts zero-pad the last pair.
pub fn stack_frames(f: &FeatureSequence) -> FeatureSequence {
    assert_eq!(f.dim, NUM_MELS, "stack_frames expects {}-dim input", NUM_MELS);
    let out_frames = f.num_frames.div_ceil(2);
    let dim = f.dim * 2;
    let mut data = vec![0.0f32; out_frames * dim];
    for t in 0..out_frames {
        data[t * dim..t * dim + f.dim].copy_from_slice(f.frame(2 * t));
        if 2 * t + 1 < f.num_frames {
            data[t * dim + f.dim..(t + 1) * dim].copy_from_slice(f.frame(2 * t + 1));
        }
    }
    FeatureSequence::new(data, out_frames, dim, f.frame_rate_hz / 2.0)
}

/// Gain applied to noise so that `10*log10(p_signal / (gain^2 * p_noise))`
/// equals `snr_db`.
pub fn noise_gain(p_signal: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Additive noise mixing at a target SNR in dB.
///
/// The noise is looped/cropped to the signal length from a random offset
/// and scaled so `10*log10(P_signal / P_scaled_noise) == snr_db`.
pub fn mix_noise<R: Rng>(
    w: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if noise.sample_rate_hz != w.sample_rate_hz {
        return Err(Error::Input("noise sample rate mismatch".into()));
    }
    let p_noise = noise.power();
    if p_noise == 0.0 || noise.samples.is_empty() {
        return Err(Error::Input("zero-power noise".into()));
    }
    let offset = rng.gen_range(0..noise.samples.len());
    let gain = noise_gain(w.power(), p_noise, snr_db);
    let samples = w
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| s + (gain * noise.samples[(offset + i) % noise.samples.len()] as f64) as f32)
        .collect();
    Ok(Waveform::new(samples, w.sample_rate_hz))
}

/// Mask geometry for SpecAugment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FreqMaskSpec {
    pub count: usize,
    pub max_width: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TimeMaskSpec {
    pub count: usize,
    /// Max width as a fraction of the utterance frame count.
    pub max_width_frac: f64,
}

/// Training-time augmentation policy.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub noise_prob: f64,
    pub snr_db_range: (f64, f64),
    pub specaug_prob: f64,
    pub freq_masks: FreqMaskSpec,
    pub time_masks: TimeMaskSpec,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_prob: 0.25,
            snr_db_range: (-5.0, 20.0),
            specaug_prob: 0.9,
            freq_masks: FreqMaskSpec { count: 2, max_width: 15 },
            time_masks: TimeMaskSpec { count: 2, max_width_frac: 0.05 },
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("noise_prob", self.noise_prob), ("specaug_prob", self.specaug_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} {} outside [0,1]", name, p)));
            }
        }
        if self.snr_db_range.0 > self.snr_db_range.1 {
            return Err(Error::Config(format!(
                "snr range low {} > high {}",
                self.snr_db_range.0, self.snr_db_range.1
            )));
        }
        Ok(())
    }

    /// Disable every stochastic transform (evaluation-time policy).
    pub fn disabled() -> Self {
        Self {
            noise_prob: 0.0,
            specaug_prob: 0.0,
            ..Self::default()
        }
    }
}

pub(crate) fn apply_freq_mask(f: &mut FeatureSequence, start: usize, width: usize, fill: f32) {
    for t in 0..f.num_frames {
        for c in start..(start + width).min(f.dim) {
            f.data[t * f.dim + c] = fill;
        }
    }
}

pub(crate) fn apply_time_mask(f: &mut FeatureSequence, start: usize, width: usize, fill: f32) {
    let dim = f.dim;
    for t in start..(start + width).min(f.num_frames) {
        for c in 0..dim {
            f.data[t * dim + c] = fill;
        }
    }
}

/// SpecAugment: applied post-logmel, pre-stacking, with probability
/// `specaug_prob`; masked regions are set to the per-utterance mean.
pub fn spec_augment<R: Rng>(f: &FeatureSequence, policy: &AugmentPolicy, rng: &mut R) -> FeatureSequence {
    if rng.gen::<f64>() >= policy.specaug_prob {
        return f.clone();
    }
    let mut out = f.clone();
    let fill = f.mean();
    let mut max_fw = policy.freq_masks.max_width;
    if max_fw > f.dim {
        log::warn!("freq mask width {} exceeds dim {}, clamping", max_fw, f.dim);
        max_fw = f.dim;
    }
    for _ in 0..policy.freq_masks.count {
        let width = rng.gen_range(0..=max_fw);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=f.dim - width);
        apply_freq_mask(&mut out, start, width, fill);
    }
    let max_tw = ((policy.time_masks.max_width_frac * f.num_frames as f64).floor() as usize)
        .min(f.num_frames);
    for _ in 0..policy.time_masks.count {
        let width = rng.gen_range(0..=max_tw);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=f.num_frames - width);
        apply_time_mask(&mut out, start, width, fill);
    }
    out
}

/// Full training-time frontend for one utterance: optional noise, logmel,
/// optional SpecAugment, frame stacking.  Deterministic given the rng.
pub fn features_for_training<R: Rng>(
    w: &Waveform,
    noise: Option<&Waveform>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<FeatureSequence> {
    let wave = match noise {
        Some(noise) if rng.gen::<f64>() < policy.noise_prob => {
            let snr = rng.gen_range(policy.snr_db_range.0..=policy.snr_db_range.1);
            mix_noise(w, noise, snr, rng)?
        }
        _ => w.clone(),
    };
    let mels = logmel(&wave)?;
    let augmented = spec_augment(&mels, policy, rng);
    Ok(stack_frames(&augmented))
}

/// Evaluation-time frontend: logmel + stacking, no augmentation.
pub fn features_for_eval(w: &Waveform) -> Result<FeatureSequence> {
    Ok(stack_frames(&logmel(w)?))
}

/// Pure-tone synthesis used by the synthetic toy datasets: one 100 ms tone
/// per character, mapped through an injective character→frequency table.
pub mod synth {
    use super::{Waveform, SAMPLE_RATE_HZ};
    use crate::{Error, Result};
    use std::collections::BTreeMap;

    pub const TONE_SECONDS: f64 = 0.1;

    /// Injective character → frequency map.
    #[derive(Debug, Clone)]
    pub struct ToneMap {
        freqs: BTreeMap<char, f64>,
    }

    impl ToneMap {
        /// Evenly spaced frequencies in 300–3000 Hz, one per character.
        pub fn for_alphabet(chars: &str) -> Self {
            let list: Vec<char> = chars.chars().collect();
            let n = list.len().max(1);
            let step = if n > 1 { 2700.0 / (n - 1) as f64 } else { 0.0 };
            let freqs = list
                .into_iter()
                .enumerate()
                .map(|(i, c)| (c, 300.0 + step * i as f64))
                .collect();
            Self { freqs }
        }

        pub fn frequency(&self, c: char) -> Option<f64> {
            self.freqs.get(&c).copied()
        }
    }

    /// Concatenated 100 ms tones at 16 kHz, one per character of `text`.
    pub fn tone_sequence(text: &str, tones: &ToneMap) -> Result<Waveform> {
        let samples_per_char = (TONE_SECONDS * SAMPLE_RATE_HZ as f64) as usize;
        let mut samples = Vec::with_capacity(text.chars().count() * samples_per_char);
        for c in text.chars() {
            let freq = tones
                .frequency(c)
                .ok_or_else(|| Error::Input(format!("no tone mapping for character {:?}", c)))?;
            for n in 0..samples_per_char {
                let t = n as f64 / SAMPLE_RATE_HZ as f64;
                samples.push((0.5 * (2.0 * std::f64::consts::PI * freq * t).sin()) as f32);
            }
        }
        Ok(Waveform::new(samples, SAMPLE_RATE_HZ))
    }
}
