//! Deterministic synthetic speech-like corpus.
//!
//! Every utterance is a harmonic source whose fundamental and overtone
//! weights belong to a speaker, shaped by a content-dependent formant
//! envelope (two formant sets, one per half of the utterance), with the
//! intent encoded as a pitch contour `f0(u) = f0_s (1 + 0.12 cos(pi (i+1) u))`
//! over normalized time `u`. The contour has zero mean, so the average
//! fundamental of every utterance is the speaker's `f0_s = base + s * spacing`.
//! Noise is added at a fixed level relative to the signal RMS.
//!
//! All randomness comes from [`SplitMix64`] substreams keyed by
//! `(seed, factor, index)`, and all transcendental functions come from
//! `libm`, so regeneration is bytewise identical on every platform.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

pub const GENERATOR_VERSION: u32 = 1;

const SPEAKER_KEY: u64 = 1;
const CONTENT_KEY: u64 = 2;
const UTTERANCE_KEY: u64 = 3;
const SPLIT_KEY: u64 = 0x5350_4c49_5400;

const CONTOUR_DEPTH: f64 = 0.12;
const MAX_HARMONICS: usize = 64;
const ENVELOPE_BLOCK: usize = 80;
const FADE_S: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub n_speakers: usize,
    pub n_contents: usize,
    pub n_intents: usize,
    pub utterances_per_cell: usize,
    pub duration_s: f64,
    pub sample_rate: usize,
    pub base_f0_hz: f64,
    pub speaker_spacing_hz: f64,
    /// Noise level relative to the signal RMS.
    pub noise_db: f64,
    /// Shortest admissible utterance in samples (the smallest model's
    /// receptive field).
    pub min_samples: usize,
}

impl Default for SynthParams {
    /// 8 speakers x 8 contents x 4 intents x 4 repetitions of 1 s.
    fn default() -> Self {
        Self {
            seed: 0,
            n_speakers: 8,
            n_contents: 8,
            n_intents: 4,
            utterances_per_cell: 4,
            duration_s: 1.0,
            sample_rate: 16_000,
            base_f0_hz: 100.0,
            speaker_spacing_hz: 15.0,
            noise_db: -30.0,
            min_samples: 400,
        }
    }
}

impl SynthParams {
    pub fn num_utterances(&self) -> usize {
        self.n_speakers * self.n_contents * self.n_intents * self.utterances_per_cell
    }

    pub fn samples_per_utterance(&self) -> usize {
        libm::round(self.duration_s * self.sample_rate as f64) as usize
    }

    pub fn speaker_f0(&self, speaker: usize) -> f64 {
        self.base_f0_hz + speaker as f64 * self.speaker_spacing_hz
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("n_contents", self.n_contents),
            ("n_intents", self.n_intents),
            ("utterances_per_cell", self.utterances_per_cell),
            ("sample_rate", self.sample_rate),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be >= 1")));
        }
        if !self.duration_s.is_finite() || self.duration_s <= 0.0 || self.samples_per_utterance() < self.min_samples {
            return Err(Error::Parameter(format!(
                "duration {} s gives {} samples, below the {}-sample receptive field",
                self.duration_s,
                self.samples_per_utterance(),
                self.min_samples
            )));
        }
        let top = self.speaker_f0(self.n_speakers - 1) * (1.0 + CONTOUR_DEPTH);
        if !self.base_f0_hz.is_finite() || self.base_f0_hz <= 0.0 || top >= 0.45 * self.sample_rate as f64 {
            return Err(Error::Parameter(format!(
                "fundamental range up to {top} Hz does not fit the sample rate"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: usize,
    pub speaker: usize,
    pub content: usize,
    pub intent: usize,
    pub duration_s: f64,
    /// Start, in samples, inside the audio store.
    pub offset: usize,
    pub length: usize,
}

/// Manifest plus the concatenated audio store.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub params: SynthParams,
    pub records: Vec<UtteranceRecord>,
    pub samples: Vec<f32>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio(&self, index: usize) -> &[f32] {
        let r = &self.records[index];
        &self.samples[r.offset..r.offset + r.length]
    }

    /// Checks that every record addresses a valid range of the store and
    /// that ids are unique.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("duplicate utterance ids in manifest".into()));
        }
        for r in &self.records {
            if r.length == 0 || r.offset + r.length > self.samples.len() {
                return Err(Error::Data(format!(
                    "utterance {} addresses samples {}..{} of a {}-sample store",
                    r.id,
                    r.offset,
                    r.offset + r.length,
                    self.samples.len()
                )));
            }
        }
        Ok(())
    }

    /// Indices of the training (80%) and held-out (20%) partitions.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !is_heldout(self.records[i].id))
    }
}

/// Deterministic 80/20 partition by hashed utterance id.
pub fn is_heldout(id: usize) -> bool {
    derive_seed(SPLIT_KEY, &[id as u64]).is_multiple_of(5)
}

struct Speaker {
    f0: f64,
    weights: Vec<f64>,
}

struct Formant {
    center: f64,
    bandwidth: f64,
    gain: f64,
}

struct Content {
    segments: [Vec<Formant>; 2],
}

impl Content {
    fn envelope(&self, segment: usize, freq: f64) -> f64 {
        0.05 + self.segments[segment]
            .iter()
            .map(|f| {
                let z = (freq - f.center) / f.bandwidth;
                f.gain * libm::exp(-0.5 * z * z)
            })
            .sum::<f64>()
    }
}

fn speaker(params: &SynthParams, s: usize) -> Speaker {
    let mut rng = SplitMix64::new(derive_seed(params.seed, &[SPEAKER_KEY, s as u64]));
    let tilt = rng.uniform_range(0.5, 1.5);
    let weights = (1..=MAX_HARMONICS)
        .map(|k| rng.uniform_range(0.3, 1.0) * libm::pow(k as f64, -tilt))
        .collect();
    Speaker {
        f0: params.speaker_f0(s),
        weights,
    }
}

fn content(params: &SynthParams, c: usize) -> Content {
    let mut rng = SplitMix64::new(derive_seed(params.seed, &[CONTENT_KEY, c as u64]));
    let mut segment = || {
        [(300.0, 900.0, 1.0), (900.0, 2500.0, 0.7), (2500.0, 3500.0, 0.4)]
            .iter()
            .map(|&(lo, hi, gain)| Formant {
                center: rng.uniform_range(lo, hi),
                bandwidth: rng.uniform_range(80.0, 200.0),
                gain,
            })
            .collect::<Vec<_>>()
    };
    let first = segment();
    let second = segment();
    Content {
        segments: [first, second],
    }
}

fn contour(intent: usize, u: f64) -> f64 {
    libm::cos(core::f64::consts::PI * (intent + 1) as f64 * u)
}

fn synthesize(params: &SynthParams, spk: &Speaker, cnt: &Content, intent: usize, id: usize) -> Vec<f32> {
    let n = params.samples_per_utterance();
    let sr = params.sample_rate as f64;
    let mut rng = SplitMix64::new(derive_seed(params.seed, &[UTTERANCE_KEY, id as u64]));
    let mut phase = rng.uniform_range(0.0, core::f64::consts::TAU);
    let level = rng.uniform_range(0.5, 0.9);
    let nyquist_guard = 0.45 * sr;
    let harmonics = ((nyquist_guard / (spk.f0 * (1.0 + CONTOUR_DEPTH))) as usize).clamp(1, MAX_HARMONICS);

    let f0_at = |i: usize| {
        let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        spk.f0 * (1.0 + CONTOUR_DEPTH * contour(intent, u))
    };

    let mut out = vec![0.0f64; n];
    let mut gains = vec![0.0f64; harmonics];
    let mut sines = vec![0.0f64; harmonics + 1];
    for block_start in (0..n).step_by(ENVELOPE_BLOCK) {
        let block_end = (block_start + ENVELOPE_BLOCK).min(n);
        let mid = (block_start + block_end) / 2;
        let f0_mid = f0_at(mid);
        let segment = usize::from(2 * mid >= n);
        for (k, g) in gains.iter_mut().enumerate() {
            *g = spk.weights[k] * cnt.envelope(segment, (k + 1) as f64 * f0_mid);
        }
        for (i, o) in out.iter_mut().enumerate().take(block_end).skip(block_start) {
            let s1 = libm::sin(phase);
            let c2 = 2.0 * libm::cos(phase);
            // sin(k x) = 2 cos(x) sin((k-1) x) - sin((k-2) x)
            sines[0] = 0.0;
            sines[1] = s1;
            let mut acc = gains[0] * s1;
            for k in 2..=harmonics {
                sines[k] = c2 * sines[k - 1] - sines[k - 2];
                acc += gains[k - 1] * sines[k];
            }
            *o = acc;
            phase += core::f64::consts::TAU * f0_at(i) / sr;
            if phase > core::f64::consts::TAU {
                phase -= core::f64::consts::TAU;
            }
        }
    }

    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for i in 0..fade {
        let w = 0.5 - 0.5 * libm::cos(core::f64::consts::PI * i as f64 / fade as f64);
        out[i] *= w;
        out[n - 1 - i] *= w;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = level / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    let rms = libm::sqrt(out.iter().map(|v| v * v).sum::<f64>() / n as f64);
    let noise_std = rms * libm::pow(10.0, params.noise_db / 20.0);
    out.iter()
        .map(|&v| (v + noise_std * rng.normal()).clamp(-1.0, 1.0) as f32)
        .collect()
}

/// Generates the full speaker x content x intent x repetition grid. Ids run
/// in that nesting order.
pub fn generate_corpus(params: &SynthParams) -> Result<Corpus> {
    params.validate()?;
    let speakers: Vec<Speaker> = (0..params.n_speakers).map(|s| speaker(params, s)).collect();
    let contents: Vec<Content> = (0..params.n_contents).map(|c| content(params, c)).collect();
    let n = params.samples_per_utterance();
    let total = params.num_utterances();
    let mut samples = Vec::with_capacity(total * n);
    let mut records = Vec::with_capacity(total);
    let mut id = 0;
    for (s, spk) in speakers.iter().enumerate() {
        for (c, cnt) in contents.iter().enumerate() {
            for intent in 0..params.n_intents {
                for _ in 0..params.utterances_per_cell {
                    let audio = synthesize(params, spk, cnt, intent, id);
                    records.push(UtteranceRecord {
                        id,
                        speaker: s,
                        content: c,
                        intent,
                        duration_s: n as f64 / params.sample_rate as f64,
                        offset: samples.len(),
                        length: audio.len(),
                    });
                    samples.extend_from_slice(&audio);
                    id += 1;
                }
            }
        }
    }
    Ok(Corpus {
        params: params.clone(),
        records,
        samples,
    })
}

/// Seeded, epoch-wise shuffled batches of corpus indices.
///
/// Each epoch draws a fresh permutation from `(seed, epoch)`. A trailing
/// partial batch is dropped. Without `repeat`, the iterator ends after the
/// first epoch.
#[derive(Debug, Clone)]
pub struct BatchIter {
    items: Vec<usize>,
    batch_size: usize,
    seed: u64,
    repeat: bool,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIter {
    pub fn new(items: Vec<usize>, batch_size: usize, seed: u64, repeat: bool) -> Result<Self> {
        if batch_size == 0 || batch_size > items.len() {
            return Err(Error::Parameter(format!(
                "batch size {batch_size} must be in 1..={}",
                items.len()
            )));
        }
        let mut it = Self {
            items,
            batch_size,
            seed,
            repeat,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        self.order = self.items.clone();
        SplitMix64::new(derive_seed(self.seed, &[self.epoch])).shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch_size > self.order.len() {
            if !self.repeat {
                return None;
            }
            self.epoch += 1;
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            n_speakers: 2,
            n_contents: 1,
            n_intents: 1,
            utterances_per_cell: 1,
            duration_s: 0.25,
            ..SynthParams::default()
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn samples_bounded_and_finite() {
        let c = generate_corpus(&small()).unwrap();
        assert!(c.samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        c.validate().unwrap();
    }

    #[test]
    fn speakers_differ_by_spacing() {
        let p = small();
        let c = generate_corpus(&p).unwrap();
        assert_eq!(c.len(), 2);
        let f = |r: &UtteranceRecord| p.speaker_f0(r.speaker);
        assert_eq!(f(&c.records[1]) - f(&c.records[0]), p.speaker_spacing_hz);
    }

    #[test]
    fn default_grid_size() {
        let p = SynthParams::default();
        assert_eq!(p.num_utterances(), 1024);
        // 1024 s of audio, about 17 minutes
        let minutes = p.num_utterances() as f64 * p.duration_s / 60.0;
        assert!((minutes - 17.07).abs() < 0.01);
    }

    #[test]
    fn parameter_errors() {
        let mut p = small();
        p.duration_s = 0.02; // 320 samples < 400
        assert!(matches!(generate_corpus(&p), Err(Error::Parameter(_))));
        let mut p = small();
        p.n_intents = 0;
        assert!(matches!(generate_corpus(&p), Err(Error::Parameter(_))));
    }

    #[test]
    fn full_batch_covers_every_item_once() {
        let mut it = BatchIter::new((0..10).collect(), 10, 3, false).unwrap();
        let mut b = it.next().unwrap();
        b.sort_unstable();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
        assert!(it.next().is_none());
    }

    #[test]
    fn same_seed_same_order() {
        let a: Vec<_> = BatchIter::new((0..50).collect(), 5, 9, true).unwrap().take(30).collect();
        let b: Vec<_> = BatchIter::new((0..50).collect(), 5, 9, true).unwrap().take(30).collect();
        assert_eq!(a, b);
        let c: Vec<_> = BatchIter::new((0..50).collect(), 5, 10, true).unwrap().take(30).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn repeat_delivers_requested_count() {
        let n = BatchIter::new((0..1024).collect(), 8, 0, true).unwrap().take(2000).count();
        assert_eq!(n, 2000);
        let once = BatchIter::new((0..1024).collect(), 8, 0, false).unwrap().count();
        assert_eq!(once, 128);
    }

    #[test]
    fn oversized_batch_rejected() {
        assert!(BatchIter::new((0..4).collect(), 5, 0, true).is_err());
        assert!(BatchIter::new((0..4).collect(), 0, 0, true).is_err());
    }

    #[test]
    fn split_is_roughly_eighty_twenty() {
        let held = (0..1024).filter(|&i| is_heldout(i)).count();
        assert!((150..260).contains(&held), "{held}");
    }
}
