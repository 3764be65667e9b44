//! Audio front end: LFBE-64 features, 76-frame windows, datasets, and
//! standardization statistics.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::fxp_core::{select_qformat, BitWidth, QFormat};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FFT_LEN: usize = 512;
pub const MEL_BINS: usize = 64;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const WINDOW_FRAMES: usize = 76;
pub const STD_FLOOR: f64 = 1e-6;

/// 16 kHz mono 16-bit PCM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioClip {
    pub samples: Vec<i16>,
}

impl AudioClip {
    pub fn new(samples: Vec<i16>) -> Self {
        Self { samples }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// `frames x 64` log-mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * MEL_BINS {
            return Err(Error::Shape(format!("{} values for {frames} frames of {MEL_BINS} bins", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        MEL_BINS
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * MEL_BINS..(t + 1) * MEL_BINS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

struct Frontend {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Frontend {
    fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
        let window = (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (FRAME_LEN - 1) as f64).cos())
            .collect();
        let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
        let edges: Vec<f64> = (0..MEL_BINS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BINS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_LEN as f64;
        let filters = (0..MEL_BINS)
            .map(|j| {
                let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
                let first = (l / bin_hz).floor() as usize;
                let last = ((r / bin_hz).ceil() as usize).min(FFT_LEN / 2);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        Self { fft, window, filters }
    }

    fn shared() -> &'static Frontend {
        static FRONTEND: OnceLock<Frontend> = OnceLock::new();
        FRONTEND.get_or_init(Frontend::new)
    }
}

/// Log-mel filterbank energies: 25 ms Hann frames every 10 ms, 512-point
/// power spectrum, 64 HTK-mel triangles over 20-7600 Hz, natural log floored
/// at 1e-10.
pub fn lfbe64(clip: &AudioClip) -> Result<FeatureMatrix> {
    let n = clip.samples.len();
    if n < FRAME_LEN {
        return Err(Error::TooShort { samples: n, needed: FRAME_LEN });
    }
    let fe = Frontend::shared();
    let frames = (n - FRAME_LEN) / FRAME_SHIFT + 1;
    let mut data = Vec::with_capacity(frames * MEL_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
    let mut power = vec![0.0; FFT_LEN / 2 + 1];
    for t in 0..frames {
        let frame = &clip.samples[t * FRAME_SHIFT..t * FRAME_SHIFT + FRAME_LEN];
        for (i, slot) in buf.iter_mut().enumerate() {
            let re = if i < FRAME_LEN { frame[i] as f64 / 32768.0 * fe.window[i] } else { 0.0 };
            *slot = Complex::new(re, 0.0);
        }
        fe.fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (first, weights) in &fe.filters {
            let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    FeatureMatrix::new(frames, data)
}

/// Center-crop to 76 frames, or pad both ends with the log floor.
pub fn window76(fm: &FeatureMatrix) -> FeatureMatrix {
    let f = fm.frames;
    let data = if f >= WINDOW_FRAMES {
        let start = (f - WINDOW_FRAMES) / 2;
        fm.data[start * MEL_BINS..(start + WINDOW_FRAMES) * MEL_BINS].to_vec()
    } else {
        let before = (WINDOW_FRAMES - f) / 2;
        let after = WINDOW_FRAMES - f - before;
        let floor = LOG_FLOOR.ln();
        let mut d = vec![floor; before * MEL_BINS];
        d.extend_from_slice(&fm.data);
        d.resize(d.len() + after * MEL_BINS, floor);
        d
    };
    FeatureMatrix { frames: WINDOW_FRAMES, data }
}

/// `window76(lfbe64(clip))`.
pub fn clip_features(clip: &AudioClip) -> Result<FeatureMatrix> {
    Ok(window76(&lfbe64(clip)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub name: String,
    pub clip: AudioClip,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub clips: Vec<LabeledClip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

/// Deterministic chirp-in-noise clips; class 0 is noise only.
///
/// Each class has its own frequency band and sweep direction. Within a class
/// the start time, sweep jitter, level and SNR vary per clip. Clips are split
/// 70/15/15 per class into train, validation and test.
pub fn synth_dataset(seed: u64, n_per_class: usize, n_classes: usize) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {n_classes}")));
    }
    let n = SAMPLE_RATE as usize;
    let span = 5600.0 / (n_classes - 1) as f64;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut clips = Vec::with_capacity(n_per_class * n_classes);
    for label in 0..n_classes {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((label as u64) << 32) | i as u64);
            let mut x = vec![0.0f64; n];
            let level = rng.gen_range(0.1..0.4);
            let noise_std;
            if label == 0 {
                noise_std = level * rng.gen_range(0.05..0.5);
            } else {
                let lo = 300.0 + (label - 1) as f64 * span;
                let (f0, f1) = if label % 2 == 1 { (lo, lo + 0.6 * span) } else { (lo + 0.6 * span, lo) };
                let jitter = rng.gen_range(0.95..1.05);
                let (f0, f1) = (f0 * jitter, f1 * jitter);
                let dur = rng.gen_range(0.35..0.5);
                let start = rng.gen_range(0.2..0.75 - dur);
                let (s0, len) = ((start * n as f64) as usize, (dur * n as f64) as usize);
                let phase0 = rng.gen_range(0.0..2.0 * PI);
                for k in 0..len {
                    let t = k as f64 / SAMPLE_RATE as f64;
                    let phase = phase0 + 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
                    let env = (PI * k as f64 / len as f64).sin();
                    x[s0 + k] = level * env * phase.sin();
                }
                let snr_db = rng.gen_range(5.0..20.0);
                // Chirp power with a half-sine envelope is level^2 / 4.
                noise_std = (level * level / 4.0 / 10f64.powf(snr_db / 10.0)).sqrt();
            }
            for v in &mut x {
                *v += noise_std * unit.sample(&mut rng);
            }
            let samples = x.iter().map(|v| (v * 32767.0).round().clamp(-32768.0, 32767.0) as i16).collect();
            let split = match i % 20 {
                0..=13 => Split::Train,
                14..=16 => Split::Validation,
                _ => Split::Test,
            };
            clips.push(LabeledClip { name: format!("synth/{label}/{i}"), clip: AudioClip::new(samples), label, split });
        }
    }
    let labels = (0..n_classes).map(|k| if k == 0 { "noise".to_string() } else { format!("chirp{k}") }).collect();
    Ok(Dataset { labels, clips })
}

/// Read a 16 kHz PCM16 WAV file, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!("{}: sample rate {} Hz, need {SAMPLE_RATE}", path.display(), spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!("{}: only 16-bit PCM is supported", path.display())));
    }
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader.into_samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let samples = raw
        .chunks(ch)
        .map(|frame| {
            let sum: i32 = frame.iter().map(|&s| s as i32).sum();
            (sum as f64 / frame.len() as f64).round() as i16
        })
        .collect();
    Ok(AudioClip::new(samples))
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

fn read_list(root: &Path, name: &str) -> Result<HashSet<String>> {
    let path = root.join(name);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Layout(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Google Speech Commands v2 layout: one directory per keyword plus
/// `validation_list.txt` and `testing_list.txt`. Everything not listed is
/// training data; `_background_noise_` is ignored.
pub fn load_gsc(root: &Path) -> Result<Dataset> {
    let val = read_list(root, "validation_list.txt")?;
    let test = read_list(root, "testing_list.txt")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !name.starts_with('_') && !name.starts_with('.')
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Layout(format!("no keyword directories under {}", root.display())));
    }
    let mut labels = Vec::with_capacity(dirs.len());
    let mut clips = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        let word = dir.file_name().and_then(|n| n.to_str()).expect("filtered above").to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for f in files {
            let fname = f.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            let is_wav = f.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav {
                log::warn!("skipping non-audio file {}", f.display());
                continue;
            }
            let clip = match read_wav(&f) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    continue;
                }
            };
            let rel = format!("{word}/{fname}");
            let split = if test.contains(&rel) {
                Split::Test
            } else if val.contains(&rel) {
                Split::Validation
            } else {
                Split::Train
            };
            clips.push(LabeledClip { name: rel, clip, label, split });
        }
        labels.push(word);
    }
    Ok(Dataset { labels, clips })
}

/// Windowed feature inputs of one split, flattened `(76, 64)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub split: Split,
    pub standardized: bool,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn extract(dataset: &Dataset, split: Split) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for c in dataset.split(split) {
            inputs.push(clip_features(&c.clip)?.into_vec());
            labels.push(c.label);
        }
        Ok(Self { split, standardized: false, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn standardize(&self, stats: &DatasetStats) -> Result<Self> {
        if self.standardized {
            return Err(Error::Pipeline("feature set is already standardized".into()));
        }
        let inputs = self.inputs.iter().map(|x| stats.standardize(x)).collect::<Result<_>>()?;
        Ok(Self { split: self.split, standardized: true, inputs, labels: self.labels.clone() })
    }
}

/// Per-bin standardization statistics, fit on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Largest magnitude of any standardized training feature.
    pub max_abs: f64,
}

impl DatasetStats {
    pub fn fit(set: &FeatureSet) -> Result<Self> {
        if set.split != Split::Train {
            return Err(Error::Pipeline(format!(
                "standardization statistics must come from the training split, not {:?}",
                set.split
            )));
        }
        if set.standardized {
            return Err(Error::Pipeline("cannot fit statistics on standardized features".into()));
        }
        if set.is_empty() {
            return Err(Error::InvalidInput("empty training split".into()));
        }
        let mut sum = vec![0.0; MEL_BINS];
        let mut count = 0usize;
        for x in &set.inputs {
            if x.len() % MEL_BINS != 0 {
                return Err(Error::Shape("feature rows must have 64 bins".into()));
            }
            for row in x.chunks_exact(MEL_BINS) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; MEL_BINS];
        for x in &set.inputs {
            for row in x.chunks_exact(MEL_BINS) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        let mut stats = Self { mean, std, max_abs: 0.0 };
        let mut max_abs: f64 = 0.0;
        for x in &set.inputs {
            for v in stats.standardize(x)? {
                max_abs = max_abs.max(v.abs());
            }
        }
        stats.max_abs = max_abs.max(f64::MIN_POSITIVE);
        Ok(stats)
    }

    /// `(x - mean) / std` per bin of a row-major `(frames, 64)` matrix.
    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        let bins = self.mean.len();
        if bins == 0 || !x.len().is_multiple_of(bins) {
            return Err(Error::Shape(format!("{} values are not whole rows of {bins} bins", x.len())));
        }
        Ok(x.chunks_exact(bins)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect())
    }

    /// Feature q-format covering the largest standardized training value.
    pub fn input_qformat(&self, bits: BitWidth) -> Result<QFormat> {
        select_qformat(self.max_abs, bits)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"FXFT";
const CACHE_VERSION: u16 = 1;
const CACHE_SCHEMA: &str = "fxqat.features/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    schema: String,
    split: Split,
    standardized: bool,
    shape: [usize; 2],
    labels: Vec<usize>,
    label_names: BTreeMap<usize, String>,
}

/// Feature cache: `FXFT` container with f64 little-endian inputs.
pub fn write_feature_cache<W: Write>(set: &FeatureSet, label_names: &[String], mut w: W) -> Result<()> {
    let len = WINDOW_FRAMES * MEL_BINS;
    if set.inputs.iter().any(|x| x.len() != len) {
        return Err(Error::Shape("cached features must be (76, 64)".into()));
    }
    let header = CacheHeader {
        schema: CACHE_SCHEMA.into(),
        split: set.split,
        standardized: set.standardized,
        shape: [WINDOW_FRAMES, MEL_BINS],
        labels: set.labels.clone(),
        label_names: label_names.iter().cloned().enumerate().collect(),
    };
    let mut body = Vec::with_capacity(set.len() * len * 8);
    for x in &set.inputs {
        for v in x {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_container(&mut w, CACHE_MAGIC, CACHE_VERSION, &serde_json::to_vec(&header)?, &body)
}

pub fn read_feature_cache<R: Read>(r: R) -> Result<(FeatureSet, Vec<String>)> {
    let (header, body) = read_container(r, CACHE_MAGIC, CACHE_VERSION, "feature cache")?;
    let bad = |detail: String| Error::Format { what: "feature cache", detail };
    let h: CacheHeader = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
    if h.schema != CACHE_SCHEMA {
        return Err(bad(format!("unknown schema `{}`", h.schema)));
    }
    let len = h.shape[0] * h.shape[1];
    if body.len() != h.labels.len() * len * 8 {
        return Err(bad("body length does not match the header".into()));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let inputs = if len == 0 { Vec::new() } else { values.chunks(len).map(<[f64]>::to_vec).collect() };
    let names = h.label_names.into_values().collect();
    Ok((FeatureSet { split: h.split, standardized: h.standardized, inputs, labels: h.labels }, names))
}
