//! Acoustic frontend: waveform loading, log-mel filterbank energies,
//! frame stacking with decimation, feature files and mean/variance
//! normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Floor applied to power-spectrum bins before filterbank weighting so
/// silent input still produces finite log energies.
pub const POWER_FLOOR: f64 = 1e-10;

/// Pre-emphasis coefficient applied to the waveform before framing.
pub const PRE_EMPHASIS: f64 = 0.97;

/// Magic bytes at the head of a feature file.
pub const FEATURE_MAGIC: &[u8; 5] = b"CTCF1";

/// Mono PCM audio in memory.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    /// Read a 16-bit mono PCM WAV file. Samples are scaled to [-1, 1).
    pub fn read_wav(path: &Path) -> Result<Waveform> {
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Data(format!(
                "{}: expected mono audio, got {} channels",
                path.display(),
                spec.channels
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Data(format!(
                "{}: expected 16-bit integer PCM",
                path.display()
            )));
        }
        let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
        let samples = samples.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(Waveform {
            samples: samples.iter().map(|&s| s as f64 / 32768.0).collect(),
            sample_rate_hz: spec.sample_rate,
        })
    }
}

/// Log-mel extraction settings.
#[derive(Debug, Clone)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            n_mels: 80,
            window_ms: 25.0,
            shift_ms: 10.0,
        }
    }
}

/// A time-major feature matrix (`T` rows, `dim` columns) together with
/// the frame geometry it was computed with. After stacking and
/// decimation `frame_shift_ms` reflects the decimated rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub frame_shift_ms: f64,
    pub window_ms: f64,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided FFT bins.
///
/// Each row is one filter with peak weight 1.0. Filter centers are
/// spaced evenly on the mel scale between 0 Hz and Nyquist, so any FFT
/// bin lands under at most two adjacent triangles.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Result<Array2<f64>> {
    if n_mels == 0 {
        return Err(Error::InvalidConfig("n_mels must be at least 1".into()));
    }
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    // n_mels + 2 edge points: left edge, n_mels centers, right edge.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut total = 0.0;
        for k in 0..n_bins {
            let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                bank[[m, k]] = w;
                total += w;
            }
        }
        if total <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "mel filter {m} covers no FFT bin; lower n_mels or use a longer window"
            )));
        }
    }
    Ok(bank)
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Number of analysis frames for a signal of `len` samples.
pub fn frame_count(len: usize, window_samples: usize, shift_samples: usize) -> usize {
    if len < window_samples {
        0
    } else {
        (len - window_samples) / shift_samples + 1
    }
}

/// Compute log-mel filterbank energies.
///
/// Pipeline per frame: pre-emphasis (applied once to the whole signal),
/// Hann window, zero-padded FFT at the next power of two at or above the
/// window length, power spectrum floored at [`POWER_FLOOR`], triangular
/// mel weighting, natural log.
pub fn compute_logmel(wave: &Waveform, cfg: &LogMelConfig) -> Result<FeatureMatrix> {
    if cfg.window_ms <= 0.0 || cfg.shift_ms <= 0.0 {
        return Err(Error::InvalidConfig(
            "window_ms and shift_ms must be positive".into(),
        ));
    }
    let sr = wave.sample_rate_hz as f64;
    let window_samples = (cfg.window_ms * sr / 1000.0).round() as usize;
    let shift_samples = (cfg.shift_ms * sr / 1000.0).round() as usize;
    if window_samples == 0 || shift_samples == 0 {
        return Err(Error::InvalidConfig(
            "window and shift must span at least one sample".into(),
        ));
    }
    if wave.samples.len() < window_samples {
        return Err(Error::InputTooShort(format!(
            "signal has {} samples but one window needs {window_samples}",
            wave.samples.len()
        )));
    }

    let t = frame_count(wave.samples.len(), window_samples, shift_samples);
    let n_fft = next_pow2(window_samples);
    let bank = mel_filterbank(cfg.n_mels, n_fft, wave.sample_rate_hz)?;

    // Pre-emphasis with the first sample treated as its own predecessor.
    let mut emphasized = Vec::with_capacity(wave.samples.len());
    emphasized.push(wave.samples[0] - PRE_EMPHASIS * wave.samples[0]);
    for i in 1..wave.samples.len() {
        emphasized.push(wave.samples[i] - PRE_EMPHASIS * wave.samples[i - 1]);
    }

    // Periodic Hann window.
    let hann: Vec<f64> = (0..window_samples)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window_samples as f64).cos())
        .collect();

    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut out = Array2::zeros((t, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let n_bins = n_fft / 2 + 1;
    let mut power = vec![0.0f64; n_bins];
    for frame in 0..t {
        let start = frame * shift_samples;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < window_samples {
                Complex::new(emphasized[start + n] * hann[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr().max(POWER_FLOOR);
        }
        for m in 0..cfg.n_mels {
            let mut energy = 0.0;
            for k in 0..n_bins {
                energy += bank[[m, k]] * power[k];
            }
            out[[frame, m]] = energy.ln();
        }
    }
    Ok(FeatureMatrix {
        data: out,
        frame_shift_ms: cfg.shift_ms,
        window_ms: cfg.window_ms,
    })
}

/// Frame stacking and decimation settings.
///
/// Output frame `t'` is the concatenation of `stack` consecutive input
/// frames starting at `t' * skip`; frames past the end are either
/// replicated from the last frame (`replicate_edges`) or zero-filled.
#[derive(Debug, Clone, Copy)]
pub struct StackConfig {
    pub stack: usize,
    pub skip: usize,
    pub replicate_edges: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            stack: 1,
            skip: 1,
            replicate_edges: true,
        }
    }
}

/// Stack and decimate a feature matrix. The output has
/// `ceil(T / skip)` rows of `stack * dim` columns, and the frame shift
/// grows by the skip factor.
pub fn stack_frames(feat: &FeatureMatrix, cfg: &StackConfig) -> Result<FeatureMatrix> {
    if cfg.stack == 0 || cfg.skip == 0 {
        return Err(Error::InvalidConfig(
            "stack and skip must be at least 1".into(),
        ));
    }
    let t = feat.n_frames();
    let d = feat.dim();
    if t == 0 {
        return Err(Error::InputTooShort(
            "cannot stack an empty feature matrix".into(),
        ));
    }
    let t_out = t.div_ceil(cfg.skip);
    let mut out = Array2::zeros((t_out, cfg.stack * d));
    for t_new in 0..t_out {
        let base = t_new * cfg.skip;
        for s in 0..cfg.stack {
            let src = base + s;
            if src < t {
                out.row_mut(t_new)
                    .slice_mut(ndarray::s![s * d..(s + 1) * d])
                    .assign(&feat.data.row(src));
            } else if cfg.replicate_edges {
                out.row_mut(t_new)
                    .slice_mut(ndarray::s![s * d..(s + 1) * d])
                    .assign(&feat.data.row(t - 1));
            }
            // else leave zeros
        }
    }
    Ok(FeatureMatrix {
        data: out,
        frame_shift_ms: feat.frame_shift_ms * cfg.skip as f64,
        window_ms: feat.window_ms,
    })
}

/// Write a feature file: magic `CTCF1`, u32 frame count, u32 dimension,
/// f32 frame shift in ms, f32 window in ms, then the matrix row-major as
/// little-endian f32.
pub fn write_feature_file(path: &Path, feat: &FeatureMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(FEATURE_MAGIC).map_err(io_err)?;
    w.write_all(&(feat.n_frames() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(feat.dim() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(feat.frame_shift_ms as f32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(feat.window_ms as f32).to_le_bytes())
        .map_err(io_err)?;
    for &v in feat.data.iter() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read a feature file written by [`write_feature_file`].
pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("bad magic, not a CTCF1 feature file"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| bad("truncated header"))?;
    let t = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|_| bad("truncated header"))?;
    let d = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|_| bad("truncated header"))?;
    let shift_ms = f32::from_le_bytes(u32buf) as f64;
    r.read_exact(&mut u32buf)
        .map_err(|_| bad("truncated header"))?;
    let window_ms = f32::from_le_bytes(u32buf) as f64;

    let mut payload = vec![0u8; t * d * 4];
    r.read_exact(&mut payload)
        .map_err(|_| bad("truncated payload"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        != 0
    {
        return Err(bad("trailing bytes after payload"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((t, d), values)
        .map_err(|_| bad("payload does not match declared shape"))?;
    Ok(FeatureMatrix {
        data,
        frame_shift_ms: shift_ms,
        window_ms,
    })
}

/// Per-dimension mean and inverse standard deviation estimated on a
/// training set and applied to every matrix before the network sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNormalizer {
    /// Estimate from a set of feature matrices (all the same dimension).
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<FeatureNormalizer> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq_sum: Option<Array1<f64>> = None;
        let mut n = 0usize;
        for m in mats {
            let sum = sum.get_or_insert_with(|| Array1::zeros(m.dim()));
            let sq_sum = sq_sum.get_or_insert_with(|| Array1::zeros(m.dim()));
            if sum.len() != m.dim() {
                return Err(Error::ShapeError(format!(
                    "normalizer saw dims {} and {}",
                    sum.len(),
                    m.dim()
                )));
            }
            for row in m.data.rows() {
                *sum += &row;
                sq_sum.zip_mut_with(&row, |a, &b| *a += b * b);
                n += 1;
            }
        }
        let (sum, sq_sum) = match (sum, sq_sum) {
            (Some(s), Some(q)) if n > 0 => (s, q),
            _ => {
                return Err(Error::InputTooShort(
                    "normalizer needs at least one frame".into(),
                ))
            }
        };
        let mean = &sum / n as f64;
        let var = &sq_sum / n as f64 - &mean * &mean;
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(1e-8).sqrt()).collect();
        Ok(FeatureNormalizer {
            mean: mean.to_vec(),
            inv_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalize in place: `(x - mean) * inv_std` per dimension.
    pub fn apply(&self, feat: &mut FeatureMatrix) -> Result<()> {
        if feat.dim() != self.dim() {
            return Err(Error::ShapeError(format!(
                "normalizer dim {} but features have dim {}",
                self.dim(),
                feat.dim()
            )));
        }
        for mut row in feat.data.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[d]) * self.inv_std[d];
            }
        }
        Ok(())
    }
}
