//! Acoustic front end for first-order Ambisonics recordings.
//!
//! A 4-channel `(w, x, y, z)` waveform becomes a `[time, mel, 7]` tensor: four
//! log-Mel power maps followed by three Mel-band intensity-vector maps. Frames
//! are 1024-sample Hamming windows placed every `sample_rate / 50` samples, so
//! a 10 s clip yields exactly 500 frames regardless of the sample rate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const FOA_CHANNELS: usize = 4;
pub const WINDOW_LEN: usize = 1024;
pub const FRAMES_PER_SECOND: usize = 50;
pub const N_MELS: usize = 64;
/// Floor inside the logarithm and guard in the intensity normalization.
pub const EPS: f64 = 1e-8;
pub const AUDIO_FEATURE_CHANNELS: usize = 7;

/// Four-channel `(w, x, y, z)` signal.
#[derive(Clone, Debug, PartialEq)]
pub struct FoaWaveform<T> {
    /// `[4, n_samples]`.
    pub samples: Array2<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> FoaWaveform<T> {
    pub fn new(samples: Array2<T>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() != FOA_CHANNELS {
            return Err(Error::InvalidInput(format!(
                "expected {FOA_CHANNELS} channels, got {}",
                samples.nrows()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "waveform contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Hop giving 50 frames per second.
    pub fn hop(&self) -> usize {
        (self.sample_rate as usize / FRAMES_PER_SECOND).max(1)
    }

    /// Split into segments of `seconds`, zero-padding the last one.
    pub fn segments(&self, seconds: f64) -> Result<Vec<FoaWaveform<T>>> {
        let seg = (seconds * self.sample_rate as f64).round() as usize;
        if seg == 0 {
            return Err(Error::InvalidInput(format!(
                "segment length {seconds} s is empty"
            )));
        }
        let count = self.len().div_ceil(seg).max(1);
        Ok((0..count)
            .map(|i| {
                let mut out = Array2::zeros((FOA_CHANNELS, seg));
                let start = i * seg;
                let end = (start + seg).min(self.len());
                if end > start {
                    out.slice_mut(s![.., 0..end - start])
                        .assign(&self.samples.slice(s![.., start..end]));
                }
                FoaWaveform {
                    samples: out,
                    sample_rate: self.sample_rate,
                }
            })
            .collect())
    }
}

/// Short-time spectra of the four channels.
#[derive(Clone, Debug)]
pub struct FoaStft<T> {
    /// `[4, frames, window_len / 2 + 1]`.
    pub frames: Array3<Complex<T>>,
    pub window_len: usize,
    pub hop: usize,
}

impl<T: Scalar> FoaStft<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().1
    }

    pub fn n_bins(&self) -> usize {
        self.frames.dim().2
    }
}

pub fn hamming<T: Scalar>(n: usize) -> Vec<T> {
    let denom = (n.max(2) - 1) as f64;
    (0..n)
        .map(|i| T::c(0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()))
        .collect()
}

/// Hamming-window STFT; frame `t` starts at sample `t·hop`, the tail is zero-padded.
pub fn stft<T: Scalar>(wave: &FoaWaveform<T>, window_len: usize, hop: usize) -> Result<FoaStft<T>> {
    if wave.samples.nrows() != FOA_CHANNELS {
        return Err(Error::InvalidInput(format!(
            "expected {FOA_CHANNELS} channels"
        )));
    }
    if wave.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "waveform contains non-finite samples".into(),
        ));
    }
    if window_len < 2 || hop == 0 {
        return Err(Error::InvalidInput(
            "window and hop must be positive".into(),
        ));
    }
    let n = wave.len();
    let n_frames = ((n as f64) / hop as f64).round() as usize;
    let bins = window_len / 2 + 1;
    let window = hamming::<T>(window_len);
    let fft = FftPlanner::<T>::new().plan_fft_forward(window_len);
    let mut frames = Array3::from_elem(
        (FOA_CHANNELS, n_frames, bins),
        Complex::new(T::zero(), T::zero()),
    );
    let mut buf = vec![Complex::new(T::zero(), T::zero()); window_len];
    for ch in 0..FOA_CHANNELS {
        let sig = wave.samples.row(ch);
        for t in 0..n_frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = sig.get(start + i).copied().unwrap_or_else(T::zero);
                *b = Complex::new(v * window[i], T::zero());
            }
            fft.process(&mut buf);
            for (k, v) in buf[..bins].iter().enumerate() {
                frames[[ch, t, k]] = *v;
            }
        }
    }
    Ok(FoaStft {
        frames,
        window_len,
        hop,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular Mel filters from 0 Hz to Nyquist with unit peaks.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank<T> {
    /// `[n_mels, n_bins]`.
    pub weights: Array2<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> MelFilterbank<T> {
    pub fn new(sample_rate: u32, window_len: usize, n_mels: usize) -> Result<Self> {
        let bins = window_len / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((n_mels, bins));
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate as f64 / window_len as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[m, k]] = T::c(w);
            }
            if weights.row(m).iter().all(|&w| w == T::zero()) {
                return Err(Error::Config(format!(
                    "Mel band {m} covers no FFT bin; use fewer bands or a longer window"
                )));
            }
        }
        Ok(Self {
            weights,
            sample_rate,
        })
    }

    /// Rows rescaled to sum to one, so projected unit vectors stay within the unit ball.
    pub fn row_normalized(&self) -> Array2<T> {
        let mut w = self.weights.clone();
        for mut row in w.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        w
    }
}

/// Mel-band intensity vectors `[time, mel, 3]`, negated and clamped to `[-1, 1]`.
pub fn intensity_vectors<T: Scalar>(stft: &FoaStft<T>, fb: &MelFilterbank<T>) -> Result<Array3<T>> {
    check_bins(stft, fb)?;
    let (frames, bins) = (stft.n_frames(), stft.n_bins());
    let eps = T::c(EPS);
    // [time, bin, 3] unit intensity per bin
    let mut unit = Array3::<T>::zeros((frames, bins, 3));
    for t in 0..frames {
        for k in 0..bins {
            let w = stft.frames[[0, t, k]].conj();
            let mut v = [T::zero(); 3];
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = (w * stft.frames[[1 + c, t, k]]).re;
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            for c in 0..3 {
                unit[[t, k, c]] = v[c] / (norm + eps);
            }
        }
    }
    let h = fb.row_normalized();
    let n_mels = h.nrows();
    let mut out = Array3::<T>::zeros((frames, n_mels, 3));
    for t in 0..frames {
        let projected = h.dot(&unit.index_axis(Axis(0), t));
        out.index_axis_mut(Axis(0), t)
            .assign(&projected.mapv(|v| (-v).max(-T::one()).min(T::one())));
    }
    Ok(out)
}

/// Log-Mel power `[time, mel, 4]`.
pub fn log_mel<T: Scalar>(stft: &FoaStft<T>, fb: &MelFilterbank<T>) -> Result<Array3<T>> {
    check_bins(stft, fb)?;
    let (frames, bins) = (stft.n_frames(), stft.n_bins());
    let eps = T::c(EPS);
    let mut out = Array3::<T>::zeros((frames, fb.weights.nrows(), FOA_CHANNELS));
    for ch in 0..FOA_CHANNELS {
        let power =
            Array2::from_shape_fn((bins, frames), |(k, t)| stft.frames[[ch, t, k]].norm_sqr());
        let mel = fb.weights.dot(&power);
        out.slice_mut(s![.., .., ch])
            .assign(&mel.t().mapv(|v| (v + eps).ln()));
    }
    Ok(out)
}

fn check_bins<T: Scalar>(stft: &FoaStft<T>, fb: &MelFilterbank<T>) -> Result<()> {
    if fb.weights.ncols() != stft.n_bins() {
        return Err(Error::Shape(format!(
            "filterbank has {} bins, spectrum has {}",
            fb.weights.ncols(),
            stft.n_bins()
        )));
    }
    Ok(())
}

/// Feature extractor with a cached filterbank.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub filterbank: MelFilterbank<T>,
    pub window_len: usize,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(sample_rate: u32) -> Result<Self> {
        Ok(Self {
            filterbank: MelFilterbank::new(sample_rate, WINDOW_LEN, N_MELS)?,
            window_len: WINDOW_LEN,
        })
    }

    /// `[time, 64, 7]`: log-Mel of `w, x, y, z` then intensity `x, y, z`.
    pub fn extract(&self, wave: &FoaWaveform<T>) -> Result<Array3<T>> {
        if wave.sample_rate != self.filterbank.sample_rate {
            return Err(Error::InvalidInput(format!(
                "sample rate {} differs from extractor rate {}",
                wave.sample_rate, self.filterbank.sample_rate
            )));
        }
        let spec = stft(wave, self.window_len, wave.hop())?;
        let lm = log_mel(&spec, &self.filterbank)?;
        let iv = intensity_vectors(&spec, &self.filterbank)?;
        ndarray::concatenate(Axis(2), &[lm.view(), iv.view()])
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

/// One-shot [`FeatureExtractor::extract`].
pub fn acoustic_features<T: Scalar>(wave: &FoaWaveform<T>) -> Result<Array3<T>> {
    FeatureExtractor::new(wave.sample_rate)?.extract(wave)
}

/// Read a 4-channel WAV file (16-bit integer or 32-bit float).
pub fn read_foa_wav<T: Scalar>(path: &Path) -> Result<FoaWaveform<T>> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels as usize != FOA_CHANNELS {
        return Err(Error::format(
            path,
            format!("expected 4 channels, found {}", spec.channels),
        ));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::format(
                path,
                format!("unsupported sample format {fmt:?}/{bits}"),
            ));
        }
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    let n = interleaved.len() / FOA_CHANNELS;
    let samples = Array2::from_shape_fn((FOA_CHANNELS, n), |(c, i)| {
        T::c(interleaved[i * FOA_CHANNELS + c])
    });
    FoaWaveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

/// Write a 4-channel 32-bit float WAV file.
pub fn write_foa_wav<T: Scalar>(path: &Path, wave: &FoaWaveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: FOA_CHANNELS as u16,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w =
        hound::WavWriter::create(path, spec).map_err(|e| Error::format(path, e.to_string()))?;
    for i in 0..wave.len() {
        for c in 0..FOA_CHANNELS {
            w.write_sample(wave.samples[[c, i]].as_f64() as f32)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    w.finalize().map_err(|e| Error::format(path, e.to_string()))
}

pub const CACHE_MAGIC: &[u8; 8] = b"SELDFT1\0";

/// Serialize an array as magic, `u32` rank, `u32` dims, `f32` row-major payload.
pub fn encode_feature_cache<T: Scalar>(data: &ArrayD<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(data.ndim() as u32).to_le_bytes());
    for &d in data.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.as_standard_layout().iter() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_cache<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ArrayD<T>> {
    let bad = |r: &str| Error::format(path, r.to_string());
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("missing feature-cache magic"));
    }
    let u32_at = |o: usize| -> Result<usize> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = u32_at(8)?;
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32_at(12 + 4 * i))
        .collect::<Result<_>>()?;
    let offset = 12 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != offset + 4 * count {
        return Err(bad("payload length does not match header"));
    }
    let data: Vec<T> = bytes[offset..]
        .chunks_exact(4)
        .map(|c| T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&e.to_string()))
}

pub fn write_feature_cache<T: Scalar>(path: &Path, data: &ArrayD<T>) -> Result<()> {
    let bytes = encode_feature_cache(data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes, path)
}
