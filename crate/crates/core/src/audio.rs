//! Audio front-end: one-second 16 kHz PCM clips to log-mel spectrograms.
//!
//! Each frame is Hann-windowed, zero-padded to `fft_size`, turned into a
//! power spectrum, projected onto a bank of HTK-mel triangular filters and
//! compressed with `ln(x + log_floor)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Sample rate every clip is expected to carry.
pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Samples in a normalized one-second clip.
pub const CLIP_SAMPLES: usize = 16_000;

const SPECTROGRAM_MAGIC: &[u8; 8] = b"LMEL0001";

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed wav header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),
    #[error("invalid frontend config: {0}")]
    InvalidConfig(String),
    #[error("mel filter {index} covers no FFT bin; n_mels is too large for fft_size")]
    FilterCollapse { index: usize },
    #[error("bad spectrogram cache: {0}")]
    BadCache(String),
}

/// A mono clip, normalized to exactly [`CLIP_SAMPLES`] samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcmClip {
    samples: Vec<i16>,
    sample_rate_hz: u32,
}

impl PcmClip {
    /// Builds a clip from raw mono samples, zero-padding or truncating to one second.
    pub fn from_samples(mut samples: Vec<i16>, sample_rate_hz: u32) -> Result<Self, FrontendError> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(FrontendError::UnsupportedSampleRate(sample_rate_hz));
        }
        samples.resize(CLIP_SAMPLES, 0);
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }
}

/// Reads a RIFF/WAVE PCM16 file. Multichannel input is averaged to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<PcmClip, FrontendError> {
    let (samples, rate) = read_wav_mono(path.as_ref(), None)?;
    PcmClip::from_samples(samples, rate)
}

/// Reads the whole file as mono PCM16 without length normalization.
///
/// `window` optionally restricts the read to `(offset, len)` mono frames;
/// used for cropping background-noise recordings.
pub fn read_wav_mono(
    path: &Path,
    window: Option<(usize, usize)>,
) -> Result<(Vec<i16>, u32), FrontendError> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(FrontendError::UnsupportedEncoding("IEEE float samples".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(FrontendError::UnsupportedEncoding(format!(
            "{}-bit PCM (expected 16)",
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(FrontendError::UnsupportedSampleRate(spec.sample_rate));
    }
    let channels = spec.channels.max(1) as usize;
    let mut reader = reader;
    let (skip, take) = window.unwrap_or((0, usize::MAX));
    if skip > 0 {
        reader
            .seek(skip.min(u32::MAX as usize) as u32)
            .map_err(FrontendError::Io)?;
    }
    let mut out = Vec::new();
    let mut frame = Vec::with_capacity(channels);
    for s in reader.samples::<i16>() {
        frame.push(s.map_err(map_hound)? as i32);
        if frame.len() == channels {
            let sum: i32 = frame.iter().sum();
            out.push((sum / channels as i32) as i16);
            frame.clear();
            if out.len() == take {
                break;
            }
        }
    }
    Ok((out, spec.sample_rate))
}

/// Number of mono frames in a WAV file.
pub fn wav_frame_count(path: &Path) -> Result<usize, FrontendError> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    Ok(reader.duration() as usize)
}

fn map_hound(e: hound::Error) -> FrontendError {
    match e {
        hound::Error::IoError(io) => FrontendError::Io(io),
        hound::Error::FormatError(msg) => FrontendError::MalformedHeader(msg.to_string()),
        hound::Error::Unsupported => {
            FrontendError::UnsupportedEncoding("not a PCM wav file".to_string())
        }
        other => FrontendError::MalformedHeader(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: SAMPLE_RATE_HZ,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 7500.0,
            fft_size: 512,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    /// Frame count for a clip of `clip_len` samples; zero if the clip is shorter than a window.
    pub fn frame_count(&self, clip_len: usize) -> usize {
        let win = self.window_samples();
        if clip_len < win {
            0
        } else {
            (clip_len - win) / self.hop_samples() + 1
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |msg: String| Err(FrontendError::InvalidConfig(msg));
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive".into());
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return bad(format!(
                "need 0 <= fmin < fmax, got fmin={} fmax={}",
                self.fmin_hz, self.fmax_hz
            ));
        }
        if self.fmax_hz > self.sample_rate_hz as f64 / 2.0 {
            return bad(format!("fmax {} exceeds Nyquist", self.fmax_hz));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        let win = self.window_samples();
        if win == 0 || self.hop_samples() == 0 {
            return bad("window and hop must span at least one sample".into());
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < win {
            return bad(format!(
                "fft_size {} must be a power of two >= window length {}",
                self.fft_size, win
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor must be a positive finite value".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided power spectrum. Row-major `n_mels × n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    n_mels: usize,
    n_bins: usize,
    centers_hz: Vec<f64>,
    weights: Vec<f64>,
}

impl FilterBank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    /// Peak frequency of each triangle.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Builds the mel filterbank. Filter edges and centers are `n_mels + 2`
/// points equally spaced in mel between `mel(fmin)` and `mel(fmax)`; each
/// triangle peaks at 1 and is evaluated at the FFT bin centre frequencies.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<FilterBank, FrontendError> {
    cfg.validate()?;
    let n_bins = cfg.fft_size / 2 + 1;
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(FrontendError::FilterCollapse { index: m });
        }
    }
    Ok(FilterBank {
        n_mels: cfg.n_mels,
        n_bins,
        centers_hz: edges[1..=cfg.n_mels].to_vec(),
        weights,
    })
}

/// `frames × bands` log mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    frames: usize,
    bands: usize,
    values: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn new(frames: usize, bands: usize, values: Vec<f32>) -> Result<Self, FrontendError> {
        if values.len() != frames * bands {
            return Err(FrontendError::BadCache(format!(
                "{} values for a {}x{} spectrogram",
                values.len(),
                frames,
                bands
            )));
        }
        Ok(Self {
            frames,
            bands,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, frame: usize, band: usize) -> f32 {
        self.values[frame * self.bands + band]
    }

    /// Writes the little-endian cache format: `LMEL0001`, frames u32, bands u32, f32 row-major.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), FrontendError> {
        w.write_all(SPECTROGRAM_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.bands as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, FrontendError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SPECTROGRAM_MAGIC {
            return Err(FrontendError::BadCache("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let frames = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let bands = u32::from_le_bytes(word) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != frames * bands * 4 {
            return Err(FrontendError::BadCache(format!(
                "expected {} payload bytes, found {}",
                frames * bands * 4,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(frames, bands, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FrontendError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FrontendError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Reusable front-end: filterbank, window and FFT plan built once.
pub struct LogMelFrontend {
    cfg: FrontendConfig,
    bank: FilterBank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelFrontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self, FrontendError> {
        let bank = mel_filterbank(&cfg)?;
        let window = hann_window(cfg.window_samples());
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            bank,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn compute(&self, clip: &PcmClip) -> LogMelSpectrogram {
        self.compute_samples(clip.samples())
    }

    /// Works on any sample count; fewer samples than one window give zero frames.
    pub fn compute_samples(&self, samples: &[i16]) -> LogMelSpectrogram {
        let win = self.window.len();
        let hop = self.cfg.hop_samples();
        let frames = self.cfg.frame_count(samples.len());
        let bands = self.bank.n_mels();
        let n_bins = self.bank.n_bins();
        let mut values = Vec::with_capacity(frames * bands);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut mel = vec![0.0; bands];
        for t in 0..frames {
            let start = t * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let re = if i < win {
                    samples[start + i] as f64 / 32768.0 * self.window[i]
                } else {
                    0.0
                };
                *c = Complex::new(re, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, &mut mel);
            values.extend(mel.iter().map(|&e| (e + self.cfg.log_floor).ln() as f32));
        }
        LogMelSpectrogram {
            frames,
            bands,
            values,
        }
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-shot convenience wrapper around [`LogMelFrontend`].
pub fn log_mel(clip: &PcmClip, cfg: &FrontendConfig) -> Result<LogMelSpectrogram, FrontendError> {
    Ok(LogMelFrontend::new(cfg.clone())?.compute(clip))
}
