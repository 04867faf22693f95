//! WAV ingestion (RIFF/WAVE, PCM 16-bit) and log-mel feature extraction:
//! periodic Hann window, naive DFT magnitudes, triangular filters on the HTK
//! mel scale (2595·log10(1 + f/700)), then log(x + 1e-6).

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const PCM_SCALE: f64 = 32768.0;

fn wav_err(field: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::Wav { field, detail: detail.into() }
}

/// Read a RIFF/WAVE PCM 16-bit file: little-endian samples scaled by
/// 1/32768; stereo channels are averaged to mono.
pub fn wav_read(path: &Path) -> Result<(u32, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    wav_decode(&bytes)
}

pub fn wav_decode(bytes: &[u8]) -> Result<(u32, Vec<f64>)> {
    if bytes.len() < 12 {
        return Err(wav_err("riff", "file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(wav_err("riff", "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err("wave", "missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(wav_err("chunk", format!("chunk `{}` overruns the file", String::from_utf8_lossy(id))));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err("fmt", "fmt chunk shorter than 16 bytes"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        off = body_start + size + (size % 2); // chunks are word-aligned
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| wav_err("fmt", "fmt chunk missing"))?;
    if format != 1 {
        return Err(wav_err("audio_format", format!("unsupported codec {}, want PCM (1)", format)));
    }
    if bits != 16 {
        return Err(wav_err("bits_per_sample", format!("unsupported depth {}, want 16", bits)));
    }
    if channels == 0 || channels > 2 {
        return Err(wav_err("channels", format!("{} channels; mono or stereo only", channels)));
    }
    let data = data.ok_or_else(|| wav_err("data", "data chunk missing"))?;
    let frame_bytes = 2 * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(wav_err("data", "data chunk not a whole number of frames"));
    }

    let mut samples = Vec::with_capacity(data.len() / frame_bytes);
    for frame in data.chunks_exact(frame_bytes) {
        let mut acc = 0.0;
        for ch in 0..channels as usize {
            let v = i16::from_le_bytes(frame[2 * ch..2 * ch + 2].try_into().unwrap());
            acc += v as f64 / PCM_SCALE;
        }
        samples.push(acc / channels as f64);
    }
    Ok((rate, samples))
}

/// Write mono PCM 16-bit; values are rounded and clamped to the i16 range,
/// so a round trip is exact to within 1/32768.
pub fn wav_write(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over DFT bins 0..=n_fft/2, peaks at HTK-mel
/// equally spaced centers between 0 Hz and the Nyquist frequency.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_hi = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_freq = |b: usize| b as f64 * sample_rate as f64 / n_fft as f64;
    let mut filters = vec![vec![0.0; n_bins]; n_mels];
    for (m, filter) in filters.iter_mut().enumerate() {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for (b, w) in filter.iter_mut().enumerate() {
            let f = bin_freq(b);
            if f > lo && f < mid {
                *w = (f - lo) / (mid - lo);
            } else if f >= mid && f < hi {
                *w = (hi - f) / (hi - mid);
            }
        }
    }
    filters
}

/// The peak frequency of mel band `m` (for tests probing band responses).
pub fn mel_band_center(m: usize, n_mels: usize, sample_rate: u32) -> f64 {
    let mel_hi = hz_to_mel(sample_rate as f64 / 2.0);
    mel_to_hz(mel_hi * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// Log-mel features: T×n_mels with T = 1 + floor((len − frame_len)/hop).
/// Inputs shorter than one frame produce a single zero-padded frame; the
/// returned flag marks that case.
pub fn log_mel(
    samples: &[f64],
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    n_mels: usize,
) -> Result<(Tensor, bool)> {
    if hop == 0 || frame_len < hop {
        return Err(CoreError::Contract(format!(
            "log_mel: need frame_len >= hop > 0, got {} and {}",
            frame_len, hop
        )));
    }
    if n_mels == 0 {
        return Err(CoreError::Contract("log_mel: n_mels must be >= 1".into()));
    }
    let padded = samples.len() < frame_len;
    let frames = if padded {
        1
    } else {
        1 + (samples.len() - frame_len) / hop
    };

    // periodic Hann
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / frame_len as f64).cos()))
        .collect();
    let n_bins = frame_len / 2 + 1;
    let filters = mel_filterbank(n_mels, frame_len, sample_rate);

    let mut rows = Vec::with_capacity(frames);
    let mut frame_buf = vec![0.0; frame_len];
    for f in 0..frames {
        let start = f * hop;
        for (n, v) in frame_buf.iter_mut().enumerate() {
            let idx = start + n;
            *v = if idx < samples.len() { samples[idx] * window[n] } else { 0.0 };
        }
        // naive real DFT magnitudes
        let mut mags = vec![0.0; n_bins];
        for (k, mag) in mags.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &v) in frame_buf.iter().enumerate() {
                let angle = -2.0 * PI * (k * n) as f64 / frame_len as f64;
                re += v * angle.cos();
                im += v * angle.sin();
            }
            *mag = (re * re + im * im).sqrt();
        }
        let row: Vec<f64> = filters
            .iter()
            .map(|filter| {
                let energy: f64 = filter.iter().zip(&mags).map(|(w, m)| w * m).sum();
                (energy + 1e-6).ln()
            })
            .collect();
        rows.push(row);
    }
    Ok((Tensor::from_rows(&rows)?, padded))
}
