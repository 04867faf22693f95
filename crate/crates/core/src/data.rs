//! Desk-scale datasets: synthetic transcription and classification tasks
//! generated as pure functions of (config, seed), JSONL manifests for
//! external data (inline features or WAV paths), and zero-padded batching.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, normal, stream_from_seed};
use crate::tensor::Tensor;

/// Per-sample training target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    /// Class index (classification).
    Class(usize),
    /// Blank-free label sequence (CTC).
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Tensor,
    pub target: Target,
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

/// Synthetic CTC transcription task. Each symbol owns an orthogonal one-hot
/// prototype; an utterance renders a random symbol sequence by repeating each
/// prototype for a random frame count and adding Gaussian noise. Consecutive
/// symbols always differ: with variable frames-per-symbol an adjacent repeat
/// would make the label count of a constant-prototype run ambiguous even at
/// zero noise, and the task must stay solvable there. The minimum
/// frames-per-symbol is kept at >= 2 so every target is CTC-feasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCtcConfig {
    /// Label vocabulary size, excluding the blank.
    pub vocab: usize,
    pub d_in: usize,
    pub frames_per_symbol: (usize, usize),
    pub symbols_per_utt: (usize, usize),
    pub noise_sigma: f64,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl SynthCtcConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.vocab > self.d_in {
            return Err(CoreError::Config(format!(
                "synth_ctc: vocab {} must be in 1..=d_in ({}) for orthogonal prototypes",
                self.vocab, self.d_in
            )));
        }
        if self.frames_per_symbol.0 < 2 || self.frames_per_symbol.0 > self.frames_per_symbol.1 {
            return Err(CoreError::Config(
                "synth_ctc: frames_per_symbol range must satisfy 2 <= lo <= hi".into(),
            ));
        }
        if self.symbols_per_utt.0 == 0 || self.symbols_per_utt.0 > self.symbols_per_utt.1 {
            return Err(CoreError::Config(
                "synth_ctc: symbols_per_utt range must satisfy 1 <= lo <= hi".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::Config("synth_ctc: noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Symbol `s` (1-based; 0 is the CTC blank) maps to unit vector e_{s-1}.
fn prototype(symbol: usize, d_in: usize) -> Vec<f64> {
    let mut v = vec![0.0; d_in];
    v[symbol - 1] = 1.0;
    v
}

pub fn gen_ctc_task(config: &SynthCtcConfig) -> Result<Splits> {
    config.validate()?;
    let mut splits = Splits::default();
    let counts = [config.num_train, config.num_dev, config.num_test];
    for (split_id, &count) in counts.iter().enumerate() {
        let out = match split_id {
            0 => &mut splits.train,
            1 => &mut splits.dev,
            _ => &mut splits.test,
        };
        for idx in 0..count {
            let mut rng = stream_from_seed(derive_seed(config.seed, split_id as u64, idx as u64));
            let n_syms = rng.gen_range(config.symbols_per_utt.0..=config.symbols_per_utt.1);
            let mut labels: Vec<usize> = Vec::with_capacity(n_syms);
            let mut rows = Vec::new();
            for _ in 0..n_syms {
                let sym = loop {
                    let candidate = rng.gen_range(1..=config.vocab);
                    if config.vocab == 1 || labels.last() != Some(&candidate) {
                        break candidate;
                    }
                };
                labels.push(sym);
                let frames = rng.gen_range(config.frames_per_symbol.0..=config.frames_per_symbol.1);
                let proto = prototype(sym, config.d_in);
                for _ in 0..frames {
                    let row: Vec<f64> = proto
                        .iter()
                        .map(|&p| p + config.noise_sigma * normal(&mut rng))
                        .collect();
                    rows.push(row);
                }
            }
            out.push(Sample {
                id: format!("ctc-{}-{:05}", SPLIT_NAMES[split_id], idx),
                features: Tensor::from_rows(&rows)?,
                target: Target::Labels(labels),
            });
        }
    }
    Ok(splits)
}

/// Synthetic classification task. Frames carry random distractor prototypes
/// at `bg_amp`; one randomly placed span carries the class prototype at
/// `span_amp`. The label is the prototype dominating that salient span, so
/// a model has to look across time to find it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClsConfig {
    pub num_classes: usize,
    pub d_in: usize,
    pub len_range: (usize, usize),
    pub span_range: (usize, usize),
    pub span_amp: f64,
    pub bg_amp: f64,
    pub noise_sigma: f64,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl SynthClsConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > self.d_in {
            return Err(CoreError::Config(format!(
                "synth_cls: num_classes {} must be in 1..=d_in ({})",
                self.num_classes, self.d_in
            )));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(CoreError::Config("synth_cls: bad len_range".into()));
        }
        if self.span_range.0 == 0
            || self.span_range.0 > self.span_range.1
            || self.span_range.1 > self.len_range.0
        {
            return Err(CoreError::Config(
                "synth_cls: span_range must satisfy 1 <= lo <= hi <= len_range.lo".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::Config("synth_cls: noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn gen_cls_task(config: &SynthClsConfig) -> Result<Splits> {
    config.validate()?;
    let mut splits = Splits::default();
    let counts = [config.num_train, config.num_dev, config.num_test];
    for (split_id, &count) in counts.iter().enumerate() {
        let out = match split_id {
            0 => &mut splits.train,
            1 => &mut splits.dev,
            _ => &mut splits.test,
        };
        for idx in 0..count {
            let mut rng = stream_from_seed(derive_seed(config.seed, 10 + split_id as u64, idx as u64));
            let t = rng.gen_range(config.len_range.0..=config.len_range.1);
            let class = rng.gen_range(0..config.num_classes);
            let span_len = rng.gen_range(config.span_range.0..=config.span_range.1);
            let span_start = rng.gen_range(0..=t - span_len);
            let mut rows = Vec::with_capacity(t);
            for frame in 0..t {
                let (proto_idx, amp) = if frame >= span_start && frame < span_start + span_len {
                    (class, config.span_amp)
                } else {
                    (rng.gen_range(0..config.num_classes), config.bg_amp)
                };
                let row: Vec<f64> = (0..config.d_in)
                    .map(|i| {
                        let base = if i == proto_idx { amp } else { 0.0 };
                        base + config.noise_sigma * normal(&mut rng)
                    })
                    .collect();
                rows.push(row);
            }
            out.push(Sample {
                id: format!("cls-{}-{:05}", SPLIT_NAMES[split_id], idx),
                features: Tensor::from_rows(&rows)?,
                target: Target::Class(class),
            });
        }
    }
    Ok(splits)
}

// ── batching ────────────────────────────────────────────────────────

/// Zero-padded batch: features B×T_max×d_in, per-sample valid lengths,
/// targets and ids in input order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub valid_len: Vec<usize>,
    pub targets: Vec<Target>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.valid_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.shape[1]
    }

    /// Sample i restricted to its valid frames.
    pub fn valid_features(&self, i: usize) -> Tensor {
        let (_, t_max, d) = (self.features.shape[0], self.features.shape[1], self.features.shape[2]);
        let t = self.valid_len[i];
        let start = i * t_max * d;
        Tensor {
            shape: vec![t, d],
            data: self.features.data[start..start + t * d].to_vec(),
        }
    }

    /// Sample i including its padding rows.
    pub fn padded_features(&self, i: usize) -> Tensor {
        let (t_max, d) = (self.features.shape[1], self.features.shape[2]);
        let start = i * t_max * d;
        Tensor {
            shape: vec![t_max, d],
            data: self.features.data[start..start + t_max * d].to_vec(),
        }
    }
}

pub fn pad_batch(samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(CoreError::Contract("pad_batch: empty batch".into()));
    }
    let d = samples[0].features.dims2("pad_batch")?.1;
    let mut t_max = 0;
    for s in samples {
        let (t, ds) = s.features.dims2("pad_batch")?;
        if ds != d {
            return Err(CoreError::shape("pad_batch", "feature dims differ across samples"));
        }
        t_max = t_max.max(t);
    }
    let b = samples.len();
    let mut data = vec![0.0; b * t_max * d];
    let mut valid_len = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let t = s.features.shape[0];
        data[i * t_max * d..i * t_max * d + t * d].copy_from_slice(&s.features.data);
        valid_len.push(t);
        targets.push(s.target.clone());
        ids.push(s.id.clone());
    }
    Ok(Batch {
        features: Tensor::new(vec![b, t_max, d], data)?,
        valid_len,
        targets,
        ids,
    })
}

// ── JSONL manifests ─────────────────────────────────────────────────

/// One manifest line: inline features or a WAV path, plus the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    pub target: Target,
}

/// Featurization applied to manifest entries that reference WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelParams {
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
}

pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rows: Vec<Vec<f64>> = (0..s.features.shape[0])
            .map(|r| s.features.row(r).to_vec())
            .collect();
        let entry = ManifestEntry {
            id: s.id.clone(),
            path: None,
            features: Some(rows),
            target: s.target.clone(),
        };
        serde_json::to_writer(&mut w, &entry)
            .map_err(|e| CoreError::Manifest(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL manifest; WAV-path entries require `mel` so they can be
/// featurized, and paths resolve relative to the manifest's directory.
pub fn read_manifest(path: &Path, mel: Option<MelParams>) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| CoreError::Manifest(format!("line {}: {}", lineno + 1, e)))?;
        let features = match (&entry.features, &entry.path) {
            (Some(rows), _) => Tensor::from_rows(rows)?,
            (None, Some(rel)) => {
                let mel = mel.ok_or_else(|| {
                    CoreError::Manifest(format!(
                        "line {}: wav path given but no mel featurization configured",
                        lineno + 1
                    ))
                })?;
                let (rate, samples) = audio::wav_read(&base.join(rel))?;
                let (feats, _) = audio::log_mel(&samples, rate, mel.frame_len, mel.hop, mel.n_mels)?;
                feats
            }
            (None, None) => {
                return Err(CoreError::Manifest(format!(
                    "line {}: entry has neither features nor path",
                    lineno + 1
                )));
            }
        };
        out.push(Sample { id: entry.id, features, target: entry.target });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_ctc_config() -> SynthCtcConfig {
        SynthCtcConfig {
            vocab: 3,
            d_in: 4,
            frames_per_symbol: (2, 3),
            symbols_per_utt: (1, 3),
            noise_sigma: 0.1,
            num_train: 12,
            num_dev: 5,
            num_test: 5,
            seed: 42,
        }
    }

    #[test]
    fn noiseless_single_symbol_repeats_prototype() {
        let config = SynthCtcConfig {
            noise_sigma: 0.0,
            frames_per_symbol: (2, 2),
            symbols_per_utt: (1, 1),
            num_train: 4,
            num_dev: 0,
            num_test: 0,
            ..small_ctc_config()
        };
        let splits = gen_ctc_task(&config).unwrap();
        for s in &splits.train {
            let Target::Labels(labels) = &s.target else {
                panic!("ctc sample with class target")
            };
            assert_eq!(labels.len(), 1);
            assert_eq!(s.features.shape, vec![2, 4]);
            let proto = prototype(labels[0], 4);
            assert_eq!(s.features.row(0), &proto[..]);
            assert_eq!(s.features.row(1), &proto[..]);
        }
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let config = small_ctc_config();
        let a = gen_ctc_task(&config).unwrap();
        let b = gen_ctc_task(&config).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);

        let cls = SynthClsConfig {
            num_classes: 3,
            d_in: 4,
            len_range: (6, 10),
            span_range: (2, 3),
            span_amp: 1.0,
            bg_amp: 0.5,
            noise_sigma: 0.05,
            num_train: 10,
            num_dev: 3,
            num_test: 3,
            seed: 7,
        };
        assert_eq!(gen_cls_task(&cls).unwrap().train, gen_cls_task(&cls).unwrap().train);
    }

    #[test]
    fn splits_are_disjoint_by_id() {
        let splits = gen_ctc_task(&small_ctc_config()).unwrap();
        let mut ids: Vec<&str> = splits
            .train
            .iter()
            .chain(&splits.dev)
            .chain(&splits.test)
            .map(|s| s.id.as_str())
            .collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total);
    }

    #[test]
    fn cls_labels_roughly_uniform() {
        let config = SynthClsConfig {
            num_classes: 4,
            d_in: 6,
            len_range: (8, 8),
            span_range: (2, 2),
            span_amp: 1.0,
            bg_amp: 0.4,
            noise_sigma: 0.0,
            num_train: 10_000,
            num_dev: 0,
            num_test: 0,
            seed: 4,
        };
        let splits = gen_cls_task(&config).unwrap();
        let mut counts = [0usize; 4];
        for s in &splits.train {
            let Target::Class(c) = s.target else { panic!() };
            counts[c] += 1;
        }
        // 3σ multinomial bound per class
        let n = 10_000f64;
        let p = 0.25;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "counts {:?}", counts);
        }
    }

    #[test]
    fn noiseless_cls_span_identifies_class() {
        // Bayes accuracy 1.0 by construction at σ=0: the amplitude-A span
        // pins the label.
        let config = SynthClsConfig {
            num_classes: 3,
            d_in: 4,
            len_range: (8, 10),
            span_range: (2, 3),
            span_amp: 1.0,
            bg_amp: 0.5,
            noise_sigma: 0.0,
            num_train: 200,
            num_dev: 0,
            num_test: 0,
            seed: 11,
        };
        let splits = gen_cls_task(&config).unwrap();
        for s in &splits.train {
            let Target::Class(c) = s.target else { panic!() };
            // recover the class by finding any frame at span amplitude
            let (t, d) = s.features.dims2("test").unwrap();
            let mut recovered = None;
            for r in 0..t {
                for col in 0..d {
                    if s.features.get2(r, col) == config.span_amp {
                        recovered = Some(col);
                    }
                }
            }
            assert_eq!(recovered, Some(c));
        }
    }

    #[test]
    fn pad_batch_zero_pads_and_preserves_order() {
        let sample = |id: &str, t: usize| Sample {
            id: id.to_string(),
            features: Tensor::full(&[t, 3], 1.0),
            target: Target::Class(0),
        };
        let (a, b) = (sample("a", 2), sample("b", 5));
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.features.shape, vec![2, 5, 3]);
        assert_eq!(batch.valid_len, vec![2, 5]);
        assert_eq!(batch.ids, vec!["a", "b"]);
        // padding rows are zero
        let padded_a = batch.padded_features(0);
        for r in 2..5 {
            assert_eq!(padded_a.row(r), &[0.0, 0.0, 0.0]);
        }
        assert_eq!(batch.valid_features(0).shape, vec![2, 3]);

        assert!(pad_batch(&[]).is_err());
    }

    #[test]
    fn equal_lengths_need_no_padding() {
        let s1 = Sample {
            id: "x".into(),
            features: Tensor::full(&[3, 2], 0.5),
            target: Target::Class(1),
        };
        let s2 = Sample {
            id: "y".into(),
            features: Tensor::full(&[3, 2], -0.5),
            target: Target::Class(0),
        };
        let batch = pad_batch(&[&s1, &s2]).unwrap();
        assert_eq!(batch.max_len(), 3);
        assert_eq!(batch.valid_features(0), s1.features);
        assert_eq!(batch.valid_features(1), s2.features);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let splits = gen_ctc_task(&SynthCtcConfig { num_train: 5, num_dev: 0, num_test: 0, ..small_ctc_config() }).unwrap();
        write_manifest(&path, &splits.train).unwrap();
        let back = read_manifest(&path, None).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in splits.train.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.target, b.target);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn manifest_rejects_pathless_featureless_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":\"q\",\"target\":0}\n").unwrap();
        assert!(matches!(read_manifest(&path, None), Err(CoreError::Manifest(_))));
    }
}
