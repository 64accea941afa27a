//! Event-partitioned feature streams: file format, loading, batching and a
//! synthetic generator with known drift.
//!
//! A stream file is JSON Lines. Line 1 is the [`StreamManifest`]; every
//! further line is one [`Sample`] with fields `e, t, y, xt, xv, split`. Floats
//! are written with 17 significant digits so a load/save cycle reproduces the
//! file byte for byte.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derived_rng, write_atomic};
use crate::numerics::Tensor;

pub const FORMAT: &str = "contlab-stream";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub e: usize,
    pub t: usize,
    pub y: u8,
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub xt: Vec<f64>,
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub xv: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    Linear,
    Sinusoidal,
}

/// Ground truth of a generated stream, over the concatenated `[xt ; xv]` space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftRecord {
    pub kind: DriftKind,
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub real_mean: Vec<f64>,
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub base: Vec<f64>,
    /// Per-event velocity (linear) or amplitude vector (sinusoidal).
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub velocity: Vec<f64>,
    #[serde(serialize_with = "crate::io::ser_f64")]
    pub period: f64,
    #[serde(serialize_with = "crate::io::ser_f64")]
    pub class_std: f64,
    /// One offset per event, including the future event when present.
    #[serde(serialize_with = "crate::io::ser_vecs")]
    pub offsets: Vec<Vec<f64>>,
}

impl DriftRecord {
    /// Real-class mean of event `k` (1-based): the base real mean plus the
    /// event offset.
    pub fn real_mean_at(&self, k: usize) -> Vec<f64> {
        let offset = self.offsets.get(k - 1);
        self.real_mean
            .iter()
            .enumerate()
            .map(|(i, m)| m + offset.map_or(0.0, |o| o[i]))
            .collect()
    }

    /// Fake-class mean of event `k` (1-based).
    pub fn fake_mean(&self, k: usize) -> Vec<f64> {
        let scale = match self.kind {
            DriftKind::Linear => k as f64,
            DriftKind::Sinusoidal => (std::f64::consts::TAU * k as f64 / self.period).sin(),
        };
        let offset = self.offsets.get(k - 1);
        self.base
            .iter()
            .zip(&self.velocity)
            .enumerate()
            .map(|(i, (b, v))| b + scale * v + offset.map_or(0.0, |o| o[i]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub format: String,
    pub version: u32,
    pub d_t: usize,
    pub d_v: usize,
    /// Number of training events `K`.
    pub num_events: usize,
    /// Whether a test-only event `K + 1` follows.
    pub future: bool,
    /// Sample count per event, future event last.
    pub counts: Vec<usize>,
    pub ground_truth: Option<DriftRecord>,
    pub seed: Option<u64>,
}

impl StreamManifest {
    pub fn future_event(&self) -> Option<usize> {
        self.future.then_some(self.num_events + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        if self.num_events < 1 {
            return Err(Error::Validation("num_events must be at least 1".into()));
        }
        let expected = self.num_events + usize::from(self.future);
        if self.counts.len() != expected {
            return Err(Error::Validation(format!(
                "counts has {} entries, expected {expected}",
                self.counts.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub manifest: StreamManifest,
    pub samples: Vec<Sample>,
}

/// Features and labels of a group of samples as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xt: Tensor,
    pub xv: Tensor,
    pub y: Vec<usize>,
    /// Temporal label shared by every row.
    pub t: f64,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("a batch needs at least one sample".into()))?;
        if samples.iter().any(|s| s.t != first.t) {
            return Err(Error::Input("a batch must not mix temporal labels".into()));
        }
        let stack = |f: fn(&Sample) -> &Vec<f64>| {
            let d = f(first).len();
            let data: Vec<f64> = samples.iter().flat_map(|s| f(s).iter().copied()).collect();
            Tensor::new(vec![samples.len(), d], data)
        };
        Ok(Batch {
            xt: stack(|s| &s.xt)?,
            xv: stack(|s| &s.xv)?,
            y: samples.iter().map(|s| s.y as usize).collect(),
            t: first.t as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            xt: self.xt.select_rows(idx),
            xv: self.xv.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            t: self.t,
        }
    }
}

impl Stream {
    pub fn parse(text: &str) -> Result<Stream> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty stream file".into(),
        })?;
        let manifest: StreamManifest = serde_json::from_str(head).map_err(|e| Error::Parse {
            line: 1,
            message: format!("manifest: {e}"),
        })?;
        manifest.validate()?;
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push(s);
        }
        let stream = Stream { manifest, samples };
        stream.validate()?;
        Ok(stream)
    }

    /// Checks every sample against the manifest.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let last = m.num_events + usize::from(m.future);
        let mut counts = vec![0usize; last];
        for (i, s) in self.samples.iter().enumerate() {
            let line = i + 2;
            if s.e < 1 || s.e > last {
                return Err(Error::Validation(format!(
                    "line {line}: event {} outside 1..={last}",
                    s.e
                )));
            }
            if s.t != s.e {
                return Err(Error::Validation(format!(
                    "line {line}: temporal label {} differs from event {}",
                    s.t, s.e
                )));
            }
            if s.xt.len() != m.d_t || s.xv.len() != m.d_v {
                return Err(Error::Validation(format!(
                    "line {line}: feature dims ({}, {}) differ from manifest ({}, {})",
                    s.xt.len(),
                    s.xv.len(),
                    m.d_t,
                    m.d_v
                )));
            }
            if s.y > 1 {
                return Err(Error::Validation(format!(
                    "line {line}: label {} not in {{0, 1}}",
                    s.y
                )));
            }
            if s.xt.iter().chain(&s.xv).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "line {line}: non-finite feature"
                )));
            }
            if m.future && s.e == last && s.split != Split::Test {
                return Err(Error::Validation(format!(
                    "line {line}: future event must be test-only"
                )));
            }
            counts[s.e - 1] += 1;
        }
        if counts != m.counts {
            return Err(Error::Validation(format!(
                "per-event counts {counts:?} differ from manifest {:?}",
                m.counts
            )));
        }
        Ok(())
    }

    /// The file text: manifest line then one line per sample.
    pub fn to_text(&self) -> Result<String> {
        let mut out =
            serde_json::to_string(&self.manifest).map_err(|e| Error::Serde(e.to_string()))?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).map_err(|e| Error::Serde(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn num_events(&self) -> usize {
        self.manifest.num_events
    }

    /// Samples of event `k` in `split`, in file order.
    pub fn samples_of(&self, k: usize, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.e == k && s.split == split)
            .collect()
    }

    pub fn batch_of(&self, k: usize, split: Split) -> Result<Batch> {
        Batch::from_samples(&self.samples_of(k, split))
    }
}

pub fn load(path: &Path) -> Result<Stream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Stream::parse(&text)
}

pub fn serialize(stream: &Stream) -> Result<String> {
    stream.to_text()
}

pub fn save(stream: &Stream, path: &Path) -> Result<()> {
    write_atomic(path, stream.to_text()?.as_bytes())
}

/// Shuffled index batches for one epoch.
///
/// The permutation depends only on `(seed, event, epoch)`. A final batch with
/// fewer than two samples is merged into the one before it.
pub fn batch_iter(
    n: usize,
    batch_size: usize,
    seed: u64,
    event: usize,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Input("cannot batch an empty dataset".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(
        seed,
        &[0xba7c, event as u64, epoch as u64],
    ));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(0, Vec::len) < 2 {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    Ok(batches)
}

/// Settings for [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_events: usize,
    pub samples_per_event: usize,
    /// Fraction of fake samples per event.
    pub fake_fraction: f64,
    pub d_t: usize,
    pub d_v: usize,
    /// Value of every coordinate of the real-class mean.
    pub real_mean: f64,
    /// Per-coordinate standard deviation of both classes.
    pub class_std: f64,
    /// Distance from the real-class mean to the fake base mean.
    pub fake_shift: f64,
    pub drift_kind: DriftKind,
    /// Norm of the per-event velocity (linear) or of the amplitude (sinusoidal).
    pub drift_speed: f64,
    /// Period in events of sinusoidal drift.
    pub drift_period: f64,
    /// Norm of the per-event offset shared by both class means. Offsets of
    /// different events are orthogonal while the events fit in the feature
    /// dimension.
    pub separation: f64,
    pub test_fraction: f64,
    pub include_future: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_events: 4,
            samples_per_event: 500,
            fake_fraction: 0.5,
            d_t: 8,
            d_v: 8,
            real_mean: 0.0,
            class_std: 1.0,
            fake_shift: 3.0,
            drift_kind: DriftKind::Linear,
            drift_speed: 0.0,
            drift_period: 8.0,
            separation: 0.0,
            test_fraction: 0.2,
            include_future: true,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_events < 1 {
            return bad("num_events must be at least 1".into());
        }
        if self.samples_per_event < 4 {
            return bad("samples_per_event must be at least 4".into());
        }
        let fake = (self.samples_per_event as f64 * self.fake_fraction).round() as usize;
        if fake < 2 || self.samples_per_event - fake < 2 {
            return bad("fake_fraction leaves fewer than 2 samples in a class".into());
        }
        if self.d_t < 1 || self.d_v < 1 {
            return bad("d_t and d_v must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            ));
        }
        if !(self.separation >= 0.0) {
            return bad(format!(
                "separation must be nonnegative, got {}",
                self.separation
            ));
        }
        if !(self.class_std > 0.0) {
            return bad("class_std must be positive".into());
        }
        if self.drift_kind == DriftKind::Sinusoidal && !(self.drift_period > 0.0) {
            return bad("drift_period must be positive".into());
        }
        let finite = [
            self.real_mean,
            self.fake_shift,
            self.drift_speed,
            self.drift_period,
            self.fake_fraction,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("generator parameters must be finite".into());
        }
        Ok(())
    }
}

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `n` unit vectors in `R^d`, mutually orthogonal while `n <= d`.
fn offset_directions<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = unit_vector(d, rng);
        if out.len() < d {
            for u in &out {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, a)| *x -= dot * a);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

/// Draws a stream whose class means move by a per-event offset and whose
/// fake-class mean additionally follows the recorded drift.
pub fn generate(config: &GenConfig) -> Result<Stream> {
    config.validate()?;
    let d = config.d_t + config.d_v;
    let k_total = config.num_events + usize::from(config.include_future);
    let mut rng = derived_rng(config.seed, &[0]);
    let real_mean = vec![config.real_mean; d];
    let base: Vec<f64> = unit_vector(d, &mut rng)
        .iter()
        .zip(&real_mean)
        .map(|(u, m)| m + config.fake_shift * u)
        .collect();
    let velocity: Vec<f64> = unit_vector(d, &mut rng)
        .iter()
        .map(|u| config.drift_speed * u)
        .collect();
    let offsets: Vec<Vec<f64>> = offset_directions(d, k_total, &mut rng)
        .into_iter()
        .map(|u| u.iter().map(|x| config.separation * x).collect())
        .collect();
    let truth = DriftRecord {
        kind: config.drift_kind,
        real_mean,
        base,
        velocity,
        period: config.drift_period,
        class_std: config.class_std,
        offsets,
    };

    let n = config.samples_per_event;
    let n_fake = (n as f64 * config.fake_fraction).round() as usize;
    let mut samples = Vec::with_capacity(n * k_total);
    for k in 1..=k_total {
        let mut rng = derived_rng(config.seed, &[k as u64]);
        let future = k > config.num_events;
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_fake)).collect();
        labels.shuffle(&mut rng);
        let fake_mean = truth.fake_mean(k);
        let real_mean = truth.real_mean_at(k);
        let mut seen = [0usize; 2];
        let class_total = [n - n_fake, n_fake];
        for &y in &labels {
            let mean = if y == 1 { &fake_mean } else { &real_mean };
            let x: Vec<f64> = mean
                .iter()
                .map(|m| m + config.class_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let c = y as usize;
            let n_test = (class_total[c] as f64 * config.test_fraction).round() as usize;
            let split = if future || seen[c] < n_test {
                Split::Test
            } else {
                Split::Train
            };
            seen[c] += 1;
            samples.push(Sample {
                e: k,
                t: k,
                y,
                xt: x[..config.d_t].to_vec(),
                xv: x[config.d_t..].to_vec(),
                split,
            });
        }
    }
    let manifest = StreamManifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        d_t: config.d_t,
        d_v: config.d_v,
        num_events: config.num_events,
        future: config.include_future,
        counts: vec![n; k_total],
        ground_truth: Some(truth),
        seed: Some(config.seed),
    };
    let stream = Stream { manifest, samples };
    stream.validate()?;
    Ok(stream)
}
