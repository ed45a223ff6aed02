//! Three-modality synthetic data with known latent factors, JSONL ingestion,
//! and the temporal-shuffle intervention.
//!
//! Every synthetic sample carries a latent burst amplitude `a` shared by short
//! bursts in each modality, and a static context `c` shared by all remaining
//! tokens. The label is `clamp(w_t·a + w_s·c, -3, 3)`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

/// Bumped whenever the sampling procedure changes.
pub const GENERATOR_VERSION: u32 = 1;

const MIXING_STREAM: u64 = u64::MAX;
const SHUFFLE_KEY: u64 = 0x5348_5546_464c_4531;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    L,
    V,
    A,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::L, Modality::V, Modality::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "L" => Some(Modality::L),
            "V" => Some(Modality::V),
            "A" => Some(Modality::A),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::L => "L",
            Modality::V => "V",
            Modality::A => "A",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: Modality,
    /// `[T_m × d_in_m]`
    pub tokens: Tensor,
}

impl ModalitySequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub burst_amplitude: f64,
    /// Burst token indices, one list per modality in L, V, A order.
    pub burst_positions: [Vec<usize>; 3],
    pub context: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub sequences: [ModalitySequence; 3],
    pub label: f64,
    pub latent: Option<Latent>,
}

impl Sample {
    pub fn sequence(&self, m: Modality) -> &ModalitySequence {
        &self.sequences[m.index()]
    }

    /// `(T_L, T_V, T_A)`; samples with equal signatures can be batched.
    pub fn signature(&self) -> [usize; 3] {
        [self.sequences[0].len(), self.sequences[1].len(), self.sequences[2].len()]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub t_l: usize,
    pub t_v: usize,
    pub t_a: usize,
    pub d_in_l: usize,
    pub d_in_v: usize,
    pub d_in_a: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub w_t: f64,
    pub w_s: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            t_l: 20,
            t_v: 30,
            t_a: 40,
            d_in_l: 8,
            d_in_v: 8,
            d_in_a: 8,
            n_train: 800,
            n_val: 100,
            n_test: 200,
            noise_sigma: 0.1,
            w_t: 2.0,
            w_s: 1.0,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn lengths(&self) -> [usize; 3] {
        [self.t_l, self.t_v, self.t_a]
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.d_in_l, self.d_in_v, self.d_in_a]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths().iter().any(|&t| t < 2) {
            return Err(Error::config("sequence lengths t_l, t_v, t_a must be at least 2"));
        }
        if self.widths().contains(&0) {
            return Err(Error::config("feature widths must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("n_train, n_val and n_test must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.w_t.is_finite() || !self.w_s.is_finite() {
            return Err(Error::config("noise_sigma must be non-negative and weights finite"));
        }
        Ok(())
    }

    pub fn label(&self, burst_amplitude: f64, context: f64) -> f64 {
        (self.w_t * burst_amplitude + self.w_s * context).clamp(LABEL_MIN, LABEL_MAX)
    }
}

/// Per-modality burst direction and context direction, orthonormal.
struct Mixing {
    burst: [Vec<f64>; 3],
    context: [Vec<f64>; 3],
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn mixing(cfg: &GeneratorConfig, seed: u64) -> Mixing {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MIXING_STREAM);
    let mut draw = |d: usize| -> (Vec<f64>, Vec<f64>) {
        let mut b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        unit(&mut b);
        let mut c: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if d > 1 {
            let dot: f64 = b.iter().zip(&c).map(|(x, y)| x * y).sum();
            c.iter_mut().zip(&b).for_each(|(x, y)| *x -= dot * y);
        }
        unit(&mut c);
        (b, c)
    };
    let w = cfg.widths();
    let (b0, c0) = draw(w[0]);
    let (b1, c1) = draw(w[1]);
    let (b2, c2) = draw(w[2]);
    Mixing {
        burst: [b0, b1, b2],
        context: [c0, c1, c2],
    }
}

fn sample_one(cfg: &GeneratorConfig, mix: &Mixing, seed: u64, split: u64, index: usize, id: String) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 40) | index as u64);
    let context: f64 = rng.random_range(-1.0..1.0);
    let amplitude: f64 = rng.random_range(-2.0..2.0);
    let lengths = cfg.lengths();
    let widths = cfg.widths();
    let mut positions: [Vec<usize>; 3] = Default::default();
    let sequences = Modality::ALL.map(|m| {
        let (t, d) = (lengths[m.index()], widths[m.index()]);
        let k = rng.random_range(1..=3usize).min(t);
        let start = rng.random_range(0..=t - k);
        let burst: Vec<usize> = (start..start + k).collect();
        let mut data = Vec::with_capacity(t * d);
        for step in 0..t {
            let (scale, dir) = if burst.contains(&step) {
                (amplitude, &mix.burst[m.index()])
            } else {
                (context, &mix.context[m.index()])
            };
            for &x in dir.iter() {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(scale * x + cfg.noise_sigma * eps);
            }
        }
        positions[m.index()] = burst;
        ModalitySequence {
            modality: m,
            tokens: Tensor::new(&[t, d], data).expect("generator shape"),
        }
    });
    Sample {
        id,
        sequences,
        label: cfg.label(amplitude, context),
        latent: Some(Latent {
            burst_amplitude: amplitude,
            burst_positions: positions,
            context,
        }),
    }
}

/// Deterministic in `(cfg, seed)`: each sample draws from its own ChaCha
/// stream, so neither generation order nor thread count affects the data.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mix = mixing(cfg, seed);
    let make = |split: u64, name: &str, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| sample_one(cfg, &mix, seed, split, i, format!("{name}-{i:06}")))
            .collect()
    };
    Ok(DatasetSplit {
        train: make(1, "train", cfg.n_train),
        val: make(2, "val", cfg.n_val),
        test: make(3, "test", cfg.n_test),
        seed,
    })
}

/// Uniform random permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Permutes each modality's token rows independently. Labels, latents and
/// the multiset of rows per modality are unchanged.
pub fn apply_temporal_shuffle(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_KEY);
    let mut out = sample.clone();
    for seq in out.sequences.iter_mut() {
        rng.set_stream(seq.modality.index() as u64);
        let perm = permutation(seq.len(), &mut rng);
        seq.tokens = seq.tokens.select_rows(&perm);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    id: String,
    label: f64,
    #[serde(rename = "L")]
    l: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn sample_to_json(s: &Sample) -> String {
    let js = JsonSample {
        id: s.id.clone(),
        label: s.label,
        l: rows_of(&s.sequences[0].tokens),
        v: rows_of(&s.sequences[1].tokens),
        a: rows_of(&s.sequences[2].tokens),
    };
    serde_json::to_string(&js).expect("sample serializes")
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(out, "{}", sample_to_json(s))?;
    }
    out.flush()?;
    Ok(())
}

fn parse_line(line: &str, lineno: usize) -> Result<Sample> {
    let parse_err = |msg: String| Error::Parse { line: lineno, msg };
    let js: JsonSample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    if !js.label.is_finite() {
        return Err(parse_err("label must be finite".into()));
    }
    let build = |m: Modality, rows: Vec<Vec<f64>>| -> Result<ModalitySequence> {
        if rows.len() < 2 {
            return Err(parse_err(format!("modality {m} needs at least 2 tokens, got {}", rows.len())));
        }
        let width = rows[0].len();
        if width == 0 {
            return Err(parse_err(format!("modality {m} has empty token vectors")));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != width) {
            return Err(parse_err(format!(
                "modality {m} token {bad} has width {}, expected {width}",
                rows[bad].len()
            )));
        }
        Ok(ModalitySequence {
            modality: m,
            tokens: Tensor::from_rows(&rows)?,
        })
    };
    Ok(Sample {
        id: js.id,
        label: js.label,
        sequences: [build(Modality::L, js.l)?, build(Modality::V, js.v)?, build(Modality::A, js.a)?],
        latent: None,
    })
}

/// Parses one JSON object per line (`id`, `label`, `L`, `V`, `A`). Blank
/// lines are skipped; sequence lengths may differ between samples.
pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Reads `train.jsonl`, `val.jsonl` and `test.jsonl` from a directory.
pub fn load_split_dir(dir: &Path) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: load_jsonl(&dir.join("train.jsonl"))?,
        val: load_jsonl(&dir.join("val.jsonl"))?,
        test: load_jsonl(&dir.join("test.jsonl"))?,
        seed: 0,
    })
}
