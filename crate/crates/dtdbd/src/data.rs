//! Synthetic multi-domain datasets, JSONL persistence, splits, batching.
//!
//! Generated features have three blocks: `signal_dims` coordinates whose
//! mean depends on the label (the legitimate signal), `domain_dims`
//! coordinates carrying a one-hot-style domain pattern (a shortcut that
//! correlates with the label only through per-domain fake rates), and
//! noise. A model that leans on the shortcut inherits each domain's label
//! prior and shows up as biased under FPED/FNED; zeroing `domain_dims`
//! removes the shortcut, which is what makes de-biasing measurable.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ioutil::{read_to_string, write_atomic};
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "dtdbd-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// One embedding vector of length `embed_dim` per sample.
    Vector,
    /// `seq_len` rows of `embed_dim` columns per sample, row-major.
    Matrix { seq_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsSample {
    pub id: String,
    pub domain: usize,
    /// 1 = fake, 0 = real.
    pub label: u8,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_domains: usize,
    pub embed_dim: usize,
    pub layout: Layout,
    pub samples: Vec<NewsSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature length every sample must have under this dataset's layout.
    pub fn feature_len(&self) -> usize {
        match self.layout {
            Layout::Vector => self.embed_dim,
            Layout::Matrix { seq_len } => seq_len * self.embed_dim,
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.domain).collect()
    }
}

/// Mix proportions for one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    /// Fraction of the corpus drawn from this domain.
    pub share: f64,
    /// Fraction of this domain's samples labeled fake.
    pub fake_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainProfile>,
    pub total_n: usize,
    pub embed_dim: usize,
    /// Leading coordinates whose mean is +mu/2 for fake, -mu/2 for real.
    pub signal_dims: usize,
    /// Next block of coordinates carrying the domain pattern. Zero turns
    /// the shortcut off (those coordinates become pure noise).
    pub domain_dims: usize,
    /// Class separation mu.
    pub signal_separation: f64,
    /// Noise scale sigma applied to every coordinate.
    pub noise_sigma: f64,
    pub seed: u64,
    pub layout: Layout,
}

/// The nine-domain mix profile used throughout the examples and the
/// experiment harness: shares from 2.6% up to 29.2%, fake rates from
/// 27.4% up to 76.1%, so domain identity carries real label information.
pub const NINE_DOMAIN_SHARES: [f64; 9] =
    [0.026, 0.038, 0.053, 0.085, 0.093, 0.110, 0.145, 0.158, 0.292];
pub const NINE_DOMAIN_FAKE_RATES: [f64; 9] =
    [0.394, 0.647, 0.505, 0.761, 0.640, 0.515, 0.274, 0.305, 0.551];

impl SyntheticSpec {
    /// The standard nine-domain benchmark profile at a given size.
    pub fn nine_domains(total_n: usize, seed: u64) -> Self {
        let domains = NINE_DOMAIN_SHARES
            .iter()
            .zip(NINE_DOMAIN_FAKE_RATES.iter())
            .map(|(&share, &fake_rate)| DomainProfile { share, fake_rate })
            .collect();
        Self {
            domains,
            total_n,
            embed_dim: 32,
            signal_dims: 8,
            domain_dims: 8,
            signal_separation: 1.0,
            noise_sigma: 1.0,
            seed,
            layout: Layout::Vector,
        }
    }

    /// The same corpus with the domain shortcut removed: the pattern block
    /// becomes indistinguishable from noise.
    pub fn without_domain_signal(mut self) -> Self {
        self.domain_dims = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.domains.len();
        if k == 0 {
            return Err(Error::Config("synthetic spec needs at least one domain".into()));
        }
        let share_sum: f64 = self.domains.iter().map(|d| d.share).sum();
        if (share_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "domain shares must sum to 1, got {share_sum}"
            )));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !(0.0..=1.0).contains(&d.fake_rate) {
                return Err(Error::Config(format!(
                    "domain {i}: fake rate {} outside [0, 1]",
                    d.fake_rate
                )));
            }
            if d.share < 0.0 {
                return Err(Error::Config(format!("domain {i}: negative share {}", d.share)));
            }
        }
        if self.embed_dim < self.signal_dims + self.domain_dims {
            return Err(Error::Config(format!(
                "embed_dim {} too small for {} signal + {} domain coordinates",
                self.embed_dim, self.signal_dims, self.domain_dims
            )));
        }
        if self.total_n < 10 * k {
            return Err(Error::Config(format!(
                "total_n {} too small for {k} domains (need at least {})",
                self.total_n,
                10 * k
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if let Layout::Matrix { seq_len } = self.layout {
            if seq_len == 0 || self.embed_dim % seq_len != 0 {
                return Err(Error::Config(format!(
                    "matrix layout needs seq_len dividing embed_dim {}, got {seq_len}",
                    self.embed_dim
                )));
            }
        }
        Ok(())
    }
}

/// Apportions `total` into integer counts proportional to `fractions`
/// (largest-remainder rounding: floors first, then one extra unit to the
/// largest remainders until the counts sum to `total`).
pub fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(fractions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(fractions.len());
    let mut assigned = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        let exact = f * total as f64;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((i, exact - floor as f64));
    }
    // Stable order: by descending remainder, index breaking ties.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = total.saturating_sub(assigned);
    for (i, _) in remainders {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// One-hot-style domain pattern over `domain_dims` coordinates: domain d
/// puts +1 at position d; once positions run out it wraps with sign -1,
/// so up to 2 * domain_dims domains stay distinguishable.
fn domain_pattern(domain: usize, domain_dims: usize) -> Vec<f64> {
    let mut p = vec![0.0; domain_dims];
    if domain_dims > 0 {
        let pos = domain % domain_dims;
        p[pos] = if domain < domain_dims { 1.0 } else { -1.0 };
    }
    p
}

/// Box-Muller standard normal; one uniform pair per draw keeps the stream
/// layout independent of how many draws preceded it.
fn normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    mean + sigma * (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Generates the corpus described by `spec`. Deterministic: the same spec
/// (seed included) reproduces byte-identical samples. Per-domain sizes
/// and per-domain fake counts come from largest-remainder rounding, so
/// empirical rates match the spec as closely as integers allow.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let shares: Vec<f64> = spec.domains.iter().map(|d| d.share).collect();
    let sizes = largest_remainder(&shares, spec.total_n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.total_n);
    let mu = spec.signal_separation;
    let sigma = spec.noise_sigma;
    for (d, (&n_d, profile)) in sizes.iter().zip(&spec.domains).enumerate() {
        let fakes = largest_remainder(&[profile.fake_rate, 1.0 - profile.fake_rate], n_d)[0];
        let pattern = domain_pattern(d, spec.domain_dims);
        for i in 0..n_d {
            let label = u8::from(i < fakes);
            let center = if label == 1 { mu / 2.0 } else { -mu / 2.0 };
            let mut features = Vec::with_capacity(spec.embed_dim);
            for _ in 0..spec.signal_dims {
                features.push(normal(&mut rng, center, sigma));
            }
            for &p in &pattern {
                features.push(normal(&mut rng, p, sigma));
            }
            while features.len() < spec.embed_dim {
                features.push(normal(&mut rng, 0.0, sigma));
            }
            samples.push(NewsSample {
                id: format!("s{:06}", samples.len()),
                domain: d,
                label,
                features,
            });
        }
    }
    let (embed_dim, layout) = match spec.layout {
        Layout::Vector => (spec.embed_dim, Layout::Vector),
        Layout::Matrix { seq_len } => {
            (spec.embed_dim / seq_len, Layout::Matrix { seq_len })
        }
    };
    Ok(Dataset { num_domains: spec.domains.len(), embed_dim, layout, samples })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    num_domains: usize,
    embed_dim: usize,
    layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
}

/// Writes one JSON header line followed by one JSON sample per line.
/// The write is atomic.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        num_domains: dataset.num_domains,
        embed_dim: dataset.embed_dim,
        layout: match dataset.layout {
            Layout::Vector => "vector".to_string(),
            Layout::Matrix { .. } => "matrix".to_string(),
        },
        seq_len: match dataset.layout {
            Layout::Vector => None,
            Layout::Matrix { seq_len } => Some(seq_len),
        },
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in &dataset.samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a JSONL dataset, validating the header and every row. Errors
/// name the 1-based line that failed. A header with no rows yields an
/// empty dataset.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::data(Some(1), "missing dataset header line"))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| Error::data(Some(1), format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(Error::data(
            Some(1),
            format!("unknown format `{}` (expected `{FORMAT_NAME}`)", header.format),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::data(
            Some(1),
            format!("unsupported version {} (expected {FORMAT_VERSION})", header.version),
        ));
    }
    let layout = match (header.layout.as_str(), header.seq_len) {
        ("vector", None) => Layout::Vector,
        ("matrix", Some(l)) if l > 0 => Layout::Matrix { seq_len: l },
        ("matrix", _) => {
            return Err(Error::data(Some(1), "matrix layout requires a positive seq_len"))
        }
        (other, _) => {
            return Err(Error::data(Some(1), format!("unknown layout `{other}`")))
        }
    };
    let mut dataset = Dataset {
        num_domains: header.num_domains,
        embed_dim: header.embed_dim,
        layout,
        samples: Vec::new(),
    };
    let expect_len = dataset.feature_len();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: NewsSample = serde_json::from_str(line)
            .map_err(|e| Error::data(Some(line_no), format!("bad sample row: {e}")))?;
        if sample.label > 1 {
            return Err(Error::data(
                Some(line_no),
                format!("label must be 0 or 1, got {}", sample.label),
            ));
        }
        if sample.domain >= dataset.num_domains {
            return Err(Error::data(
                Some(line_no),
                format!(
                    "domain id {} out of range for {} domains",
                    sample.domain, dataset.num_domains
                ),
            ));
        }
        if sample.features.len() != expect_len {
            return Err(Error::data(
                Some(line_no),
                format!("expected {} features, got {}", expect_len, sample.features.len()),
            ));
        }
        if let Some(bad) = sample.features.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(Some(line_no), format!("non-finite feature {bad}")));
        }
        dataset.samples.push(sample);
    }
    Ok(dataset)
}

#[derive(Debug)]
pub struct SplitOutput {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Stratified split by (domain, label): each cell is shuffled with a seed
/// derived from `seed` and apportioned by largest remainder, so every
/// split sees each domain and label at close to its corpus proportion.
/// The three parts are disjoint and their union is the input.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitOutput> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
    }
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let mut cells: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        cells.entry((s.domain, s.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut warnings = Vec::new();
    for ((domain, label), mut idx) in cells {
        idx.shuffle(&mut rng);
        if idx.len() < 3 {
            warnings.push(format!(
                "cell (domain {domain}, label {label}) has only {} samples; \
                 some splits will not see it",
                idx.len()
            ));
        }
        let counts = largest_remainder(&ratios, idx.len());
        let mut offset = 0;
        for (p, &c) in counts.iter().enumerate() {
            parts[p].extend_from_slice(&idx[offset..offset + c]);
            offset += c;
        }
    }
    let build = |indices: &mut Vec<usize>| -> Dataset {
        indices.sort_unstable();
        Dataset {
            num_domains: dataset.num_domains,
            embed_dim: dataset.embed_dim,
            layout: dataset.layout,
            samples: indices.iter().map(|&i| dataset.samples[i].clone()).collect(),
        }
    };
    let [mut a, mut b, mut c] = parts;
    Ok(SplitOutput {
        train: build(&mut a),
        val: build(&mut b),
        test: build(&mut c),
        warnings,
    })
}

/// Index batches for one epoch: a seeded shuffle of `0..n` chunked into
/// `batch_size` pieces. A trailing chunk of one sample is merged into the
/// previous batch (pairwise losses need at least two rows). The same
/// (seed, epoch) always produces the same batches.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    idx.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    Ok(out)
}
