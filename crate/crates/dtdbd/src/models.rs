//! Encoders, classification heads, initialization, checkpoints.
//!
//! Two encoder families cover the experiments: a text-CNN (per kernel
//! width: 1-D conv, ReLU, max-over-time, then concatenation) and a ReLU
//! MLP. Every model owns a linear label head and a linear domain head;
//! models with `domain_embed_dim > 0` additionally learn a per-domain
//! embedding that is concatenated to the encoder output before the label
//! head (the accuracy-oriented teacher uses this to consume domain
//! identity explicitly).
//!
//! Parameters live in a name -> tensor map so optimizers, checkpoints,
//! and gradient maps all speak the same keys.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Layout};
use crate::diffcore::{Tape, Tensor, Var};
use crate::ioutil::{read_to_string, write_atomic};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Conv,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Total per-sample feature length. The conv path views it as
    /// `conv_seq_len` tokens of `embed_dim / conv_seq_len` dimensions.
    pub embed_dim: usize,
    pub kernel_widths: Vec<usize>,
    pub channels_per_kernel: usize,
    pub conv_seq_len: usize,
    pub mlp_hidden: Vec<usize>,
    /// Width of the learned domain embedding fed to the label head;
    /// 0 disables it.
    pub domain_embed_dim: usize,
}

impl EncoderConfig {
    /// The student: four kernel widths at 64 channels, 256-dim features.
    pub fn student_conv() -> Self {
        Self {
            kind: EncoderKind::Conv,
            embed_dim: 32,
            kernel_widths: vec![1, 2, 3, 5],
            channels_per_kernel: 64,
            conv_seq_len: 8,
            mlp_hidden: vec![],
            domain_embed_dim: 0,
        }
    }

    /// The accuracy-oriented teacher: the student's architecture with
    /// doubled channels plus a 32-dim learned domain embedding.
    pub fn clean_teacher_conv() -> Self {
        Self {
            channels_per_kernel: 128,
            domain_embed_dim: 32,
            ..Self::student_conv()
        }
    }

    pub fn mlp(embed_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            embed_dim,
            kernel_widths: vec![],
            channels_per_kernel: 0,
            conv_seq_len: 0,
            mlp_hidden: vec![384],
            domain_embed_dim: 0,
        }
    }

    /// Encoder output width (before any domain embedding).
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Conv => self.kernel_widths.len() * self.channels_per_kernel,
            EncoderKind::Mlp => *self.mlp_hidden.last().unwrap_or(&0),
        }
    }

    /// Per-token width on the conv path.
    pub fn token_dim(&self) -> usize {
        self.embed_dim / self.conv_seq_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        match self.kind {
            EncoderKind::Conv => {
                if self.kernel_widths.is_empty() {
                    return Err(Error::Config("conv encoder needs kernel widths".into()));
                }
                let mut seen = self.kernel_widths.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != self.kernel_widths.len() {
                    return Err(Error::Config("kernel widths must be distinct".into()));
                }
                if self.channels_per_kernel == 0 {
                    return Err(Error::Config("channels_per_kernel must be positive".into()));
                }
                if self.conv_seq_len == 0 || self.embed_dim % self.conv_seq_len != 0 {
                    return Err(Error::Config(format!(
                        "conv_seq_len {} must divide embed_dim {}",
                        self.conv_seq_len, self.embed_dim
                    )));
                }
                if let Some(&w) = self.kernel_widths.iter().find(|&&w| w == 0) {
                    return Err(Error::Config(format!("kernel width {w} must be positive")));
                }
                if let Some(&w) =
                    self.kernel_widths.iter().find(|&&w| w > self.conv_seq_len)
                {
                    return Err(Error::Config(format!(
                        "kernel width {w} exceeds sequence length {}",
                        self.conv_seq_len
                    )));
                }
            }
            EncoderKind::Mlp => {
                if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
                    return Err(Error::Config(
                        "mlp encoder needs non-empty, positive hidden sizes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderConfig,
    pub num_domains: usize,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Every tensor the model owns, with its shape. Initialization,
/// checkpoint validation, and optimizer state all derive from this map.
pub fn expected_shapes(
    cfg: &EncoderConfig,
    num_domains: usize,
) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    match cfg.kind {
        EncoderKind::Conv => {
            let d = cfg.token_dim();
            for &w in &cfg.kernel_widths {
                shapes.insert(
                    format!("encoder.conv_w{w}.weight"),
                    vec![cfg.channels_per_kernel, w, d],
                );
                shapes.insert(format!("encoder.conv_w{w}.bias"), vec![cfg.channels_per_kernel]);
            }
        }
        EncoderKind::Mlp => {
            let mut prev = cfg.embed_dim;
            for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
                shapes.insert(format!("encoder.fc{i}.weight"), vec![prev, h]);
                shapes.insert(format!("encoder.fc{i}.bias"), vec![h]);
                prev = h;
            }
        }
    }
    let f = cfg.feature_dim();
    shapes.insert("label_head.weight".into(), vec![f + cfg.domain_embed_dim, 2]);
    shapes.insert("label_head.bias".into(), vec![2]);
    shapes.insert("domain_head.weight".into(), vec![f, num_domains]);
    shapes.insert("domain_head.bias".into(), vec![num_domains]);
    if cfg.domain_embed_dim > 0 {
        shapes.insert("domain_embed.table".into(), vec![num_domains, cfg.domain_embed_dim]);
    }
    shapes
}

/// Xavier-uniform fan pair for a parameter shape. Conv kernels count the
/// receptive field on both sides; bias and embedding rows use their two
/// axes directly.
fn fans(shape: &[usize]) -> (f64, f64) {
    match shape.len() {
        2 => (shape[0] as f64, shape[1] as f64),
        3 => {
            let (c, w, d) = (shape[0] as f64, shape[1] as f64, shape[2] as f64);
            (w * d, c * w)
        }
        _ => unreachable!("weights are rank 2 or 3"),
    }
}

/// Deterministic initialization: weights are Xavier-uniform draws from a
/// seeded stream (in name order), biases are zero.
pub fn init_params(cfg: &EncoderConfig, num_domains: usize, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    if num_domains < 2 {
        return Err(Error::Config(format!(
            "need at least 2 domains, got {num_domains}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in expected_shapes(cfg, num_domains) {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let (fan_in, fan_out) = fans(&shape);
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { encoder: cfg.clone(), num_domains, seed, tensors })
}

/// Tape handles for one registration of a model's tensors.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Registers every model tensor on the tape. Trainable bindings receive
/// gradients under their tensor names; frozen bindings are constants and
/// stay gradient-free (that is what keeps teachers frozen during
/// distillation).
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Binding {
    let mut vars = BTreeMap::new();
    for (name, tensor) in &params.tensors {
        let v = if trainable {
            tape.param(name, tensor.clone())
        } else {
            tape.constant(tensor.clone())
        };
        vars.insert(name.clone(), v);
    }
    Binding { vars }
}

pub enum Head {
    Label,
    Domain,
}

impl Head {
    fn prefix(&self) -> &'static str {
        match self {
            Head::Label => "label_head",
            Head::Domain => "domain_head",
        }
    }
}

/// Batch forward through the encoder.
pub struct Encoded {
    /// Per-sample feature vectors, length `feature_dim`.
    pub rows: Vec<Var>,
    /// The same features stacked to B x feature_dim.
    pub matrix: Var,
}

fn sample_matrix(cfg: &EncoderConfig, ds: &Dataset, sample: usize) -> Result<Tensor> {
    let s = &ds.samples[sample];
    match (cfg.kind, ds.layout) {
        (EncoderKind::Conv, Layout::Vector) => {
            if ds.embed_dim != cfg.embed_dim {
                return Err(Error::Input(format!(
                    "dataset embed_dim {} does not match encoder embed_dim {}",
                    ds.embed_dim, cfg.embed_dim
                )));
            }
            Tensor::new(vec![cfg.conv_seq_len, cfg.token_dim()], s.features.clone())
        }
        (EncoderKind::Conv, Layout::Matrix { seq_len }) => {
            if seq_len != cfg.conv_seq_len || ds.feature_len() != cfg.embed_dim {
                return Err(Error::Input(format!(
                    "dataset layout {seq_len}x{} does not match encoder {}x{}",
                    ds.embed_dim,
                    cfg.conv_seq_len,
                    cfg.token_dim()
                )));
            }
            Tensor::new(vec![seq_len, ds.embed_dim], s.features.clone())
        }
        (EncoderKind::Mlp, Layout::Vector) => {
            if ds.embed_dim != cfg.embed_dim {
                return Err(Error::Input(format!(
                    "dataset embed_dim {} does not match encoder embed_dim {}",
                    ds.embed_dim, cfg.embed_dim
                )));
            }
            Tensor::new(vec![1, cfg.embed_dim], s.features.clone())
        }
        (EncoderKind::Mlp, Layout::Matrix { .. }) => Err(Error::Input(
            "mlp encoder expects vector-layout features".into(),
        )),
    }
}

fn encode_sample(
    tape: &mut Tape,
    b: &Binding,
    cfg: &EncoderConfig,
    input: Tensor,
) -> Result<Var> {
    let x = tape.constant(input);
    match cfg.kind {
        EncoderKind::Conv => {
            let mut pooled = Vec::with_capacity(cfg.kernel_widths.len());
            for &w in &cfg.kernel_widths {
                let weight = b.var(&format!("encoder.conv_w{w}.weight"));
                let bias = b.var(&format!("encoder.conv_w{w}.bias"));
                let conv = tape.conv1d(x, weight, bias);
                let act = tape.relu(conv);
                pooled.push(tape.max_over_time(act));
            }
            Ok(tape.concat_vec(&pooled))
        }
        EncoderKind::Mlp => {
            let mut h = x; // 1 x E
            for i in 0..cfg.mlp_hidden.len() {
                let weight = b.var(&format!("encoder.fc{i}.weight"));
                let bias = b.var(&format!("encoder.fc{i}.bias"));
                let lin = tape.matmul(h, weight);
                let biased = tape.add_row(lin, bias);
                h = tape.relu(biased);
            }
            let f = tape.value(h).len();
            Ok(tape.reshape(h, vec![f]))
        }
    }
}

/// Encodes `idx` samples and stacks their features.
pub fn encode_batch(
    tape: &mut Tape,
    b: &Binding,
    cfg: &EncoderConfig,
    ds: &Dataset,
    idx: &[usize],
) -> Result<Encoded> {
    if idx.is_empty() {
        return Err(Error::Input("encode_batch needs at least one sample".into()));
    }
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let input = sample_matrix(cfg, ds, i)?;
        rows.push(encode_sample(tape, b, cfg, input)?);
    }
    let matrix = tape.stack_rows(&rows);
    Ok(Encoded { rows, matrix })
}

/// Concatenates each feature row with its domain's learned embedding and
/// restacks; requires `domain_embed_dim > 0`.
pub fn with_domain_embedding(
    tape: &mut Tape,
    b: &Binding,
    cfg: &EncoderConfig,
    encoded: &Encoded,
    domains: &[usize],
) -> Result<Var> {
    if cfg.domain_embed_dim == 0 {
        return Err(Error::Contract(
            "with_domain_embedding called on a model without a domain embedding".into(),
        ));
    }
    if domains.len() != encoded.rows.len() {
        return Err(Error::Input(format!(
            "{} feature rows but {} domain ids",
            encoded.rows.len(),
            domains.len()
        )));
    }
    let table = b.var("domain_embed.table");
    let mut rows = Vec::with_capacity(encoded.rows.len());
    for (&row, &d) in encoded.rows.iter().zip(domains) {
        let emb = tape.select_row(table, d);
        rows.push(tape.concat_vec(&[row, emb]));
    }
    Ok(tape.stack_rows(&rows))
}

/// Linear head on a B x D input: `input . W + bias`, one logit column per
/// class (label head) or per domain (domain head).
pub fn classify(tape: &mut Tape, b: &Binding, head: Head, input: Var) -> Result<Var> {
    let prefix = head.prefix();
    let weight = b.var(&format!("{prefix}.weight"));
    let bias = b.var(&format!("{prefix}.bias"));
    let (in_cols, _) = tape.value(weight).dims2();
    let cols = tape.value(input).dims2().1;
    if cols != in_cols {
        return Err(Error::Input(format!(
            "{prefix} expects {in_cols} input columns, got {cols}"
        )));
    }
    let lin = tape.matmul(input, weight);
    Ok(tape.add_row(lin, bias))
}

/// Full label forward for evaluation: encoder, optional domain embedding,
/// label head. Returns the B x 2 logits tensor.
pub fn label_logits_values(params: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, false);
    let enc = encode_batch(&mut tape, &b, &params.encoder, ds, idx)?;
    let input = if params.encoder.domain_embed_dim > 0 {
        let domains: Vec<usize> = idx.iter().map(|&i| ds.samples[i].domain).collect();
        with_domain_embedding(&mut tape, &b, &params.encoder, &enc, &domains)?
    } else {
        enc.matrix
    };
    let logits = classify(&mut tape, &b, Head::Label, input)?;
    Ok(tape.value(logits).clone())
}

/// Encoder features without gradient tracking, for teacher-side use. The
/// same kernels run as in a trainable forward, so a teacher sharing the
/// student's parameters would produce bit-identical features.
pub fn encoder_features_values(
    params: &ModelParams,
    ds: &Dataset,
    idx: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params, false);
    let enc = encode_batch(&mut tape, &b, &params.encoder, ds, idx)?;
    Ok(tape.value(enc.matrix).clone())
}

/// Binds only the domain head, as constants. Loss paths that must read
/// the head without training it (the information-entropy route) classify
/// through this binding while the main binding stays trainable.
pub fn bind_domain_head_const(tape: &mut Tape, params: &ModelParams) -> Binding {
    let mut vars = BTreeMap::new();
    for name in ["domain_head.weight", "domain_head.bias"] {
        let v = tape.constant(params.tensors[name].clone());
        vars.insert(name.to_string(), v);
    }
    Binding { vars }
}

/// Hard label predictions (1 = fake). Ties break toward 0 so evaluation
/// is deterministic.
pub fn predict(params: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<Vec<u8>> {
    let logits = label_logits_values(params, ds, idx)?;
    let (b, c) = logits.dims2();
    debug_assert_eq!(c, 2);
    let mut preds = Vec::with_capacity(b);
    for r in 0..b {
        let row = &logits.data()[r * c..(r + 1) * c];
        preds.push(u8::from(row[1] > row[0]));
    }
    Ok(preds)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    encoder_config: EncoderConfig,
    format_version: u32,
    num_domains: usize,
    params: BTreeMap<String, TensorEntry>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    data: Vec<f64>,
    shape: Vec<usize>,
}

/// Writes the checkpoint JSON: sorted keys, full-precision numbers,
/// atomic replace.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        encoder_config: params.encoder.clone(),
        format_version: CHECKPOINT_VERSION,
        num_domains: params.num_domains,
        params: params
            .tensors
            .iter()
            .map(|(name, t)| {
                (name.clone(), TensorEntry { data: t.data().to_vec(), shape: t.shape().to_vec() })
            })
            .collect(),
        seed: params.seed,
    };
    // Through Value so every map serializes with sorted keys.
    let value = serde_json::to_value(&file)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Loads and fully validates a checkpoint: version, config consistency,
/// exact tensor-name set, shapes, finite values.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    file.encoder_config.validate()?;
    let expected = expected_shapes(&file.encoder_config, file.num_domains);
    let mut tensors = BTreeMap::new();
    for (name, shape) in &expected {
        let entry = file.params.get(name).ok_or_else(|| {
            Error::Input(format!("checkpoint missing tensor `{name}`"))
        })?;
        if &entry.shape != shape {
            return Err(Error::Input(format!(
                "tensor `{name}`: expected shape {:?}, got {:?}",
                shape, entry.shape
            )));
        }
        let t = Tensor::new(entry.shape.clone(), entry.data.clone())
            .map_err(|e| Error::Input(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name.clone(), t);
    }
    if let Some(extra) = file.params.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::Input(format!("checkpoint has unexpected tensor `{extra}`")));
    }
    Ok(ModelParams {
        encoder: file.encoder_config,
        num_domains: file.num_domains,
        seed: file.seed,
        tensors,
    })
}

/// Order-independent content hash of every parameter's bits; two models
/// compare equal iff training left them untouched.
pub fn params_checksum(params: &ModelParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    for (name, t) in &params.tensors {
        for b in name.as_bytes() {
            mix(*b as u64);
        }
        for &v in t.data() {
            mix(v.to_bits());
        }
    }
    h
}
