//! The scoring network.
//!
//! Every field position gets its token embedding (the mask row for masked
//! fields) plus a field embedding. A stack of pre-norm bidirectional
//! self-attention blocks mixes the positions; the output at position `k` is
//! the context used to score candidate tokens of field `k` by cosine
//! similarity against a separate target-embedding table. The network takes
//! no time or noise-level input.

mod checkpoint;

use crate::data::DatasetSchema;
use crate::error::{Error, NumericError};
use crate::numeric::{xavier_init, Graph, ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadMode};

type Res<T> = Result<T, NumericError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub field_names: Vec<String>,
    /// Real-token vocabulary per field, label last.
    pub vocab_sizes: Vec<usize>,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Divides cosine logits.
    pub temperature: f64,
    /// Score candidates against the input table instead of a separate one.
    pub tied_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn for_schema(schema: &DatasetSchema) -> Self {
        Self {
            field_names: schema.fields().iter().map(|f| f.name.clone()).collect(),
            vocab_sizes: schema.vocab_sizes(),
            dim: 32,
            blocks: 2,
            heads: 2,
            ff_width: 64,
            temperature: 0.1,
            tied_embeddings: false,
            seed: 0,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn label_index(&self) -> usize {
        self.vocab_sizes.len() - 1
    }

    pub fn validate(&self) -> Result<(), Error> {
        let fail = |m: String| Err(Error::Model(m));
        if self.vocab_sizes.len() < 2 || self.field_names.len() != self.vocab_sizes.len() {
            return fail(format!(
                "need matching names and vocab sizes for at least one feature plus the label, got {} and {}",
                self.field_names.len(),
                self.vocab_sizes.len()
            ));
        }
        if self.vocab_sizes.iter().any(|&v| v == 0) {
            return fail("every field needs a nonempty vocabulary".into());
        }
        if self.vocab_sizes[self.label_index()] != 2 {
            return fail("label field must have exactly two tokens".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.blocks > 0 && self.ff_width == 0 {
            return fail("feedforward width must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    /// Identifies the parameter layout: field names, vocabularies, widths.
    pub fn fingerprint(&self) -> String {
        let fields: Vec<String> = self
            .field_names
            .iter()
            .zip(&self.vocab_sizes)
            .map(|(n, v)| format!("{n}:{v}"))
            .collect();
        format!(
            "fields={};d={};L={};H={};ff={};tied={}",
            fields.join(","),
            self.dim,
            self.blocks,
            self.heads,
            self.ff_width,
            self.tied_embeddings as u8
        )
    }
}

pub fn input_table(k: usize) -> String {
    format!("embed.input.{k}")
}

pub fn target_table(k: usize) -> String {
    format!("embed.target.{k}")
}

pub const FIELD_TABLE: &str = "embed.field";

/// Which side of the transfer split a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    ScoringNetwork,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("embed.") {
        ParamGroup::Embeddings
    } else {
        ParamGroup::ScoringNetwork
    }
}

fn ln_init(params: &mut ParamStore, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

/// Fresh parameters: Xavier-uniform matrices, unit norm gains, zero biases.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore, Error> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut params = ParamStore::new();
    let mut stream = 0u64;
    let mut xavier = |shape: &[usize]| {
        stream += 1;
        xavier_init(shape, cfg.seed, stream)
    };
    for (k, &v) in cfg.vocab_sizes.iter().enumerate() {
        params.insert(input_table(k), xavier(&[v + 1, d])?);
        if !cfg.tied_embeddings {
            params.insert(target_table(k), xavier(&[v, d])?);
        }
    }
    params.insert(FIELD_TABLE, xavier(&[cfg.num_fields(), d])?);
    for l in 0..cfg.blocks {
        let p = format!("block.{l}");
        ln_init(&mut params, &format!("{p}.ln1"), d);
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{p}.{w}"), xavier(&[d, d])?);
        }
        ln_init(&mut params, &format!("{p}.ln2"), d);
        params.insert(format!("{p}.ff1"), xavier(&[d, cfg.ff_width])?);
        params.insert(format!("{p}.ff1.bias"), Tensor::zeros(&[cfg.ff_width]));
        params.insert(format!("{p}.ff2"), xavier(&[cfg.ff_width, d])?);
        params.insert(format!("{p}.ff2.bias"), Tensor::zeros(&[d]));
    }
    if cfg.blocks > 0 {
        ln_init(&mut params, "out.ln", d);
        params.insert("out.proj", xavier(&[d, d])?);
        params.insert("out.proj.bias", Tensor::zeros(&[d]));
    }
    Ok(params)
}

/// Re-initializes a single parameter the way [`init_params`] would, using
/// a stream derived from its name.
pub fn reinit_param(params: &mut ParamStore, name: &str, seed: u64) -> Result<(), Error> {
    let shape = params
        .value(name)
        .ok_or_else(|| Error::Model(format!("no parameter `{name}`")))?
        .shape()
        .to_vec();
    let fresh = if name.ends_with(".gain") {
        Tensor::filled(&shape, 1.0)
    } else if name.ends_with(".bias") {
        Tensor::zeros(&shape)
    } else {
        let stream = name
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3));
        xavier_init(&shape, seed, stream)?
    };
    params.insert(name, fresh);
    Ok(())
}

fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Res<Var> {
    let n = g.layer_norm_rows(x)?;
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

fn linear(g: &mut Graph<'_>, x: Var, w: &str, bias: Option<&str>) -> Res<Var> {
    let w = g.param(w)?;
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => {
            let b = g.param(b)?;
            g.add_row(y, b)
        }
        None => Ok(y),
    }
}

/// Contextual vectors for a batch of (possibly masked) records, shape
/// `[batch · fields, d]` with record `i`, field `k` at row `i·fields + k`.
pub fn encode(g: &mut Graph<'_>, cfg: &ModelConfig, tokens: &[&[usize]]) -> Res<Var> {
    let f = cfg.num_fields();
    if tokens.is_empty() {
        return Err(NumericError::Invalid("encode: empty batch".into()));
    }
    let mut tables = Vec::with_capacity(f);
    for k in 0..f {
        tables.push(g.param(&input_table(k))?);
    }
    let mut index = Vec::with_capacity(tokens.len() * f);
    for row in tokens {
        if row.len() != f {
            return Err(NumericError::Invalid(format!(
                "encode: record has {} tokens, model has {f} fields",
                row.len()
            )));
        }
        for (k, &t) in row.iter().enumerate() {
            if t > cfg.vocab_sizes[k] {
                return Err(NumericError::IndexOutOfRange {
                    op: "encode",
                    index: t,
                    bound: cfg.vocab_sizes[k] + 1,
                });
            }
            index.push((k, t));
        }
    }
    let emb = g.gather(&tables, &index)?;
    let field_table = g.param(FIELD_TABLE)?;
    let pos: Vec<(usize, usize)> = (0..tokens.len() * f).map(|r| (0, r % f)).collect();
    let pos = g.gather(&[field_table], &pos)?;
    let mut x = g.add(emb, pos)?;
    for l in 0..cfg.blocks {
        let p = format!("block.{l}");
        let h = layer_norm(g, x, &format!("{p}.ln1"))?;
        let q = linear(g, h, &format!("{p}.wq"), None)?;
        let k = linear(g, h, &format!("{p}.wk"), None)?;
        let v = linear(g, h, &format!("{p}.wv"), None)?;
        let s = g.attn_scores(q, k, cfg.heads, f)?;
        let a = g.softmax_rows(s)?;
        let o = g.attn_apply(a, v, cfg.heads, f)?;
        let o = linear(g, o, &format!("{p}.wo"), None)?;
        x = g.add(x, o)?;
        let h = layer_norm(g, x, &format!("{p}.ln2"))?;
        let h = linear(g, h, &format!("{p}.ff1"), Some(&format!("{p}.ff1.bias")))?;
        let h = g.relu(h)?;
        let h = linear(g, h, &format!("{p}.ff2"), Some(&format!("{p}.ff2.bias")))?;
        x = g.add(x, h)?;
    }
    if cfg.blocks > 0 {
        let h = layer_norm(g, x, "out.ln")?;
        x = linear(g, h, "out.proj", Some("out.proj.bias"))?;
    }
    Ok(x)
}

/// Picks context rows `(record, field)` out of an encoded batch.
pub fn context_rows(g: &mut Graph<'_>, cfg: &ModelConfig, encoded: Var, rows: &[(usize, usize)]) -> Res<Var> {
    let f = cfg.num_fields();
    let index: Vec<(usize, usize)> = rows.iter().map(|&(i, k)| (0, i * f + k)).collect();
    g.gather(&[encoded], &index)
}

/// Unit-norm target embeddings of the given candidate tokens of field `k`.
pub fn candidate_rows(g: &mut Graph<'_>, cfg: &ModelConfig, k: usize, candidates: &[usize]) -> Res<Var> {
    if candidates.is_empty() {
        return Err(NumericError::Invalid(format!("field {k}: empty candidate set")));
    }
    let vocab = cfg.vocab_sizes[k];
    if let Some(&bad) = candidates.iter().find(|&&c| c >= vocab) {
        return Err(NumericError::IndexOutOfRange {
            op: "candidate_rows",
            index: bad,
            bound: vocab,
        });
    }
    let table = if cfg.tied_embeddings {
        g.param(&input_table(k))?
    } else {
        g.param(&target_table(k))?
    };
    let index: Vec<(usize, usize)> = candidates.iter().map(|&c| (0, c)).collect();
    let rows = g.gather(&[table], &index)?;
    g.l2_normalize_rows(rows)
}

/// Cosine logits `cos(target_j, context_i)/τ`, shape `[contexts, candidates]`.
pub fn field_logits(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    context: Var,
    k: usize,
    candidates: &[usize],
) -> Res<Var> {
    let targets = candidate_rows(g, cfg, k, candidates)?;
    let ctx = g.l2_normalize_rows(context)?;
    let cos = g.matmul_nt(ctx, targets)?;
    g.scale(cos, 1.0 / cfg.temperature)
}

/// Label logit difference `F(y=1) − F(y=0)` per record, with the label
/// position masked regardless of the label token supplied.
pub fn label_margin(g: &mut Graph<'_>, cfg: &ModelConfig, records: &[&[usize]]) -> Res<Var> {
    let label = cfg.label_index();
    let mask = cfg.vocab_sizes[label];
    let masked: Vec<Vec<usize>> = records
        .iter()
        .map(|r| {
            let mut t = r.to_vec();
            if t.len() == cfg.num_fields() {
                t[label] = mask;
            } else {
                t.push(mask);
            }
            t
        })
        .collect();
    let refs: Vec<&[usize]> = masked.iter().map(|t| t.as_slice()).collect();
    let enc = encode(g, cfg, &refs)?;
    let rows: Vec<(usize, usize)> = (0..records.len()).map(|i| (i, label)).collect();
    let ctx = context_rows(g, cfg, enc, &rows)?;
    let logits = field_logits(g, cfg, ctx, label, &[0, 1])?;
    let pos = g.pick_rows(logits, &vec![1; records.len()])?;
    let neg = g.pick_rows(logits, &vec![0; records.len()])?;
    g.sub(pos, neg)
}

/// A configuration with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, Error> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    /// `p̂(y=1|F)` per record. Records may hold features only or features
    /// plus a label token; the label is masked either way.
    pub fn ctr_scores(&self, records: &[&[usize]]) -> Result<Vec<f64>, Error> {
        let label = self.config.label_index();
        for r in records {
            if r[..label.min(r.len())]
                .iter()
                .zip(&self.config.vocab_sizes)
                .any(|(&t, &v)| t >= v)
            {
                return Err(Error::Model("feature fields must be unmasked for CTR scoring".into()));
            }
        }
        let mut g = Graph::new(&self.params);
        let m = label_margin(&mut g, &self.config, records)?;
        Ok(g.value(m).data().iter().map(|&x| crate::numeric::sigmoid(x)).collect())
    }

    /// Encoded context vectors as a plain tensor.
    pub fn encode_tensor(&self, tokens: &[&[usize]]) -> Result<Tensor, Error> {
        let mut g = Graph::new(&self.params);
        let v = encode(&mut g, &self.config, tokens)?;
        Ok(g.value(v).clone())
    }

    /// Full-vocabulary probabilities of field `k` at each record's position `k`.
    pub fn field_distribution(&self, tokens: &[&[usize]], k: usize) -> Result<Vec<Vec<f64>>, Error> {
        let mut g = Graph::new(&self.params);
        let enc = encode(&mut g, &self.config, tokens)?;
        let rows: Vec<(usize, usize)> = (0..tokens.len()).map(|i| (i, k)).collect();
        let ctx = context_rows(&mut g, &self.config, enc, &rows)?;
        let all: Vec<usize> = (0..self.config.vocab_sizes[k]).collect();
        let logits = field_logits(&mut g, &self.config, ctx, k, &all)?;
        let p = g.softmax_rows(logits)?;
        let t = g.value(p);
        Ok((0..tokens.len()).map(|i| t.row(i).to_vec()).collect())
    }
}
