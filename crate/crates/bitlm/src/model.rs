//! Decoder-only transformer with a pluggable input interface: a standard
//! learned table, the table-free minimal binary code, its affine-recoded
//! variant, or a frozen exported lookup (ablation parity). Pre-norm blocks,
//! rotary attention, exact GELU, untied trainable output projection.

use std::collections::HashMap;

use crate::codes::{CodeError, CodeSpec, FrozenTable};
use crate::nn::{NnError, NodeId, Tape, Tensor};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {got} exceeds context length {max}")]
    ContextOverflow { got: usize, max: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty evaluation stream")]
    EmptyStream,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Code(#[from] CodeError),
}

/// Which input parameterization a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputKind {
    Learned,
    FixedCode,
    AffineRecoded,
}

impl InputKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputKind::Learned => "learned",
            InputKind::FixedCode => "fixed_code",
            InputKind::AffineRecoded => "affine_recoded",
        }
    }

    pub fn parse(text: &str) -> Option<InputKind> {
        match text {
            "learned" => Some(InputKind::Learned),
            "fixed" | "fixed_code" => Some(InputKind::FixedCode),
            "affine" | "affine_recoded" => Some(InputKind::AffineRecoded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub input_kind: InputKind,
}

impl ModelConfig {
    /// Desk-scale defaults: byte vocabulary, head dim = 2K so every head
    /// sees two complete copies of the 8-bit code.
    pub fn desk_default(input_kind: InputKind) -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            context_len: 256,
            mlp_ratio: 4,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            input_kind,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn code_width(&self) -> usize {
        crate::codes::minimal_width(self.vocab_size)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("zero-sized model dimension".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dim {} must be even for rotary pairs", self.head_dim()));
        }
        if self.context_len == 0 {
            return fail("context_len must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        if self.input_kind != InputKind::Learned && self.d_model % self.code_width() != 0 {
            return fail(format!(
                "d_model {} not divisible by code width {} required by the tiled lift",
                self.d_model,
                self.code_width()
            ));
        }
        Ok(())
    }

    /// The code spec implied by this config (code variants only).
    pub fn code_spec(&self, recoder: Option<crate::codes::Recoder>) -> Result<CodeSpec, CodeError> {
        CodeSpec::new(self.vocab_size, self.d_model, recoder)
    }

    /// Trainable-parameter census by pure arithmetic (no allocation), so the
    /// paper-shape accounting can be checked without building the arrays.
    pub fn param_census(&self) -> ParamCensus {
        let (v, d) = (self.vocab_size as u64, self.d_model as u64);
        let hidden = d * self.mlp_ratio as u64;
        let per_layer = 4 * d // two norms, gain + shift
            + 4 * (d * d + d) // q, k, v, o projections with biases
            + (d * hidden + hidden) // mlp in
            + (hidden * d + d); // mlp out
        let input_table = if self.input_kind == InputKind::Learned { v * d } else { 0 };
        let total = input_table
            + self.n_layers as u64 * per_layer
            + 2 * d // final norm
            + (d * v + v); // untied output projection
        ParamCensus { total, input_table }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCensus {
    pub total: u64,
    pub input_table: u64,
}

/// How token ids become model-width vectors.
///
/// `LearnedTable` reads the trainable `input.table` parameter;
/// `FrozenLookup` is the same software path with fixed weights; the two code
/// variants compute bits from token ids at run time and hold no table.
#[derive(Debug, Clone)]
pub enum InputInterface {
    LearnedTable,
    FrozenLookup(FrozenTable),
    FixedCode(CodeSpec),
    AffineRecoded(CodeSpec),
}

impl InputInterface {
    /// Builds the interface named by the config, checking the interface
    /// invariants (recoder presence, injectivity preconditions) up front.
    pub fn for_config(
        config: &ModelConfig,
        recoder: Option<crate::codes::Recoder>,
    ) -> Result<Self, ModelError> {
        match config.input_kind {
            InputKind::Learned => Ok(InputInterface::LearnedTable),
            InputKind::FixedCode => {
                if recoder.is_some() {
                    return Err(ModelError::InvalidConfig(
                        "fixed_code takes the canonical code; recoder not allowed".into(),
                    ));
                }
                Ok(InputInterface::FixedCode(config.code_spec(None)?))
            }
            InputKind::AffineRecoded => {
                let Some(recoder) = recoder else {
                    return Err(ModelError::InvalidConfig(
                        "affine_recoded requires a recoder".into(),
                    ));
                };
                Ok(InputInterface::AffineRecoded(config.code_spec(Some(recoder))?))
            }
        }
    }

    /// Trainable parameters contributed by the input side.
    pub fn trainable_input_params(&self, config: &ModelConfig) -> u64 {
        match self {
            InputInterface::LearnedTable => (config.vocab_size * config.d_model) as u64,
            _ => 0,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            InputInterface::LearnedTable => "learned",
            InputInterface::FrozenLookup(_) => "frozen_lookup",
            InputInterface::FixedCode(_) => "fixed_code",
            InputInterface::AffineRecoded(_) => "affine_recoded",
        }
    }

    pub fn code_spec(&self) -> Option<&CodeSpec> {
        match self {
            InputInterface::FixedCode(s) | InputInterface::AffineRecoded(s) => Some(s),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    /// Whether decoupled weight decay applies (weight matrices yes, norms
    /// and biases no; the learned input table is controlled per run).
    pub decay: bool,
}

/// The flat, ordered set of trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Parameters {
    fn from_entries(entries: Vec<Param>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Parameters { entries, index }
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn trainable_count(&self) -> u64 {
        self.entries.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }
}

enum InitRule {
    TruncNormal,
    Zero,
    One,
}

fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool, InitRule)> {
    let d = config.d_model;
    let hidden = d * config.mlp_ratio;
    let v = config.vocab_size;
    let mut layout: Vec<(String, Vec<usize>, bool, InitRule)> = Vec::new();
    if config.input_kind == InputKind::Learned {
        layout.push(("input.table".into(), vec![v, d], true, InitRule::TruncNormal));
    }
    for l in 0..config.n_layers {
        let p = |suffix: &str| format!("layer{l}.{suffix}");
        layout.push((p("ln1.gain"), vec![d], false, InitRule::One));
        layout.push((p("ln1.shift"), vec![d], false, InitRule::Zero));
        for proj in ["q", "k", "v", "o"] {
            layout.push((p(&format!("attn.w{proj}")), vec![d, d], true, InitRule::TruncNormal));
            layout.push((p(&format!("attn.b{proj}")), vec![d], false, InitRule::Zero));
        }
        layout.push((p("ln2.gain"), vec![d], false, InitRule::One));
        layout.push((p("ln2.shift"), vec![d], false, InitRule::Zero));
        layout.push((p("mlp.w1"), vec![d, hidden], true, InitRule::TruncNormal));
        layout.push((p("mlp.b1"), vec![hidden], false, InitRule::Zero));
        layout.push((p("mlp.w2"), vec![hidden, d], true, InitRule::TruncNormal));
        layout.push((p("mlp.b2"), vec![d], false, InitRule::Zero));
    }
    layout.push(("final_norm.gain".into(), vec![d], false, InitRule::One));
    layout.push(("final_norm.shift".into(), vec![d], false, InitRule::Zero));
    layout.push(("output.w".into(), vec![d, v], true, InitRule::TruncNormal));
    layout.push(("output.b".into(), vec![v], false, InitRule::Zero));
    layout
}

/// Rebuilds `Parameters` from named arrays (checkpoint loading), checking
/// them against the exact layout the config dictates.
pub fn rebuild_parameters(
    config: &ModelConfig,
    mut named: Vec<(String, Tensor<f32>)>,
) -> Result<Parameters, ModelError> {
    config.validate()?;
    let layout = param_layout(config);
    if named.len() != layout.len() {
        return Err(ModelError::InvalidConfig(format!(
            "checkpoint has {} arrays, config expects {}",
            named.len(),
            layout.len()
        )));
    }
    let mut entries = Vec::with_capacity(layout.len());
    for ((name, shape, decay, _), (got_name, value)) in layout.into_iter().zip(named.drain(..)) {
        if got_name != name {
            return Err(ModelError::InvalidConfig(format!(
                "checkpoint array {got_name:?} where {name:?} expected"
            )));
        }
        if value.shape() != shape.as_slice() {
            return Err(ModelError::InvalidConfig(format!(
                "array {name} has shape {:?}, config expects {shape:?}",
                value.shape()
            )));
        }
        entries.push(Param { name, value, decay });
    }
    Ok(Parameters::from_entries(entries))
}

const INIT_STD: f64 = 0.02;

/// Deterministic initialization: each parameter draws from its own labelled
/// stream, so the same seed gives the same downstream weights whichever
/// input interface is configured. Weights are N(0, 0.02^2) truncated at two
/// sigma, biases and norm shifts zero, norm gains one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Parameters, ModelError> {
    config.validate()?;
    let entries = param_layout(config)
        .into_iter()
        .map(|(name, shape, decay, rule)| {
            let numel: usize = shape.iter().product();
            let data = match rule {
                InitRule::Zero => vec![0f32; numel],
                InitRule::One => vec![1f32; numel],
                InitRule::TruncNormal => {
                    let mut rng = Rng::stream(seed, &format!("init/{name}"));
                    (0..numel).map(|_| rng.next_trunc_gaussian(INIT_STD) as f32).collect()
                }
            };
            Param { name, value: Tensor::from_vec(&shape, data), decay }
        })
        .collect();
    Ok(Parameters::from_entries(entries))
}

// ---------------------------------------------------------------------------
// Forward graph
// ---------------------------------------------------------------------------

/// A recorded forward pass: logits plus the tape node of every parameter,
/// in `Parameters` order, for gradient collection.
pub struct ForwardGraph {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Encodes a token batch through a code spec into a `[B, T, d]` constant.
fn encode_batch(
    spec: &CodeSpec,
    tokens: &[u32],
    batch_shape: (usize, usize),
) -> Result<Tensor<f32>, ModelError> {
    let d = spec.lift_width();
    let (b, t) = batch_shape;
    assert_eq!(tokens.len(), b * t);
    let mut data = vec![0f32; tokens.len() * d];
    for (r, &tok) in tokens.iter().enumerate() {
        spec.encode_token_into(tok as usize, &mut data[r * d..(r + 1) * d]).map_err(
            |e| match e {
                CodeError::TokenOutOfRange { token, .. } => ModelError::TokenOutOfRange {
                    token: token as u32,
                    vocab: spec.vocab_size(),
                },
                other => ModelError::Code(other),
            },
        )?;
    }
    Ok(Tensor::from_vec(&[b, t, d], data))
}

/// Records the full forward pass on `tape` and returns the logits node.
///
/// Input vectors come from the interface (lookup or on-the-fly encoding),
/// then `n_layers` pre-norm blocks (rotary causal attention, GELU MLP), a
/// final norm, and the untied output projection.
pub fn build_forward(
    tape: &mut Tape<f32>,
    params: &Parameters,
    interface: &InputInterface,
    config: &ModelConfig,
    tokens: &[u32],
    batch_shape: (usize, usize),
) -> Result<ForwardGraph, ModelError> {
    let (b, t) = batch_shape;
    assert_eq!(tokens.len(), b * t, "token count must fill the batch");
    if t > config.context_len {
        return Err(ModelError::ContextOverflow { got: t, max: config.context_len });
    }
    for &tok in tokens {
        if tok as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange { token: tok, vocab: config.vocab_size });
        }
    }

    let param_nodes: Vec<NodeId> =
        params.entries().iter().map(|p| tape.param(p.value.clone())).collect();
    let node = |name: &str| -> NodeId {
        param_nodes[params.position(name).unwrap_or_else(|| panic!("missing param {name}"))]
    };

    let mut x = match interface {
        InputInterface::LearnedTable => {
            let table = node("input.table");
            tape.embed(table, tokens, batch_shape)?
        }
        InputInterface::FrozenLookup(table) => {
            let tensor = Tensor::from_vec(
                &[table.vocab_size, table.lift_width],
                table.data.clone(),
            );
            let id = tape.constant(tensor);
            tape.embed(id, tokens, batch_shape)?
        }
        InputInterface::FixedCode(spec) | InputInterface::AffineRecoded(spec) => {
            let encoded = encode_batch(spec, tokens, batch_shape)?;
            tape.constant(encoded)
        }
    };

    let eps = config.norm_eps as f32;
    let rope_base = config.rope_base as f32;
    for l in 0..config.n_layers {
        let p = |suffix: &str| format!("layer{l}.{suffix}");
        let normed = tape.layer_norm(x, node(&p("ln1.gain")), node(&p("ln1.shift")), eps)?;
        let q = tape.linear(normed, node(&p("attn.wq")), Some(node(&p("attn.bq"))))?;
        let k = tape.linear(normed, node(&p("attn.wk")), Some(node(&p("attn.bk"))))?;
        let v = tape.linear(normed, node(&p("attn.wv")), Some(node(&p("attn.bv"))))?;
        let qh = tape.split_heads(q, config.n_heads)?;
        let kh = tape.split_heads(k, config.n_heads)?;
        let vh = tape.split_heads(v, config.n_heads)?;
        let qr = tape.rope(qh, rope_base)?;
        let kr = tape.rope(kh, rope_base)?;
        let att = tape.causal_attention(qr, kr, vh)?;
        let merged = tape.merge_heads(att)?;
        let proj = tape.linear(merged, node(&p("attn.wo")), Some(node(&p("attn.bo"))))?;
        x = tape.add(x, proj)?;

        let normed = tape.layer_norm(x, node(&p("ln2.gain")), node(&p("ln2.shift")), eps)?;
        let h1 = tape.linear(normed, node(&p("mlp.w1")), Some(node(&p("mlp.b1"))))?;
        let act = tape.gelu(h1);
        let h2 = tape.linear(act, node(&p("mlp.w2")), Some(node(&p("mlp.b2"))))?;
        x = tape.add(x, h2)?;
    }
    let final_normed =
        tape.layer_norm(x, node("final_norm.gain"), node("final_norm.shift"), eps)?;
    let logits = tape.linear(final_normed, node("output.w"), Some(node("output.b")))?;
    Ok(ForwardGraph { logits, param_nodes })
}

/// Forward pass returning the logits tensor only.
pub fn forward(
    params: &Parameters,
    interface: &InputInterface,
    config: &ModelConfig,
    tokens: &[u32],
    batch_shape: (usize, usize),
) -> Result<Tensor<f32>, ModelError> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, params, interface, config, tokens, batch_shape)?;
    Ok(tape.value(graph.logits).clone())
}

// ---------------------------------------------------------------------------
// Evaluation and sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub val_loss: f64,
    pub val_ppl: f64,
    pub tokens_evaluated: u64,
}

/// A token batch with next-token targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Mean next-token loss over a validation stream; reads parameters only.
pub fn evaluate<'a>(
    params: &Parameters,
    interface: &InputInterface,
    config: &ModelConfig,
    batches: impl IntoIterator<Item = &'a Batch>,
) -> Result<EvalMetrics, ModelError> {
    let mut total_loss = 0f64;
    let mut tokens = 0u64;
    for batch in batches {
        let mut tape = Tape::new();
        let graph = build_forward(
            &mut tape,
            params,
            interface,
            config,
            &batch.tokens,
            (batch.batch_size, batch.seq_len),
        )?;
        let loss = tape.softmax_cross_entropy(graph.logits, &batch.targets)?;
        let n = (batch.batch_size * batch.seq_len) as f64;
        total_loss += f64::from(tape.value(loss).item()) * n;
        tokens += n as u64;
    }
    if tokens == 0 {
        return Err(ModelError::EmptyStream);
    }
    let val_loss = total_loss / tokens as f64;
    Ok(EvalMetrics { val_loss, val_ppl: val_loss.exp(), tokens_evaluated: tokens })
}

/// Autoregressive sampling, deterministic given `seed`. `temperature == 0`
/// is the argmax limit; repeated calls with equal arguments are identical.
pub fn sample_text(
    params: &Parameters,
    interface: &InputInterface,
    config: &ModelConfig,
    prompt: &[u32],
    n_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>, ModelError> {
    assert!(temperature >= 0.0, "temperature must be non-negative");
    let mut ids = prompt.to_vec();
    if ids.is_empty() {
        ids.push(0);
    }
    let mut rng = Rng::stream(seed, "sample");
    for _ in 0..n_tokens {
        let start = ids.len().saturating_sub(config.context_len);
        let window = &ids[start..];
        let logits = forward(params, interface, config, window, (1, window.len()))?;
        let v = config.vocab_size;
        let last = &logits.data()[(window.len() - 1) * v..window.len() * v];
        let next = if temperature == 0.0 {
            argmax(last)
        } else {
            sample_softmax(last, temperature, &mut rng)
        };
        ids.push(next as u32);
    }
    Ok(ids)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(row: &[f32], temperature: f64, rng: &mut Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|&z| f64::from(z) / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut dart = rng.next_f64() * total;
    for (i, &e) in exps.iter().enumerate() {
        dart -= e;
        if dart <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

/// Checks the tiled-lift index map per head: head `h` reads input slice
/// `[h*head_dim, (h+1)*head_dim)`, whose coordinates map to code bits
/// `i mod K`; when `head_dim` is a multiple of `K`, every head sees each
/// code bit exactly `head_dim / K` times.
pub fn tiles_per_head(config: &ModelConfig) -> Option<usize> {
    let k = config.code_width();
    let hd = config.head_dim();
    if hd % k != 0 {
        return None;
    }
    let expected = hd / k;
    for head in 0..config.n_heads {
        let mut counts = vec![0usize; k];
        for i in head * hd..(head + 1) * hd {
            counts[i % k] += 1;
        }
        if counts.iter().any(|&c| c != expected) {
            return None;
        }
    }
    Some(expected)
}
