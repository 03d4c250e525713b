//! Encoder-decoder transformer over the autodiff tape.
//!
//! Layers use pre-normalisation: each sublayer reads `LayerNorm(x)` and adds
//! its output back onto the residual stream. Inputs are the sum of a scaled
//! token embedding, a position encoding and a language embedding, on both
//! the encoder and the decoder side. The decoder looks positions up by the
//! explicit indices it is given, which is what lets a compacted decoder keep
//! the original positions of the fragment it predicts.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{MaskedExample, IGNORE};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_languages: usize,
    pub dropout: f64,
    pub learned_positions: bool,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 0,
            max_positions: 128,
            num_languages: 2,
            dropout: 0.0,
            learned_positions: false,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.num_languages == 0 {
            return bad("vocab_size, max_positions and num_languages must be positive".into());
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return bad("layers and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("layers".into(), self.layers.to_string()),
            ("model_dim".into(), self.model_dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            ("num_languages".into(), self.num_languages.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("learned_positions".into(), self.learned_positions.to_string()),
            ("tie_embeddings".into(), self.tie_embeddings.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns `false` for keys that are
    /// not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "model_dim" => self.model_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            "num_languages" => self.num_languages = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "learned_positions" => self.learned_positions = num(key, value)?,
            "tie_embeddings" => self.tie_embeddings = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AttentionIds {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: AttentionIds,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: AttentionIds,
    cross_norm: Norm,
    cross_attn: AttentionIds,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    token_embedding: ParamId,
    position_embedding: Option<ParamId>,
    language_embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Option<ParamId>,
    output_bias: ParamId,
}

struct Builder<'r> {
    params: ModelParams,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, self.rng);
        Linear {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self
                .params
                .add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.params.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

fn build_layout(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ModelParams, Layout) {
    let d = config.model_dim;
    let mut b = Builder {
        params: ModelParams::default(),
        rng,
    };
    let emb_std = 1.0 / (d as f64).sqrt();
    let token_embedding = {
        let t = Tensor::randn(&[config.vocab_size, d], emb_std, b.rng);
        b.params.add("embed.token".into(), t)
    };
    let position_embedding = config.learned_positions.then(|| {
        let t = Tensor::randn(&[config.max_positions, d], 0.1, b.rng);
        b.params.add("embed.position".into(), t)
    });
    let language_embedding = {
        let t = Tensor::randn(&[config.num_languages, d], 0.1, b.rng);
        b.params.add("embed.language".into(), t)
    };
    let encoder = (0..config.layers)
        .map(|l| EncoderLayer {
            attn_norm: b.norm(&format!("enc.{l}.attn_norm"), d),
            attn: b.attention(&format!("enc.{l}.attn"), d),
            ffn_norm: b.norm(&format!("enc.{l}.ffn_norm"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
        })
        .collect();
    let encoder_norm = b.norm("enc.norm", d);
    let decoder = (0..config.layers)
        .map(|l| DecoderLayer {
            self_norm: b.norm(&format!("dec.{l}.self_norm"), d),
            self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
            cross_norm: b.norm(&format!("dec.{l}.cross_norm"), d),
            cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
            ffn_norm: b.norm(&format!("dec.{l}.ffn_norm"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
        })
        .collect();
    let decoder_norm = b.norm("dec.norm", d);
    let output = (!config.tie_embeddings).then(|| {
        let t = Tensor::randn(&[d, config.vocab_size], 0.02, b.rng);
        b.params.add("output.weight".into(), t)
    });
    let output_bias = b
        .params
        .add("output.bias".into(), Tensor::zeros(&[config.vocab_size]));
    (
        b.params,
        Layout {
            token_embedding,
            position_embedding,
            language_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            output_bias,
        },
    )
}

/// Sinusoidal position encoding row for `pos`.
pub fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Which keys each query may attend to, row-major `[queries × keys]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular: query `t` sees keys `0..=t`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |t, s| s <= t)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        AttnMask {
            rows,
            cols,
            allowed,
        }
    }

    /// Causal self-attention restricted to valid keys; every query may
    /// still see itself.
    pub fn decoder(keys: Option<&[bool]>, n: usize) -> Self {
        match keys {
            None => Self::causal(n),
            Some(k) => Self::from_fn(n, n, |t, s| s == t || (s < t && k[s])),
        }
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    /// Additive form: 0 where allowed, -inf elsewhere. Fails on a row with
    /// no allowed key.
    pub fn additive(&self) -> Result<Tensor> {
        for r in 0..self.rows {
            if !self.allowed[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a) {
                return Err(Error::NoValidKey { row: r });
            }
        }
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data)
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}

/// Scaled dot-product attention, `softmax(q·kᵀ/√d + mask)·v`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let d = tape.value(q).dims2().1;
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = match mask {
        Some(m) if !m.is_full() => {
            let additive = m.additive()?;
            tape.add_const(scores, &additive)?
        }
        _ => scores,
    };
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    params: ModelParams,
    layout: Layout,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, &mut rng);
        Ok(Transformer {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, stored: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Transformer::new(config, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "expected {} parameter blobs, found {}",
                    model.params.len(),
                    stored.len()
                ),
            ));
        }
        for (i, (name, t)) in stored.into_iter().enumerate() {
            if model.params.names[i] != name || model.params.tensors[i].shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "blob {i}: expected {} {:?}, found {name} {:?}",
                        model.params.names[i],
                        model.params.tensors[i].shape(),
                        t.shape()
                    ),
                ));
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Whether a parameter belongs to the encoder stack proper (excluding
    /// the embeddings it shares with the decoder).
    pub fn is_encoder_param(&self, id: usize) -> bool {
        self.params.names[id].starts_with("enc.")
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Forward session with every parameter trainable.
    pub fn session(&self) -> Session<'_> {
        Session::new(self, |_| true, None)
    }

    /// Forward session that records no gradients.
    pub fn eval_session(&self) -> Session<'_> {
        Session::new(self, |_| false, None)
    }
}

/// One forward pass over a fresh [`Tape`].
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m Transformer,
    vars: Vec<Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'m> Session<'m> {
    /// Binds parameters onto a new tape; `trainable(i)` selects which ones
    /// receive gradients. Dropout is active only when a seed is given.
    pub fn new(
        model: &'m Transformer,
        trainable: impl Fn(usize) -> bool,
        dropout_seed: Option<u64>,
    ) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Session {
            tape,
            model,
            vars,
            dropout_rng: dropout_seed
                .filter(|_| model.config.dropout > 0.0)
                .map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn dropout(&mut self, x: Var) -> Var {
        match self.dropout_rng.as_mut() {
            Some(rng) => self.tape.dropout(x, self.model.config.dropout, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[l.weight.0])?;
        self.tape.add_row(y, self.vars[l.bias.0])
    }

    fn norm(&mut self, x: Var, n: &Norm) -> Result<Var> {
        self.tape
            .layer_norm(x, self.vars[n.gain.0], self.vars[n.bias.0])
    }

    fn multi_head(
        &mut self,
        query_in: Var,
        kv_in: Var,
        ids: &AttentionIds,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let q = self.linear(query_in, &ids.q)?;
        let k = self.linear(kv_in, &ids.k)?;
        let v = self.linear(kv_in, &ids.v)?;
        let dh = self.model.config.head_dim();
        let mut heads = Vec::with_capacity(self.model.config.heads);
        for h in 0..self.model.config.heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            heads.push(attention(&mut self.tape, qh, kh, vh, mask)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat_cols(&heads)?
        };
        self.linear(joined, &ids.out)
    }

    fn feed_forward(&mut self, x: Var, f: &FeedForward) -> Result<Var> {
        let h = self.linear(x, &f.up)?;
        let h = self.tape.gelu(h);
        self.linear(h, &f.down)
    }

    fn residual(&mut self, x: Var, branch: Var) -> Result<Var> {
        let branch = self.dropout(branch);
        self.tape.add(x, branch)
    }

    fn embed(&mut self, ids: &[TokenId], positions: &[usize], language: usize) -> Result<Var> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(Error::Input("empty input sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                index: bad,
                size: cfg.vocab_size,
            });
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(Error::Input(format!(
                "position {bad} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if language >= cfg.num_languages {
            return Err(Error::Index {
                index: language,
                size: cfg.num_languages,
            });
        }
        let d = cfg.model_dim;
        let layout = &self.model.layout;
        let tok = self.tape.gather_rows(self.vars[layout.token_embedding.0], ids)?;
        let tok = self.tape.scale(tok, (d as f64).sqrt());
        let x = match layout.position_embedding {
            Some(table) => {
                let pos = self.tape.gather_rows(self.vars[table.0], positions)?;
                self.tape.add(tok, pos)?
            }
            None => {
                let table: Vec<f64> = positions.iter().flat_map(|&p| sinusoid(p, d)).collect();
                self.tape
                    .add_const(tok, &Tensor::new(vec![positions.len(), d], table)?)?
            }
        };
        let lang = self
            .tape
            .gather_rows(self.vars[layout.language_embedding.0], &[language])?;
        let x = self.tape.add_row(x, lang)?;
        Ok(self.dropout(x))
    }

    /// Encoder memory `[m × d]` for `ids` in `language`.
    pub fn encode(&mut self, ids: &[TokenId], language: usize) -> Result<Var> {
        if ids.len() > self.model.config.max_positions {
            return Err(Error::Input(format!(
                "input of length {} exceeds max_positions {}",
                ids.len(),
                self.model.config.max_positions
            )));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = self.embed(ids, &positions, language)?;
        let layout = self.model.layout.clone();
        for layer in &layout.encoder {
            let h = self.norm(x, &layer.attn_norm)?;
            let a = self.multi_head(h, h, &layer.attn, None)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &layer.ffn_norm)?;
            let f = self.feed_forward(h, &layer.ffn)?;
            x = self.residual(x, f)?;
        }
        self.norm(x, &layout.encoder_norm)
    }

    /// Decoder logits `[k × V]`. `keys` restricts which decoder positions are
    /// visible to later ones; `None` is plain causal attention.
    pub fn decode(
        &mut self,
        inputs: &[TokenId],
        positions: &[usize],
        memory: Var,
        language: usize,
        keys: Option<&[bool]>,
    ) -> Result<Var> {
        if inputs.len() != positions.len() {
            return Err(Error::Input(format!(
                "{} decoder inputs but {} positions",
                inputs.len(),
                positions.len()
            )));
        }
        if !positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Input(
                "decoder positions must be strictly increasing".into(),
            ));
        }
        if keys.is_some_and(|k| k.len() != inputs.len()) {
            return Err(Error::Input("decoder key mask length mismatch".into()));
        }
        let mut x = self.embed(inputs, positions, language)?;
        let self_mask = AttnMask::decoder(keys, inputs.len());
        let layout = self.model.layout.clone();
        for layer in &layout.decoder {
            let h = self.norm(x, &layer.self_norm)?;
            let a = self.multi_head(h, h, &layer.self_attn, Some(&self_mask))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &layer.cross_norm)?;
            let c = self.multi_head(h, memory, &layer.cross_attn, None)?;
            x = self.residual(x, c)?;
            let h = self.norm(x, &layer.ffn_norm)?;
            let f = self.feed_forward(h, &layer.ffn)?;
            x = self.residual(x, f)?;
        }
        let h = self.norm(x, &layout.decoder_norm)?;
        let logits = match layout.output {
            Some(w) => self.tape.matmul(h, self.vars[w.0])?,
            None => self
                .tape
                .matmul_bt(h, self.vars[layout.token_embedding.0])?,
        };
        self.tape.add_row(logits, self.vars[layout.output_bias.0])
    }

    /// Logits for a full example.
    pub fn example_logits(&mut self, ex: &MaskedExample) -> Result<Var> {
        let memory = self.encode(&ex.encoder_input, ex.language)?;
        self.decode(
            &ex.decoder_input,
            &ex.decoder_positions,
            memory,
            ex.decoder_language,
            ex.decoder_keys.as_deref(),
        )
    }

    /// Mean target negative log-likelihood of one example.
    pub fn example_loss(&mut self, ex: &MaskedExample) -> Result<Var> {
        let logits = self.example_logits(ex)?;
        self.tape.cross_entropy(logits, &ex.targets, Some(IGNORE))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward pass; gradients are returned per parameter in declaration
    /// order, zero for parameters the loss does not reach.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let g = self.tape.backward(loss)?;
        Ok(self.collect(&g))
    }

    fn collect(&self, g: &Gradients) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .map(|&v| g.get_or_zeros(&self.tape, v))
                .collect(),
        )
    }
}

/// Per-parameter gradients aligned with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads(
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        )
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// Sum of per-step log-probabilities of `targets` when each step is decoded
/// from its own prefix (incremental decoding, no cache).
pub fn incremental_log_prob(model: &Transformer, ex: &MaskedExample) -> Result<f64> {
    let mut s = model.eval_session();
    let memory = s.encode(&ex.encoder_input, ex.language)?;
    let mut total = 0.0;
    for t in 0..ex.decoder_input.len() {
        if ex.targets[t] == IGNORE {
            continue;
        }
        let keys = ex.decoder_keys.as_ref().map(|k| &k[..=t]);
        let logits = s.decode(
            &ex.decoder_input[..=t],
            &ex.decoder_positions[..=t],
            memory,
            ex.decoder_language,
            keys,
        )?;
        let row = s.value(logits).row(t).to_vec();
        total += crate::tape::log_softmax_at(&row, ex.targets[t]);
    }
    Ok(total)
}

/// Sum of target log-probabilities from one batched decoder pass.
pub fn batched_log_prob(model: &Transformer, ex: &MaskedExample) -> Result<f64> {
    let mut s = model.eval_session();
    let logits = s.example_logits(ex)?;
    let value = s.value(logits);
    Ok(ex
        .targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != IGNORE)
        .map(|(i, &t)| crate::tape::log_softmax_at(value.row(i), t))
        .sum())
}

/// Metadata stored beside the config in a checkpoint.
pub type Metadata = BTreeMap<String, String>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, MASK};

    fn tiny() -> Transformer {
        let cfg = ModelConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 20,
            max_positions: 32,
            num_languages: 2,
            ..ModelConfig::default()
        };
        Transformer::new(cfg, 7).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("heads", "8").unwrap());
        assert!(!cfg.set("bogus", "1").unwrap());
        assert!(cfg.set("heads", "x").is_err());
    }

    #[test]
    fn single_token_memory_shape() {
        let m = tiny();
        let mut s = m.eval_session();
        let mem = s.encode(&[5], 0).unwrap();
        assert_eq!(s.value(mem).shape(), &[1, 8]);
    }

    #[test]
    fn overlength_and_bad_positions_rejected() {
        let m = tiny();
        let mut s = m.eval_session();
        assert!(matches!(s.encode(&[5; 33], 0), Err(Error::Input(_))));
        let mem = s.encode(&[5, 6], 0).unwrap();
        assert!(s.decode(&[MASK], &[32], mem, 0, None).is_err());
        assert!(s.decode(&[MASK, 5], &[3, 3], mem, 0, None).is_err());
        assert!(s.encode(&[25], 0).is_err());
        assert!(s.encode(&[5], 2).is_err());
    }

    #[test]
    fn position_breaks_permutation_symmetry() {
        let m = tiny();
        let mut s = m.eval_session();
        let a = s.encode(&[5, 9, 7], 0).unwrap();
        let b = s.encode(&[9, 5, 7], 0).unwrap();
        assert!(s.value(a).max_abs_diff(s.value(b)) > 1e-6);
    }

    #[test]
    fn all_mask_memory_is_source_independent() {
        let m = tiny();
        let mut s = m.eval_session();
        let a = s.encode(&[MASK; 6], 1).unwrap();
        let b = s.encode(&[MASK; 6], 1).unwrap();
        assert_eq!(s.value(a), s.value(b));
    }

    #[test]
    fn attention_uniform_over_identical_keys() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]));
        let k = tape.constant(Tensor::from_rows(&vec![vec![1.0, 1.0]; 3]));
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 3.0]]));
        let out = attention(&mut tape, q, k, v, None).unwrap();
        for r in 0..2 {
            assert!((tape.value(out).at2(r, 0) - 4.0 / 3.0).abs() < 1e-12);
        }
        let mask = AttnMask::from_fn(2, 3, |_, s| s < 2);
        let out = attention(&mut tape, q, k, v, Some(&mask)).unwrap();
        assert!((tape.value(out).at2(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_and_empty_row() {
        let mask = AttnMask::causal(4);
        for t in 0..4 {
            for s in 0..4 {
                assert_eq!(mask.allows(t, s), s <= t);
            }
        }
        let empty = AttnMask::from_fn(2, 2, |r, _| r == 0);
        assert!(matches!(empty.additive(), Err(Error::NoValidKey { row: 1 })));
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let mut s = m.eval_session();
        let mem = s.encode(&[5, 6, 7, 8], 0).unwrap();
        let a = s.decode(&[BOS, 5, 6, 7], &[0, 1, 2, 3], mem, 0, None).unwrap();
        let b = s.decode(&[BOS, 5, 9, 11], &[0, 1, 2, 3], mem, 0, None).unwrap();
        for t in 0..2 {
            assert_eq!(s.value(a).row(t), s.value(b).row(t));
        }
        assert_ne!(s.value(a).row(2), s.value(b).row(2));
    }

    #[test]
    fn zero_cross_attention_output_detaches_memory() {
        let mut m = tiny();
        for l in 0..2 {
            for suffix in ["weight", "bias"] {
                let name = format!("dec.{l}.cross_attn.out.{suffix}");
                let t = m.params_mut().by_name_mut(&name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut s = m.eval_session();
        let m1 = s.encode(&[5, 6, 7], 0).unwrap();
        let m2 = s.encode(&[9, 12, 7, 14, 15], 1).unwrap();
        let a = s.decode(&[MASK, 5], &[1, 2], m1, 0, None).unwrap();
        let b = s.decode(&[MASK, 5], &[1, 2], m2, 0, None).unwrap();
        assert_eq!(s.value(a), s.value(b));
    }

    #[test]
    fn language_tag_changes_logits() {
        let m = tiny();
        let mut s = m.eval_session();
        let mem = s.encode(&[5, 6], 0).unwrap();
        let a = s.decode(&[BOS], &[0], mem, 0, None).unwrap();
        let b = s.decode(&[BOS], &[0], mem, 1, None).unwrap();
        assert!(s.value(a).max_abs_diff(s.value(b)) > 1e-9);
    }

    #[test]
    fn tied_embeddings_share_the_table() {
        let cfg = ModelConfig {
            model_dim: 8,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 12,
            tie_embeddings: true,
            layers: 1,
            ..ModelConfig::default()
        };
        let m = Transformer::new(cfg, 1).unwrap();
        assert!(m.params().by_name("output.weight").is_none());
        let mut s = m.session();
        let mem = s.encode(&[5, 6], 0).unwrap();
        let logits = s.decode(&[BOS], &[0], mem, 0, None).unwrap();
        assert_eq!(s.value(logits).shape(), &[1, 12]);
        let loss = s.tape.cross_entropy(logits, &[7], None).unwrap();
        let g = s.backward(loss).unwrap();
        let tok = m.param_id("embed.token").unwrap();
        assert!(g.0[tok.index()].norm_sq() > 0.0);
    }
}
