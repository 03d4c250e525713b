//! Adam, single training steps, and the pre-training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{sample_span, MaskedExample, Masker, Mode, SpanLength};
use crate::model::{ModelParams, ParamGrads, Session, Transformer};
use crate::report::Record;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in steps; 0 disables it.
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn lr(&self) -> f64 {
        let w = self.config.warmup as f64;
        if w > 0.0 {
            self.config.lr * (self.step as f64 / w).min(1.0)
        } else {
            self.config.lr
        }
    }

    /// One bias-corrected Adam update. Parameters for which `trainable`
    /// returns false are left untouched, moments included.
    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grads: &ParamGrads,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if grads.0.len() != params.len() {
            return Err(Error::Dimension {
                op: "adam_update",
                left: vec![params.len()],
                right: vec![grads.0.len()],
            });
        }
        self.step += 1;
        let c = self.config;
        let lr = self.lr();
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(&grads.0).enumerate() {
            if !trainable(i) {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adam_update",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Masked(Mode),
    /// Masked-token encoder phase, then a left-to-right decoder phase with
    /// the encoder frozen.
    BertLm,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Masked(Mode::Mass),
        Objective::Masked(Mode::Discrete),
        Objective::Masked(Mode::Feed),
        Objective::Masked(Mode::Dae),
        Objective::BertLm,
    ];
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Masked(m) => write!(f, "{m}"),
            Objective::BertLm => f.write_str("bert+lm"),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "bert+lm" || t == "bertlm" || t == "bert_lm" {
            Ok(Objective::BertLm)
        } else {
            t.parse().map(Objective::Masked)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub span: SpanLength,
    /// Encoder tokens per batch.
    pub batch_tokens: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Train with the full-length decoder instead of the compacted one.
    pub keep_padding: bool,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Masked(Mode::Mass),
            span: SpanLength::Ratio(0.5),
            batch_tokens: 256,
            steps: 1000,
            seed: 0,
            eval_every: 100,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            keep_padding: false,
            eval_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.span.validate()?;
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if self.adam.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("objective".into(), self.objective.to_string()),
            ("ratio".into(), self.span.to_string()),
            ("batch_tokens".into(), self.batch_tokens.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("lr".into(), self.adam.lr.to_string()),
            ("beta1".into(), self.adam.beta1.to_string()),
            ("beta2".into(), self.adam.beta2.to_string()),
            ("eps".into(), self.adam.eps.to_string()),
            ("warmup".into(), self.adam.warmup.to_string()),
            (
                "clip_norm".into(),
                self.clip_norm.map_or("none".into(), |c| c.to_string()),
            ),
            ("keep_padding".into(), self.keep_padding.to_string()),
            ("eval_seed".into(), self.eval_seed.to_string()),
        ]
    }

    /// Applies one `key=value` setting; `false` if the key is not a
    /// training field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "objective" | "mode" => self.objective = value.parse()?,
            "ratio" => self.span = value.parse()?,
            "batch_tokens" => self.batch_tokens = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "eps" => self.adam.eps = num(key, value)?,
            "warmup" => self.adam.warmup = num(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "keep_padding" => self.keep_padding = num(key, value)?,
            "eval_seed" => self.eval_seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub target_tokens: usize,
}

/// Options for [`mass_step`].
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOptions {
    pub step: usize,
    pub clip_norm: Option<f64>,
    pub freeze_encoder: bool,
    pub dropout_seed: Option<u64>,
}

/// Token-weighted mean loss of a batch and its parameter gradients.
pub fn batch_loss_and_grads(
    model: &Transformer,
    batch: &[MaskedExample],
    freeze_encoder: bool,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamGrads, usize)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut s = Session::new(
        model,
        |i| !(freeze_encoder && model.is_encoder_param(i)),
        dropout_seed,
    );
    let (loss, total) = batch_loss_var(&mut s, batch)?;
    let value = s.value(loss).item();
    let grads = s.backward(loss)?;
    Ok((value, grads, total))
}

/// Mean per-token negative log-likelihood over every target in `batch`.
pub fn batch_loss_var(s: &mut Session<'_>, batch: &[MaskedExample]) -> Result<(crate::Var, usize)> {
    let total: usize = batch.iter().map(MaskedExample::num_targets).sum();
    let mut acc = None;
    for ex in batch {
        let l = s.example_loss(ex)?;
        let w = ex.num_targets() as f64 / total as f64;
        let l = s.tape.scale(l, w);
        acc = Some(match acc {
            None => l,
            Some(a) => s.tape.add(a, l)?,
        });
    }
    Ok((acc.expect("non-empty batch"), total))
}

/// Forward, backward and Adam update on one batch; returns the pre-update loss.
pub fn mass_step(
    model: &mut Transformer,
    batch: &[MaskedExample],
    adam: &mut AdamState,
    opts: StepOptions,
) -> Result<StepOutcome> {
    let (loss, mut grads, target_tokens) =
        batch_loss_and_grads(model, batch, opts.freeze_encoder, opts.dropout_seed)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opts.step,
            loss,
            examples: (0..batch.len()).collect(),
        });
    }
    let grad_norm = grads.global_norm();
    if let Some(cap) = opts.clip_norm {
        if grad_norm > cap {
            grads.scale(cap / grad_norm);
        }
    }
    let freeze = opts.freeze_encoder;
    let encoder: Vec<bool> = (0..model.params().len())
        .map(|i| model.is_encoder_param(i))
        .collect();
    adam.update(model.params_mut(), &grads, |i| !(freeze && encoder[i]))?;
    Ok(StepOutcome {
        loss,
        grad_norm,
        target_tokens,
    })
}

/// One row of the pre-training report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub mode: String,
    pub k_ratio: String,
    /// Mean training loss since the previous row; NaN on the initial row.
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub seed: u64,
}

impl ReportRow {
    pub fn record(&self) -> Record {
        Record::new()
            .with("step", self.step)
            .with("mode", &self.mode)
            .with("k_ratio", &self.k_ratio)
            .with("train_loss", self.train_loss)
            .with("valid_ppl", self.valid_ppl)
            .with("seed", self.seed)
    }
}

/// Counters gathered while training.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub batches_per_language: Vec<usize>,
    pub encoder_tokens: usize,
    pub decoder_tokens: usize,
    pub target_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Transformer,
    pub rows: Vec<ReportRow>,
    pub stats: TrainStats,
}

/// Monolingual sentences for one language, already tokenised.
#[derive(Debug, Clone, Default)]
pub struct LanguageData {
    pub train: Vec<Vec<TokenId>>,
    pub valid: Vec<Vec<TokenId>>,
}

struct Phase {
    mode: Mode,
    span: SpanLength,
    freeze_encoder: bool,
    label: String,
}

fn phases(cfg: &TrainConfig) -> Vec<(usize, Phase)> {
    match cfg.objective {
        Objective::Masked(mode) => vec![(
            cfg.steps,
            Phase {
                mode,
                span: cfg.span,
                freeze_encoder: false,
                label: mode.to_string(),
            },
        )],
        Objective::BertLm => {
            let first = cfg.steps.div_ceil(2);
            vec![
                (
                    first,
                    Phase {
                        mode: Mode::Mass,
                        span: SpanLength::Single,
                        freeze_encoder: false,
                        label: "bert+lm:mlm".into(),
                    },
                ),
                (
                    cfg.steps - first,
                    Phase {
                        mode: Mode::Mass,
                        span: SpanLength::Ratio(1.0),
                        freeze_encoder: true,
                        label: "bert+lm:lm".into(),
                    },
                ),
            ]
        }
    }
}

/// Builds one example with its own seeded generator.
pub fn make_example(
    masker: &Masker,
    tokens: &[TokenId],
    mode: Mode,
    span: SpanLength,
    language: usize,
    seed: u64,
    keep_padding: bool,
) -> Result<MaskedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_span(tokens.len(), span, &mut rng);
    let ex = masker.build(tokens, s, mode, language, &mut rng)?;
    Ok(if keep_padding && matches!(mode, Mode::Mass | Mode::Discrete) {
        ex.to_keep_padding()
    } else {
        ex
    })
}

/// Fixed validation examples for one phase.
pub fn validation_set(
    masker: &Masker,
    data: &[LanguageData],
    mode: Mode,
    span: SpanLength,
    eval_seed: u64,
) -> Result<Vec<MaskedExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut out = Vec::new();
    for (lang, d) in data.iter().enumerate() {
        for s in &d.valid {
            out.push(make_example(masker, s, mode, span, lang, rng.gen(), false)?);
        }
    }
    Ok(out)
}

/// `exp` of the token-weighted mean negative log-likelihood.
pub fn examples_perplexity(model: &Transformer, examples: &[MaskedExample]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut s = model.eval_session();
        let loss = s.example_loss(ex)?;
        let n = ex.num_targets();
        nll += s.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("no evaluable tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Round-robin batch sampler over one language's sentences.
struct Sampler {
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Sampler { order, next: 0 }
    }

    fn batch<R: Rng>(&mut self, sentences: &[Vec<TokenId>], budget: usize, rng: &mut R) -> Vec<usize> {
        let mut picked = Vec::new();
        let mut used = 0;
        loop {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            let idx = self.order[self.next];
            let len = sentences[idx].len();
            if !picked.is_empty() && used + len > budget {
                return picked;
            }
            picked.push(idx);
            used += len;
            self.next += 1;
            if used >= budget {
                return picked;
            }
        }
    }
}

/// Runs the pre-training loop from `model`, alternating languages per batch.
pub fn pretrain(
    mut model: Transformer,
    data: &[LanguageData],
    masker: &Masker,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() || data.iter().any(|d| d.train.is_empty()) {
        return Err(Error::Input("pre-training needs a non-empty corpus per language".into()));
    }
    if data.len() > model.config().num_languages {
        return Err(Error::Config(format!(
            "{} corpora but the model has {} languages",
            data.len(),
            model.config().num_languages
        )));
    }
    let longest = data.iter().flat_map(|d| d.train.iter().map(Vec::len)).max().unwrap_or(0);
    if cfg.batch_tokens < longest {
        return Err(Error::Config(format!(
            "batch_tokens {} is below the longest sentence ({longest})",
            cfg.batch_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samplers: Vec<Sampler> = data.iter().map(|d| Sampler::new(d.train.len(), &mut rng)).collect();
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut stats = TrainStats {
        batches_per_language: vec![0; data.len()],
        ..TrainStats::default()
    };
    let has_valid = data.iter().any(|d| !d.valid.is_empty());
    let mut rows = Vec::new();
    let mut step = 0;
    let mut since_eval = (0.0, 0usize);

    let schedule = phases(cfg);
    let k_label = cfg.span.to_string();
    for (phase_steps, phase) in &schedule {
        let valid = if has_valid {
            validation_set(masker, data, phase.mode, phase.span, cfg.eval_seed)?
        } else {
            Vec::new()
        };
        let eval = |model: &Transformer, step: usize, train: (f64, usize)| -> Result<ReportRow> {
            let ppl = if valid.is_empty() {
                f64::NAN
            } else {
                examples_perplexity(model, &valid)?
            };
            let row = ReportRow {
                step,
                mode: phase.label.clone(),
                k_ratio: k_label.clone(),
                train_loss: if train.1 == 0 {
                    f64::NAN
                } else {
                    train.0 / train.1 as f64
                },
                valid_ppl: ppl,
                seed: cfg.seed,
            };
            log::info!("{}", row.record());
            Ok(row)
        };
        if step == 0 {
            rows.push(eval(&model, 0, (0.0, 0))?);
        }
        for _ in 0..*phase_steps {
            let lang = step % data.len();
            let picked = samplers[lang].batch(&data[lang].train, cfg.batch_tokens, &mut rng);
            let batch = picked
                .iter()
                .map(|&i| {
                    make_example(
                        masker,
                        &data[lang].train[i],
                        phase.mode,
                        phase.span,
                        lang,
                        rng.gen(),
                        cfg.keep_padding,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stats.batches_per_language[lang] += 1;
            for ex in &batch {
                stats.encoder_tokens += ex.encoder_input.len();
                stats.decoder_tokens += ex.decoder_input.len();
            }
            let out = mass_step(
                &mut model,
                &batch,
                &mut adam,
                StepOptions {
                    step,
                    clip_norm: cfg.clip_norm,
                    freeze_encoder: phase.freeze_encoder,
                    dropout_seed: Some(rng.gen()),
                },
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { step, loss, .. } => Error::NonFiniteLoss {
                    step,
                    loss,
                    examples: picked.clone(),
                },
                other => other,
            })?;
            stats.target_tokens += out.target_tokens;
            since_eval.0 += out.loss;
            since_eval.1 += 1;
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                rows.push(eval(&model, step, since_eval)?);
                since_eval = (0.0, 0);
            }
        }
        if since_eval.1 > 0 && rows.last().map(|r| r.step) != Some(step) {
            rows.push(eval(&model, step, since_eval)?);
            since_eval = (0.0, 0);
        }
    }
    Ok(PretrainOutcome { model, rows, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn scalar_params(w: f64) -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            model_dim: 2,
            heads: 1,
            ffn_dim: 2,
            vocab_size: 6,
            ..ModelConfig::default()
        };
        let mut p = Transformer::new(cfg, 0).unwrap().params().clone();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = w);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(0.5);
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.update(&mut p, &ParamGrads::zeros_like(&before), |_| true).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.0);
        let mut g = ParamGrads::zeros_like(&p);
        g.0[0].data_mut()[0] = 1.0;
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.update(&mut p, &g, |_| true).unwrap();
        let moved = p.tensors()[0].data()[0];
        assert!((moved + 1e-4).abs() < 1e-11, "{moved}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = scalar_params(1.0);
        let mut g = ParamGrads::zeros_like(&p);
        for t in &mut g.0 {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.update(&mut p, &g, |i| i != 0).unwrap();
        assert!(p.tensors()[0].data().iter().all(|&v| v == 1.0));
        assert!(p.tensors()[1].data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = scalar_params(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let g = ParamGrads(vec![Tensor::zeros(&[1])]);
        assert!(adam.update(&mut p, &g, |_| true).is_err());
    }

    #[test]
    fn objective_names() {
        for o in Objective::ALL {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
        assert!("bert".parse::<Objective>().is_err());
    }

    #[test]
    fn config_round_trips_through_pairs() {
        let cfg = TrainConfig {
            objective: Objective::BertLm,
            span: SpanLength::Single,
            clip_norm: None,
            steps: 17,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn bert_lm_phases_split_steps() {
        let cfg = TrainConfig {
            objective: Objective::BertLm,
            steps: 7,
            ..TrainConfig::default()
        };
        let p = phases(&cfg);
        assert_eq!(p[0].0 + p[1].0, 7);
        assert!(!p[0].1.freeze_encoder && p[1].1.freeze_encoder);
        assert_eq!(p[0].1.span, SpanLength::Single);
    }
}
