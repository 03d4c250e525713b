//! Experiment plumbing shared by the `mass` binary and the acceptance suite:
//! config files, the cipher task pipeline, k-sweeps, ablations and run
//! manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::corpus::ingest;
use crate::decoding::DecodeOptions;
use crate::error::{Error, Result};
use crate::finetune::{bidirectional, finetune_supervised, BleuProbe, CipherSizes, CipherTask, TokenPair};
use crate::masking::{Masker, SpanLength};
use crate::model::{ModelConfig, Transformer};
use crate::report::Record;
use crate::tokenizer::Bpe;
use crate::training::{pretrain, LanguageData, Objective, ReportRow, TrainConfig};

/// Everything one pretrain → fine-tune → evaluate run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub merges: usize,
    pub sizes: CipherSizes,
    pub task_seed: u64,
    pub beam: usize,
    pub max_len: usize,
    pub smooth_bleu: bool,
    pub max_tokens: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                steps: 300,
                eval_every: 0,
                ..TrainConfig::default()
            },
            merges: 512,
            sizes: CipherSizes::default(),
            task_seed: 7,
            beam: 5,
            max_len: 24,
            smooth_bleu: false,
            max_tokens: crate::corpus::DEFAULT_MAX_TOKENS,
        }
    }
}

impl ExperimentConfig {
    /// Applies one setting. Model and pre-training keys are bare
    /// (`model_dim`, `steps`); fine-tuning keys take a `finetune.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        if let Some(k) = key.strip_prefix("finetune.") {
            if self.finetune.set(k, value)? {
                return Ok(());
            }
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        match key {
            "merges" => self.merges = num(key, value)?,
            "task_seed" => self.task_seed = num(key, value)?,
            "mono" => self.sizes.mono = num(key, value)?,
            "valid" => self.sizes.valid = num(key, value)?,
            "pairs" => self.sizes.pairs = num(key, value)?,
            "test" => self.sizes.test = num(key, value)?,
            "beam" => self.beam = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "smooth_bleu" => self.smooth_bleu = num(key, value)?,
            "max_tokens" => self.max_tokens = num(key, value)?,
            _ => {
                if !self.model.set(key, value)? && !self.pretrain.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .model
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| k != "vocab_size")
            .collect();
        out.extend(self.pretrain.to_pairs());
        out.extend(
            self.finetune
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("finetune.{k}"), v)),
        );
        for (k, v) in [
            ("merges", self.merges.to_string()),
            ("task_seed", self.task_seed.to_string()),
            ("mono", self.sizes.mono.to_string()),
            ("valid", self.sizes.valid.to_string()),
            ("pairs", self.sizes.pairs.to_string()),
            ("test", self.sizes.test.to_string()),
            ("beam", self.beam.to_string()),
            ("max_len", self.max_len.to_string()),
            ("smooth_bleu", self.smooth_bleu.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
        ] {
            out.push((k.to_string(), v));
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Language names used for the cipher pair.
pub fn cipher_languages() -> Vec<String> {
    vec!["a".to_string(), "b".to_string()]
}

/// The cipher task tokenised with BPE codes learned on its monolingual text.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub task: CipherTask,
    pub bpe: Bpe,
    pub mono: Vec<LanguageData>,
    pub pairs: Vec<TokenPair>,
}

impl PreparedTask {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let task = CipherTask::generate(cfg.task_seed, cfg.sizes)?;
        let bpe = Bpe::learn(task.bpe_corpus(), cfg.merges, &cipher_languages())?;
        let tok = |v: &[String]| ingest(&bpe, v, cfg.max_tokens).sentences;
        let mono = vec![
            LanguageData {
                train: tok(&task.mono_a),
                valid: tok(&task.valid_a),
            },
            LanguageData {
                train: tok(&task.mono_b),
                valid: tok(&task.valid_b),
            },
        ];
        let pairs: Vec<_> = task
            .pairs
            .iter()
            .map(|(a, b)| (bpe.encode(a), bpe.encode(b)))
            .collect();
        let pairs = bidirectional(&pairs, 0, 1);
        Ok(PreparedTask {
            task,
            bpe,
            mono,
            pairs,
        })
    }

    pub fn masker(&self) -> Masker {
        Masker::new(self.bpe.vocab().ordinary_ids())
    }

    pub fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.bpe.vocab().len(),
            num_languages: 2,
            ..cfg.model.clone()
        }
    }

    /// A→B BLEU on the held-out pairs.
    pub fn probe(&self, cfg: &ExperimentConfig) -> BleuProbe<'_> {
        let decode = DecodeOptions::new(self.bpe.vocab().ordinary_ids().start)
            .with_beam(cfg.beam)
            .with_max_len(cfg.max_len);
        let mut p = BleuProbe::new(&self.bpe, &self.task.test, 0, 1, decode);
        p.smooth = cfg.smooth_bleu;
        p
    }
}

/// Outcome of one pretrain → fine-tune run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Final validation perplexity of pre-training (NaN without pre-training).
    pub pretrain_ppl: f64,
    pub bleu: f64,
    pub pretrain_rows: Vec<ReportRow>,
    pub model: Transformer,
}

/// Pre-trains with `objective`/`span` (or skips it when `None`), then
/// fine-tunes on the cipher pairs and reports A→B BLEU.
pub fn run_downstream(
    prep: &PreparedTask,
    cfg: &ExperimentConfig,
    objective: Option<(Objective, SpanLength)>,
    seed: u64,
) -> Result<RunResult> {
    let init = Transformer::new(prep.model_config(cfg), seed)?;
    let (model, pretrain_ppl, pretrain_rows) = match objective {
        Some((objective, span)) => {
            let tc = TrainConfig {
                objective,
                span,
                seed,
                ..cfg.pretrain.clone()
            };
            let out = pretrain(init, &prep.mono, &prep.masker(), &tc)?;
            let ppl = out.rows.last().map_or(f64::NAN, |r| r.valid_ppl);
            (out.model, ppl, out.rows)
        }
        None => (init, f64::NAN, Vec::new()),
    };
    let ft = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let out = finetune_supervised(model, &prep.pairs, &ft, None)?;
    let bleu = prep.probe(cfg).bleu(&out.model)?;
    Ok(RunResult {
        pretrain_ppl,
        bleu,
        pretrain_rows,
        model: out.model,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of a soft experimental criterion: reported, never fatal.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SoftCheck {
    pub fn record(&self) -> Record {
        Record::new()
            .with("check", &self.name)
            .with("status", if self.passed { "pass" } else { "flagged" })
            .with("detail", &self.detail)
    }
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Per-(setting, seed) rows plus per-setting medians.
#[derive(Debug, Clone, Default)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// `values[i][s]`: downstream BLEU of setting `i` under seed `s`.
    pub values: Vec<Vec<f64>>,
    pub ppl: Vec<Vec<f64>>,
    pub rows: Vec<Record>,
}

impl Comparison {
    pub fn medians(&self) -> Vec<f64> {
        self.values.iter().map(|v| median(v)).collect()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// One summary record per setting: median and raw seed values.
    pub fn summary(&self, key: &str) -> Vec<Record> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Record::new()
                    .with(key, l)
                    .with("median_pretrain_ppl", median(&self.ppl[i]))
                    .with("median_bleu", median(&self.values[i]))
                    .with("bleu_per_seed", join(&self.values[i]))
            })
            .collect()
    }

    /// Median of `a` ≥ median of `b`.
    pub fn at_least(&self, a: &str, b: &str) -> Option<SoftCheck> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        let (ma, mb) = (median(&self.values[i]), median(&self.values[j]));
        Some(SoftCheck {
            name: format!("{a}>={b}"),
            passed: ma >= mb,
            detail: format!("{a}={ma:.4}[{}];{b}={mb:.4}[{}]", join(&self.values[i]), join(&self.values[j])),
        })
    }
}

/// Runs `settings` × `seeds`, calling `row` for each finished run.
fn compare(
    prep: &PreparedTask,
    cfg: &ExperimentConfig,
    settings: &[(String, Option<(Objective, SpanLength)>)],
    seeds: &[u64],
    key: &str,
    on_row: &mut dyn FnMut(&Record),
) -> Result<Comparison> {
    let mut c = Comparison::default();
    for (label, objective) in settings {
        c.labels.push(label.clone());
        c.values.push(Vec::new());
        c.ppl.push(Vec::new());
        for &seed in seeds {
            let r = run_downstream(prep, cfg, *objective, seed)?;
            let record = Record::new()
                .with(key, label)
                .with("seed", seed)
                .with("pretrain_ppl", r.pretrain_ppl)
                .with("downstream_metric", r.bleu);
            on_row(&record);
            c.rows.push(record);
            c.values.last_mut().unwrap().push(r.bleu);
            c.ppl.last_mut().unwrap().push(r.pretrain_ppl);
        }
    }
    Ok(c)
}

/// One pretrain + fine-tune per ratio and seed, MASS objective.
pub fn ksweep(
    prep: &PreparedTask,
    cfg: &ExperimentConfig,
    ratios: &[SpanLength],
    seeds: &[u64],
    on_row: &mut dyn FnMut(&Record),
) -> Result<Comparison> {
    if ratios.len() < 2 {
        return Err(Error::Config("a k-sweep needs at least two ratios".into()));
    }
    for r in ratios {
        r.validate()?;
    }
    let settings: Vec<_> = ratios
        .iter()
        .map(|&r| (r.to_string(), Some((Objective::Masked(crate::masking::Mode::Mass), r))))
        .collect();
    compare(prep, cfg, &settings, seeds, "ratio", on_row)
}

/// The sweep's best median must sit strictly between the extremes.
pub fn interior_best(c: &Comparison) -> SoftCheck {
    let m = c.medians();
    let best = (0..m.len()).fold(0, |b, i| if m[i] > m[b] { i } else { b });
    let is_extreme = |label: &str| label == SpanLength::Single.to_string() || label == SpanLength::Ratio(1.0).to_string();
    let ties_extreme = m
        .iter()
        .zip(&c.labels)
        .any(|(&v, l)| is_extreme(l) && v >= m[best]);
    SoftCheck {
        name: "ksweep_interior_best".into(),
        passed: !is_extreme(&c.labels[best]) && !ties_extreme,
        detail: c
            .labels
            .iter()
            .zip(&m)
            .map(|(l, v)| format!("{l}={v:.4}"))
            .collect::<Vec<_>>()
            .join(";"),
    }
}

/// Identical-budget runs per objective (plus `none` for random init).
pub fn ablate(
    prep: &PreparedTask,
    cfg: &ExperimentConfig,
    objectives: &[Option<Objective>],
    seeds: &[u64],
    on_row: &mut dyn FnMut(&Record),
) -> Result<Comparison> {
    let settings: Vec<_> = objectives
        .iter()
        .map(|o| match o {
            Some(o) => (o.to_string(), Some((*o, cfg.pretrain.span))),
            None => ("none".to_string(), None),
        })
        .collect();
    compare(prep, cfg, &settings, seeds, "mode", on_row)
}

/// Parses an objective list such as `mass,discrete,none`.
pub fn parse_objectives(text: &str) -> Result<Vec<Option<Objective>>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| if s == "none" { Ok(None) } else { s.parse().map(Some) })
        .collect()
}

pub fn parse_ratios(text: &str) -> Result<Vec<SpanLength>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Provenance of one CLI invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started: u64,
    pub finished: u64,
    pub code_version: String,
    /// Hash of everything that determines the run's outputs.
    pub id: String,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// `settings` is the effective configuration; inputs are hashed by content.
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        settings: &str,
        seed: u64,
        inputs: &[PathBuf],
    ) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(settings.as_bytes());
        h.update([0]);
        h.update(seed.to_le_bytes());
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            h.update(Sha256::digest(&bytes));
        }
        let id = hex::encode(&h.finalize()[..8]);
        Ok(RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            inputs: inputs.to_vec(),
            outputs: Vec::new(),
            started: unix_now(),
            finished: 0,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            id,
        })
    }

    pub fn finish(&mut self, outputs: &[PathBuf]) {
        self.outputs = outputs.to_vec();
        self.finished = unix_now();
    }

    pub fn record(&self) -> Record {
        let paths = |v: &[PathBuf]| {
            v.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        Record::new()
            .with("manifest", &self.id)
            .with("command", &self.command)
            .with(
                "config",
                self.config_path
                    .as_ref()
                    .map_or("-".to_string(), |p| p.display().to_string()),
            )
            .with("seed", self.seed)
            .with("inputs", paths(&self.inputs))
            .with("outputs", paths(&self.outputs))
            .with("started", self.started)
            .with("finished", self.finished)
            .with("code_version", &self.code_version)
    }

    /// Writes `<dir>/manifest-<id>.txt`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.txt", self.id));
        fs::write(&path, format!("{}\n", self.record())).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
