//! `mass`: corpus generation, BPE, pre-training, fine-tuning, translation,
//! evaluation, k-sweeps and ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mass_core::checkpoint;
use mass_core::corpus::{self, ingest, SyntheticGrammar};
use mass_core::decoding::{translate, DecodeOptions};
use mass_core::eval::{corpus_bleu, perplexity, total_nll};
use mass_core::finetune::{
    backtranslate_round, bidirectional, check_vocab, finetune_supervised, BleuProbe, BtConfig, Cipher,
    CipherSizes, CipherTask, ModelTranslator, MonoPair, VOCAB_KEY,
};
use mass_core::harness::{
    ablate, interior_best, ksweep, parse_objectives, parse_ratios,
    ExperimentConfig, PreparedTask, RunManifest,
};
use mass_core::masking::Masker;
use mass_core::model::{Metadata, ModelConfig, Transformer};
use mass_core::report::{records_to_text, to_tsv, Record};
use mass_core::tokenizer::Bpe;
use mass_core::training::{pretrain, LanguageData};

#[derive(Parser)]
#[command(name = "mass", version, about = "Masked sequence-to-sequence pre-training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic corpus and its cipher-pair splits.
    GenCorpus(GenCorpusArgs),
    /// Learn BPE codes from one or more text files.
    LearnBpe(LearnBpeArgs),
    /// Pre-train on monolingual corpora.
    Pretrain(PretrainArgs),
    /// Fine-tune on pairs, or with back-translation on monolingual corpora.
    Finetune(FinetuneArgs),
    /// Translate a file line by line.
    Translate(TranslateArgs),
    /// BLEU of a hypothesis file, or translation perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Pre-train and fine-tune once per mask ratio.
    Ksweep(SweepArgs),
    /// Pre-train and fine-tune once per objective.
    Ablate(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file (key=value records).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    lines: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct LearnBpeArgs {
    /// Comma-separated training text files.
    #[arg(long, value_delimiter = ',', required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    merges: usize,
    /// Comma-separated language names.
    #[arg(long, value_delimiter = ',', default_value = "a,b")]
    languages: Vec<String>,
    /// Directory receiving vocab.txt and merges.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated monolingual files, one per language in vocabulary order.
    #[arg(long, value_delimiter = ',', required = true)]
    corpus: Vec<PathBuf>,
    /// Comma-separated validation files, aligned with --corpus.
    #[arg(long, value_delimiter = ',')]
    valid: Vec<PathBuf>,
    /// Directory holding vocab.txt and merges.txt.
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Tab-separated pairs (supervised), or with --back-translate two
    /// comma-separated monolingual files.
    #[arg(long, value_delimiter = ',', required = true)]
    corpus: Vec<PathBuf>,
    /// Held-out pairs scored with BLEU at each evaluation.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    checkpoint_in: PathBuf,
    #[arg(long)]
    checkpoint_out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value = "a")]
    from: String,
    #[arg(long, default_value = "b")]
    to: String,
    #[arg(long)]
    back_translate: bool,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 200)]
    pairs_per_round: usize,
    /// Mix the masked objective into back-translation rounds.
    #[arg(long)]
    mix_mass: bool,
    /// Write the last round's pseudo pairs here.
    #[arg(long)]
    pseudo_out: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    checkpoint_in: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value = "a")]
    from: String,
    #[arg(long, default_value = "b")]
    to: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    hyp: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    smooth: bool,
    /// Tab-separated pairs for perplexity (with --checkpoint-in).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    bpe: Option<PathBuf>,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long, default_value = "a")]
    from: String,
    #[arg(long, default_value = "b")]
    to: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Ratios for ksweep (e.g. 1/m,0.5,m).
    #[arg(long, default_value = "1/m,0.5,m")]
    ratio: String,
    /// Objectives for ablate; `none` is random initialisation.
    #[arg(long, default_value = "mass,discrete,feed,dae,bert+lm")]
    mode: String,
    /// Comma-separated seeds; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Tab-separated table of per-run rows.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_bpe(dir: &Path) -> Result<Bpe> {
    Bpe::load(&dir.join("vocab.txt"), &dir.join("merges.txt"))
        .with_context(|| format!("BPE codes in {}", dir.display()))
}

fn language(bpe: &Bpe, name: &str) -> Result<usize> {
    bpe.vocab()
        .languages()
        .iter()
        .position(|l| l == name)
        .with_context(|| format!("language {name:?} is not in the vocabulary"))
}

fn load_checkpoint(path: &Path, bpe: &Bpe) -> Result<(Transformer, Metadata)> {
    let (model, meta) =
        checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    check_vocab(&model, &meta, bpe.vocab())?;
    Ok((model, meta))
}

fn save_checkpoint(path: &Path, model: &Transformer, bpe: &Bpe, manifest: &RunManifest) -> Result<()> {
    let mut meta = Metadata::new();
    meta.insert(VOCAB_KEY.into(), bpe.vocab().fingerprint());
    meta.insert("manifest".into(), manifest.id.clone());
    meta.insert("command".into(), manifest.command.clone());
    checkpoint::save(path, model, &meta)?;
    Ok(())
}

/// Writes records to `path` (first record names the manifest) or stdout.
fn emit(path: Option<&Path>, manifest: &RunManifest, records: &[Record]) -> Result<()> {
    let mut all = vec![Record::new()
        .with("manifest", &manifest.id)
        .with("command", &manifest.command)];
    all.extend_from_slice(records);
    let text = records_to_text(&all);
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn finish(mut manifest: RunManifest, outputs: &[PathBuf]) -> Result<()> {
    manifest.finish(outputs);
    let dir = outputs
        .first()
        .and_then(|p| p.parent())
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    manifest.write(dir)?;
    Ok(())
}

fn manifest(name: &str, common: &Common, cfg: &ExperimentConfig, extra: &str, inputs: &[PathBuf]) -> Result<RunManifest> {
    let settings = format!("{}{extra}", cfg.to_text());
    Ok(RunManifest::new(name, common.config.as_deref(), &settings, common.seed, inputs)?)
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let grammar = SyntheticGrammar::new(a.seed);
    let sentences = grammar.generate(a.lines, a.seed.wrapping_add(1));
    let cipher = Cipher::new(&grammar.lexicon(), a.seed ^ 0xc1f3)?;
    let task = CipherTask::from_sentences(&sentences, cipher, CipherSizes::for_corpus(a.lines))?;
    let d = &a.out_dir;
    corpus::write_lines(&d.join("corpus.txt"), &sentences)?;
    corpus::write_lines(&d.join("mono.a.txt"), &task.mono_a)?;
    corpus::write_lines(&d.join("mono.b.txt"), &task.mono_b)?;
    corpus::write_lines(&d.join("valid.a.txt"), &task.valid_a)?;
    corpus::write_lines(&d.join("valid.b.txt"), &task.valid_b)?;
    corpus::write_pairs(&d.join("pairs.tsv"), &task.pairs)?;
    corpus::write_pairs(&d.join("test.tsv"), &task.test)?;
    let (src, refs): (Vec<String>, Vec<String>) = task.test.iter().cloned().unzip();
    corpus::write_lines(&d.join("test.a.txt"), &src)?;
    corpus::write_lines(&d.join("test.b.txt"), &refs)?;
    println!(
        "{}",
        Record::new()
            .with("sentences", sentences.len())
            .with("mono", task.mono_a.len())
            .with("valid", task.valid_a.len())
            .with("pairs", task.pairs.len())
            .with("test", task.test.len())
    );
    Ok(())
}

fn cmd_learn_bpe(a: LearnBpeArgs) -> Result<()> {
    let mut lines = Vec::new();
    for p in &a.corpus {
        lines.extend(corpus::read_lines(p)?);
    }
    let bpe = Bpe::learn(lines.iter().map(String::as_str), a.merges, &a.languages)?;
    fs::create_dir_all(&a.out_dir)?;
    bpe.save(&a.out_dir.join("vocab.txt"), &a.out_dir.join("merges.txt"))?;
    println!(
        "{}",
        Record::new()
            .with("merges", bpe.merges().len())
            .with("vocab_size", bpe.vocab().len())
            .with("vocab_fingerprint", bpe.vocab().fingerprint())
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.pretrain.seed = a.common.seed;
    if let Some(m) = &a.mode {
        cfg.pretrain.objective = m.parse()?;
    }
    if let Some(r) = &a.ratio {
        cfg.pretrain.span = r.parse()?;
    }
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    if !a.valid.is_empty() && a.valid.len() != a.corpus.len() {
        bail!("--valid needs one file per --corpus file");
    }
    let bpe = load_bpe(&a.bpe)?;
    let mut data = Vec::new();
    for (i, p) in a.corpus.iter().enumerate() {
        let train = ingest(&bpe, &corpus::read_lines(p)?, cfg.max_tokens);
        if train.sentences.is_empty() {
            bail!("corpus {} has no usable sentences", p.display());
        }
        let valid = match a.valid.get(i) {
            Some(v) => ingest(&bpe, &corpus::read_lines(v)?, cfg.max_tokens).sentences,
            None => Vec::new(),
        };
        data.push(LanguageData {
            train: train.sentences,
            valid,
        });
    }
    let mut inputs: Vec<PathBuf> = a.corpus.iter().chain(&a.valid).cloned().collect();
    inputs.push(a.bpe.join("vocab.txt"));
    inputs.push(a.bpe.join("merges.txt"));
    if let Some(c) = &a.checkpoint_in {
        inputs.push(c.clone());
    }
    let man = manifest("pretrain", &a.common, &cfg, "", &inputs)?;
    let model = match &a.checkpoint_in {
        Some(c) => load_checkpoint(c, &bpe)?.0,
        None => {
            let mc = ModelConfig {
                vocab_size: bpe.vocab().len(),
                num_languages: bpe.vocab().languages().len().max(1),
                ..cfg.model.clone()
            };
            Transformer::new(mc, a.common.seed)?
        }
    };
    let masker = Masker::new(bpe.vocab().ordinary_ids());
    let out = pretrain(model, &data, &masker, &cfg.pretrain)?;
    save_checkpoint(&a.checkpoint_out, &out.model, &bpe, &man)?;
    let mut records: Vec<Record> = out.rows.iter().map(|r| r.record()).collect();
    records.push(
        Record::new()
            .with("encoder_tokens", out.stats.encoder_tokens)
            .with("decoder_tokens", out.stats.decoder_tokens)
            .with("target_tokens", out.stats.target_tokens)
            .with(
                "batches_per_language",
                out.stats
                    .batches_per_language
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
    );
    emit(a.common.report.as_deref(), &man, &records)?;
    let mut outputs = vec![a.checkpoint_out.clone()];
    outputs.extend(a.common.report.clone());
    finish(man, &outputs)
}

fn decode_options(bpe: &Bpe, cfg: &ExperimentConfig, beam: Option<usize>) -> DecodeOptions {
    DecodeOptions::new(bpe.vocab().ordinary_ids().start)
        .with_beam(beam.unwrap_or(cfg.beam))
        .with_max_len(cfg.max_len)
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.finetune.seed = a.common.seed;
    if let Some(s) = a.steps {
        cfg.finetune.steps = s;
    }
    let bpe = load_bpe(&a.bpe)?;
    let (from, to) = (language(&bpe, &a.from)?, language(&bpe, &a.to)?);
    let mut inputs = a.corpus.clone();
    inputs.extend(a.test.clone());
    inputs.extend([a.bpe.join("vocab.txt"), a.bpe.join("merges.txt"), a.checkpoint_in.clone()]);
    let extra = format!(
        "from={}\nto={}\nback_translate={}\nrounds={}\npairs_per_round={}\nmix_mass={}\nbeam_flag={:?}\n",
        a.from, a.to, a.back_translate, a.rounds, a.pairs_per_round, a.mix_mass, a.beam
    );
    let man = manifest("finetune", &a.common, &cfg, &extra, &inputs)?;
    let (model, _) = load_checkpoint(&a.checkpoint_in, &bpe)?;
    let decode = decode_options(&bpe, &cfg, a.beam);
    let test = match &a.test {
        Some(p) => corpus::read_pairs(p)?,
        None => Vec::new(),
    };
    let probe = (!test.is_empty()).then(|| {
        let mut p = BleuProbe::new(&bpe, &test, from, to, decode);
        p.smooth = cfg.smooth_bleu;
        p
    });
    let (model, rows, pseudo) = if a.back_translate {
        if a.corpus.len() != 2 {
            bail!("--back-translate needs two monolingual files: --corpus A,B");
        }
        let mono_a = ingest(&bpe, &corpus::read_lines(&a.corpus[0])?, cfg.max_tokens).sentences;
        let mono_b = ingest(&bpe, &corpus::read_lines(&a.corpus[1])?, cfg.max_tokens).sentences;
        let bt = BtConfig {
            rounds: a.rounds,
            pairs_per_round: a.pairs_per_round,
            train: cfg.finetune.clone(),
            mix_mass: a.mix_mass,
        };
        // Pseudo-data uses greedy decoding unless a beam is requested.
        let translator = ModelTranslator(decode.with_beam(a.beam.unwrap_or(1)));
        let masker = Masker::new(bpe.vocab().ordinary_ids());
        let mono = MonoPair {
            a: &mono_a,
            b: &mono_b,
            lang_a: from,
            lang_b: to,
        };
        let mut model = model;
        let mut rows = Vec::new();
        let mut pseudo = Vec::new();
        for round in 0..bt.rounds {
            let r = backtranslate_round(
                model,
                mono,
                &bt,
                round,
                &translator,
                &masker,
                probe.as_ref(),
            )?;
            rows.extend(r.outcome.rows);
            model = r.outcome.model;
            pseudo = r.pseudo;
        }
        (model, rows, pseudo)
    } else {
        if a.corpus.len() != 1 {
            bail!("supervised fine-tuning takes one pair file");
        }
        let text_pairs = corpus::read_pairs(&a.corpus[0])?;
        let ids: Vec<_> = text_pairs
            .iter()
            .map(|(s, t)| (bpe.encode(s), bpe.encode(t)))
            .filter(|(s, t)| !s.is_empty() && !t.is_empty())
            .collect();
        if ids.is_empty() {
            bail!("no usable pairs in {}", a.corpus[0].display());
        }
        let out = finetune_supervised(model, &bidirectional(&ids, from, to), &cfg.finetune, probe.as_ref())?;
        (out.model, out.rows, Vec::new())
    };
    if let Some(p) = &a.pseudo_out {
        let text: Vec<(String, String)> = pseudo
            .iter()
            .map(|tp| (bpe.decode(&tp.source), bpe.decode(&tp.target)))
            .collect();
        corpus::write_pairs(p, &text)?;
    }
    save_checkpoint(&a.checkpoint_out, &model, &bpe, &man)?;
    let records: Vec<Record> = rows.iter().map(|r| r.record()).collect();
    emit(a.common.report.as_deref(), &man, &records)?;
    let mut outputs = vec![a.checkpoint_out.clone()];
    outputs.extend(a.common.report.clone());
    outputs.extend(a.pseudo_out.clone());
    finish(man, &outputs)
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let bpe = load_bpe(&a.bpe)?;
    let (from, to) = (language(&bpe, &a.from)?, language(&bpe, &a.to)?);
    let (model, _) = load_checkpoint(&a.checkpoint_in, &bpe)?;
    let opts = decode_options(&bpe, &cfg, a.beam);
    let mut out = Vec::new();
    for line in corpus::read_lines(&a.corpus)? {
        let ids = bpe.encode(&line);
        let ids = &ids[..ids.len().min(model.config().max_positions)];
        let text = if ids.is_empty() {
            String::new()
        } else {
            bpe.decode(translate(&model, ids, from, to, &opts)?.output())
        };
        out.push(text);
    }
    corpus::write_lines(&a.out, &out)?;
    println!("{}", Record::new().with("translated", out.len()).with("out", a.out.display()));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut records = Vec::new();
    if let (Some(h), Some(r)) = (&a.hyp, &a.reference) {
        let read = |p: &Path| -> Result<Vec<String>> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let (hyps, refs) = (read(h)?, read(r)?);
        let b = corpus_bleu(&hyps, &refs, a.smooth)?;
        records.push(
            Record::new()
                .with("bleu", b.score)
                .with("p1", b.precisions[0])
                .with("p2", b.precisions[1])
                .with("p3", b.precisions[2])
                .with("p4", b.precisions[3])
                .with("bp", b.brevity_penalty)
                .with("hyp_len", b.hyp_len)
                .with("ref_len", b.ref_len),
        );
    }
    if let Some(ck) = &a.checkpoint_in {
        let (Some(pairs), Some(bpe_dir)) = (&a.corpus, &a.bpe) else {
            bail!("perplexity needs --corpus (pairs) and --bpe with --checkpoint-in");
        };
        let bpe = load_bpe(bpe_dir)?;
        let (from, to) = (language(&bpe, &a.from)?, language(&bpe, &a.to)?);
        let (model, _) = load_checkpoint(ck, &bpe)?;
        let examples: Vec<_> = corpus::read_pairs(pairs)?
            .iter()
            .map(|(s, t)| mass_core::masking::MaskedExample::translation(&bpe.encode(s), from, &bpe.encode(t), to))
            .filter(|e| !e.encoder_input.is_empty())
            .collect();
        let (nll, n) = total_nll(&model, &examples)?;
        records.push(Record::new().with("ppl", perplexity(nll, n)?).with("tokens", n));
    }
    if records.is_empty() {
        bail!("eval needs --hyp and --reference, or --checkpoint-in with --corpus and --bpe");
    }
    let text = records_to_text(&records);
    if let Some(p) = &a.common.report {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn sweep_seeds(a: &SweepArgs) -> Vec<u64> {
    if a.seeds.is_empty() {
        vec![a.common.seed]
    } else {
        a.seeds.clone()
    }
}

fn write_sweep(a: &SweepArgs, man: RunManifest, c: &mass_core::harness::Comparison, key: &str, checks: Vec<Record>) -> Result<()> {
    let mut records = c.rows.clone();
    records.extend(c.summary(key));
    records.extend(checks);
    emit(a.common.report.as_deref(), &man, &records)?;
    let mut outputs: Vec<PathBuf> = a.common.report.iter().cloned().collect();
    if let Some(t) = &a.table {
        fs::write(t, to_tsv(&c.rows)).with_context(|| format!("writing {}", t.display()))?;
        outputs.push(t.clone());
    }
    if outputs.is_empty() {
        return Ok(());
    }
    finish(man, &outputs)
}

fn cmd_ksweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    let ratios = parse_ratios(&a.ratio)?;
    let seeds = sweep_seeds(&a);
    let man = manifest("ksweep", &a.common, &cfg, &format!("ratios={}\nseeds={seeds:?}\n", a.ratio), &[])?;
    let prep = PreparedTask::new(&cfg)?;
    let c = ksweep(&prep, &cfg, &ratios, &seeds, &mut |r| eprintln!("{r}"))?;
    let check = interior_best(&c).record();
    write_sweep(&a, man, &c, "ratio", vec![check])
}

fn cmd_ablate(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    let objectives = parse_objectives(&a.mode)?;
    let seeds = sweep_seeds(&a);
    let man = manifest("ablate", &a.common, &cfg, &format!("modes={}\nseeds={seeds:?}\n", a.mode), &[])?;
    let prep = PreparedTask::new(&cfg)?;
    let c = ablate(&prep, &cfg, &objectives, &seeds, &mut |r| eprintln!("{r}"))?;
    let checks = ["discrete", "feed", "dae", "bert+lm", "none"]
        .iter()
        .filter_map(|other| c.at_least("mass", other))
        .map(|s| s.record())
        .collect();
    write_sweep(&a, man, &c, "mode", checks)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::LearnBpe(a) => cmd_learn_bpe(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ksweep(a) => cmd_ksweep(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
