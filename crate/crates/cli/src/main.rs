use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use corecog::data::{generate_corpus, load_dialogs, save_dialogs, CorpusConfig};
use corecog::decode::{DecodeConfig, DecodeMode};
use corecog::eval::{check_compatible, evaluate, EvalReport};
use corecog::history::{DialogHistory, HistoryOptions, Speaker, Turn};
use corecog::kb::{load_kb, precompute_embeddings, KnowledgeBase};
use corecog::model::{load_checkpoint, save_checkpoint, ModelBundle, ModelConfig};
use corecog::pipeline::{respond, PipelineConfig};
use corecog::train::{corpus_vocab, prepare_examples, train, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "corecog", version, about = "Conversational recommender: data, training, evaluation, chat and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge base and dialog splits.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint with its report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Chat with a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Serve the HTTP chat API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1500)]
    n_dialogs: usize,
    #[arg(long, default_value_t = 10)]
    entities_per_type: usize,
    #[arg(long, default_value_t = 0.3)]
    chitchat_ratio: f64,
    #[arg(long, default_value_t = 0.25)]
    attribute_overlap: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; report.json and kb.json are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = DecodeMode::Hopskip)]
    decoder: DecodeMode,
    /// Comma-separated components to disable: rt (trigger), tc (type filter).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to kb.json next to the checkpoint.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, default_value_t = DecodeMode::Hopskip)]
    decoder: DecodeMode,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to kb.json next to the checkpoint.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    allow_origin: Option<String>,
    #[arg(long, default_value_t = DecodeMode::Hopskip)]
    decoder: DecodeMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Ablation {
    Rt,
    Tc,
}

/// Model width and depth; vocabulary and KB sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelShape {
    dim: usize,
    layers: usize,
    heads: usize,
    ffn_mult: usize,
    max_context_length: usize,
    entity_layers: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(0, 0, 0);
        Self { dim: d.dim, layers: d.layers, heads: d.heads, ffn_mult: d.ffn_mult, max_context_length: d.max_context_length, entity_layers: d.entity_layers }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelShape,
    train: TrainConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORECOG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = CorpusConfig {
        seed: a.seed,
        n_dialogs: a.n_dialogs,
        n_entities_per_type: a.entities_per_type,
        chitchat_ratio: a.chitchat_ratio,
        attribute_overlap: a.attribute_overlap,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    std::fs::write(a.out.join("kb.json"), corpus.kb.to_json()).with_context(|| format!("cannot write to {}", a.out.display()))?;
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        save_dialogs(split, a.out.join(format!("{name}.jsonl")))?;
    }
    println!(
        "wrote {} entities, {} train / {} dev / {} test dialogs to {}",
        corpus.kb.len(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path, split: &str) -> anyhow::Result<(KnowledgeBase, Vec<corecog::data::LabeledDialog>)> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let kb = load_kb(dir.join("kb.json"))?;
    let dialogs = load_dialogs(dir.join(format!("{split}.jsonl")))?;
    for d in &dialogs {
        d.validate_against(&kb)?;
    }
    Ok((kb, dialogs))
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)
            .with_context(|| format!("invalid config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let (kb, train_set) = load_data(&a.data, "train")?;
    let dev = load_dialogs(a.data.join("dev.jsonl")).ok();
    let mut model = init_model(&train_set, &kb, &cfg)?;
    let opts = HistoryOptions::new(cfg.train.history_len);
    let examples = prepare_examples(&train_set, &kb, &model, opts.clone())?;
    let dev_examples = dev.map(|d| prepare_examples(&d, &kb, &model, opts)).transpose()?;
    println!("training on {} examples for {} epochs", examples.len(), cfg.train.epochs);
    let report = train(&mut model, &examples, &kb, &cfg.train, dev_examples.as_deref(), |e| {
        let l = &e.losses;
        println!(
            "epoch {} loss {:.4} (trigger {:.4} type {:.4} entity {:.4} lm_fwd {:.4} lm_bwd {:.4})",
            e.epoch, l.total, l.trigger, l.type_, l.entity, l.lm_fwd, l.lm_bwd
        );
    })?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    save_checkpoint(&model, &a.out)?;
    let dir = a.out.parent().unwrap_or(Path::new("."));
    std::fs::write(dir.join("kb.json"), kb.to_json())?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if let Some(m) = &report.dev {
        println!("dev trigger_f1 {:.4} type_accuracy {:.4} recall@1 {:.4}", m.trigger_f1, m.type_accuracy, m.recall_at_1);
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn init_model(train_set: &[corecog::data::LabeledDialog], kb: &KnowledgeBase, cfg: &RunConfig) -> anyhow::Result<ModelBundle> {
    let vocab = corpus_vocab(train_set, kb);
    let s = &cfg.model;
    let mc = ModelConfig {
        dim: s.dim,
        layers: s.layers,
        heads: s.heads,
        ffn_mult: s.ffn_mult,
        max_context_length: s.max_context_length,
        entity_layers: s.entity_layers,
        ..ModelConfig::desk(vocab.len(), kb.num_types(), kb.len())
    };
    Ok(ModelBundle::new(mc, vocab, cfg.train.seed)?)
}

fn pipeline_config(decoder: DecodeMode, ablate: &[Ablation]) -> PipelineConfig {
    PipelineConfig {
        use_trigger: !ablate.contains(&Ablation::Rt),
        use_type_filter: !ablate.contains(&Ablation::Tc),
        decoder: DecodeConfig::with_mode(decoder),
        ..PipelineConfig::default()
    }
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("cannot load checkpoint {}", a.ckpt.display()))?;
    let (kb, dialogs) = load_data(&a.data, &a.split)?;
    check_compatible(&model, &kb)?;
    let emb = precompute_embeddings(&kb, &model);
    let cfg = pipeline_config(a.decoder, &a.ablate);
    let (report, _) = evaluate(&model, &kb, &emb, &dialogs, &cfg)?;
    print_report(&report);
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let m = &r.metrics;
    println!("decoder {}  trigger {}  type filter {}", r.decoder, r.use_trigger, r.use_type_filter);
    println!("{:<24}{:>10}", "metric", "value");
    let rows = [
        ("R@1", m.r1),
        ("R@10", m.r10),
        ("R@50", m.r50),
        ("MRR", m.mrr),
        ("BLEU-1", m.bleu1),
        ("BLEU-2", m.bleu2),
        ("entity F1", m.entity_f1),
        ("multiset entity F1", m.multiset_f1),
        ("trigger F1", r.trigger_f1),
        ("type accuracy", r.type_accuracy),
        ("constraint satisfaction", r.constraint_satisfaction),
    ];
    for (name, v) in rows {
        println!("{name:<24}{v:>10.4}");
    }
    println!("{:<24}{:>10}", "agent turns", m.n);
    println!("{:<24}{:>10}", "rec turns", r.n_rec_turns);
    println!("{:<24}{:>10}", "triggered turns", r.n_triggered);
}

fn load_serving(ckpt: &Path, kb: Option<&Path>) -> anyhow::Result<PathBuf> {
    if !ckpt.is_file() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    Ok(match kb {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("kb.json"),
    })
}

fn chat(a: ChatArgs) -> anyhow::Result<()> {
    let kb_path = load_serving(&a.ckpt, a.kb.as_deref())?;
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("cannot load checkpoint {}", a.ckpt.display()))?;
    let kb = load_kb(&kb_path)?;
    check_compatible(&model, &kb)?;
    let emb = precompute_embeddings(&kb, &model);
    let cfg = pipeline_config(a.decoder, &[]);
    let mut history = DialogHistory::default();
    let mut trace = false;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut lines = stdin.lock().lines();
    loop {
        write!(out, "you> ")?;
        out.flush()?;
        let Some(line) = lines.next().transpose()? else { break };
        let text = line.trim();
        match text {
            "" => continue,
            ":quit" => break,
            ":trace" => {
                trace = !trace;
                writeln!(out, "trace {}", if trace { "on" } else { "off" })?;
                continue;
            }
            _ => {}
        }
        let decision = respond(&model, &kb, &emb, &history, text, &cfg)?;
        if trace {
            writeln!(out, "{}", serde_json::to_string_pretty(&decision)?)?;
        }
        let suffix = match decision.chosen {
            Some(e) => format!(" [rec: {}]", kb.entity(e)?.name),
            None => String::new(),
        };
        writeln!(out, "bot> {}{suffix}", decision.utterance)?;
        history.turns.push(Turn::from_text(Speaker::User, text, model.vocab(), &kb));
        history.turns.push(decision.agent_turn(&model, &kb));
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let kb_path = load_serving(&a.ckpt, a.kb.as_deref())?;
    let cfg = pipeline_config(a.decoder, &[]);
    let state = Arc::new(corecog_service::AppState::load(&a.ckpt, &kb_path, cfg)?);
    let app = corecog_service::router(state, a.allow_origin.as_deref())?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("cannot bind {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
