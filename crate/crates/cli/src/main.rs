//! `dfe` — command-line surface for the expression-token toolkit.
//!
//! Every command is a thin wrapper over one library operation, reads a
//! JSON run configuration plus flag overrides, and exits with a distinct
//! code per error family: 2 config, 3 missing/unreadable file, 4
//! dimension mismatch, 5 file format, 1 anything else.

use clap::{Args, Parser, Subcommand};
use dfe_core::analysis::{self, BinaryCode, EntropyNorm};
use dfe_core::checkpoint::Checkpoint;
use dfe_core::codec::{self, BlendshapeModel, HeatmapNorm};
use dfe_core::error::Error as CoreError;
use dfe_core::io as dio;
use dfe_core::model::Hyperparams;
use dfe_core::synth::{synth_generate, SynthSpec};
use dfe_core::tensor::Tensor;
use dfe_core::train::{train, TrainOptions};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dfe",
    about = "Discrete facial-expression tokens: train, encode, inspect, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(rename_all = "lowercase")]
enum EntropyNormCfg {
    #[default]
    Log2k,
    K,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(rename_all = "lowercase")]
enum HeatmapNormCfg {
    #[default]
    Max,
    P99,
}

/// JSON run configuration; unknown keys are rejected and every default
/// matches the published training recipe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: Hyperparams,
    entropy_norm: EntropyNormCfg,
    bias_in_template: bool,
    heatmap_norm: HeatmapNormCfg,
    features: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    blendshapes: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: Hyperparams::default(),
            entropy_norm: EntropyNormCfg::default(),
            bias_in_template: true,
            heatmap_norm: HeatmapNormCfg::default(),
            features: None,
            checkpoint: None,
            blendshapes: None,
            out: None,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CoreError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
    cfg.model.validate()?;
    Ok(cfg)
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic expression corpus with known ground truth
    Synth(SynthArgs),
    /// Train a tokenizer on a feature file
    Train(TrainArgs),
    /// Tokenize a feature file with a trained checkpoint
    Encode(EncodeArgs),
    /// Reconstruct expression vectors from a token table
    Decode(DecodeArgs),
    /// Export per-token expression templates
    Templates(TemplatesArgs),
    /// Render a deformation heatmap mesh for one expression
    Heatmap(HeatmapArgs),
    /// Token-usage diversity metrics
    Metrics(MetricsArgs),
    /// Exact-match retrieval over binary token codes
    Retrieve(RetrieveArgs),
    /// Bag-of-Words histograms per group
    Bow(BowArgs),
    /// Leave-one-out logistic classification over BoW features
    Classify(ClassifyArgs),
    /// Finite-difference check of the training gradients
    Gradcheck(GradcheckArgs),
    /// Pairwise displacement similarity between codewords
    Redundancy(RedundancyArgs),
    /// Displacement percentile curve across codewords
    Percentiles(PercentilesArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output feature CSV (or .dfef with --binary)
    #[arg(long)]
    out: PathBuf,
    /// Also write the ground-truth templates
    #[arg(long)]
    templates_out: Option<PathBuf>,
    /// Assign consecutive frames to groups of this size and write id,group
    #[arg(long)]
    groups_out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    group_size: usize,
    /// Also write the built-in synthetic blendshape model
    #[arg(long)]
    blendshapes_out: Option<PathBuf>,
    /// Write features as binary "DFEF" instead of CSV
    #[arg(long)]
    binary: bool,
    #[arg(long, default_value_t = 50)]
    dim: usize,
    #[arg(long, default_value_t = 12)]
    templates: usize,
    #[arg(long, default_value_t = 5)]
    sparsity: usize,
    #[arg(long, default_value_t = 20000)]
    n: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    m_lo: usize,
    #[arg(long, default_value_t = 1)]
    m_hi: usize,
    #[arg(long, default_value_t = 0.7)]
    weight_lo: f64,
    #[arg(long, default_value_t = 1.3)]
    weight_hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// Output checkpoint ("DFEM")
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    /// Disable per-epoch dead-code reinitialization
    #[arg(long)]
    no_dead_code_reinit: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Output token CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    /// Output feature CSV of reconstructions
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TemplatesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output feature CSV, one row per codebook entry
    #[arg(long)]
    out: PathBuf,
    /// Export bias-free offsets W e_k instead of b + W e_k
    #[arg(long)]
    bias_free: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Expression source: a feature file row ...
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// ... or a codebook template from a checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    token: Option<usize>,
    /// Blendshape file; defaults to the built-in synthetic model
    #[arg(long)]
    blendshapes: Option<PathBuf>,
    #[arg(long)]
    out_ply: PathBuf,
    /// Also write per-vertex distances
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Normalize by the 99th percentile instead of the max
    #[arg(long)]
    p99: bool,
    /// Render the bias-free template when using --token
    #[arg(long)]
    bias_free: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[command(subcommand)]
    which: MetricsCommand,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Normalized token-usage entropy
    Entropy {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        codebook_size: usize,
        /// Divide by K literally instead of log2(K)
        #[arg(long)]
        literal_k: bool,
        /// Print as JSON instead of key=value
        #[arg(long)]
        json: bool,
    },
    /// Average pairwise NMI between token presence columns
    Nmi {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        codebook_size: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    query_tokens: PathBuf,
    #[arg(long)]
    db_tokens: PathBuf,
    #[arg(long)]
    codebook_size: usize,
    /// Reference feature rows for the queries (defaults to db features)
    #[arg(long)]
    query_features: Option<PathBuf>,
    #[arg(long)]
    db_features: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_matches: usize,
    /// Queries and database are the same corpus: drop each query's own row
    #[arg(long)]
    exclude_self: bool,
    /// Per-query report CSV
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BowArgs {
    #[arg(long)]
    tokens: PathBuf,
    /// Group map CSV (id,group[,label])
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    codebook_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// BoW histogram CSV (group,p_0,..)
    #[arg(long)]
    bow: PathBuf,
    /// Label CSV: either `group,label` or `id,group,label`
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    /// Show the top-N important templates per class
    #[arg(long, default_value_t = 4)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Max coordinates checked per tensor
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RedundancyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    blendshapes: Option<PathBuf>,
    #[arg(long)]
    bias_free: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PercentilesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    blendshapes: Option<PathBuf>,
    /// Comma-separated displacement thresholds
    #[arg(long, default_value = "0,0.001,0.002,0.005,0.01,0.02,0.05,0.1")]
    thresholds: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bias_free: bool,
}

fn main() -> ExitCode {
    dfe_core::runtime::tune_allocator();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify_error(&e);
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}

fn classify_error(e: &CoreError) -> (&'static str, u8) {
    match e {
        CoreError::Config(_) | CoreError::DegenerateLabels(_) => ("config", 2),
        CoreError::Io(_) => ("io", 3),
        CoreError::DimMismatch { .. } | CoreError::IndexOutOfRange { .. } => ("dims", 4),
        CoreError::BadMagic { .. }
        | CoreError::UnsupportedVersion { .. }
        | CoreError::Corrupt(_)
        | CoreError::Parse(_) => ("format", 5),
        _ => ("internal", 1),
    }
}

fn run(cmd: Command) -> Result<(), CoreError> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Templates(a) => cmd_templates(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Bow(a) => cmd_bow(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Redundancy(a) => cmd_redundancy(a),
        Command::Percentiles(a) => cmd_percentiles(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CoreError> {
    let spec = SynthSpec {
        input_dim: a.dim,
        templates: a.templates,
        sparsity: a.sparsity,
        mix_lo: a.m_lo,
        mix_hi: a.m_hi,
        weight_lo: a.weight_lo,
        weight_hi: a.weight_hi,
        noise: a.noise,
        samples: a.n,
        seed: a.seed,
    };
    let (data, templates) = synth_generate(&spec)?;
    let ids: Vec<String> = (0..data.len()).map(|i| i.to_string()).collect();
    if a.binary {
        dio::write_features_binary(&a.out, &data.rows)?;
    } else {
        dio::write_features_csv(&a.out, Some(&ids), &data.rows)?;
    }
    if let Some(path) = a.templates_out {
        dio::write_features_csv(&path, None, &templates)?;
    }
    if let Some(path) = a.groups_out {
        if a.group_size == 0 {
            return Err(CoreError::Config("group-size must be positive".into()));
        }
        let rows: Vec<(String, String, Option<String>)> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), format!("g{}", i / a.group_size), None))
            .collect();
        dio::write_groups_csv(&path, &rows)?;
    }
    if let Some(path) = a.blendshapes_out {
        BlendshapeModel::synthetic(512, a.dim, a.seed).save(&path)?;
    }
    println!("wrote {} samples of dim {}", data.len(), data.dim());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CoreError> {
    let mut cfg = load_config(a.config.as_deref())?;
    let hp = &mut cfg.model;
    if let Some(v) = a.seed {
        hp.seed = v;
    }
    if let Some(v) = a.epochs {
        hp.epochs = v;
    }
    if let Some(v) = a.batch {
        hp.batch = v;
    }
    if let Some(v) = a.lr {
        hp.lr = v;
    }
    if let Some(v) = a.hidden {
        hp.hidden = v;
    }
    if let Some(v) = a.layers {
        hp.layers = v;
    }
    if let Some(v) = a.codebook_size {
        hp.codebook_size = v;
    }
    if let Some(v) = a.stages {
        hp.stages = v;
    }
    if a.no_dead_code_reinit {
        hp.dead_code_reinit = false;
    }
    hp.validate()?;
    let (_, rows) = dio::read_features(&a.features)?;
    if rows.shape[1] != hp.input_dim {
        return Err(CoreError::DimMismatch { expected: hp.input_dim, got: rows.shape[1] });
    }
    let dataset = dfe_core::synth::Dataset::from_rows(rows);
    let threads = std::env::var("DFE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let out = train(&dataset, hp, TrainOptions { threads })?;
    out.checkpoint.save(&a.out)?;
    if let Some(path) = a.loss_log {
        dio::write_loss_log(&path, &out.log)?;
    }
    let last = out.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final recon={} total={}",
        out.log.len(),
        last.recon,
        last.total
    );
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<(), CoreError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (params, hp) = codec::model_from_checkpoint(&ck)?;
    let (ids, mut rows) = dio::read_features(&a.features)?;
    if rows.shape[0] > 0 && rows.shape[1] != hp.input_dim {
        return Err(CoreError::DimMismatch { expected: hp.input_dim, got: rows.shape[1] });
    }
    dfe_core::train::apply_standardization(&ck, &mut rows)?;
    let mut out_rows: Vec<(String, Vec<usize>)> = Vec::with_capacity(ids.len());
    let dim = hp.input_dim;
    let iter = ids
        .iter()
        .enumerate()
        .map(|(i, id)| Ok((id.clone(), rows.data[i * dim..(i + 1) * dim].to_vec())));
    codec::tokenize_rows(&params, &hp, iter, |id, tokens| {
        out_rows.push((id, tokens.to_vec()));
        Ok(())
    })?;
    dio::write_tokens_csv(&a.out, &out_rows)?;
    println!("tokenized {} rows", out_rows.len());
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<(), CoreError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (params, hp) = codec::model_from_checkpoint(&ck)?;
    let tokens = dio::read_tokens_csv(&a.tokens)?;
    let mut rows = Tensor::zeros(vec![tokens.len(), hp.input_dim]);
    let mut ids = Vec::with_capacity(tokens.len());
    for (i, (id, toks)) in tokens.iter().enumerate() {
        let psi = params.dec.decode_tokens(&params.codebook, toks)?;
        rows.row_mut(i).copy_from_slice(&psi);
        ids.push(id.clone());
    }
    dio::write_features_csv(&a.out, Some(&ids), &rows)?;
    println!("decoded {} rows", ids.len());
    Ok(())
}

fn cmd_templates(a: TemplatesArgs) -> Result<(), CoreError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (params, hp) = codec::model_from_checkpoint(&ck)?;
    let mut rows = Tensor::zeros(vec![hp.codebook_size, hp.input_dim]);
    for k in 0..hp.codebook_size {
        let t = codec::token_template(&params, k, !a.bias_free)?;
        rows.row_mut(k).copy_from_slice(&t);
    }
    let ids: Vec<String> = (0..hp.codebook_size).map(|k| k.to_string()).collect();
    dio::write_features_csv(&a.out, Some(&ids), &rows)?;
    println!("wrote {} templates", hp.codebook_size);
    Ok(())
}

fn load_blendshapes(path: Option<&Path>, dim: usize) -> Result<BlendshapeModel, CoreError> {
    match path {
        Some(p) => {
            let bm = BlendshapeModel::load(p)?;
            if bm.dim() != dim {
                return Err(CoreError::DimMismatch { expected: dim, got: bm.dim() });
            }
            Ok(bm)
        }
        // built-in synthetic face model
        None => Ok(BlendshapeModel::synthetic(512, dim, 0)),
    }
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<(), CoreError> {
    let psi: Vec<f64> = match (&a.features, &a.checkpoint, a.token) {
        (Some(features), None, None) => {
            let (_, rows) = dio::read_features(features)?;
            if a.row >= rows.shape[0] {
                return Err(CoreError::Config(format!(
                    "row {} out of range ({} rows)",
                    a.row,
                    rows.shape[0]
                )));
            }
            rows.row(a.row).to_vec()
        }
        (None, Some(ck_path), Some(token)) => {
            let ck = Checkpoint::load(ck_path)?;
            let (params, _) = codec::model_from_checkpoint(&ck)?;
            codec::token_template(&params, token, !a.bias_free)?
        }
        _ => {
            return Err(CoreError::Config(
                "pass either --features/--row or --checkpoint/--token".into(),
            ))
        }
    };
    let bm = load_blendshapes(a.blendshapes.as_deref(), psi.len())?;
    let norm = if a.p99 { HeatmapNorm::P99 } else { HeatmapNorm::Max };
    let hm = codec::heatmap(&psi, &bm, norm)?;
    let mesh = bm.deform(&psi)?;
    codec::write_ply(&a.out_ply, &mesh, &hm.colors)?;
    if let Some(path) = a.out_csv {
        dio::write_distances_csv(&path, &hm.distances)?;
    }
    println!("max_displacement={}", hm.scale);
    Ok(())
}

fn codes_from_tokens(path: &Path, k: usize) -> Result<Vec<BinaryCode>, CoreError> {
    let rows = dio::read_tokens_csv(path)?;
    rows.iter()
        .map(|(_, toks)| BinaryCode::from_tokens(toks, k))
        .collect()
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CoreError> {
    match a.which {
        MetricsCommand::Entropy { tokens, codebook_size, literal_k, json } => {
            let rows = dio::read_tokens_csv(&tokens)?;
            let p = analysis::token_distribution(
                rows.iter().flat_map(|(_, t)| t.iter().copied()),
                codebook_size,
            )?;
            let norm = if literal_k { EntropyNorm::K } else { EntropyNorm::Log2K };
            let h = analysis::normalized_entropy(&p, norm)?;
            if json {
                println!("{}", serde_json::json!({ "normalized_entropy": h }));
            } else {
                println!("normalized_entropy={h}");
            }
        }
        MetricsCommand::Nmi { tokens, codebook_size, json } => {
            let codes = codes_from_tokens(&tokens, codebook_size)?;
            let rep = analysis::avg_nmi(&codes)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "avg_nmi": rep.avg_nmi,
                        "degenerate_pairs": rep.degenerate_pairs
                    })
                );
            } else {
                println!("avg_nmi={}", rep.avg_nmi);
                println!("degenerate_pairs={}", rep.degenerate_pairs);
            }
        }
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<(), CoreError> {
    let queries = codes_from_tokens(&a.query_tokens, a.codebook_size)?;
    let db = codes_from_tokens(&a.db_tokens, a.codebook_size)?;
    let (_, db_feats) = dio::read_features(&a.db_features)?;
    let q_feats = match &a.query_features {
        Some(p) => dio::read_features(p)?.1,
        None => db_feats.clone(),
    };
    if q_feats.shape[0] != queries.len() {
        return Err(CoreError::Config(format!(
            "{} query features for {} queries",
            q_feats.shape[0],
            queries.len()
        )));
    }
    let self_map: Option<Vec<usize>> = if a.exclude_self {
        Some((0..queries.len()).collect())
    } else {
        None
    };
    let groups = analysis::retrieve_exact(&queries, &db, a.min_matches, self_map.as_deref())?;
    let q_rows: Vec<Vec<f64>> = (0..q_feats.shape[0]).map(|i| q_feats.row(i).to_vec()).collect();
    let db_rows: Vec<Vec<f64>> =
        (0..db_feats.shape[0]).map(|i| db_feats.row(i).to_vec()).collect();
    let summary = analysis::retrieval_metrics(&groups, &q_rows, &db_rows)?;
    if let Some(path) = a.out {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "query,included,matches")?;
        for (qi, g) in groups.iter().enumerate() {
            let matches = g.matches.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(";");
            writeln!(w, "{qi},{},{matches}", g.included)?;
        }
    }
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "mean_cosine": summary.mean_cosine,
                "mean_euclidean": summary.mean_euclidean,
                "mean_std": summary.mean_std,
                "included": summary.included,
                "excluded": summary.excluded,
            })
        );
    } else {
        println!("mean_cosine={}", summary.mean_cosine);
        println!("mean_euclidean={}", summary.mean_euclidean);
        println!("mean_std={}", summary.mean_std);
        println!("included={} excluded={}", summary.included, summary.excluded);
    }
    Ok(())
}

fn cmd_bow(a: BowArgs) -> Result<(), CoreError> {
    let tokens = dio::read_tokens_csv(&a.tokens)?;
    let (groups, _) = dio::read_groups_csv(&a.groups)?;
    let hist = analysis::bow(&tokens, &groups, a.codebook_size)?;
    dio::write_bow_csv(&a.out, &hist)?;
    println!("wrote {} group histograms", hist.len());
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> Result<(), CoreError> {
    let hist = dio::read_bow_csv(&a.bow)?;
    let labels_by_group = read_label_map(&a.labels)?;
    let mut x = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut y = Vec::new();
    for (group, p) in &hist {
        let label = labels_by_group
            .get(group)
            .ok_or_else(|| CoreError::UnknownGroup(group.clone()))?;
        let idx = match label_names.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                label_names.push(label.clone());
                label_names.len() - 1
            }
        };
        x.push(p.clone());
        y.push(idx);
    }
    let report = analysis::logistic_loocv(&x, &y, a.l2)?;
    let importance = analysis::template_importance(&report.coefficients);
    if a.json {
        let top: Vec<_> = importance
            .iter()
            .zip(&label_names)
            .map(|(ranked, name)| {
                serde_json::json!({
                    "class": name,
                    "top_tokens": ranked.iter().take(a.top).map(|(i, s)| {
                        serde_json::json!({"token": i, "log_abs_coef": s})
                    }).collect::<Vec<_>>()
                })
            })
            .collect();
        println!(
            "{}",
            serde_json::json!({
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "auc": report.auc,
                "classes": label_names,
                "importance": top,
            })
        );
    } else {
        println!("accuracy={}", report.accuracy);
        println!("macro_f1={}", report.macro_f1);
        println!("auc={}", report.auc);
        for (ranked, name) in importance.iter().zip(&label_names) {
            let top: Vec<String> =
                ranked.iter().take(a.top).map(|(i, _)| i.to_string()).collect();
            println!("top_templates[{name}]={}", top.join(","));
        }
    }
    Ok(())
}

/// Accepts either `group,label` or `id,group,label` headers.
fn read_label_map(path: &Path) -> Result<HashMap<String, String>, CoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CoreError::Parse(e.to_string()))?;
    let headers = reader.headers().map_err(|e| CoreError::Parse(e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let (gcol, lcol) = if cols.len() >= 3 && cols[0] == "id" && cols[1] == "group" {
        (1usize, 2usize)
    } else if cols.len() >= 2 && cols[0] == "group" {
        (0usize, 1usize)
    } else {
        return Err(CoreError::Parse(
            "label file needs `group,label` or `id,group,label` columns".into(),
        ));
    };
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CoreError::Parse(e.to_string()))?;
        let g = record.get(gcol).unwrap_or_default().to_string();
        let l = record.get(lcol).unwrap_or_default().to_string();
        out.insert(g, l);
    }
    Ok(out)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CoreError> {
    let cfg = load_config(a.config.as_deref())?;
    // default probe architecture: small enough to check every parameter
    let hp = if a.config.is_some() {
        cfg.model
    } else {
        Hyperparams {
            input_dim: 6,
            tokens: 2,
            token_dim: 3,
            hidden: 8,
            layers: 1,
            heads: 2,
            latent_dim: 6,
            codebook_size: 8,
            stages: 2,
            batch: 4,
            ..Hyperparams::default()
        }
    };
    hp.validate()?;
    let mut rng = dfe_core::rng::substream(a.seed, dfe_core::rng::STREAM_INIT);
    let params = dfe_core::model::random_params(&hp, 0.2, &mut rng);
    use rand::Rng;
    let n = 3;
    let data: Vec<f64> = (0..n * hp.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![n, hp.input_dim], data);
    let report = dfe_core::model::model_grad_check(&params, &hp, &x, a.h, a.samples, a.seed)?;
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "max_rel_err": report.max_rel_err,
                "coords_checked": report.coords_checked
            })
        );
    } else {
        println!("max_rel_err={}", report.max_rel_err);
        println!("coords_checked={}", report.coords_checked);
    }
    Ok(())
}

fn cmd_redundancy(a: RedundancyArgs) -> Result<(), CoreError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (params, hp) = codec::model_from_checkpoint(&ck)?;
    let bm = load_blendshapes(a.blendshapes.as_deref(), hp.input_dim)?;
    let rep = codec::displacement_redundancy(&params, &bm, !a.bias_free)?;
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "avg_dot": rep.avg_dot,
                "avg_cosine": rep.avg_cosine,
                "cosine_excluded_pairs": rep.cosine_excluded
            })
        );
    } else {
        println!("avg_dot={}", rep.avg_dot);
        println!("avg_cosine={}", rep.avg_cosine);
        println!("cosine_excluded_pairs={}", rep.cosine_excluded);
    }
    Ok(())
}

fn cmd_percentiles(a: PercentilesArgs) -> Result<(), CoreError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (params, hp) = codec::model_from_checkpoint(&ck)?;
    let bm = load_blendshapes(a.blendshapes.as_deref(), hp.input_dim)?;
    let thresholds: Vec<f64> = a
        .thresholds
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CoreError::Config(format!("bad threshold `{t}`")))
        })
        .collect::<Result<_, _>>()?;
    let curve = codec::displacement_percentiles(&params, &bm, &thresholds, !a.bias_free)?;
    dio::write_curve_csv(&a.out, &curve)?;
    println!("wrote {} curve points", curve.len());
    Ok(())
}
