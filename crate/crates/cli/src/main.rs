use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mustrec::checkpoint::{load_into, save_checkpoint, Manifest};
use mustrec::dataio::synthetic::{
    cyclic, generate_synthetic, neighbor_walk, random_histories, FeatureSpec, NeighborWalkSpec,
};
use mustrec::dataio::{
    downsample, load_features, load_features_tsv, load_interactions, make_splits, write_features,
    InteractionLog, Modality, ModalityFeatures, Phase,
};
use mustrec::eval::feature_similarity_diagnostic;
use mustrec::graphs::{build_bipartite, build_item_graph, normalize_symmetric};
use mustrec::harness::{
    ablation_configs, omega_grid, run_configs, sweep_configs, write_ablation, write_sweep, RunRow,
};
use mustrec::model::Variant;
use mustrec::train::{EpochLog, Experiment, Scoring};
use mustrec::Config;

const PREPARED_FILE: &str = "prepared.json";
const RUN_DATA_FILE: &str = "data.json";
const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser)]
#[command(
    name = "mustrec",
    version,
    about = "Multimodal sequential recommendation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate a dataset, split it and build its graphs.
    Prepare(PrepareArgs),
    /// Train one model and save its best checkpoint.
    Train(RunArgs),
    /// Score a saved run on the validation or test split.
    Evaluate(EvaluateArgs),
    /// Train every ablation variant on one dataset.
    Ablate(AblateArgs),
    /// Train once per ω on one dataset.
    Sweep(SweepArgs),
    /// Mean pairwise cosine similarity of each feature modality.
    Diagnose(DiagnoseArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SyntheticKind {
    /// 200 users over a 30-item cycle.
    Cyclic,
    /// Walks over feature-nearest neighbours.
    Neighbors,
    /// 1000 users with uniformly random histories over 1000 items.
    Random,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Interaction file (`user item order` per line) or a prepared dataset directory.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Text features (binary MFEA, or whitespace-separated text with a .tsv/.txt extension).
    #[arg(long, requires = "dataset")]
    text: Option<PathBuf>,
    /// Visual features, same formats as --text.
    #[arg(long, requires = "dataset")]
    visual: Option<PathBuf>,
    /// Item id of each feature row, one per line.
    #[arg(long, requires = "dataset")]
    item_ids: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading one.
    #[arg(long, value_enum)]
    synthetic: Option<SyntheticKind>,
    /// Keep a uniform subsample of this many users.
    #[arg(long, value_name = "N")]
    downsample_users: Option<usize>,
    /// Cache directory for prepared datasets.
    #[arg(long, env = "MUSTREC_CACHE", default_value = ".mustrec-cache")]
    cache: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Variant tags such as FULL, B, M, I, V, T, S, U, combined with `+`.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    omega: Option<f64>,
    /// Override the epoch budget.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Also copy the statistics to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_phase)]
    phase: Phase,
    /// Write the metrics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Variants to run; defaults to B M I V T FULL S U.
    #[arg(long, num_args = 1.., value_parser = parse_variant)]
    variants: Vec<Variant>,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Append the small-ω extension 1e-4, 1e-5, 1e-6.
    #[arg(long)]
    extended: bool,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Pairs drawn when the exhaustive count is too large.
    #[arg(long, default_value_t = 1_000_000)]
    sample_pairs: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mustrec::Error| e.to_string())
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: mustrec::Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut config = match &self.config {
            Some(p) => {
                Config::load(p).with_context(|| format!("loading config {}", p.display()))?
            }
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            config.train.seed = s;
        }
        if let Some(v) = self.variant {
            config.train.variant = v;
        }
        if let Some(w) = self.omega {
            config.train.omega = w;
        }
        if let Some(e) = self.max_epochs {
            config.train.max_epochs = e;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetStats {
    users: usize,
    items: usize,
    interactions: usize,
    sparsity_percent: f64,
}

impl DatasetStats {
    fn of(log: &InteractionLog) -> Self {
        Self {
            users: log.num_users,
            items: log.num_items,
            interactions: log.num_interactions(),
            sparsity_percent: log.sparsity_percent(),
        }
    }

    fn print(&self) {
        println!("users\titems\tinteractions\tsparsity");
        println!(
            "{}\t{}\t{}\t{:.2}%",
            self.users, self.items, self.interactions, self.sparsity_percent
        );
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PreparedManifest {
    key: String,
    source: String,
    stats: DatasetStats,
    modalities: Vec<Modality>,
}

struct Prepared {
    dir: PathBuf,
    log: InteractionLog,
    features: Vec<ModalityFeatures>,
}

fn feature_file(m: Modality) -> String {
    format!("{}.mfea", m.name())
}

fn load_prepared(dir: &Path) -> anyhow::Result<Prepared> {
    let manifest: PreparedManifest = serde_json::from_str(
        &std::fs::read_to_string(dir.join(PREPARED_FILE))
            .with_context(|| format!("{} is not a prepared dataset", dir.display()))?,
    )?;
    let log = InteractionLog::load_json(&dir.join("log.json"))?;
    let features = manifest
        .modalities
        .iter()
        .map(|&m| load_features(&dir.join(feature_file(m)), m))
        .collect::<mustrec::Result<Vec<_>>>()?;
    Ok(Prepared {
        dir: dir.to_path_buf(),
        log,
        features,
    })
}

fn read_feature_file(path: &Path, m: Modality) -> anyhow::Result<ModalityFeatures> {
    let text = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("tsv" | "txt")
    );
    let f = if text {
        load_features_tsv(path, m)
    } else {
        load_features(path, m)
    };
    f.with_context(|| format!("reading {m} features from {}", path.display()))
}

/// Identity of a prepared dataset: every input byte plus the settings that shape it.
fn cache_key(data: &DataArgs, config: &Config) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    let mut field = |name: &str, bytes: &[u8]| {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field("synthetic", format!("{:?}", data.synthetic).as_bytes());
    field(
        "downsample",
        format!("{:?}", data.downsample_users).as_bytes(),
    );
    field("seed", &config.train.seed.to_le_bytes());
    field("data", toml::to_string(&config.data)?.as_bytes());
    field("graphs", toml::to_string(&config.graphs)?.as_bytes());
    for (name, path) in [
        ("dataset", &data.dataset),
        ("text", &data.text),
        ("visual", &data.visual),
        ("item_ids", &data.item_ids),
    ] {
        if let Some(p) = path {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            field(name, &bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn synthesize(
    kind: SyntheticKind,
    seed: u64,
) -> anyhow::Result<(InteractionLog, Vec<ModalityFeatures>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let iid = |num_items, dim, rng: &mut ChaCha8Rng| -> mustrec::Result<Vec<ModalityFeatures>> {
        let spec = FeatureSpec {
            num_items,
            dim,
            clusters: 0,
            separation: 0.0,
        };
        Modality::ALL
            .iter()
            .map(|&m| generate_synthetic(&spec, m, rng))
            .collect()
    };
    Ok(match kind {
        SyntheticKind::Cyclic => {
            let log = cyclic(200, 30, 8, 15, &mut rng)?;
            let features = iid(30, 16, &mut rng)?;
            (log, features)
        }
        SyntheticKind::Neighbors => {
            let d = neighbor_walk(&NeighborWalkSpec::default(), &mut rng)?;
            (d.log, d.features)
        }
        SyntheticKind::Random => {
            let d = random_histories(1000, 1000, 5, 10, 32, &mut rng)?;
            (d.log, d.features)
        }
    })
}

fn load_raw(
    data: &DataArgs,
    config: &Config,
) -> anyhow::Result<(String, InteractionLog, Vec<ModalityFeatures>)> {
    let (source, log, mut features) = match (&data.dataset, data.synthetic) {
        (_, Some(kind)) => {
            let (log, features) = synthesize(kind, config.train.seed)?;
            (
                format!("synthetic {kind:?} seed {}", config.train.seed),
                log,
                features,
            )
        }
        (Some(path), None) => {
            let log = load_interactions(path, config.data.min_interactions)
                .with_context(|| format!("reading interactions from {}", path.display()))?;
            let row_ids = match &data.item_ids {
                Some(p) => Some(
                    std::fs::read_to_string(p)?
                        .lines()
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let mut features = Vec::new();
            for (m, p) in [
                (Modality::Text, &data.text),
                (Modality::Visual, &data.visual),
            ] {
                let Some(p) = p else { continue };
                let f = read_feature_file(p, m)?;
                let f = match &row_ids {
                    Some(ids) => f.align_to(ids, &log.item_ids)?,
                    None if f.num_items() == log.num_items => f,
                    None => bail!(
                        "{} has {} rows but the log has {} items; pass --item-ids",
                        p.display(),
                        f.num_items(),
                        log.num_items
                    ),
                };
                features.push(f);
            }
            (path.display().to_string(), log, features)
        }
        (None, None) => bail!("pass --dataset or --synthetic"),
    };
    let log = match data.downsample_users {
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            let d = downsample(&log, n, &mut rng)?;
            features = features
                .iter()
                .map(|f| d.filter_features(f))
                .collect::<mustrec::Result<_>>()?;
            d.log
        }
        None => log,
    };
    Ok((source, log, features))
}

/// Prepare (or reuse) the dataset described by `data`.
fn prepare(data: &DataArgs, config: &Config) -> anyhow::Result<Prepared> {
    if let Some(dir) = &data.dataset {
        if dir.join(PREPARED_FILE).is_file() {
            return load_prepared(dir);
        }
    }
    let key = cache_key(data, config)?;
    let dir = data.cache.join(&key);
    if dir.join(PREPARED_FILE).is_file() {
        eprintln!("cache hit: {}", dir.display());
        return load_prepared(&dir);
    }
    let (source, log, features) = load_raw(data, config)?;
    let split = make_splits(&log)?;

    let tmp = data.cache.join(format!("{key}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    log.save_json(&tmp.join("log.json"))?;
    std::fs::write(tmp.join("split.json"), serde_json::to_string(&split)?)?;
    for f in &features {
        write_features(&tmp.join(feature_file(f.modality)), f)?;
    }
    let bipartite = normalize_symmetric(&build_bipartite(&split.train, log.num_items)?);
    bipartite.write_binary(&tmp.join("user_item_graph.bin"))?;
    if !features.is_empty() {
        let weights = config.graphs.modality_weights()?;
        let g = build_item_graph(&features, config.graphs.knn_k, &weights)?;
        g.combined.write_binary(&tmp.join("item_graph.bin"))?;
    }
    let manifest = PreparedManifest {
        key,
        source,
        stats: DatasetStats::of(&log),
        modalities: features.iter().map(|f| f.modality).collect(),
    };
    std::fs::write(
        tmp.join(PREPARED_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::rename(&tmp, &dir)?;
    Ok(Prepared { dir, log, features })
}

fn stats_of(p: &Prepared) -> DatasetStats {
    DatasetStats::of(&p.log)
}

fn cmd_prepare(args: PrepareArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let p = prepare(&args.data, &config)?;
    println!("prepared: {}", p.dir.display());
    let stats = stats_of(&p);
    stats.print();
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(
            out.join("stats.json"),
            serde_json::to_string_pretty(&stats)?,
        )?;
        config.save(&out.join("config.toml"))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunData {
    prepared: PathBuf,
}

fn echo_config(out: &Path, config: &Config) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    config.save(&out.join("config.toml"))?;
    Ok(())
}

fn cmd_train(args: RunArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let p = prepare(&args.data, &config)?;
    let out = &args.out;
    echo_config(out, &config)?;
    std::fs::write(
        out.join(RUN_DATA_FILE),
        serde_json::to_string_pretty(&RunData {
            prepared: std::fs::canonicalize(&p.dir)?,
        })?,
    )?;
    let split = make_splits(&p.log)?;
    let exp = Experiment::new(split, p.features, config.clone())?;
    let mut log = EpochLog::new(
        std::fs::File::create(out.join("epochs.csv"))?,
        config.train.select_k,
    )?;
    let outcome = exp.fit(&mut |r| {
        eprintln!(
            "epoch {:>4}  bpr {:.5}  ce {:.5}  total {:.5}  valid HR@{} {:.4}",
            r.epoch, r.bpr, r.ce, r.total, config.train.select_k, r.valid_hr
        );
        log.append(r)
    })?;
    let hash = config.hash()?;
    let manifest = Manifest {
        config_hash: hash.clone(),
        epoch: outcome.best_epoch,
        variant: config.train.variant.to_string(),
        tensors: Vec::new(),
    };
    save_checkpoint(&out.join(CHECKPOINT_DIR), &outcome.model, &manifest)?;
    if let Some(pre) = &outcome.pretrained {
        save_checkpoint(&out.join("pretrained"), pre, &manifest)?;
    }
    let mut reports = vec![outcome.valid.clone(), outcome.test.clone()];
    for r in &mut reports {
        r.config_hash = Some(hash.clone());
        r.epoch = Some(outcome.best_epoch);
    }
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    println!(
        "best epoch {} of {}",
        outcome.best_epoch, outcome.epochs_run
    );
    print_reports(&reports);
    Ok(())
}

fn print_reports(reports: &[mustrec::eval::MetricsReport]) {
    let Some(first) = reports.first() else { return };
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "phase\t{}", first.header().join("\t"));
    for r in reports {
        let values: Vec<String> = r.values().iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(stdout, "{}\t{}", r.phase, values.join("\t"));
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let run = &args.checkpoint;
    let config = Config::load(&run.join("config.toml"))
        .with_context(|| format!("{} is not a run directory", run.display()))?;
    let data: RunData = serde_json::from_str(&std::fs::read_to_string(run.join(RUN_DATA_FILE))?)?;
    let p = load_prepared(&data.prepared)?;
    let split = make_splits(&p.log)?;
    let exp = Experiment::new(split, p.features, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut model = exp.init_model(&mut rng);
    let manifest = load_into(&run.join(CHECKPOINT_DIR), &mut model)?;
    let hash = config.hash()?;
    if manifest.config_hash != hash {
        bail!(
            "checkpoint was trained under a different config ({})",
            manifest.config_hash
        );
    }
    let mut report = exp.evaluate(&model, Scoring::Sequence, None, args.phase)?;
    report.config_hash = Some(hash);
    report.epoch = Some(manifest.epoch);
    print_reports(std::slice::from_ref(&report));
    if let Some(out) = args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn report_row(r: &RunRow) {
    eprintln!(
        "{:<12} best epoch {:>4}  test {}",
        r.label,
        r.best_epoch,
        r.test
            .header()
            .iter()
            .zip(r.test.values())
            .map(|(h, v)| format!("{h} {v:.4}"))
            .collect::<Vec<_>>()
            .join("  ")
    );
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let p = prepare(&args.data, &config)?;
    echo_config(&args.out, &config)?;
    let variants = if args.variants.is_empty() {
        Variant::ablation_set()
    } else {
        args.variants
    };
    let split = make_splits(&p.log)?;
    let rows = run_configs(
        &split,
        &p.features,
        ablation_configs(&config, &variants),
        &mut report_row,
    )?;
    write_ablation(&args.out, &rows)?;
    println!(
        "{} rows -> {}",
        rows.len(),
        args.out.join("ablation.csv").display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let p = prepare(&args.data, &config)?;
    echo_config(&args.out, &config)?;
    let split = make_splits(&p.log)?;
    let grid = omega_grid(args.extended);
    let rows = run_configs(
        &split,
        &p.features,
        sweep_configs(&config, &grid),
        &mut report_row,
    )?;
    write_sweep(&args.out, &rows)?;
    println!(
        "{} rows -> {}",
        rows.len(),
        args.out.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let p = prepare(&args.data, &config)?;
    if p.features.is_empty() {
        bail!("the dataset has no feature matrices");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut results = serde_json::Map::new();
    println!("modality\tmean_cosine\tpairs\tstd_error");
    for f in &p.features {
        let d = feature_similarity_diagnostic(f, args.sample_pairs, &mut rng)?;
        println!(
            "{}\t{:.4}\t{}\t{:.2e}",
            f.modality, d.mean, d.pairs, d.std_error
        );
        results.insert(f.modality.to_string(), serde_json::to_value(d)?);
    }
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(
            out.join("diagnose.json"),
            serde_json::to_string_pretty(&results)?,
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
