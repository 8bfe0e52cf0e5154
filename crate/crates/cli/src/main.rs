use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fusionpos::config::ExperimentConfig;
use fusionpos::eval::{evaluate, heatmap_csv, EvalReport, Method};
use fusionpos::metatrain::{
    final_error_field, init_models, lemma1_monitor, log_csv_header, log_csv_rows, pretrain, pseudo_label_baseline,
    pseudo_labels, run_hard_em, TrainData, TrainState,
};
use fusionpos::persist::{self, Sidecar};
use fusionpos::posnet::ModelParams;
use fusionpos::scenario::{build_datasets, DatasetBundle, Simulator};

#[derive(Parser, Debug)]
#[command(name = "fusionpos", version, about = "Camera-assisted CSI positioning: data, training, evaluation")]
struct Cli {
    /// Experiment configuration (TOML). Defaults to `<out>/config.toml` when
    /// present, otherwise to the selected built-in profile.
    #[arg(long, global = true, env = "FUSIONPOS_CONFIG")]
    config: Option<PathBuf>,
    /// Built-in profile used when no configuration file is found.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory; defaults to the configuration's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Profile {
    Paper,
    Desk,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pretrain,
    Em,
    Pseudo,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prints the resolved configuration as TOML.
    PrintConfig,
    /// Simulates the labeled, validation, multimodal and test sets.
    GenData,
    /// Trains models; `em` and `pseudo` resume from their saved state.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Stop after this iteration (the run can be resumed later).
        #[arg(long)]
        stop_at: Option<usize>,
        /// Iterations between state checkpoints.
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
        /// Ignore any saved state and start over.
        #[arg(long)]
        fresh: bool,
    },
    /// Evaluates methods on the test set and writes JSON and CDF reports.
    Eval {
        /// Comma-separated methods (proposed, baseline_a, baseline_b, baseline_c, pseudo_label).
        #[arg(long, value_delimiter = ',', default_value = "proposed,baseline_a,baseline_b,baseline_c")]
        methods: Vec<Method>,
    },
    /// Prints a summary of the reports, writes a reward heatmap and the
    /// learning-rate bound diagnostics of the hard-EM run.
    Report {
        /// Test snapshot used for the heatmap.
        #[arg(long, default_value_t = 0)]
        snapshot: usize,
    },
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    fn models(&self, name: &str, bs: usize) -> PathBuf {
        self.root.join("models").join(format!("{name}_bs{bs}.json"))
    }
    fn state(&self, name: &str) -> PathBuf {
        self.root.join("state").join(format!("{name}.json"))
    }
    fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, Paths)> {
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(out)) if out.join("config.toml").exists() => ExperimentConfig::load(&out.join("config.toml"))?,
        _ => match cli.profile {
            Profile::Paper => ExperimentConfig::paper(),
            Profile::Desk => ExperimentConfig::desk(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let root = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, Paths { root }))
}

fn save_models(paths: &Paths, name: &str, models: &[ModelParams]) -> Result<()> {
    fs::create_dir_all(paths.root.join("models"))?;
    for (b, m) in models.iter().enumerate() {
        fs::write(paths.models(name, b), m.to_checkpoint())?;
    }
    Ok(())
}

fn load_models(paths: &Paths, name: &str, n_bs: usize) -> Result<Vec<ModelParams>> {
    (0..n_bs)
        .map(|b| {
            let p = paths.models(name, b);
            let text = fs::read_to_string(&p)
                .with_context(|| format!("cannot read {} (run the matching train mode first)", p.display()))?;
            Ok(ModelParams::from_checkpoint(&text)?)
        })
        .collect()
}

fn load_data(paths: &Paths, cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let (bundle, side) = persist::load_dataset(&paths.data())
        .with_context(|| format!("cannot load the dataset in {} (run gen-data first)", paths.data().display()))?;
    if side.channel != cfg.channel || side.world != cfg.world {
        bail!("the dataset was generated with a different world or channel configuration");
    }
    Ok(bundle)
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let sim = Simulator::new(cfg.world.clone(), cfg.channel.clone())?;
    let bundle = build_datasets(&sim, cfg.sizes, cfg.seed)?;
    let side = Sidecar {
        format_version: persist::FORMAT_VERSION,
        seed: cfg.seed,
        sizes: cfg.sizes,
        world: cfg.world.clone(),
        channel: cfg.channel.clone(),
    };
    persist::save_dataset(&paths.data(), &bundle, &side)?;
    fs::write(paths.config(), cfg.to_toml())?;
    let n_csi: usize = bundle.multimodal.iter().map(|s| s.n_csi()).sum();
    println!(
        "wrote {}: {} labeled per station, {} multimodal snapshots ({n_csi} CSI), {} test snapshots",
        paths.data().display(),
        cfg.sizes.labeled_per_bs,
        bundle.multimodal.len(),
        bundle.test.len()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, paths: &Paths, mode: Mode, stop_at: Option<usize>, every: usize, fresh: bool) -> Result<()> {
    let data = load_data(paths, cfg)?;
    let n_bs = cfg.world.n_bs();
    if mode == Mode::Pretrain {
        let init = init_models(&cfg.arch, n_bs, cfg.seed)?;
        let (models, logs) = pretrain(&init, &data.labeled, &cfg.train, cfg.seed)?;
        save_models(paths, "pretrained", &models)?;
        fs::write(paths.root.join("models").join("pretrain_log.json"), serde_json::to_string_pretty(&logs)?)?;
        for (b, l) in logs.iter().enumerate() {
            println!("station {b}: training mse {:.3} -> {:.3}", l.initial_loss, l.final_loss);
        }
        return Ok(());
    }
    let name = if mode == Mode::Em { "em" } else { "pseudo" };
    let pre = load_models(paths, "pretrained", n_bs)?;
    let state_path = paths.state(name);
    let mut state = if state_path.exists() && !fresh {
        let s = TrainState::from_json(&fs::read_to_string(&state_path)?)?;
        info!("resuming {name} from iteration {}", s.iteration);
        s
    } else {
        TrainState::new(pre.clone())
    };
    fs::create_dir_all(state_path.parent().unwrap())?;
    fs::create_dir_all(paths.root.join("metrics"))?;
    let metrics = paths.metrics(name);
    if state.log.is_empty() || !metrics.exists() {
        fs::write(&metrics, log_csv_header(n_bs) + "\n")?;
        let rows = log_csv_rows(&state.log, 0);
        append_rows(&metrics, &rows)?;
    }
    let td = TrainData {
        multimodal: &data.multimodal,
        labeled: &data.labeled,
        validation: &data.validation,
        bounds: cfg.world.street_bounds,
    };
    let labels = (mode == Mode::Pseudo).then(|| pseudo_labels(&pre, &data.multimodal)).transpose()?;
    let last = stop_at.unwrap_or(cfg.train.iterations).min(cfg.train.iterations);
    let every = every.max(1);
    while state.iteration < last {
        let target = (state.iteration + every).min(last);
        let from = state.log.len();
        match &labels {
            None => run_hard_em(&mut state, &td, &cfg.train, cfg.seed, target)?,
            Some(l) => pseudo_label_baseline(&mut state, l, &td, &cfg.train, cfg.seed, target)?,
        }
        append_rows(&metrics, &log_csv_rows(&state.log, from))?;
        write_atomic(&state_path, &state.to_json())?;
        let acc = state.log.last().and_then(|r| r.matching_accuracy);
        info!("{name}: iteration {} of {} (matching accuracy {acc:?})", state.iteration, cfg.train.iterations);
        if from == state.log.len() {
            break;
        }
    }
    save_models(paths, name, &state.models)?;
    println!("{name}: completed iteration {} of {}", state.iteration, cfg.train.iterations);
    Ok(())
}

fn append_rows(path: &Path, rows: &[String]) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, paths: &Paths, methods: &[Method]) -> Result<()> {
    let data = load_data(paths, cfg)?;
    let n_bs = cfg.world.n_bs();
    fs::create_dir_all(paths.reports())?;
    let mut summary = String::from("method,mean_error,mean_error_bs_weighted,matching_accuracy\n");
    for &m in methods {
        let models = load_models(paths, checkpoint_for(m), n_bs)?;
        let field = m
            .calibrated()
            .then(|| final_error_field(&models, &data.validation, cfg.world.street_bounds, &cfg.train))
            .transpose()?;
        let r = evaluate(m, &models, &data.test, field.as_ref())?;
        fs::write(paths.reports().join(format!("{m}.json")), r.to_json())?;
        fs::write(paths.reports().join(format!("{m}_cdf.csv")), r.cdf_csv())?;
        let acc = r.matching_accuracy.map_or(String::new(), |a| format!("{a:.4}"));
        summary.push_str(&format!("{m},{:.4},{:.4},{acc}\n", r.mean_error, r.mean_error_bs_weighted));
        println!("{m:<13} mean error {:>7.3} m  matching {acc}", r.mean_error);
    }
    fs::write(paths.reports().join("summary.csv"), summary)?;
    Ok(())
}

fn checkpoint_for(m: Method) -> &'static str {
    match m {
        Method::Proposed | Method::BaselineC => "em",
        Method::BaselineA | Method::BaselineB => "pretrained",
        Method::PseudoLabel => "pseudo",
    }
}

fn report(cfg: &ExperimentConfig, paths: &Paths, snapshot: usize) -> Result<()> {
    let mut found = Vec::new();
    for m in Method::ALL {
        let p = paths.reports().join(format!("{m}.json"));
        if let Ok(text) = fs::read_to_string(&p) {
            let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            found.push(r);
        }
    }
    if found.is_empty() {
        bail!("no reports in {} (run eval first)", paths.reports().display());
    }
    println!("{:<13} {:>10} {:>10} {:>10} {:>9}", "method", "mean [m]", "median [m]", "p90 [m]", "matching");
    for r in &found {
        let q = |f: f64| r.cdf.get(((r.cdf.len() as f64 * f) as usize).min(r.cdf.len().saturating_sub(1))).copied();
        println!(
            "{:<13} {:>10.3} {:>10.3} {:>10.3} {:>9}",
            r.method.name(),
            r.mean_error,
            q(0.5).unwrap_or(f64::NAN),
            q(0.9).unwrap_or(f64::NAN),
            r.matching_accuracy.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a))
        );
    }
    let n_bs = cfg.world.n_bs();
    if let Ok(models) = load_models(paths, "em", n_bs) {
        let data = load_data(paths, cfg)?;
        let snap = data
            .test
            .get(snapshot)
            .with_context(|| format!("test snapshot {snapshot} out of range ({} snapshots)", data.test.len()))?;
        let field = final_error_field(&models, &data.validation, cfg.world.street_bounds, &cfg.train)?;
        let path = paths.reports().join("heatmap.csv");
        fs::write(&path, heatmap_csv(&models, snap, &field)?)?;
        println!("wrote {}", path.display());
    }
    if let Ok(text) = fs::read_to_string(paths.state("em")) {
        let state = TrainState::from_json(&text)?;
        let lemma = lemma1_monitor(&state.log)?;
        let path = paths.reports().join("lr_bound.json");
        fs::write(&path, serde_json::to_string_pretty(&lemma)?)?;
        println!(
            "hard-EM: {} iterations, {} above the step-size bound, validation loss rose in {:.1}% of steps",
            state.log.len(),
            lemma.violation_count(),
            100.0 * lemma.increase_fraction()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    let (cfg, paths) = resolve_config(&cli)?;
    cfg.validate()?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    fs::create_dir_all(&paths.root).with_context(|| format!("cannot create {}", paths.root.display()))?;
    match cli.command {
        Command::PrintConfig => unreachable!(),
        Command::GenData => gen_data(&cfg, &paths),
        Command::Train { mode, stop_at, checkpoint_every, fresh } => {
            train(&cfg, &paths, mode, stop_at, checkpoint_every, fresh)
        }
        Command::Eval { methods } => eval(&cfg, &paths, &methods),
        Command::Report { snapshot } => report(&cfg, &paths, snapshot),
    }
}
