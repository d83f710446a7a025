//! Command-line front end. Every command prints a provenance header
//! (`# key=value` lines) before its own output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{
    self, brute_force_single_flip, defense_sweep, evaluate_plan, gen_dataset, protection_registry, run_experiment,
    split, AttackMethod, DeskConfig, ExperimentConfig, SyntheticDatasetSpec,
};
use crate::error::{Error, Result};
use crate::lesion::{self, FlipPlan, DEFAULT_LAYERS};
use crate::nnengine::{accuracy, Dataset, Model, PassCount};
use crate::scoring::score_magnitude;
use crate::shield::{self, Scheme, Selection, SignSidecar};
use crate::tensorstore::{candidate_params, ModelManifest, WeightArchive};

pub const OUT_ENV: &str = "SIGNLESION_OUT";
pub const STRESS_SCHEMA: &str = "signlesion-stress/1";
pub const ORACLE_SCHEMA: &str = "signlesion-oracle/1";

#[derive(Debug, Parser, Serialize)]
#[command(name = "signlesion", version, about = "Locate, flip and defend critical sign bits in CNN weights")]
pub struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate the synthetic dataset and train a victim model.
    Train(TrainArgs),
    /// Print the tensor table and the largest-magnitude weights.
    Inspect(InspectArgs),
    /// Plan sign flips and optionally write the attacked archive.
    Attack(AttackArgs),
    /// Accuracy-reduction curve of a plan or method.
    Eval(EvalArgs),
    /// Build a protection sidecar, or verify and repair an archive.
    Defend(DefendArgs),
    /// Random sign-flip barrage against a sweep of protection fractions.
    Stress(StressArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        let m = ModelManifest::load(&self.manifest)?;
        let a = WeightArchive::load(&self.archive)?;
        Model::new(m, a)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Experiment file with dataset, arch and train sections.
    #[arg(long, default_value = "experiments/desk.json")]
    pub config: PathBuf,
    /// Output directory (default: $SIGNLESION_OUT or `.`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shuffle seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long = "L", default_value_t = usize::MAX, hide_default_value = true)]
    pub layers: usize,
    /// Write the full magnitude score table here.
    #[arg(long)]
    pub scores_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "dnl")]
    pub method: String,
    #[arg(long)]
    pub k: usize,
    #[arg(long = "L", default_value_t = DEFAULT_LAYERS)]
    pub layers: usize,
    /// Gaussian-input seed (1p_dnl) or plan seed (random).
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f32,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f32,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    /// Also write the attacked archive.
    #[arg(long)]
    pub apply_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset spec written by `train`; the odd-index half is evaluated.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate the cumulative prefixes of this plan.
    #[arg(long, conflicts_with = "method")]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long = "L", default_value_t = DEFAULT_LAYERS)]
    pub layers: usize,
    /// Number of random-method seeds, starting at --seed.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f32,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f32,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write the exhaustive single-flip AR(1) table.
    #[arg(long)]
    pub brute_force: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub oracle_samples: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DefendArgs {
    #[command(subcommand)]
    pub action: DefendAction,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum SelectionArg {
    ByScore,
    Random,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::ByScore => Selection::ByScore,
            SelectionArg::Random => Selection::Random,
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
pub enum DefendAction {
    /// Select protected signs and write the registry and sidecar.
    Encode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        fraction: f32,
        #[arg(long, default_value = "replicate3")]
        scheme: String,
        #[arg(long, value_enum, default_value = "by-score")]
        selection: SelectionArg,
        #[arg(long, default_value_t = 77)]
        seed: u64,
        #[arg(long)]
        registry_out: Option<PathBuf>,
        #[arg(long)]
        sidecar_out: Option<PathBuf>,
    },
    /// Restore protected signs from the sidecar.
    Repair {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct StressArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Protection percentages; 0 (no protection) is always included.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 10.0, 20.0])]
    pub fractions: Vec<f64>,
    /// Number of barrage seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 5000)]
    pub seed: u64,
    /// Share of all weights whose sign is flipped per barrage.
    #[arg(long, default_value_t = 0.1)]
    pub flip_fraction: f64,
    #[arg(long, default_value = "replicate3")]
    pub scheme: String,
    #[arg(long, value_enum, default_value = "by-score")]
    pub selection: SelectionArg,
    #[arg(long, default_value_t = 77)]
    pub selection_seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

struct Provenance {
    lines: Vec<String>,
}

impl Provenance {
    fn new(cli: &Cli, name: &str, seeds: &[u64]) -> Self {
        let config = serde_json::to_string(&cli.command).expect("arguments serialize");
        let hash: [u8; 32] = Sha256::digest(config.as_bytes()).into();
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        Provenance {
            lines: vec![
                format!("# tool=signlesion {}", env!("CARGO_PKG_VERSION")),
                format!("# command={name}"),
                format!("# config_sha256={}", hex(&hash)),
                format!("# seeds={}", seeds.join(",")),
            ],
        }
    }

    fn print(mut self, passes: Option<PassCount>) {
        if let Some(p) = passes {
            self.lines.push(format!("# passes forward={} backward={}", p.forward, p.backward));
        }
        for l in self.lines {
            println!("{l}");
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn out_path(explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(default_name)
    })
}

/// Refuses to write over any of the command's inputs.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(Error::Config(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

fn write_file(path: &Path, inputs: &[&Path], bytes: &[u8]) -> Result<()> {
    guard_output(path, inputs)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_test_split(path: &Path) -> Result<Dataset> {
    let spec: SyntheticDatasetSpec = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("dataset spec {}: {e}", path.display())))?;
    Ok(split(&gen_dataset(&spec)?).1)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A pool may already exist when run is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Inspect(a) => cmd_inspect(cli, a),
        Command::Attack(a) => cmd_attack(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Defend(a) => cmd_defend(cli, a),
        Command::Stress(a) => cmd_stress(cli, a),
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = DeskConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.init_seed {
        cfg.init_seed = s;
    }
    if let Some(s) = a.data_seed {
        cfg.dataset.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    Provenance::new(cli, "train", &[cfg.dataset.seed, cfg.init_seed, cfg.train.seed]).print(None);
    println!(
        "dataset_seed={} init_seed={} train_seed={}",
        cfg.dataset.seed, cfg.init_seed, cfg.train.seed
    );
    let desk = bench::Desk::build(&cfg)?;
    for (e, l) in desk.log.epoch_losses.iter().enumerate() {
        println!("epoch={} loss={l}", e + 1);
    }
    println!("test_acc={}", accuracy(&desk.model, &desk.test)?);
    let inputs = [a.config.as_path()];
    let out = a.out.clone().unwrap_or_else(|| out_path(&None, ""));
    write_file(&out.join("model.safetensors"), &inputs, &desk.model.params.to_bytes())?;
    write_file(&out.join("model.json"), &inputs, desk.model.manifest.to_json().as_bytes())?;
    let spec = serde_json::to_string_pretty(&cfg.dataset)? + "\n";
    write_file(&out.join("dataset.json"), &inputs, spec.as_bytes())?;
    Ok(())
}

fn cmd_inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let model = a.model.load()?;
    Provenance::new(cli, "inspect", &[]).print(None);
    println!("tensor,dtype,shape,numel");
    for name in model.params.names() {
        let r = model.params.get(name).expect("listed tensor");
        let shape: Vec<String> = r.shape.iter().map(usize::to_string).collect();
        println!("{name},F32,{},{}", shape.join("x"), r.numel());
    }
    let table = score_magnitude(&candidate_params(&model.manifest, &model.params, a.layers)?);
    println!("rank,tensor,flat_index,layer,kernel,value");
    for (i, e) in table.ranked().into_iter().take(a.top).enumerate() {
        let c = &e.candidate;
        println!(
            "{},{},{},{},{},{}",
            i + 1,
            c.coord.tensor,
            c.coord.flat_index,
            c.kernel.param_layer_index,
            c.kernel.kernel_index,
            c.value
        );
    }
    if let Some(p) = &a.scores_csv {
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        write_file(p, &[&a.model.archive, &a.model.manifest], &buf)?;
    }
    Ok(())
}

fn cmd_attack(cli: &Cli, a: &AttackArgs) -> Result<()> {
    let method: AttackMethod = a.method.parse()?;
    let model = a.model.load()?;
    let before = model.counters();
    let (m, w) = (&model.manifest, &model.params);
    let plan = match method {
        AttackMethod::Dnl => lesion::plan_dnl(m, w, a.k, a.layers)?,
        AttackMethod::OnePDnl => lesion::plan_1p_dnl(&model, a.k, a.layers, a.seed, a.alpha, a.beta)?,
        AttackMethod::MagnitudeUnconstrained => lesion::plan_magnitude_unconstrained(m, w, a.k, a.layers)?,
        AttackMethod::Random => lesion::plan_random(m, w, a.k, a.seed, true, Some(a.layers))?,
    };
    let seeds = match method {
        AttackMethod::OnePDnl | AttackMethod::Random => vec![a.seed],
        _ => vec![],
    };
    Provenance::new(cli, "attack", &seeds).print(Some(model.counters().since(before)));
    let inputs = [a.model.archive.as_path(), a.model.manifest.as_path()];
    write_file(&out_path(&a.plan_out, "plan.json"), &inputs, plan.to_json().as_bytes())?;
    if let Some(p) = &a.apply_out {
        write_file(p, &inputs, &lesion::apply(&plan, w)?.to_bytes())?;
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let model = a.model.load()?;
    let data = load_test_split(&a.data)?;
    let before = model.counters();
    let (report, seeds) = match (&a.plan, &a.method) {
        (Some(p), _) => {
            let plan = FlipPlan::load(p)?;
            plan.flip_pairs();
            (evaluate_plan(&model, &data, &plan, None)?, plan.seed.into_iter().collect())
        }
        (None, Some(name)) => {
            let method: AttackMethod = name.parse()?;
            let seeds: Vec<u64> = match method {
                AttackMethod::Random => (0..a.seeds as u64).map(|i| a.seed + i).collect(),
                AttackMethod::OnePDnl => vec![a.seed],
                _ => vec![],
            };
            let cfg = ExperimentConfig {
                method,
                n: a.n,
                layers: a.layers,
                seeds: seeds.clone(),
                alpha: a.alpha,
                beta: a.beta,
            };
            (run_experiment(&model, &data, &cfg)?, seeds)
        }
        (None, None) => return Err(Error::Config("eval needs --plan or --method".into())),
    };
    Provenance::new(cli, "eval", &seeds).print(Some(model.counters().since(before)));
    println!("baseline_acc={}", report.baseline_acc);
    if let Some(m) = report.mar {
        println!("mAR={m}");
    }
    let mut inputs = vec![a.model.archive.as_path(), a.model.manifest.as_path(), a.data.as_path()];
    if let Some(p) = &a.plan {
        inputs.push(p);
    }
    write_file(&out_path(&a.csv, "report.csv"), &inputs, report.to_csv().as_bytes())?;
    if let Some(j) = &a.json {
        write_file(j, &inputs, report.to_json().as_bytes())?;
    }
    if let Some(bf) = &a.brute_force {
        let sub = data.head(a.oracle_samples);
        let table = brute_force_single_flip(&model, &sub, a.layers)?;
        let mut buf = Vec::new();
        writeln!(buf, "# {ORACLE_SCHEMA} samples={}", sub.len())?;
        writeln!(buf, "rank,tensor,flat_index,layer,acc,ar")?;
        for e in &table {
            let rank = 1 + table.iter().take_while(|x| x.correct < e.correct).count();
            writeln!(
                buf,
                "{rank},{},{},{},{},{}",
                e.coord.tensor, e.coord.flat_index, e.param_layer_index, e.acc, e.ar
            )?;
        }
        write_file(bf, &inputs, &buf)?;
    }
    Ok(())
}

fn cmd_defend(cli: &Cli, a: &DefendArgs) -> Result<()> {
    match &a.action {
        DefendAction::Encode {
            model,
            fraction,
            scheme,
            selection,
            seed,
            registry_out,
            sidecar_out,
        } => {
            let scheme: Scheme = scheme.parse()?;
            let loaded = model.load()?;
            let selection = Selection::from(*selection);
            let seeds = if selection == Selection::Random { vec![*seed] } else { vec![] };
            Provenance::new(cli, "defend encode", &seeds).print(None);
            let registry = protection_registry(&loaded, *fraction, selection, *seed)?;
            let sidecar = shield::encode(&loaded.params, &registry, scheme)?;
            println!("protected={} payload_bits={}", registry.len(), sidecar.payload.len());
            let inputs = [model.archive.as_path(), model.manifest.as_path()];
            write_file(&out_path(registry_out, "registry.json"), &inputs, registry.to_json().as_bytes())?;
            write_file(&out_path(sidecar_out, "signs.nlsb"), &inputs, &sidecar.to_bytes())?;
        }
        DefendAction::Repair {
            archive,
            registry,
            sidecar,
            out,
        } => {
            Provenance::new(cli, "defend repair", &[]).print(None);
            let w = WeightArchive::load(archive)?;
            let r = shield::ProtectionRegistry::load(registry)?;
            let s = SignSidecar::load(sidecar)?;
            let outcome = shield::verify_and_repair(&w, &r, &s)?;
            println!("corrected={} alarms={}", outcome.corrected.len(), outcome.alarms.len());
            for c in &outcome.corrected {
                println!("corrected {}[{}]", c.tensor, c.flat_index);
            }
            for c in &outcome.alarms {
                println!("alarm block={c}");
            }
            let inputs = [archive.as_path(), registry.as_path(), sidecar.as_path()];
            write_file(&out_path(out, "repaired.safetensors"), &inputs, &outcome.repaired.to_bytes())?;
        }
    }
    Ok(())
}

fn cmd_stress(cli: &Cli, a: &StressArgs) -> Result<()> {
    let scheme: Scheme = a.scheme.parse()?;
    if a.fractions.iter().any(|f| !(*f > 0.0 && *f <= 100.0)) {
        return Err(Error::Config("--fractions are percentages in (0, 100]".into()));
    }
    let model = a.model.load()?;
    let data = load_test_split(&a.data)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.seed + i).collect();
    let fractions: Vec<f64> = a.fractions.iter().map(|p| p / 100.0).collect();
    let selection = Selection::from(a.selection);
    let points = defense_sweep(
        &model,
        &data,
        scheme,
        selection,
        &fractions,
        a.selection_seed,
        a.flip_fraction,
        &seeds,
    )?;
    Provenance::new(cli, "stress", &seeds).print(None);
    let mut buf = Vec::new();
    writeln!(
        buf,
        "# {STRESS_SCHEMA} scheme={} flip_fraction={} selection_seed={}",
        a.scheme, a.flip_fraction, a.selection_seed
    )?;
    writeln!(buf, "selection,fraction_pct,protected,seeds,mean_ar,min_ar,max_ar")?;
    for (p, pct) in points.iter().zip(std::iter::once(0.0).chain(a.fractions.iter().copied())) {
        let sel = match p.selection {
            None => "none",
            Some(Selection::ByScore) => "by_score",
            Some(Selection::Random) => "random",
        };
        let min = p.ars.iter().copied().fold(f64::INFINITY, f64::min);
        let max = p.ars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(buf, "{sel},{pct},{},{},{},{min},{max}", p.protected, p.ars.len(), p.mean_ar)?;
        println!("fraction_pct={pct} mean_ar={}", p.mean_ar);
    }
    let inputs = [a.model.archive.as_path(), a.model.manifest.as_path(), a.data.as_path()];
    write_file(&out_path(&a.csv, "stress.csv"), &inputs, &buf)?;
    Ok(())
}
