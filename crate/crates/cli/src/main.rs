//! `ccoe`: pretrain a backbone, train and manage experts, route, infer and
//! benchmark, all driven by a JSONL registry manifest.
//!
//! Relative paths resolve against `$CCOE_DATA_DIR` when it is set.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration, 3 numeric
//! divergence, 4 checkpoint corruption.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccoe::bench::{
    ablate_insertion, ablation_table, best_strategy, mdme_models, run_adapter_baseline, run_ccoe, run_mdme_baseline,
    Adapter, BenchReport, InsertionStrategy, Workload, DEFAULT_ADAPTER_RANK,
};
use ccoe::checkpoint::{load_expert, save_backbone, save_expert, save_planner};
use ccoe::data::Domain;
use ccoe::lifecycle::ExpertRegistry;
use ccoe::manifest::{ExpertEntry, Manifest, ManifestLock};
use ccoe::model::{ExpertSubnetwork, ModelConfig, Params};
use ccoe::routing::{execute_plan, PlanQuery, PlannerExpert};
use ccoe::tokenizer::{decode, encode, Token};
use ccoe::training::{
    domain_experts, evaluate_planner, pretrain_backbone_with, train_expert, train_planner, planner_dataset,
    LossRecord, TrainConfig,
};
use ccoe::{Error, ErrorCategory, Rng};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

const DATA_DIR_ENV: &str = "CCOE_DATA_DIR";

#[derive(Parser)]
#[command(name = "ccoe", version, about = "Frozen shared backbone with pluggable FFN experts")]
struct Cli {
    /// Seed threaded to every random generator.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Training settings: JSON objects, one per line, later lines win.
    /// Fields: learning_rate, batch_size, steps, grad_clip, beta1, beta2,
    /// eps, schedule, exec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write per-step `{step, loss, accuracy}` records here.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain and freeze a backbone; writes a checkpoint and a new manifest.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train one domain expert against the manifest's backbone.
    TrainExpert {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "GL")]
        strategy: String,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        id: u32,
        /// Continue from an existing expert checkpoint (e.g. a popped copy).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a planner over every registered expert and add it to the manifest.
    TrainPlanner {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        tasks: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1000)]
        id: u32,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Push an expert checkpoint into the registry.
    Push {
        #[arg(long)]
        manifest: PathBuf,
        checkpoint: PathBuf,
        /// Register under this id instead of the checkpoint's own.
        #[arg(long)]
        id: Option<u32>,
    },
    /// Copy an expert out of the registry or remove it.
    Pop {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        id: u32,
        #[arg(long, conflicts_with = "remove", requires = "out")]
        copy: bool,
        #[arg(long)]
        remove: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-component parameter bytes and the ensemble comparison.
    ReportMemory {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Answer a prompt through rule-based gating.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        prompt: String,
    },
    /// Show the execution path for a query.
    Route {
        #[arg(long)]
        manifest: PathBuf,
        /// Plan with the learned planner instead of the gating table.
        #[arg(long)]
        planner: bool,
        /// Domain tag for gating.
        #[arg(long, required_unless_present = "planner")]
        domain: Option<String>,
        /// Comma-separated domain names, applied in order.
        #[arg(long, required_if_eq("planner", "true"))]
        task: Option<String>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        max_steps: usize,
    },
    /// Serve a workload with the registry, an ensemble and adapters.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        /// JSONL `{"domain", "prompt"}` requests; defaults to a round-robin
        /// draw over every registered domain.
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        repeat: usize,
        /// Ensemble models allowed resident at once.
        #[arg(long, default_value_t = 1)]
        resident_models: usize,
        #[arg(long, default_value_t = DEFAULT_ADAPTER_RANK)]
        adapter_rank: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train one expert per insertion strategy and tabulate accuracy.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 200)]
        eval: usize,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn manifest_dir(m: &Path) -> PathBuf {
    m.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// `path` relative to `base` when it lies inside it.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p)
}

fn load_manifest(path: &Path) -> CliResult<(Manifest, ExpertRegistry)> {
    let m = Manifest::load(path)?;
    let reg = m.build_registry(&manifest_dir(path))?;
    Ok((m, reg))
}

fn train_config(flags: &TrainFlags, base: TrainConfig, seed: u64) -> CliResult<TrainConfig> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    if let Some(p) = &flags.config {
        let text = fs::read_to_string(resolve(p))
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let obj: Value = serde_json::from_str(line).map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
            let Value::Object(fields) = obj else {
                return Err(Error::Config(format!("config line {} is not an object", i + 1)).into());
            };
            for (k, val) in fields {
                v[k] = val;
            }
        }
    }
    let mut cfg: TrainConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.seed = seed;
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if let Some(lr) = flags.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_curve(flags: &TrainFlags, curve: &[LossRecord]) -> CliResult<()> {
    if let Some(p) = &flags.curve {
        let text: String = curve.iter().map(|r| serde_json::to_string(r).expect("record") + "\n").collect();
        ccoe::checkpoint::write_atomic(&resolve(p), text.as_bytes())?;
    }
    Ok(())
}

fn parse_domain(name: &str) -> CliResult<Domain> {
    Domain::parse(name).ok_or_else(|| {
        let all: Vec<&str> = Domain::ALL.iter().map(|d| d.name()).collect();
        Failure::Lib(Error::Dataset(format!("unknown domain {name:?}; expected one of {}", all.join(", "))))
    })
}

/// Re-saves the planner after a push or pop changed its rows.
fn persist_registry(manifest: &mut Manifest, mpath: &Path, reg: &ExpertRegistry) -> CliResult<()> {
    manifest.sync_mapping(reg.mapping());
    if let (Some(p), Some(planner)) = (&manifest.planner, reg.planner()) {
        save_planner(planner, reg.backbone().config(), &manifest_dir(mpath).join(p))?;
    }
    manifest.save(mpath)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Pretrain { out, manifest, train } => {
            let cfg = train_config(&train, TrainConfig::pretraining(), seed)?;
            let out = resolve(&out);
            let p = pretrain_backbone_with(ModelConfig::default(), &cfg, |r| {
                if r.step % 250 == 0 {
                    eprintln!("step {:>5} loss {:.4} acc {:.3}", r.step, r.loss, r.accuracy);
                }
            })?;
            save_backbone(&p.backbone, &out)?;
            write_curve(&train, &p.curve)?;
            println!("backbone {} digest {}", out.display(), p.backbone.digest());
            println!("probe loss {:.4} -> {:.4}", p.initial_loss, p.final_loss);
            if let Some(mp) = manifest {
                let mp = resolve(&mp);
                let m = Manifest { seed, backbone: Some(relative_to(&out, &manifest_dir(&mp))), ..Default::default() };
                m.save(&mp)?;
            }
        }
        Cmd::TrainExpert { manifest, domain, strategy, layers, width, id, from, out, train } => {
            let (_, reg) = load_manifest(&resolve(&manifest))?;
            let d = parse_domain(&domain)?;
            let cfg = train_config(&train, TrainConfig::default(), seed)?;
            let b = reg.backbone();
            let mut expert = match from {
                Some(p) => load_expert(&resolve(&p), b.config())?,
                None => {
                    let s = InsertionStrategy::parse(&strategy)
                        .ok_or_else(|| Failure::Usage(format!("unknown strategy {strategy:?}")))?;
                    let positions = s.positions(b.config().n_layers, layers)?;
                    ExpertSubnetwork::pruned_from(b, id, d.name(), positions, width)?
                }
            };
            if expert.domain != d.name() {
                return Err(Error::Dataset(format!("expert serves {:?}, not {domain:?}", expert.domain)).into());
            }
            let curve = train_expert(&mut expert, b, ccoe::data::SyntheticDomain::new(d), &cfg)?;
            let out = resolve(&out);
            save_expert(&expert, b.config(), &out)?;
            write_curve(&train, &curve)?;
            let last = curve.last().expect("at least one step");
            println!(
                "expert {} ({}) at {:?}: loss {:.4} acc {:.3}, digest {}",
                expert.id,
                expert.domain,
                expert.positions(),
                last.loss,
                last.accuracy,
                expert.digest()
            );
        }
        Cmd::TrainPlanner { manifest, out, tasks, layers, width, id, train } => {
            let mpath = resolve(&manifest);
            let _lock = ManifestLock::acquire(&mpath)?;
            let (mut m, mut reg) = load_manifest(&mpath)?;
            let cfg = train_config(&train, TrainConfig::planner(), seed)?;
            let mut planner = PlannerExpert::for_registry(&reg, id, layers, width, seed)?;
            let experts = domain_experts(&reg);
            let (tr, ev) = planner_dataset(&planner, &experts, tasks, seed)?;
            let curve = train_planner(&mut planner, reg.backbone(), &tr, &cfg)?;
            let e = evaluate_planner(&planner, reg.backbone(), &ev, cfg.exec)?;
            let out = resolve(&out);
            save_planner(&planner, reg.backbone().config(), &out)?;
            write_curve(&train, &curve)?;
            reg.set_planner(planner)?;
            m.planner = Some(relative_to(&out, &manifest_dir(&mpath)));
            m.save(&mpath)?;
            println!(
                "held-out: single {:.3} pair-order {:.3} first-step {:.3} ({} tasks)",
                e.single_sequence_accuracy, e.pair_order_accuracy, e.first_step_accuracy, e.n_tasks
            );
        }
        Cmd::Push { manifest, checkpoint, id } => {
            let mpath = resolve(&manifest);
            let _lock = ManifestLock::acquire(&mpath)?;
            let (mut m, mut reg) = load_manifest(&mpath)?;
            let cpath = resolve(&checkpoint);
            let mut expert = load_expert(&cpath, reg.backbone().config())?;
            let stored = match id {
                Some(new) if new != expert.id => {
                    expert.id = new;
                    let p = manifest_dir(&mpath).join(format!("expert-{new}.ccoe"));
                    Some(p)
                }
                _ => None,
            };
            let outcome = reg.push(expert.clone())?;
            let path = match stored {
                Some(p) => {
                    save_expert(&expert, reg.backbone().config(), &p)?;
                    p
                }
                None => cpath,
            };
            let entry = ExpertEntry {
                id: expert.id,
                domain: expert.domain.clone(),
                path: relative_to(&path, &manifest_dir(&mpath)),
                positions: Some(expert.positions().to_vec()),
                strategy: None,
                layers: None,
            };
            m.experts.retain(|e| e.id != expert.id);
            m.experts.push(entry);
            persist_registry(&mut m, &mpath, &reg)?;
            println!("{outcome:?} expert {} ({}), {} bytes", expert.id, expert.domain, expert.param_bytes());
        }
        Cmd::Pop { manifest, id, copy, remove, out } => {
            let mpath = resolve(&manifest);
            if copy == remove {
                return Err(Failure::Usage("pass exactly one of --copy or --remove".into()));
            }
            let _lock = ManifestLock::acquire(&mpath)?;
            let (mut m, mut reg) = load_manifest(&mpath)?;
            if copy {
                let e = reg.pop_copy(id)?;
                let out = resolve(out.as_deref().expect("clap requires --out with --copy"));
                save_expert(&e, reg.backbone().config(), &out)?;
                println!("copied expert {id} to {} digest {}", out.display(), e.digest());
            } else {
                let e = reg.pop_remove(id)?;
                m.experts.retain(|x| x.id != id);
                persist_registry(&mut m, &mpath, &reg)?;
                println!("removed expert {id}, freed {} bytes", e.param_bytes());
            }
        }
        Cmd::ReportMemory { manifest, json } => {
            let (_, reg) = load_manifest(&resolve(&manifest))?;
            let r = reg.memory_report(DEFAULT_ADAPTER_RANK);
            if json {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            } else {
                print!("{}", r.table());
            }
        }
        Cmd::Infer { manifest, domain, prompt } => {
            let (_, reg) = load_manifest(&resolve(&manifest))?;
            for a in reg.answer(&domain, &encode(&prompt))? {
                println!("{}", decode(&a.output));
            }
        }
        Cmd::Route { manifest, planner, domain, task, prompt, max_steps } => {
            let (_, reg) = load_manifest(&resolve(&manifest))?;
            let name = |id: u32| reg.expert(id).map(|e| e.domain.clone()).unwrap_or_default();
            if planner {
                let task = task.expect("clap requires --task with --planner");
                let mut instruction: Vec<Token> = task
                    .split(',')
                    .map(|s| parse_domain(s.trim()).map(|d| d.code() as Token))
                    .collect::<CliResult<_>>()?;
                if instruction.len() > ccoe::data::PLAN_SLOTS {
                    return Err(Error::Dataset(format!("at most {} domains per task", ccoe::data::PLAN_SLOTS)).into());
                }
                instruction.resize(ccoe::data::PLAN_SLOTS, b'.' as Token);
                let q = PlanQuery { instruction, payload: encode(&prompt) };
                let o = execute_plan(&reg, &q, max_steps)?;
                let path: Vec<String> = o.path.steps.iter().map(|s| format!("{}:{}", s.expert_id, name(s.expert_id))).collect();
                println!("path {}", path.join(" -> "));
                println!("output {}", decode(&o.output));
                if o.truncated {
                    println!("warning: carried context was truncated");
                }
            } else {
                let d = domain.expect("clap requires --domain");
                let p = reg.gate(&[(d, encode(&prompt))])?.remove(0);
                let path: Vec<String> =
                    p.steps.iter().map(|s| format!("{}:{}@{:?}", s.expert_id, name(s.expert_id), s.positions)).collect();
                println!("path {}", if path.is_empty() { "(backbone)".to_string() } else { path.join(", ") });
            }
        }
        Cmd::Bench { manifest, workload, repeat, resident_models, adapter_rank, json } => {
            let (_, reg) = load_manifest(&resolve(&manifest))?;
            let w = match workload {
                Some(p) => {
                    let text = fs::read_to_string(resolve(&p))?;
                    Workload::from_jsonl(&text, repeat)?
                }
                None => {
                    let ds: Vec<Domain> = domain_experts(&reg).into_keys().collect();
                    Workload::round_robin(&ds, 1, repeat, seed)
                }
            };
            let ccoe_r = run_ccoe(&reg, &w)?;
            let models = mdme_models(&reg)?;
            let per_model = reg.backbone().param_bytes();
            let mdme_r = run_mdme_baseline(&models, &w, Some(per_model * resident_models.max(1)))?;
            let mdme_all = run_mdme_baseline(&models, &w, None)?;
            let mut rng = Rng::new(seed).fork(0xada);
            let adapters: Vec<Adapter> = models
                .iter()
                .map(|(d, _)| Adapter::random(reg.backbone(), d, adapter_rank, 0.02, false, &mut rng))
                .collect();
            let adapter_r = run_adapter_baseline(reg.backbone(), &adapters, &w)?;
            let reports = [ccoe_r, mdme_r, adapter_r];
            let ratio = reports[0].resident_param_bytes_peak as f64 / mdme_all.resident_param_bytes_peak as f64;
            if json {
                for r in reports.iter().chain([&mdme_all]) {
                    println!("{}", serde_json::to_string(r).expect("report serializes"));
                }
                println!("{}", json!({ "ccoe_over_mdme_peak_bytes": ratio }));
            } else {
                print!("{}", BenchReport::table(&reports));
                println!("peak bytes ccoe/mdme (all resident): {ratio:.4}");
            }
        }
        Cmd::Ablate { manifest, domain, layers, width, eval, json, train } => {
            let (_, reg) = load_manifest(&resolve(&manifest))?;
            let d = parse_domain(&domain)?;
            let cfg = train_config(&train, TrainConfig::default(), seed)?;
            let rows = ablate_insertion(reg.backbone(), &InsertionStrategy::ALL, d, layers, width, &cfg, eval)?;
            if json {
                for r in &rows {
                    println!("{}", serde_json::to_string(r).expect("row serializes"));
                }
            } else {
                print!("{}", ablation_table(&rows));
                if let Some(b) = best_strategy(&rows) {
                    println!("best: {b}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Data => 2,
                ErrorCategory::Divergence => 3,
                ErrorCategory::Corruption => 4,
            })
        }
    }
}
