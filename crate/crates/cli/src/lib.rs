//! The `hot` command line: ingest or synthesise streams, train, evaluate,
//! sweep the 2-hop budget, and estimate attention memory.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage or
//! configuration errors (including a missing dataset).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hot_core::config::RunConfig;
use hot_core::ctdg::{
    build_index, chronological_split, generate_synthetic, ingest_csv, inductive_node_mask, mask_train, write_csv,
    EventStream, SyntheticKind, SyntheticParams,
};
use hot_core::eval::{evaluate, EvalProtocol, EvalRequest, LinkScorer, MetricReport, NegativeSamplerKind, Setting};
use hot_core::memory::MemoryEstimate;
use hot_core::model::{train_with, Checkpoint, EpochLog, HotModel, TrainData, TrainOutcome};
use hot_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hot", version, about = "Higher-order temporal link prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the model seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a `u,i,ts,label,f...` CSV and write it back with dense ids.
    Ingest {
        input: PathBuf,
        /// Width of the zero node feature table.
        #[arg(long, default_value_t = 0)]
        node_dim: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic stream (`periodic-bipartite` or `triadic-closure`).
    Synth {
        kind: String,
        #[arg(long, default_value_t = 50)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        events: usize,
        #[arg(long, default_value_t = 25)]
        period: u64,
        #[arg(long, default_value_t = 0.8)]
        p_close: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the configured dataset; writes `model.ckpt` and `train_log.csv`.
    Train {
        /// Hide a fraction of validation/test nodes from training.
        #[arg(long)]
        inductive: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint; writes `report.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `val` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        /// `transductive` or `inductive`.
        #[arg(long, default_value = "transductive")]
        setting: String,
        /// Comma-separated subset of rnes,hnes,ines.
        #[arg(long, default_value = "rnes,hnes,ines")]
        samplers: String,
        #[command(flatten)]
        common: Common,
    },
    /// Attention activation counts of a vanilla transformer vs one BRT block.
    MemEstimate {
        #[arg(long)]
        seq_len: u64,
        #[arg(long)]
        patch: u64,
        #[arg(long)]
        block: u64,
        #[arg(long)]
        d: u64,
    },
    /// Train once per 2-hop budget and tabulate validation metrics.
    HoSweep {
        /// Comma-separated s_2 values.
        #[arg(long, default_value = "0,1")]
        s2: String,
        /// Run the jobs on separate threads.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        common: Common,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::MissingFile(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, node_dim, common } => cmd_ingest(&input, node_dim, &common.out).map(drop),
        Command::Synth {
            kind,
            nodes,
            events,
            period,
            p_close,
            common,
        } => {
            let kind: SyntheticKind = kind.parse()?;
            let params = SyntheticParams {
                period,
                p_close,
                ..SyntheticParams::periodic(nodes, events, period)
            };
            cmd_synth(kind, &params, common.seed.unwrap_or(0), &common.out).map(drop)
        }
        Command::Train { inductive, common } => {
            let cfg = load_config(&common)?;
            let out = cmd_train(&cfg, inductive, &common.out, |e| println!("{e}"))?;
            println!(
                "best epoch {} val_ap {:.4}; checkpoint {}",
                out.checkpoint.epoch,
                out.checkpoint.best_val_ap,
                common.out.join("model.ckpt").display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            split,
            setting,
            samplers,
            common,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = HotModel::from_checkpoint(&ckpt)?;
            let report = cmd_eval(&cfg, &model, &split, setting.parse()?, &parse_samplers(&samplers)?, &common.out)?;
            print!("{report}");
            Ok(())
        }
        Command::MemEstimate { seq_len, patch, block, d } => {
            print!("{}", cmd_mem_estimate(seq_len, patch, block, d)?);
            Ok(())
        }
        Command::HoSweep { s2, parallel, common } => {
            let cfg = load_config(&common)?;
            let values = parse_list(&s2)?;
            let rows = cmd_ho_sweep(&cfg, &values, parallel, &common.out)?;
            println!("{:>4} {:>8} {:>8}", "s2", "val_AP", "val_AUC");
            for r in rows {
                println!("{:>4} {:>8.4} {:>8.4}", r.s2, r.val_ap, r.val_auc);
            }
            Ok(())
        }
    }
}

/// Reads `--config` (or the defaults) and applies `--seed`.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Usage(format!("`{x}` is not a non-negative integer"))))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Usage("empty list".into()));
    }
    Ok(v)
}

fn parse_samplers(s: &str) -> Result<Vec<NegativeSamplerKind>> {
    s.split(',').map(|x| x.trim().parse()).collect()
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn cmd_ingest(input: &Path, node_dim: usize, out: &Path) -> Result<EventStream> {
    let s = ingest_csv(input, node_dim)?;
    create_dir(out)?;
    write_csv(&s, &out.join("events.csv"))?;
    let (t0, t1) = s.time_range().unwrap_or((0.0, 0.0));
    println!(
        "{} events, {} nodes, edge features {}, time {t0}..{t1} -> {}",
        s.len(),
        s.num_nodes(),
        s.edge_dim(),
        out.join("events.csv").display()
    );
    Ok(s)
}

pub fn cmd_synth(kind: SyntheticKind, params: &SyntheticParams, seed: u64, out: &Path) -> Result<EventStream> {
    let s = generate_synthetic(kind, params, seed)?;
    create_dir(out)?;
    write_csv(&s, &out.join("events.csv"))?;
    println!("{} events, {} nodes -> {}", s.len(), s.num_nodes(), out.join("events.csv").display());
    Ok(s)
}

/// The dataset with its chronological split.
pub struct Dataset {
    pub full: EventStream,
    pub train: EventStream,
    pub val: EventStream,
    pub test: EventStream,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.dataset.exists() {
        return Err(Error::MissingFile(cfg.dataset.clone()));
    }
    let full = ingest_csv(&cfg.dataset, cfg.node_dim)?;
    let [train, val, test] = chronological_split(&full, cfg.ratios())?;
    Ok(Dataset { full, train, val, test })
}

fn inductive_mask(cfg: &RunConfig, data: &Dataset) -> Result<std::collections::HashSet<u32>> {
    inductive_node_mask(&[&data.val, &data.test], cfg.inductive_ratio, cfg.eval_seed)
}

pub fn cmd_train(cfg: &RunConfig, inductive: bool, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let train_s = if inductive {
        mask_train(&data.train, &inductive_mask(cfg, &data)?)
    } else {
        data.train.clone()
    };
    let history = EventStream::concat(&[data.train.clone(), data.val.clone()])?;
    create_dir(out)?;
    let mut log = fs::File::create(out.join("train_log.csv"))?;
    writeln!(log, "{}", EpochLog::HEADER)?;
    let outcome = train_with(
        &TrainData {
            train: &train_s,
            val: &data.val,
            history: &history,
        },
        &cfg.model,
        |e| {
            let _ = writeln!(log, "{e}");
            on_epoch(e);
        },
    )?;
    outcome.checkpoint.save(&out.join("model.ckpt"))?;
    Ok(outcome)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    scorer: &dyn LinkScorer,
    split: &str,
    setting: Setting,
    kinds: &[NegativeSamplerKind],
    out: &Path,
) -> Result<MetricReport> {
    let data = load_dataset(cfg)?;
    let target = match split {
        "val" => &data.val,
        "test" => &data.test,
        _ => return Err(Error::Usage(format!("unknown split `{split}` (expected val or test)"))),
    };
    let protocol = match setting {
        Setting::Transductive => EvalProtocol::transductive(),
        Setting::Inductive => EvalProtocol::inductive(inductive_mask(cfg, &data)?),
    };
    let index = build_index(&data.full);
    let report = evaluate(
        scorer,
        &EvalRequest {
            history: &data.full,
            index: &index,
            train: &data.train,
            split: target,
            protocol: &protocol,
            kinds,
            batch_size: cfg.model.batch_size,
            seed: cfg.eval_seed,
        },
    )?;
    create_dir(out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    Ok(report)
}

pub fn cmd_mem_estimate(seq_len: u64, patch: u64, block: u64, d: u64) -> Result<String> {
    let m = MemoryEstimate::new(seq_len, patch, block, d)?;
    let mut s = format!(
        "vanilla_elements {}\nbrt_per_block_elements {}\nratio {:.4}\n",
        m.vanilla_elements,
        m.brt_per_block_elements,
        m.ratio()
    );
    if !m.exact() {
        s.push_str(&format!("note: P={patch} does not divide S={seq_len}; patch count rounded up\n"));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub s2: usize,
    pub val_ap: f64,
    pub val_auc: f64,
}

/// One training run per `s_2`, same seed; writes `ho_sweep.csv`.
pub fn cmd_ho_sweep(cfg: &RunConfig, values: &[usize], parallel: bool, out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Usage("no s2 values given".into()));
    }
    let job = |s2: usize| -> Result<SweepRow> {
        let mut c = cfg.clone();
        let s1 = c.model.budgets.first().copied().unwrap_or(1);
        c.model.budgets = vec![s1, s2];
        let outcome = cmd_train(&c, false, &out.join(format!("s2_{s2}")), |_| {})?;
        let best = &outcome.log[outcome.checkpoint.epoch - 1];
        Ok(SweepRow {
            s2,
            val_ap: best.val_ap,
            val_auc: best.val_auc,
        })
    };
    let rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = values.iter().map(|&v| s.spawn(move || job(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep job panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        values.iter().map(|&v| job(v)).collect::<Result<_>>()?
    };
    create_dir(out)?;
    let mut csv = String::from("s2,val_ap,val_auc\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.s2, r.val_ap, r.val_auc));
    }
    fs::write(out.join("ho_sweep.csv"), csv)?;
    Ok(rows)
}
