//! `quickadapt`: generate synthetic data, train configurations S1–S6,
//! adapt general models to new domains, and score the results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quickadapt::data_synth::{SynthLangSpec, SynthSizes};
use quickadapt::eval::emit_report;
use quickadapt::eval::ReportFormat;
use quickadapt::harness::{
    cmd_adapt, cmd_compare_configs, cmd_evaluate, cmd_gen_data, cmd_train, run_grad_check_suite, stats_table,
    summary_table, TrainOptions, GRAD_CHECK_THRESHOLD,
};
use quickadapt::Error;

#[derive(Parser)]
#[command(name = "quickadapt", version, about = "Desk-scale unsupervised domain adaptation for NMT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its corpus statistics.
    GenData(GenDataArgs),
    /// Train the configuration in a manifest (checkpoint after every stage).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue after the last completed stage.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt a general model along the manifest's adaptation plan.
    Adapt {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a checkpoint on a dataset's test sets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest (`dataset.toml`).
        #[arg(long)]
        dataset: PathBuf,
        /// Test set id such as `A.src-tgt`; repeatable. Default: all.
        #[arg(long = "test-set")]
        test_sets: Vec<String>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Score only the first N sentences of each set.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run or load several configurations and print a ranked summary.
    CompareConfigs {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Check that S4 matches or beats S1, S2 and S6 (0.5 BLEU slack).
        #[arg(long)]
        check_ordering: bool,
        /// Write the combined metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every kernel and a one-layer model.
    GradCheck {
        #[arg(long, default_value_t = GRAD_CHECK_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        kernels_only: bool,
    },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `[language]` and `[sizes]` tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    v_gen: Option<usize>,
    #[arg(long)]
    v_dom: Option<usize>,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    #[arg(long)]
    f_new: Option<f64>,
    #[arg(long)]
    swap_window: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    general_parallel: Option<usize>,
    #[arg(long)]
    general_mono: Option<usize>,
    #[arg(long)]
    domain_mono: Option<usize>,
    /// Size of every dev and test split.
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenDataFile {
    #[serde(default)]
    language: SynthLangSpec,
    #[serde(default)]
    sizes: SynthSizes,
}

fn gen_data(a: GenDataArgs) -> quickadapt::Result<()> {
    let mut file = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<GenDataFile>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GenDataFile::default(),
    };
    let (l, s) = (&mut file.language, &mut file.sizes);
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(l.seed, a.seed);
    set!(l.v_gen, a.v_gen);
    set!(l.v_dom, a.v_dom);
    set!(l.domains, a.domains);
    set!(l.f_new, a.f_new);
    set!(l.swap_window, a.swap_window);
    set!(l.min_len, a.min_len);
    set!(l.max_len, a.max_len);
    set!(s.general_parallel, a.general_parallel);
    set!(s.general_mono, a.general_mono);
    set!(s.domain_mono, a.domain_mono);
    if let Some(n) = a.test_size {
        s.general_dev = n;
        s.general_test = n;
        s.domain_test = n;
    }
    let out = cmd_gen_data(l, s, &a.out)?;
    print!("{}", stats_table(&out.stats));
    println!("manifest {}", out.manifest_path.display());
    println!("sha256 {}", out.hash);
    Ok(())
}

fn run(cli: Cli) -> quickadapt::Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train { manifest, resume } => {
            let out = cmd_train(&manifest, TrainOptions { resume, stop_after_stages: None })?;
            print!("{}", summary_table(&out.report.summary()?));
            println!("run directory {}", out.run_dir.display());
        }
        Command::Adapt { manifest } => {
            let out = cmd_adapt(&manifest)?;
            let run = out.report.run_ids()[0].to_string();
            for step in 0..=out.checkpoints.len() {
                let scores = out.report.scores_at(&run, Some(step))?;
                let cells: Vec<String> = scores.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
                println!("step {step}: {}", cells.join(", "));
            }
            println!("run directory {}", out.run_dir.display());
        }
        Command::Evaluate { checkpoint, dataset, test_sets, beam, limit } => {
            for (set, bleu) in cmd_evaluate(&checkpoint, &dataset, &test_sets, beam, limit)? {
                println!("{set:<18} {bleu:>7.2}");
            }
        }
        Command::CompareConfigs { manifests, check_ordering, out } => {
            let res = cmd_compare_configs(&manifests, check_ordering)?;
            print!("{}", summary_table(&res.summary));
            if let Some(dir) = out {
                emit_report(&res.report, &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotCsv], &dir)?;
            }
            let mut ok = true;
            for c in &res.checks {
                println!("{} {} ({:.2} vs {:.2})", if c.passed { "PASS" } else { "FAIL" }, c.claim, c.lhs, c.rhs);
                ok &= c.passed;
            }
            return Ok(ok);
        }
        Command::GradCheck { threshold, kernels_only } => {
            let suite = run_grad_check_suite(threshold, kernels_only, None)?;
            print!("{}", suite.table());
            println!("max relative error {:.3e} (threshold {threshold:.0e})", suite.max_error());
            return Ok(suite.passes());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
