use std::error::Error;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tutor_core::content::{load_course_with, validate_course, Severity, Strictness};
use tutor_core::eventlog::{renumber, replay_log, write_log};
use tutor_core::experiment::{run_experiment, ExperimentConfig, ExperimentReport, Estimate};
use tutor_core::matcher::{MatcherConfig, TfIdfMatcher};
use tutor_core::policy::PolicyModel;
use tutor_core::simulator::{simulate_session, PopulationConfig, SimContext, Variant, DEFAULT_SESSION_CAP_S};
use tutor_core::stats::Mark;
use tutor_service::{router, ServiceConfig, Tutor};

const LOG_PATH_VAR: &str = "KORBIT_LOG_PATH";

#[derive(Parser)]
#[command(name = "tutor", version, about = "Dialogue tutoring engine: service, simulator and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/JSON session service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        content_dir: Option<PathBuf>,
        /// Starting policy for a fresh log.
        #[arg(long)]
        policy_snapshot: Option<PathBuf>,
        /// Event log; KORBIT_LOG_PATH takes precedence when set.
        #[arg(long)]
        log_path: Option<PathBuf>,
    },
    /// Check a course bundle directory.
    Validate {
        dir: PathBuf,
        /// Ignore unknown keys instead of rejecting them.
        #[arg(long)]
        lenient: bool,
    },
    /// Simulate students and write their event log.
    Simulate {
        #[arg(long)]
        course: PathBuf,
        #[arg(long)]
        population: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_SESSION_CAP_S)]
        session_cap_s: f64,
        #[arg(long)]
        policy_snapshot: Option<PathBuf>,
        /// Where to write the JSONL event log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the two-arm experiment and report the outcome table.
    Experiment {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = tutor_core::experiment::DEFAULT_SPLIT)]
        split: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        course: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SESSION_CAP_S)]
        session_cap_s: f64,
        #[arg(long)]
        policy_snapshot: Option<PathBuf>,
    },
    /// Rebuild a policy snapshot by replaying an event log.
    TrainPolicy {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model to fold the rewards into; pristine when absent.
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Xmooc,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::FullIts,
            VariantArg::Xmooc => Variant::XmoocIts,
        }
    }
}

type CliResult = Result<ExitCode, Box<dyn Error>>;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Serve {
            host,
            port,
            content_dir,
            policy_snapshot,
            log_path,
        } => {
            let log_path = std::env::var_os(LOG_PATH_VAR).map(PathBuf::from).or(log_path);
            let config = ServiceConfig {
                content_dir,
                log_path,
                initial_policy: load_policy(policy_snapshot.as_deref())?,
                ..ServiceConfig::default()
            };
            serve(config, &host, port)
        }
        Command::Validate { dir, lenient } => validate(&dir, lenient),
        Command::Simulate {
            course,
            population,
            variant,
            n,
            seed,
            session_cap_s,
            policy_snapshot,
            out,
        } => {
            let course = load_course_with(&course, Strictness::Strict)?;
            let population = PopulationConfig::load(&population)?;
            let policy = load_policy(policy_snapshot.as_deref())?;
            let matcher = TfIdfMatcher::for_course(&course, MatcherConfig::default());
            let mut ctx = SimContext::new(&course, &matcher, &policy);
            ctx.session_cap_s = session_cap_s;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(population.seed));
            let mut records = Vec::new();
            for i in 0..n {
                let student = population.sample_student(format!("sim-{i:04}"), &course, &mut rng);
                let log = simulate_session(&student, variant.into(), &ctx, &mut rng)?;
                println!(
                    "{}\t{}\tminutes {:.1}\tsolved {}/{}\tinterventions {}\treturned {}\twill_refer {}",
                    log.student_id,
                    log.variant,
                    log.total_time_s / 60.0,
                    log.exercises_solved,
                    log.exercises_started,
                    log.triples.len(),
                    log.returned,
                    log.will_refer
                );
                records.extend(log.records);
            }
            renumber(&mut records);
            if let Some(out) = out {
                let mut w = BufWriter::new(File::create(&out)?);
                write_log(&mut w, &records)?;
                eprintln!("wrote {} records to {}", records.len(), out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment {
            n,
            split,
            seed,
            population,
            course,
            out,
            session_cap_s,
            policy_snapshot,
        } => {
            let course = load_course_with(&course, Strictness::Strict)?;
            let population = PopulationConfig::load(&population)?;
            let policy = load_policy(policy_snapshot.as_deref())?;
            let mut config = ExperimentConfig::new(population);
            if let Some(n) = n {
                config.n_participants = n;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            config.assignment_split = split;
            config.session_cap_s = session_cap_s;
            let matcher = TfIdfMatcher::for_course(&course, MatcherConfig::default());
            let run = run_experiment(&config, &course, &matcher, &policy)?;
            print!("{}", render_table(&run.report));
            if let Some(out) = out {
                fs::write(&out, run.report.to_json())?;
                eprintln!("wrote {}", out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainPolicy { log, out, base } => {
            let base = load_policy(base.as_deref())?;
            let model = replay_log(BufReader::new(File::open(&log)?), base)?;
            fs::write(&out, model.to_snapshot())?;
            println!("{} updates folded into {}", model.update_count, out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_policy(path: Option<&Path>) -> Result<PolicyModel, Box<dyn Error>> {
    match path {
        Some(p) => Ok(PolicyModel::from_snapshot(&fs::read_to_string(p)?)?),
        None => Ok(PolicyModel::default()),
    }
}

fn validate(dir: &Path, lenient: bool) -> CliResult {
    let strictness = if lenient { Strictness::Lenient } else { Strictness::Strict };
    match load_course_with(dir, strictness) {
        Ok(course) => {
            for f in validate_course(&course).findings {
                let level = if f.severity == Severity::Error { "error" } else { "warning" };
                println!("{level}: {}: {}", f.id, f.message);
            }
            println!(
                "ok: {} ({} skills, {} units, {} exercises)",
                course.id,
                course.skills.len(),
                course.units.len(),
                course.exercises().count()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!("invalid: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn serve(config: ServiceConfig, host: &str, port: u16) -> CliResult {
    let tutor = Tutor::open(config)?;
    eprintln!(
        "loaded {} course(s), {} log record(s)",
        tutor.course_ids().len(),
        tutor.records().len()
    );
    let app = router(Arc::new(Mutex::new(tutor)));
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cell(e: Option<Estimate>, mark: Option<Mark>) -> String {
    let mark = mark.map(|m| m.as_str()).unwrap_or("");
    match e {
        Some(e) => format!("{:.2} ± {:.2}{mark}", e.value, e.halfwidth),
        None => "n/a".into(),
    }
}

fn render_table(report: &ExperimentReport) -> String {
    let sig = &report.significance;
    let mut out = format!(
        "{:<10} {:>5}  {:<20} {:<20} {:<20} {:<20}\n",
        "System", "N", "Time Spent (min)", "Returning (%)", "Will Refer (%)", "Learning Gain (%)"
    );
    for row in &report.rows {
        let marks = |t: Option<tutor_core::stats::TestResult>| (row.variant == Variant::FullIts).then(|| t.map(|t| t.mark)).flatten();
        out.push_str(&format!(
            "{:<10} {:>5}  {:<20} {:<20} {:<20} {:<20}\n",
            row.system,
            row.participants,
            cell(row.time_spent_min, marks(sig.time_spent)),
            cell(row.returning_pct, marks(sig.returning)),
            cell(row.will_refer_pct, marks(sig.will_refer)),
            cell(row.learning_gain_pct, marks(sig.learning_gain)),
        ));
    }
    out.push_str(&format!("pooled learning gain: {}\n", cell(report.pooled_learning_gain_pct, None)));
    let c = &report.cross_check;
    out.push_str(&format!(
        "log-walker cross-check: {} ({}/{} from rewards, {}/{} from dialogue)\n",
        if c.consistent { "consistent" } else { "MISMATCH" },
        c.from_triples.helped,
        c.from_triples.total,
        c.from_log_walker.helped,
        c.from_log_walker.total
    ));
    out.push_str("** p < 0.05, * p < 0.10; Full ITS against xMOOC ITS\n");
    out
}
