//! `distilvpr` command-line interface.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error.

use crate::error::{Error, Result};
use crate::gradcheck::run_gradcheck;
use crate::io;
use crate::manifold::Curvature;
use crate::relational::{
    combine_objective, kd_c_loss, kd_s_loss, scheme_loss, DistillConfig, LossValue, Manifold,
    Reduction, Scheme, Variant,
};
use crate::toy::{run_experiment, AdaptorPlacement, ExperimentConfig, SceneConfig};
use crate::vpr::{evaluate, triplet_loss, TripletConfig, DEFAULT_K_MAX};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "distilvpr", about = "Relational knowledge distillation for place recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate every distillation loss on a teacher/student pair of embedding files.
    Loss(LossArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Recall@K evaluation of query descriptors against a database.
    Eval(EvalArgs),
    /// Run the synthetic distillation experiment.
    Toy(ToyArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AdaptorArg {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_c: f64,
    #[arg(long, default_value_t = 1.0)]
    pub curvature: f64,
    /// Huber threshold.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, value_enum, default_value = "mean")]
    pub reduction: ReductionArg,
    #[arg(long, default_value = "true", action = clap::ArgAction::Set)]
    pub include_diagonal: bool,
    /// Divide relation matrices by their off-diagonal mean.
    #[arg(long)]
    pub rkd_normalize: bool,
    #[arg(long, default_value_t = 1.0)]
    pub hyp_prescale: f64,
    /// Comma-separated subset of euc,cos,hyp.
    #[arg(long, value_delimiter = ',', default_value = "euc,cos,hyp")]
    pub manifolds: Vec<Manifold>,
}

impl DistillArgs {
    pub fn to_config(&self) -> Result<DistillConfig> {
        let mut manifolds = self.manifolds.clone();
        manifolds.sort();
        manifolds.dedup();
        let cfg = DistillConfig {
            lambda_s: self.lambda_s,
            lambda_c: self.lambda_c,
            curvature: Curvature::new(self.curvature)?,
            huber_delta: self.delta,
            reduction: match self.reduction {
                ReductionArg::Mean => Reduction::Mean,
                ReductionArg::Sum => Reduction::Sum,
            },
            include_diagonal: self.include_diagonal,
            rkd_normalize: self.rkd_normalize,
            hyp_prescale: self.hyp_prescale,
            manifolds,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    /// One place label per student row; enables the triplet task loss.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[command(flatten)]
    pub distill: DistillArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Batch size.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Descriptor width.
    #[arg(long, default_value_t = 8)]
    pub c: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "tol", alias = "tolerance", default_value_t = 1e-4)]
    pub tol: f64,
    #[command(flatten)]
    pub distill: DistillArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Write the Recall@K curve as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    pub k_max: usize,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 32)]
    pub places: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_a: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_b: usize,
    #[arg(long, default_value_t = 16)]
    pub teacher_dim: usize,
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Student output width (defaults to the teacher width).
    #[arg(long)]
    pub student_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub adaptor: Option<AdaptorArg>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.04)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    /// Comma-separated subset of none,s,c,sc.
    #[arg(long, value_delimiter = ',', default_value = "none,s,c,sc")]
    pub variants: Vec<Variant>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Scene seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination for per-epoch records.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub distill: DistillArgs,
}

impl ToyArgs {
    pub fn to_config(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            scene: SceneConfig {
                num_places: self.places,
                samples_per_place: self.samples,
                latent_dim: self.latent_dim,
                modality_dims: (self.dim_a, self.dim_b),
                teacher_dim: self.teacher_dim,
                noise_sigma: self.noise,
                seed: self.seed,
                ..SceneConfig::default()
            },
            distill: self.distill.to_config()?,
            triplet: TripletConfig {
                margin: self.margin,
                ..TripletConfig::default()
            },
            hidden: self.hidden,
            student_dim: self.student_dim,
            adaptor: self.adaptor.map(|a| match a {
                AdaptorArg::Teacher => AdaptorPlacement::Teacher,
                AdaptorArg::Student => AdaptorPlacement::Student,
            }),
            epochs: self.epochs,
            learning_rate: self.lr,
            seeds: self.seeds.clone(),
            variants: self.variants.clone(),
            ..ExperimentConfig::default()
        })
    }
}

/// Failure of a command: either bad input or a failed check.
enum Failure {
    Input(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: "<output>".into(),
        message: e.to_string(),
    })
}

fn cmd_loss(a: &LossArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = a.distill.to_config()?;
    let t = io::read_embeddings(&a.teacher)?;
    let s = io::read_embeddings(&a.student)?;
    if t.rows() != s.rows() {
        return Err(Error::BatchMismatch {
            teacher: t.rows(),
            student: s.rows(),
        }
        .into());
    }

    let mut text = String::new();
    for scheme in Scheme::RELATIONAL {
        for &m in &cfg.manifolds {
            let l = scheme_loss(&t, &s, scheme, m.kind(cfg.curvature), &cfg)?;
            text += &format!("{}_{}={}\n", scheme.tag(), m.tag(), l.value);
        }
    }
    let direct = scheme_loss(&t, &s, Scheme::Direct, Manifold::Euclidean.kind(cfg.curvature), &cfg)?;
    text += &format!("direct={}\n", direct.value);

    let kd_s = kd_s_loss(&t, &s, &cfg)?;
    let kd_c = kd_c_loss(&t, &s, &cfg)?;
    let task = match &a.labels {
        Some(path) => {
            let labels = io::read_labels(path)?;
            let tcfg = TripletConfig {
                margin: a.margin,
                ..TripletConfig::default()
            };
            triplet_loss(&s, &labels, &tcfg)?
        }
        None => LossValue {
            value: 0.0,
            grad: crate::numeric::Matrix::zeros(s.rows(), s.cols()),
        },
    };
    text += &format!("kd_s={}\nkd_c={}\ntask={}\n", kd_s.value, kd_c.value, task.value);
    for v in [Variant::S, Variant::C, Variant::SC] {
        let total = combine_objective(&task, Some(&kd_s), Some(&kd_c), &cfg, v);
        text += &format!("distilvpr_{v}={}\n", total.value);
    }
    write_out(out, &text)?;
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = a.distill.to_config()?;
    if a.n < 2 || a.c < 1 {
        return Err(Error::InvalidConfig(format!("need n >= 2 and c >= 1 (got n = {}, c = {})", a.n, a.c)).into());
    }
    let cases = run_gradcheck(a.n, a.c, a.seed, &cfg)?;
    let mut text = format!("# n={} c={} seed={} tol={:e}\n", a.n, a.c, a.seed, a.tol);
    let mut all_ok = true;
    for case in &cases {
        let ok = case.max_rel_error < a.tol;
        all_ok &= ok;
        text += &format!(
            "{} max_rel_err={:e} {}\n",
            case.label(),
            case.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    text += if all_ok { "result=PASS\n" } else { "result=FAIL\n" };
    write_out(out, &text)?;
    if all_ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let q = io::read_embeddings(&a.query)?;
    let db = io::read_embeddings(&a.db)?;
    let truth = io::read_truth(&a.truth, q.rows(), db.rows())?;
    let report = evaluate(&q, &db, &truth, a.k_max)?;
    if let Some(path) = &a.curve {
        io::write_curve_csv(path, &report.curve)?;
    }
    write_out(
        out,
        &format!(
            "ar1={}\nar1pct={}\nqueries_evaluated={}\nqueries_skipped={}\n",
            report.ar_at_1, report.ar_at_1pct, report.num_queries_evaluated, report.num_queries_skipped
        ),
    )?;
    Ok(())
}

fn cmd_toy(a: &ToyArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = a.to_config()?;
    let report = run_experiment(&cfg)?;
    if let Some(path) = &a.out {
        io::write_report_csv(path, &report)?;
    }
    let mut text = format!(
        "teacher ar1={} ar1pct={}\ninput ar1={} ar1pct={}\n",
        report.teacher_recall.ar_at_1,
        report.teacher_recall.ar_at_1pct,
        report.input_recall.ar_at_1,
        report.input_recall.ar_at_1pct
    );
    text += "variant,runs,mean_ar1,std_ar1,mean_ar1pct,std_ar1pct\n";
    for s in report.summary() {
        text += &format!(
            "{},{},{},{},{},{}\n",
            s.variant,
            cfg.seeds.len(),
            s.mean_ar1,
            s.std_ar1,
            s.mean_ar1pct,
            s.std_ar1pct
        );
    }
    write_out(out, &text)?;
    Ok(())
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Loss(a) => cmd_loss(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Toy(a) => cmd_toy(a, out),
        Command::Version => write_out(out, &format!("distilvpr {}\n", crate::VERSION)).map_err(Failure::from),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Check) => EXIT_CHECK_FAILED,
        Err(Failure::Input(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_INPUT
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(args, &mut stdout.lock(), &mut stderr.lock())
}
