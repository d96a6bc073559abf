use clap::{Parser, Subcommand};
use lookmark::promptkit::MethodFlags;
use lookmark_cli::config::{LoadedConfig, Overrides};
use lookmark_cli::stages::{self, Ctx, StageError};
use lookmark_evalserve::AppState;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lookmark",
    version,
    about = "Grounded-fixation report generation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, default_value = "lookmark.toml")]
    config: PathBuf,
    /// Comma-separated method labels, e.g. `-,L,M,L&M`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    methods: Option<Vec<MethodFlags>>,
    /// Restrict to these endpoint names (repeatable).
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble and validate the corpus.
    Ingest(Common),
    /// Map fixations to boxes; write dwell summaries and overlay images.
    Ground(Common),
    /// Build prompt bundles for every study and method.
    Render(Common),
    /// Send prompt bundles to the configured endpoints.
    Generate(Common),
    /// Score generations and compute normalized averages.
    Score(Common),
    /// Write results tables, baseline deltas and charts.
    Report(Common),
    /// All stages from ingest to report.
    Run(Common),
    /// Serve the blinded expert-annotation API.
    EvalServe {
        #[command(flatten)]
        common: Common,
        /// Listen address; overrides `eval.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Line-protocol unigram-F1 scorer on stdin/stdout.
    #[command(hide = true)]
    MockScorer,
}

fn context(c: &Common) -> Result<Ctx, StageError> {
    let overrides = Overrides {
        methods: c.methods.clone(),
        models: c.models.clone(),
        seed: c.seed,
        out: c.out.clone(),
    };
    Ctx::new(LoadedConfig::load(&c.config, &overrides)?, c.force)
}

fn run_stages(c: &Common, list: &[(&str, StageFn)]) -> Result<(), (String, StageError)> {
    let ctx = context(c).map_err(|e| ("config".to_string(), e))?;
    let mut m = ctx.prepare().map_err(|e| ("config".to_string(), e))?;
    for (name, f) in list {
        f(&ctx, &mut m).map_err(|e| (name.to_string(), e))?;
    }
    Ok(())
}

type StageFn = fn(&Ctx, &mut lookmark_cli::manifest::Manifest) -> Result<(), StageError>;

const ALL_STAGES: [(&str, StageFn); 6] = [
    ("ingest", stages::ingest),
    ("ground", stages::ground),
    ("render", stages::render),
    ("generate", stages::generate),
    ("score", stages::score),
    ("report", stages::report),
];

fn eval_serve(c: &Common, bind: Option<String>) -> Result<(), (String, StageError)> {
    let err = |e: StageError| ("eval-serve".to_string(), e);
    let ctx = context(c).map_err(err)?;
    ctx.prepare().map_err(err)?;
    let store = stages::open_eval_store(&ctx).map_err(err)?;
    let e = &ctx.cfg.config.eval;
    let token = std::env::var(&e.token_env).ok().filter(|t| !t.is_empty());
    if token.is_none() {
        log::warn!("{} is not set; the summary route is disabled", e.token_env);
    }
    let state = AppState {
        store,
        clock: ctx.clock.clone(),
        summary_token: token,
        show_images: e.show_images,
        alpha_level: e.alpha_level.clone(),
    };
    let addr = bind.unwrap_or_else(|| e.bind.clone());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| err(StageError::Failed(e.to_string())))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| StageError::Failed(format!("cannot bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| StageError::Failed(e.to_string()))?;
        println!("listening on http://{local}");
        lookmark_evalserve::serve(listener, state)
            .await
            .map_err(|e| StageError::Failed(e.to_string()))
    })
    .map_err(err)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let pick = |name: &str| -> Vec<(&str, StageFn)> {
        ALL_STAGES
            .iter()
            .filter(|(n, _)| *n == name)
            .copied()
            .collect()
    };
    let result = match &cli.command {
        Command::Ingest(c) => run_stages(c, &pick("ingest")),
        Command::Ground(c) => run_stages(c, &pick("ground")),
        Command::Render(c) => run_stages(c, &pick("render")),
        Command::Generate(c) => run_stages(c, &pick("generate")),
        Command::Score(c) => run_stages(c, &pick("score")),
        Command::Report(c) => run_stages(c, &pick("report")),
        Command::Run(c) => run_stages(c, &ALL_STAGES),
        Command::EvalServe { common, bind } => eval_serve(common, bind.clone()),
        Command::MockScorer => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            return match lookmark::metrics::serve_mock_scorer(stdin.lock(), stdout.lock()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("mock-scorer: {e}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::FAILURE
        }
    }
}
