//! One function per subcommand. Each writes its artifacts under the run's
//! output directory and returns a summary for printing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use phri_core::dynamics::Episode;
use phri_core::net::{PredictorModel, load_model, save_model};
use phri_core::pipeline::{
    CompareReport, Dataset, EvalReport, IterateResult, Provenance, TransferContext, TransferReport, WindowSet,
    compare_controllers, derive_seed, evaluate_model, holdout_jobs, iterate, reports_csv, run_game, run_transfer,
    train_model,
};
use serde::Serialize;
use tracing::info;

use crate::config::RunConfig;
use crate::error::CliError;

const GENERATE_STREAM: u64 = 10;
const TRAIN_STREAM: u64 = 20;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write(path, text + "\n")
}

fn write_model(path: &Path, model: &PredictorModel) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_model(model, path)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<PredictorModel, CliError> {
    Ok(load_model(path)?)
}

fn loss_csv<'a>(traces: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = String::from("model,epoch,loss\n");
    for (model, trace) in traces {
        for (e, l) in trace.iter().enumerate() {
            writeln!(out, "{model},{e},{l:?}").unwrap();
        }
    }
    out
}

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("dataset")
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub dir: PathBuf,
    pub episodes: usize,
}

/// Records the initial dataset: game assistance with the nominal path standing
/// in for the human reference, `episodes_per_kind` episodes per trajectory kind.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary, CliError> {
    let env = &cfg.env;
    let count = env.episodes_per_kind * env.trajectories.len();
    let jobs = env.plan(&env.human, count, cfg.seed, GENERATE_STREAM)?;
    let ctrl = env.controller()?;
    let episodes: Vec<Episode> = if jobs.is_empty() {
        Vec::new()
    } else {
        run_game(env, &env.plant, &ctrl, None, &jobs)?
            .into_iter()
            .map(|o| o.episode)
            .collect()
    };
    let dir = dataset_dir(cfg);
    let dataset = Dataset {
        episodes,
        provenance: Provenance {
            collected_with: None,
            iteration: Some(0),
            context: env.human.id.clone(),
        },
    };
    dataset.save(&dir)?;
    info!(episodes = count, dir = %dir.display(), "dataset written");
    Ok(GenerateSummary { dir, episodes: count })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub report: EvalReport,
    pub loss_trace: Vec<f64>,
}

/// Trains a fresh model on a recorded dataset and evaluates it on the held-out jobs.
pub fn cmd_train(cfg: &RunConfig, data: &Path) -> Result<TrainSummary, CliError> {
    let dataset = Dataset::load(data)?;
    let p = &cfg.predictor;
    let windows = WindowSet::new(
        &dataset.episodes,
        p.window_k,
        p.horizon_n,
        cfg.train.stride,
        cfg.train.target,
    );
    let mut outcome = train_model(&windows, p, None, &cfg.train, derive_seed(cfg.seed, &[TRAIN_STREAM]))?;
    outcome.model.version_tag = "M0".into();
    let ctrl = cfg.env.controller()?;
    let holdout = holdout_jobs(&cfg.env, cfg.seed)?;
    let report = evaluate_model(&cfg.env, &ctrl, &outcome.model, &holdout, cfg.seed)?;

    let dir = cfg.out.join("train");
    let model_path = dir.join("M0.model");
    write_model(&model_path, &outcome.model)?;
    write(&dir.join("report.csv"), reports_csv([&report]))?;
    write_json(&dir.join("report.json"), &report)?;
    write(&dir.join("loss.csv"), loss_csv([("M0", outcome.loss_trace.as_slice())]))?;
    Ok(TrainSummary {
        model_path,
        report,
        loss_trace: outcome.loss_trace,
    })
}

pub fn iterate_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("iterate")
}

/// Runs the collect-train loop and writes every model, report, and the
/// e_RMS/e_MAX table over iterations and horizons.
pub fn cmd_iterate(cfg: &RunConfig) -> Result<IterateResult, CliError> {
    let dir = iterate_dir(cfg);
    let result = iterate(
        &cfg.env,
        &cfg.predictor,
        &cfg.train,
        cfg.iterate.tol,
        cfg.iterate.max_iters,
        cfg.seed,
        |rec| {
            info!(
                model = %rec.model.version_tag,
                e_rms = rec.report.longest().e_rms,
                e_max = rec.report.longest().e_max,
                seconds = rec.seconds,
                "iteration done"
            )
        },
    )?;
    for rec in &result.iterations {
        let tag = &rec.model.version_tag;
        write_model(&dir.join("models").join(format!("{tag}.model")), &rec.model)?;
        write_json(&dir.join("reports").join(format!("{tag}.json")), &rec.report)?;
    }
    write(&dir.join("iterate.csv"), reports_csv(result.reports()))?;
    write(
        &dir.join("loss.csv"),
        loss_csv(
            result
                .iterations
                .iter()
                .map(|r| (r.model.version_tag.as_str(), r.loss_trace.as_slice())),
        ),
    )?;
    if let Some(reason) = &result.aborted {
        return Err(CliError::Incomplete(format!(
            "iteration stopped early ({reason}); {} models were written",
            result.iterations.len()
        )));
    }
    Ok(result)
}

/// Fine-tunes the head of `base` in a new context and reports pre/post errors.
pub fn cmd_transfer(cfg: &RunConfig, base: &Path, ctx: TransferContext) -> Result<TransferReport, CliError> {
    let model = read_model(base)?;
    let report = run_transfer(&cfg.env, &model, &cfg.train, ctx, &cfg.transfer, cfg.seed)?;
    let dir = cfg.out.join("transfer").join(ctx.as_str());
    write_model(&dir.join(format!("{}.model", report.model.version_tag)), &report.model)?;
    write(&dir.join("report.csv"), report.csv())?;
    write_json(&dir.join("pre.json"), &report.pre)?;
    write_json(&dir.join("post.json"), &report.post)?;
    Dataset {
        episodes: report.recorded.clone(),
        provenance: Provenance {
            collected_with: Some(model.version_tag.clone()),
            iteration: None,
            context: ctx.to_string(),
        },
    }
    .save(&dir.join("dataset"))?;
    Ok(report)
}

/// Closed-loop evaluation of a saved model on the held-out jobs.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path) -> Result<EvalReport, CliError> {
    let model = read_model(model_path)?;
    let ctrl = cfg.env.controller()?;
    let holdout = holdout_jobs(&cfg.env, cfg.seed)?;
    let report = evaluate_model(&cfg.env, &ctrl, &model, &holdout, cfg.seed)?;
    let dir = cfg.out.join("eval");
    write(&dir.join(format!("{}.csv", model.version_tag)), reports_csv([&report]))?;
    write_json(&dir.join(format!("{}.json", model.version_tag)), &report)?;
    Ok(report)
}

/// f_RMS under manual guidance, impedance tracking, and (with a model) assistance.
pub fn cmd_compare(cfg: &RunConfig, model_path: Option<&Path>) -> Result<CompareReport, CliError> {
    let model = model_path.map(read_model).transpose()?;
    let report = compare_controllers(&cfg.env, model.as_ref(), cfg.compare.episodes, cfg.seed)?;
    let dir = cfg.out.join("compare");
    write(&dir.join("compare.csv"), report.csv())?;
    write_json(&dir.join("compare.json"), &report)?;
    Ok(report)
}

pub fn service_config(cfg: &RunConfig) -> phri_live::ServiceConfig {
    phri_live::ServiceConfig {
        env: cfg.env.clone(),
        train: cfg.train.clone(),
        model_dir: cfg.out.join("models"),
        recordings_dir: cfg.out.join("recordings"),
        rate_hz: cfg.serve.rate_hz,
        prediction_every: cfg.serve.prediction_every,
        seed: cfg.seed,
    }
}

/// Serves live sessions until SIGINT.
pub async fn cmd_serve(cfg: &RunConfig, address: &str) -> Result<(), CliError> {
    let service = service_config(cfg);
    let listener = tokio::net::TcpListener::bind(address)
        .await
        .map_err(|e| CliError::Service(phri_live::ServiceError::Bind(address.to_string(), e)))?;
    info!(address = %listener.local_addr().map_err(|e| CliError::io(Path::new(address), e))?, "serving");
    phri_live::serve(listener, service, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
