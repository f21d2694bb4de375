use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use log::info;

use buctd::condition::Encoding;
use buctd::eval::{ap_by_crowding, precision_recall, EvalReport};
use buctd::geometry::Pose;
use buctd::io::{load_predictions, save_predictions, Dataset, PredictionFile, SourceTag};
use buctd::nets::{Arch, Checkpoint};
use buctd::pipeline::models::BU_ARCH;
use buctd::pipeline::{
    bu_prediction_file, checkpoint_predictions, empirical_pool, load_images, predict_bu, predict_ctd, refined_prediction_file,
    train_bu, train_ctd, BuModel, ConditionSource, CtdModel, RunConfig, Strategy,
};
use buctd::synth::{generate_dataset, DatasetSpec, SceneSpec};

mod plot;

#[derive(Debug, Parser)]
#[command(name = "buctd", version, about = "Bottom-up conditioned top-down pose estimation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "BUCTD_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic crowd dataset with train and test splits.
    GenerateData {
        #[arg(long, default_value_t = 2000)]
        train_scenes: usize,
        #[arg(long, default_value_t = 500)]
        test_scenes: usize,
    },
    /// Train the bottom-up model and keep its last epoch checkpoints.
    TrainBu {
        /// Training annotations; defaults to `data.train` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export bottom-up predictions, one file per checkpoint.
    Predict {
        /// Bottom-up checkpoints; defaults to every epoch checkpoint under `<out>/bu`.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Annotations of the images to predict on; defaults to `data.train`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the conditional top-down model.
    TrainCtd {
        #[arg(long)]
        sampling: Option<Strategy>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        insert_stage: Option<usize>,
        #[arg(long)]
        condition: Option<Encoding>,
        /// Bottom-up prediction files for empirical sampling.
        #[arg(long = "predictions")]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run bottom-up proposals through iterative top-down refinement.
    Refine {
        #[arg(long)]
        iters: Option<usize>,
        /// Bottom-up checkpoint producing the proposals.
        #[arg(long, required_unless_present = "proposals")]
        bu: Option<PathBuf>,
        /// Precomputed proposals instead of running a bottom-up checkpoint.
        #[arg(long, conflicts_with = "bu")]
        proposals: Option<PathBuf>,
        #[arg(long)]
        ctd: PathBuf,
        /// Keep the first crop for later iterations instead of re-deriving it.
        #[arg(long)]
        fixed_box: bool,
        /// Annotations of the images to refine on; defaults to `data.test`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score prediction files against ground truth.
    Evaluate {
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
        /// Ground-truth annotations; defaults to `data.test`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn data_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> PathBuf {
    match flag.as_ref().or(configured.as_ref()) {
        Some(p) => p.clone(),
        None => usage_error(format!("no {what} annotations: pass --data or set data.{what} in the config")),
    }
}

fn load_dataset(path: &Path) -> Result<(Dataset, Vec<buctd::image::Image>)> {
    let data = Dataset::load(path)?;
    let images = load_images(&data, path.parent().unwrap_or(Path::new(".")))?;
    info!("{}: {} scenes, {} instances", path.display(), data.scenes.len(), data.num_instances());
    Ok((data, images))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "predictions".into())
}

fn generate_data(cli: &Cli, cfg: &RunConfig, train_scenes: usize, test_scenes: usize) -> Result<()> {
    let spec = DatasetSpec {
        scene: SceneSpec {
            schema: cfg.schema()?,
            seed: cfg.seed,
            ..SceneSpec::default()
        },
        n_train: train_scenes,
        n_test: test_scenes,
        ..DatasetSpec::default()
    };
    let manifest = generate_dataset(&spec, &cli.out)?;
    for s in &manifest.splits {
        println!(
            "{}: {} scenes, {} instances -> {}",
            s.name,
            s.num_scenes,
            s.num_instances,
            cli.out.join(&s.annotation_file).display()
        );
    }
    Ok(())
}

fn bu_dir(out: &Path) -> PathBuf {
    out.join("bu")
}

fn run_train_bu(cli: &Cli, cfg: &RunConfig, data: &Option<PathBuf>) -> Result<()> {
    let path = data_path(data, &cfg.data.train, "train");
    let (data, images) = load_dataset(&path)?;
    let trained = train_bu(cfg, &data, &images)?;
    let dir = bu_dir(&cli.out);
    create_dir(&dir)?;
    let steps_per_epoch = trained.report.step_losses.len() / cfg.bu.train.epochs.max(1);
    for (epoch, store) in &trained.snapshots {
        let model = BuModel {
            net: trained.model.net.clone(),
            store: store.clone(),
        };
        let p = dir.join(format!("epoch-{epoch:03}.json"));
        model.checkpoint(cfg.snapshot(), epoch * steps_per_epoch).save(&p)?;
        println!("checkpoint {}", p.display());
    }
    let p = dir.join("final.json");
    trained.model.checkpoint(cfg.snapshot(), trained.report.step_losses.len()).save(&p)?;
    write_json(&dir.join("train_report.json"), &trained.report)?;
    println!("checkpoint {}", p.display());
    Ok(())
}

fn epoch_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if dir.is_dir() {
        for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = e?.path();
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("epoch-") && name.ends_with(".json") {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn run_predict(cli: &Cli, cfg: &RunConfig, checkpoints: &[PathBuf], data: &Option<PathBuf>) -> Result<()> {
    let checkpoints = if checkpoints.is_empty() {
        let found = epoch_checkpoints(&bu_dir(&cli.out))?;
        if found.is_empty() {
            usage_error("no --checkpoint given and no epoch checkpoints under <out>/bu");
        }
        found
    } else {
        checkpoints.to_vec()
    };
    let path = data_path(data, &cfg.data.train, "train");
    let (data, images) = load_dataset(&path)?;
    let mut models = Vec::new();
    for p in &checkpoints {
        models.push((stem(p), BuModel::from_checkpoint(&Checkpoint::load(p)?)?));
    }
    let dir = cli.out.join("predictions");
    create_dir(&dir)?;
    for (tag, file) in checkpoint_predictions(&models, &data, &images, cfg)? {
        let p = dir.join(format!("{tag}.json"));
        save_predictions(&file, &p)?;
        println!("predictions {}", p.display());
    }
    Ok(())
}

struct CtdOverrides {
    sampling: Option<Strategy>,
    arch: Option<Arch>,
    insert_stage: Option<usize>,
    condition: Option<Encoding>,
}

fn run_train_ctd(cli: &Cli, cfg: &RunConfig, o: CtdOverrides, predictions: &[PathBuf], data: &Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = o.sampling {
        cfg.sampling.strategy = s;
    }
    if let Some(a) = o.arch {
        cfg.model.arch = a;
    }
    if let Some(s) = o.insert_stage {
        cfg.model.insert_stage = s;
    }
    if let Some(c) = o.condition {
        cfg.condition.encoding = c;
    }
    cfg.validate()?;
    match (cfg.sampling.strategy, predictions.is_empty()) {
        (Strategy::Empirical, true) => usage_error("empirical sampling requires at least one --predictions file"),
        (Strategy::Generative, false) => usage_error("generative sampling consumes no prediction files"),
        _ => {}
    }
    let path = data_path(data, &cfg.data.train, "train");
    let (data, images) = load_dataset(&path)?;
    let pool;
    let source = match cfg.sampling.strategy {
        Strategy::Empirical => {
            let mut files = Vec::new();
            for p in predictions {
                files.push((stem(p), load_predictions(p)?));
            }
            pool = empirical_pool(&files, &data, &cfg)?;
            info!("condition pool: {} instances, {} poses", pool.len(), pool.num_poses());
            ConditionSource::Pool(&pool)
        }
        Strategy::Generative => ConditionSource::Generative,
    };
    let (model, report) = train_ctd(&cfg, &data, &images, source)?;
    let dir = cli.out.join("ctd");
    create_dir(&dir)?;
    let p = dir.join("model.json");
    model.checkpoint(&cfg, report.step_losses.len()).save(&p)?;
    write_json(&dir.join("train_report.json"), &report)?;
    println!("checkpoint {}", p.display());
    println!("epoch losses {:?}", report.epoch_losses);
    Ok(())
}

/// Poses per scene of `data`, in record order; scenes without a record get none.
fn proposals_by_scene(file: &PredictionFile, data: &Dataset) -> Result<Vec<Vec<Pose>>> {
    let index = data.index();
    let mut out = vec![Vec::new(); data.scenes.len()];
    for rec in &file.records {
        let Some(&i) = index.get(&rec.image_id) else {
            bail!("proposals reference image {} which is not in the annotations", rec.image_id);
        };
        out[i].extend(rec.instances.iter().map(|inst| inst.pose()));
    }
    Ok(out)
}

struct RefineArgs<'a> {
    iters: Option<usize>,
    bu: &'a Option<PathBuf>,
    proposals: &'a Option<PathBuf>,
    ctd: &'a Path,
    fixed_box: bool,
    data: &'a Option<PathBuf>,
}

fn run_refine(cli: &Cli, cfg: &RunConfig, a: RefineArgs<'_>) -> Result<()> {
    let mut refine = cfg.refine;
    if let Some(n) = a.iters {
        refine.iterations = n;
    }
    if refine.iterations == 0 {
        usage_error("--iters must be at least 1");
    }
    if a.fixed_box {
        refine.rederive_box = false;
    }
    let path = data_path(a.data, &cfg.data.test, "test");
    let (data, images) = load_dataset(&path)?;
    let ctd_ck = Checkpoint::load(a.ctd)?;
    let ctd = CtdModel::from_checkpoint(&ctd_ck)?;
    let ids: Vec<u64> = data.scenes.iter().map(|s| s.image_id).collect();
    let k = ctd.num_keypoints();
    let dir = cli.out.join("refined");
    create_dir(&dir)?;
    let proposals = match (a.bu, a.proposals) {
        (_, Some(p)) => proposals_by_scene(&load_predictions(p)?, &data)?,
        (Some(p), None) => {
            let bu = BuModel::from_checkpoint(&Checkpoint::load(p)?)?;
            let poses = predict_bu(&bu, &images, &cfg.bu.decode)?;
            let source = SourceTag {
                model: BU_ARCH.into(),
                checkpoint: stem(p),
            };
            let bp = dir.join("bu.json");
            save_predictions(&bu_prediction_file(k, &ids, &poses, &source), &bp)?;
            println!("proposals {}", bp.display());
            poses
        }
        (None, None) => unreachable!("clap requires --bu or --proposals"),
    };
    let out = predict_ctd(&images, &proposals, &ctd, &refine)?;
    let source = SourceTag {
        model: ctd.arch().name().into(),
        checkpoint: stem(a.ctd),
    };
    for it in 0..refine.iterations {
        let per: Vec<_> = out.iter().map(|o| o[it].clone()).collect();
        let p = dir.join(format!("iter-{}.json", it + 1));
        save_predictions(&refined_prediction_file(k, &ids, &per, &source), &p)?;
        println!("refined {}x {}", it + 1, p.display());
    }
    Ok(())
}

fn pr_table(file: &PredictionFile, data: &Dataset, report: &EvalReport, cfg: &RunConfig) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let ecfg = cfg.eval_config()?;
    let mut curves = BTreeMap::new();
    for t in &report.per_threshold {
        curves.insert(format!("{:.2}", t.threshold), precision_recall(file, data, t.threshold, &ecfg)?);
    }
    Ok(curves)
}

fn run_evaluate(cli: &Cli, cfg: &RunConfig, predictions: &[PathBuf], data: &Option<PathBuf>) -> Result<()> {
    let path = data_path(data, &cfg.data.test, "test");
    let gts = Dataset::load(&path)?;
    let ecfg = cfg.eval_config()?;
    for p in predictions {
        let file = load_predictions(p)?;
        let report = ap_by_crowding(&file, &gts, &ecfg)?;
        let dir = cli.out.join("eval").join(stem(p));
        create_dir(&dir)?;
        write_json(&dir.join("report.json"), &report)?;
        let table = report.to_table();
        fs::write(dir.join("report.txt"), &table).with_context(|| format!("writing report in {}", dir.display()))?;
        let curves = pr_table(&file, &gts, &report, cfg)?;
        let mut csv = String::from("threshold,recall,precision\n");
        for (t, pts) in &curves {
            for (r, pr) in pts {
                csv.push_str(&format!("{t},{r},{pr}\n"));
            }
        }
        fs::write(dir.join("pr_curves.csv"), csv).with_context(|| format!("writing curves in {}", dir.display()))?;
        plot::pr_curves(&dir.join("pr_curves.svg"), &stem(p), &curves)?;
        println!("== {} ==\n{table}", p.display());
        println!("report {}", dir.join("report.json").display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenerateData {
            train_scenes,
            test_scenes,
        } => generate_data(cli, &cfg, *train_scenes, *test_scenes),
        Command::TrainBu { data } => run_train_bu(cli, &cfg, data),
        Command::Predict { checkpoints, data } => run_predict(cli, &cfg, checkpoints, data),
        Command::TrainCtd {
            sampling,
            arch,
            insert_stage,
            condition,
            predictions,
            data,
        } => run_train_ctd(
            cli,
            &cfg,
            CtdOverrides {
                sampling: *sampling,
                arch: *arch,
                insert_stage: *insert_stage,
                condition: *condition,
            },
            predictions,
            data,
        ),
        Command::Refine {
            iters,
            bu,
            proposals,
            ctd,
            fixed_box,
            data,
        } => run_refine(
            cli,
            &cfg,
            RefineArgs {
                iters: *iters,
                bu,
                proposals,
                ctd,
                fixed_box: *fixed_box,
                data,
            },
        ),
        Command::Evaluate { predictions, data } => run_evaluate(cli, &cfg, predictions, data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
