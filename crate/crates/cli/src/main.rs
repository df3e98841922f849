//! `roi-saliency`: synthetic data, preprocessing, training and ROI analysis.

mod config;
mod maps;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use roi_saliency::data::{load_dataset, save_dataset, Atlas, Dataset, Sample};
use roi_saliency::interpret::{assess, gather_evidence, sweep, write_reports_csv, write_reports_json, write_sweep_csv};
use roi_saliency::io::{atomic_write, write_json};
use roi_saliency::nifti::load_nifti;
use roi_saliency::nn::{build_2cc3d, build_synth_cnn, evaluate, load_model, save_model, train, Network};
use roi_saliency::preprocess::{downsample_series, sliding_window_channels, WindowConfig};
use roi_saliency::seed::derive_seed;
use roi_saliency::synth::{generate_synthetic, run_table1, train_repeat};
use serde::Serialize;

use config::{ModelConfig, RunConfig};

#[derive(Parser)]
#[command(name = "roi-saliency", version, about = "ROI corruption saliency for image classifiers")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the striped benchmark: train/ and test/ datasets plus atlas.json.
    Synth,
    /// Turn one 4D NIfTI series into (mean, std) window images, appended to
    /// the dataset in the output directory.
    Preprocess {
        #[arg(long)]
        nifti: PathBuf,
        /// Window length in frames.
        #[arg(long)]
        w: usize,
        #[arg(long)]
        stride: usize,
        /// Downsample each frame to X,Y,Z first.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        target: Option<Vec<usize>>,
        #[arg(long)]
        label: u8,
        #[arg(long)]
        subject: String,
    },
    /// Train a classifier; writes model.json, history.json and metrics.json.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Continue from a saved model instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Categorize every atlas ROI; writes roi_report.json and roi_report.csv.
    Interpret {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        atlas: Option<PathBuf>,
        /// Also write sweep.csv over the configured confidence grid.
        #[arg(long)]
        sweep: bool,
    },
    /// Misclassification under patch-B corruption over repeated seeds.
    Table1 {
        #[arg(long)]
        repeats: Option<usize>,
        /// Also categorize the first repeat over the confidence grid (sweep.csv).
        #[arg(long)]
        sweep: bool,
    },
    /// Per-filter mean activation maps of a convolution layer.
    Activations {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        layer: usize,
        /// Average class 0 and class 1 separately.
        #[arg(long)]
        group_by_label: bool,
    },
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: Vec<String>,
    config: &'a RunConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    if let Command::Table1 { repeats: Some(r), .. } = cli.command {
        cfg.table1.repeats = r;
        cfg.validate()?;
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out)?,
        Command::Preprocess { nifti, w, stride, target, label, subject } => {
            cmd_preprocess(nifti, *w, *stride, target.as_deref(), *label, subject, out)?
        }
        Command::Train { data, val, test, resume } => {
            let data = pick(data, &cfg.paths.train_data, "training data (--data or paths.train_data)")?;
            let val = val.clone().or_else(|| cfg.paths.val_data.clone());
            let test = test.clone().or_else(|| cfg.paths.test_data.clone());
            cmd_train(&cfg, &data, val.as_deref(), test.as_deref(), resume.as_deref(), out)?
        }
        Command::Interpret { model, data, atlas, sweep } => {
            let model = pick(model, &cfg.paths.model, "model (--model or paths.model)")?;
            let data = pick(data, &cfg.paths.data, "dataset (--data or paths.data)")?;
            let atlas = pick(atlas, &cfg.paths.atlas, "atlas (--atlas or paths.atlas)")?;
            cmd_interpret(&cfg, &model, &data, &atlas, *sweep, out)?
        }
        Command::Table1 { sweep, .. } => cmd_table1(&cfg, *sweep, out)?,
        Command::Activations { model, data, layer, group_by_label } => {
            let model = pick(model, &cfg.paths.model, "model (--model or paths.model)")?;
            let data = pick(data, &cfg.paths.data, "dataset (--data or paths.data)")?;
            cmd_activations(&model, &data, *layer, *group_by_label, out)?
        }
    }
    write_json(
        &out.join("run_config.json"),
        &RunRecord {
            command: std::env::args().skip(1).collect(),
            config: &cfg,
        },
    )?;
    Ok(())
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| anyhow!("no {what} given"))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let d = generate_synthetic(&cfg.synth)?;
    save_dataset(&d.train, &out.join("train"))?;
    save_dataset(&d.test, &out.join("test"))?;
    d.atlas.save(&out.join("atlas.json"))?;
    let [a, b] = d.train.class_counts();
    let [c, e] = d.test.class_counts();
    println!("train: {} images ({a} class 0, {b} class 1)", d.train.len());
    println!("test: {} images ({c} class 0, {e} class 1)", d.test.len());
    println!("atlas: {} ROIs", d.atlas.rois().len());
    Ok(())
}

fn cmd_preprocess(
    nifti: &Path,
    w: usize,
    stride: usize,
    target: Option<&[usize]>,
    label: u8,
    subject: &str,
    out: &Path,
) -> anyhow::Result<()> {
    if label > 1 {
        bail!("--label must be 0 or 1, got {label}");
    }
    let window = WindowConfig::new(w, stride)?;
    let mut series = load_nifti(nifti)?;
    if series.shape().len() != 4 {
        bail!("{} is a single volume; a 4D series is required", nifti.display());
    }
    if let Some(t) = target {
        let t: [usize; 3] = t
            .try_into()
            .map_err(|_| anyhow!("--target takes three extents X,Y,Z, got {t:?}"))?;
        series = downsample_series(&series, t)?;
    }
    let images = sliding_window_channels(&series, window)?;
    let spatial = series.shape()[..3].to_vec();
    let manifest = out.join("manifest.json");
    let mut dataset = if manifest.exists() {
        load_dataset(&manifest)?
    } else {
        Dataset::new(2, &spatial, Vec::new())?
    };
    let added = images.len();
    for image in images {
        dataset.push(Sample {
            subject_id: subject.to_string(),
            label,
            image,
        })?;
    }
    save_dataset(&dataset, out)?;
    println!("{added} window images of {spatial:?} added; dataset now holds {}", dataset.len());
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    epochs: usize,
    best_epoch: usize,
    stopped_early: bool,
    train_loss: f64,
    train_accuracy: f64,
    test_loss: Option<f64>,
    test_accuracy: Option<f64>,
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    val: Option<&Path>,
    test: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let train_set = load_dataset(data)?;
    let val = val.map(load_dataset).transpose()?;
    let test = test.map(load_dataset).transpose()?;
    let mut input = vec![train_set.channels()];
    input.extend_from_slice(train_set.spatial_shape());
    let net = match resume {
        Some(p) => load_model(p)?,
        None => {
            let seed = derive_seed(&[cfg.seed, 0x6e6574]);
            match &cfg.model {
                ModelConfig::Synth => build_synth_cnn(&input, seed)?,
                ModelConfig::Cc3d(preset) => build_2cc3d(&input, preset, seed)?,
            }
        }
    };
    if net.input_shape() != input.as_slice() {
        bail!("model expects input {:?}, dataset images are {input:?}", net.input_shape());
    }
    let (net, history) = train(&net, &train_set, val.as_ref(), &cfg.train)?;
    let (train_loss, train_accuracy) = evaluate(&net, &train_set)?;
    let scored = test.as_ref().map(|t| evaluate(&net, t)).transpose()?;
    save_model(&net, &out.join("model.json"))?;
    write_json(&out.join("history.json"), &history)?;
    let metrics = Metrics {
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
        stopped_early: history.stopped_early,
        train_loss,
        train_accuracy,
        test_loss: scored.map(|s| s.0),
        test_accuracy: scored.map(|s| s.1),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    print!("{} epochs; train accuracy {:.2}%", metrics.epochs, 100.0 * train_accuracy);
    match metrics.test_accuracy {
        Some(a) => println!("; test accuracy {:.2}%", 100.0 * a),
        None => println!(),
    }
    Ok(())
}

fn check_grid(atlas: &Atlas, data: &Dataset) -> anyhow::Result<()> {
    if atlas.spatial_shape() != data.spatial_shape() {
        bail!(
            "atlas grid {:?} does not match image grid {:?}",
            atlas.spatial_shape(),
            data.spatial_shape()
        );
    }
    Ok(())
}

fn interpret_and_write(
    cfg: &RunConfig,
    net: &Network,
    data: &Dataset,
    atlas: &Atlas,
    with_sweep: bool,
    out: &Path,
) -> anyhow::Result<()> {
    check_grid(atlas, data)?;
    let (c0, c1) = (data.class(0), data.class(1));
    let evidence = gather_evidence(net, &c0, &c1, atlas, &cfg.interpret)?;
    let reports = assess(&evidence, cfg.interpret.alpha_jsd, cfg.interpret.alpha_w)?;
    write_reports_json(&out.join("roi_report.json"), &reports)?;
    write_reports_csv(&out.join("roi_report.csv"), &reports)?;
    for r in &reports {
        println!("ROI {:>4}  {}", r.roi_id, r.category.as_str());
    }
    if with_sweep {
        let points = sweep(&evidence, &cfg.sweep.alpha_jsd, &cfg.sweep.alpha_w)?;
        write_sweep_csv(&out.join("sweep.csv"), &points)?;
    }
    Ok(())
}

fn cmd_interpret(
    cfg: &RunConfig,
    model: &Path,
    data: &Path,
    atlas: &Path,
    with_sweep: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let net = load_model(model)?;
    let data = load_dataset(data)?;
    let atlas = Atlas::load(atlas)?;
    interpret_and_write(cfg, &net, &data, &atlas, with_sweep, out)
}

fn cmd_table1(cfg: &RunConfig, with_sweep: bool, out: &Path) -> anyhow::Result<()> {
    let table = run_table1(&cfg.synth, &cfg.interpret.sampling, &cfg.train, cfg.table1.repeats)?;
    atomic_write(&out.join("table1.csv"), &table.to_csv()?)?;
    write_json(&out.join("table1_seeds.json"), &table.seeds)?;
    for s in table.seeds.iter().filter(|s| s.diagnostic.is_some()) {
        eprintln!("repeat {} excluded: {}", s.repeat, s.diagnostic.as_deref().unwrap_or(""));
    }
    print!("{}", table.to_text());
    if with_sweep {
        let t = train_repeat(&cfg.synth, &cfg.train, 0)?;
        interpret_and_write(cfg, &t.network, &t.data.test, &t.data.atlas, true, out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MapIndex {
    layer: usize,
    group: String,
    images: usize,
    filters: usize,
    shape: Vec<usize>,
}

fn cmd_activations(model: &Path, data: &Path, layer: usize, by_label: bool, out: &Path) -> anyhow::Result<()> {
    let net = load_model(model)?;
    let data = load_dataset(data)?;
    let groups: Vec<(String, Vec<Sample>)> = if by_label {
        vec![("class0".into(), data.class(0)), ("class1".into(), data.class(1))]
    } else {
        vec![("all".into(), data.samples().to_vec())]
    };
    for (group, samples) in groups {
        if samples.is_empty() {
            bail!("group {group} has no images");
        }
        let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
        let maps = net.activation_maps(&images, layer)?;
        let dir = out.join("activations").join(&group);
        for (k, m) in maps.iter().enumerate() {
            maps::write_map(&dir, &format!("filter_{k:03}"), m)?;
        }
        write_json(
            &dir.join("maps.json"),
            &MapIndex {
                layer,
                group: group.clone(),
                images: images.len(),
                filters: maps.len(),
                shape: maps[0].shape().to_vec(),
            },
        )?;
        println!("{group}: {} maps of {:?} from {} images", maps.len(), maps[0].shape(), images.len());
    }
    Ok(())
}
