//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use evgaze::adsn::{Adsn, AdsnConfig};
use evgaze::dataset::{
    is_sequence_dir, list_sequences, load_frames, read_labels, sequence_params, Dataset, SequenceMeta, Split,
    META_FILE,
};
use evgaze::eval::evaluate_protocol;
use evgaze::events::{write_stream, EventStream, StreamFormat};
use evgaze::rng::derive_seed;
use evgaze::synth::synth_dataset;
use evgaze::training::Trainer;
use evgaze::v2e::{convert_video, Polarity, V2eParams};
use evgaze::verify::gradient_suite;

use crate::config::{RunConfig, RESOLVED_FILE};
use crate::{CliError, ConfigArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";

type CliResult<T = ()> = Result<T, CliError>;

fn resolve(args: &ConfigArgs, apply_seed: impl FnOnce(&mut RunConfig, u64)) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        apply_seed(&mut cfg, seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn out(key: &str, value: impl std::fmt::Display) {
    println!("#out {key}={value}");
}

struct ConvertJob {
    name: String,
    dir: PathBuf,
    params: V2eParams,
    target: PathBuf,
}

fn convert_one(job: &ConvertJob, format: StreamFormat) -> CliResult<EventStream> {
    let meta_path = job.dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| CliError::io(&meta_path, e))?;
    let meta = SequenceMeta::parse(&text)?;
    let frames = load_frames(&job.dir, meta.fps)?;
    let stream = convert_video(&frames, &job.params)?;
    write_stream(&job.target, &stream, format)?;
    Ok(stream)
}

pub fn convert(input: &Path, output: &Path, csv: bool, args: &ConfigArgs) -> CliResult {
    let cfg = resolve(args, |c, s| c.v2e.seed = s)?;
    let (format, ext) = if csv {
        (StreamFormat::Csv, "csv")
    } else {
        (StreamFormat::Evt1, "evt1")
    };
    let mut jobs = Vec::new();
    let resolved_path = if is_sequence_dir(input) {
        let name = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        jobs.push(ConvertJob {
            name,
            dir: input.to_path_buf(),
            params: cfg.v2e.clone(),
            target: output.to_path_buf(),
        });
        PathBuf::from(format!("{}.cfg", output.display()))
    } else {
        read_labels(input)?;
        for split in [Split::Train, Split::Test] {
            if !input.join(split.name()).is_dir() {
                continue;
            }
            let dir = output.join(split.name());
            create_dir(&dir)?;
            for (id, seq_dir) in list_sequences(input, split)? {
                jobs.push(ConvertJob {
                    name: format!("{split}/{id}"),
                    params: sequence_params(&cfg.v2e, split, &id),
                    target: dir.join(format!("{id}.{ext}")),
                    dir: seq_dir,
                });
            }
        }
        if jobs.is_empty() {
            return Err(evgaze::Error::Dataset(format!("{} holds no sequences", input.display())).into());
        }
        output.join(RESOLVED_FILE)
    };
    let streams = jobs
        .par_iter()
        .map(|j| convert_one(j, format))
        .collect::<CliResult<Vec<_>>>()?;
    write_file(&resolved_path, &cfg.render())?;

    let (mut total_on, mut total_off) = (0, 0);
    for (job, s) in jobs.iter().zip(&streams) {
        let on = s.count(Polarity::On);
        let off = s.count(Polarity::Off);
        total_on += on;
        total_off += off;
        println!("{}: {} events ({on} on, {off} off)", job.name, s.len());
        out(&format!("events.{}", job.name), s.len());
    }
    println!("{} sequences, {} events ({total_on} on, {total_off} off)", jobs.len(), total_on + total_off);
    out("sequences", jobs.len());
    out("total_events", total_on + total_off);
    out("total_on", total_on);
    out("total_off", total_off);
    Ok(())
}

pub fn synth(output: &Path, args: &ConfigArgs) -> CliResult {
    let cfg = resolve(args, |c, s| c.synth.seed = s)?;
    let n = synth_dataset(output, &cfg.synth)?;
    write_file(&output.join(RESOLVED_FILE), &cfg.render())?;
    println!(
        "wrote {n} sequences of {} frames ({}x{}) in {} classes to {}",
        cfg.synth.length_frames,
        cfg.synth.width,
        cfg.synth.height,
        cfg.synth.classes,
        output.display()
    );
    out("sequences", n);
    out("classes", cfg.synth.classes);
    Ok(())
}

pub fn train(data: &Path, output: &Path, args: &ConfigArgs) -> CliResult {
    let mut cfg = resolve(args, |c, s| c.train.seed = s)?;
    let started = Instant::now();
    let dataset = Dataset::load(data, Split::Train, &cfg.v2e)?;
    if dataset.num_classes() != cfg.model.num_classes {
        eprintln!(
            "note: dataset has {} classes, setting model.num_classes accordingly",
            dataset.num_classes()
        );
        cfg.model.num_classes = dataset.num_classes();
    }
    if cfg.model.n_steps != cfg.train.clip_spec.x {
        return Err(CliError::Usage(format!(
            "model.n_steps={} but train.protocol={} uses {} event frames",
            cfg.model.n_steps, cfg.train.clip_spec, cfg.train.clip_spec.x
        )));
    }
    create_dir(output)?;
    write_file(&output.join(RESOLVED_FILE), &cfg.render())?;

    let model = Adsn::new(cfg.model.clone(), derive_seed(cfg.train.seed, "init"))?;
    println!(
        "training on {} sequences for {} epochs ({} parameters)",
        dataset.len(),
        cfg.train.epochs,
        model.params.num_trainable()
    );
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let stats = trainer.fit(&dataset, |s| {
        println!(
            "#out epoch={} loss={:.6} train_war={:.6}",
            s.epoch, s.mean_loss, s.train_war
        );
    })?;
    let model = trainer.into_model();
    model.save(&output.join(CHECKPOINT_FILE))?;
    write_file(&output.join(MODEL_CONFIG_FILE), &model.config.to_kv())?;
    let last = stats.last().expect("at least one epoch");
    out("final_loss", format!("{:.6}", last.mean_loss));
    out("final_train_war", format!("{:.6}", last.train_war));
    eprintln!("trained in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub model: PathBuf,
    pub protocol: Option<String>,
    pub reps: Option<usize>,
    pub split: String,
    pub report: Option<PathBuf>,
    pub cfg: ConfigArgs,
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let mut cfg = resolve(&args.cfg, |c, s| c.eval.seed = s)?;
    if let Some(p) = &args.protocol {
        cfg.eval.protocol = p.parse()?;
    }
    if let Some(r) = args.reps {
        if r == 0 {
            return Err(CliError::Usage("--reps must be at least 1".into()));
        }
        cfg.eval.reps = r;
    }
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(CliError::Usage(format!("--split must be train or test, got {other:?}"))),
    };
    let cfg_path = args.model.join(MODEL_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
    let model_cfg = AdsnConfig::from_kv(&text)?;
    if model_cfg.n_steps != cfg.eval.protocol.x {
        return Err(CliError::Usage(format!(
            "model uses {} event frames but protocol {} has {}",
            model_cfg.n_steps, cfg.eval.protocol, cfg.eval.protocol.x
        )));
    }
    cfg.model = model_cfg.clone();
    let model = Adsn::load(model_cfg, &args.model.join(CHECKPOINT_FILE))?;
    let dataset = Dataset::load(&args.data, split, &cfg.v2e)?;
    let report = evaluate_protocol(&model, &dataset, &cfg.eval.protocol, cfg.eval.reps, cfg.eval.seed)?;
    let table = report.table();
    print!("{table}");
    let lines: Vec<String> = report.machine_lines();
    for l in &lines {
        println!("#out {l}");
    }
    if let Some(path) = &args.report {
        let mut text = table;
        for l in &lines {
            text.push_str(l);
            text.push('\n');
        }
        write_file(path, &text)?;
        write_file(&PathBuf::from(format!("{}.cfg", path.display())), &cfg.render())?;
    }
    Ok(())
}

pub fn gradcheck() -> CliResult {
    let results = gradient_suite()?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<width$}  max rel error {:.3e}  (threshold {:.0e})  {status}",
            r.name, r.max_rel_error, r.threshold
        );
        out(&format!("gradcheck.{}", r.name), format!("{:e}", r.max_rel_error));
        if !r.passed() {
            failed.push(r.name);
        }
    }
    out("gradcheck.passed", failed.is_empty());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradientCheck(failed.join(", ")))
    }
}
