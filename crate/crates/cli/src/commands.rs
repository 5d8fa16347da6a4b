use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use scmt_core::ada::train_stage2;
use scmt_core::data::FeatureSet;
use scmt_core::datagen::{self, Dataset, DatasetConfig};
use scmt_core::eval::{self, DecodeConfig, F1Report, GapReport, TsneConfig};
use scmt_core::nn::{Checkpoint, ModelConfig};
use scmt_core::train::{self, ModelTagger, RunOutput, TrainData, TrainingConfig};

use crate::options::*;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset(a) => make_dataset(a),
        Command::ExtractFeatures(a) => extract_features(a),
        Command::TrainTagger(a) => train_tagger(a),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).context("serialising config")
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- dataset

#[derive(Serialize)]
struct FrozenDataset<'a> {
    command: &'static str,
    #[serde(flatten)]
    dataset: &'a DatasetConfig,
}

fn make_dataset(a: MakeDataset) -> Result<()> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DatasetConfig::default(),
    };
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.n_strong, a.n_strong);
    set(&mut cfg.n_weak, a.n_weak);
    set(&mut cfg.n_unlabeled, a.n_unlabeled);
    set(&mut cfg.n_validation, a.n_validation);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = datagen::build_dataset(&cfg, &a.out)?;
    write(
        &a.out.join("make-dataset.toml"),
        &to_toml(&FrozenDataset {
            command: "make-dataset",
            dataset: &cfg,
        })?,
    )?;
    for e in &ds.splits {
        info!("{}: {} clips ({})", e.name, ds.manifest(&e.name)?.len(), e.domain);
    }
    Ok(())
}

fn cache_dir(d: &DataArgs) -> PathBuf {
    d.features.clone().unwrap_or_else(|| d.data.join("features"))
}

fn open_dataset(d: &DataArgs) -> Result<Dataset> {
    require_dir(&d.data, "dataset directory")?;
    Ok(Dataset::open(&d.data)?)
}

/// Features of a split from the cache, or extracted on the spot.
fn load_split(ds: &Dataset, cache: &Path, name: &str) -> Result<FeatureSet> {
    let m = ds.manifest(name)?;
    let p = cache.join(format!("{name}.features"));
    if p.is_file() {
        return Ok(datagen::load_features(&p, &m)?);
    }
    info!("no cached features for {name}; extracting");
    m.verify_files()?;
    Ok(datagen::extract_features(&m)?)
}

fn extract_features(a: ExtractFeatures) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let cache = cache_dir(&a.data);
    let names: Vec<String> = if a.splits.is_empty() {
        ds.splits.iter().map(|s| s.name.clone()).collect()
    } else {
        a.splits.clone()
    };
    for name in &names {
        let m = ds.manifest(name)?;
        m.verify_files()?;
        let set = datagen::extract_features(&m)?;
        fs::create_dir_all(&cache)?;
        datagen::save_features(&cache.join(format!("{name}.features")), &set)?;
        info!("{name}: {} clips", set.len());
    }
    #[derive(Serialize)]
    struct Frozen<'a> {
        command: &'static str,
        data: &'a Path,
        splits: &'a [String],
    }
    write(
        &cache.join("extract-features.toml"),
        &to_toml(&Frozen {
            command: "extract-features",
            data: &a.data.data,
            splits: &names,
        })?,
    )
}

// ---------------------------------------------------------------- training

fn resolve_training(o: &TrainOverrides, strategy: Option<StrategyArg>) -> Result<TrainingConfig> {
    let mut cfg = match &o.config {
        Some(p) => {
            require_file(p, "config")?;
            TrainingConfig::load(p)?
        }
        None => match o.preset.as_deref() {
            Some("tiny") => TrainingConfig::tiny(),
            _ => TrainingConfig::default(),
        },
    };
    if let Some(p) = &o.preset {
        cfg.preset = p.clone();
    }
    if let Some(s) = strategy {
        cfg.strategy = s.into();
    }
    macro_rules! over {
        ($($f:ident => $g:ident),*) => { $( if let Some(v) = o.$f { cfg.$g = v; } )* };
    }
    over!(seed => seed, steps => steps, stage2_steps => stage2_steps, ramp_steps => ramp_steps,
          lambda_d => lambda_d, lr => lr, eval_every => eval_every, checkpoint_every => checkpoint_every);
    if let Some(b) = &o.batch {
        let [s, w, u] = b[..] else {
            bail!("--batch takes three counts (strong,weak,unlabeled), got {}", b.len());
        };
        cfg.batch_composition = [s, w, u];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolved settings of a training run, written next to its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub stage: u8,
    pub ada: bool,
    pub data: PathBuf,
    pub features: PathBuf,
    pub unlabeled: String,
    pub from: Option<PathBuf>,
    pub training: TrainingConfig,
}

fn train_data(ds: &Dataset, cache: &Path, unlabeled: &str) -> Result<TrainData> {
    let validation = match ds.entry("validation") {
        Ok(_) => Some(load_split(ds, cache, "validation")?),
        Err(_) => None,
    };
    Ok(TrainData {
        strong: load_split(ds, cache, "synthetic_strong")?,
        weak: load_split(ds, cache, "weak")?,
        unlabeled: load_split(ds, cache, unlabeled)?,
        validation,
    })
}

fn run_output(dir: &Path) -> RunOutput {
    RunOutput {
        log: Some(dir.join("metrics.jsonl")),
        checkpoint_dir: Some(dir.join("checkpoints")),
    }
}

fn preset_of(ckpt: &Checkpoint) -> Option<&'static str> {
    ["tiny", "default"]
        .into_iter()
        .find(|p| ModelConfig::preset(p).is_ok_and(|c| &c == ckpt.config()))
}

fn train_cmd(a: Train) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let cache = cache_dir(&a.data);
    let mut cfg = resolve_training(&a.train, a.strategy)?;
    let from = match (a.stage, &a.from) {
        (1, Some(_)) => bail!("--from is only used with --stage 2"),
        (1, None) => None,
        (2, None) => bail!("--stage 2 needs --from <stage-1 checkpoint>"),
        (2, Some(p)) => {
            require_file(p, "checkpoint")?;
            let ck = if a.train.preset.is_some() || a.train.config.is_some() {
                Checkpoint::load_with(p, &ModelConfig::preset(&cfg.preset)?)?
            } else {
                let ck = Checkpoint::load(p)?;
                cfg.preset = preset_of(&ck)
                    .context("checkpoint matches no preset; pass --preset or --config")?
                    .to_string();
                ck
            };
            if a.strategy.is_none() && a.train.config.is_none() {
                if let Some(s) = ck.info.get("strategy") {
                    cfg.strategy = s.parse()?;
                }
            }
            Some(ck)
        }
        _ => unreachable!("stage is 1 or 2"),
    };
    let ada = match (a.stage, a.ada) {
        (1, Some(Switch::On)) => true,
        (1, _) => false,
        (_, Some(Switch::Off)) => false,
        _ => true,
    };
    if a.stage == 2 && !ada {
        cfg.lambda_d = 0.0;
    }
    let run = RunConfig {
        command: "train".into(),
        stage: a.stage,
        ada,
        data: a.data.data.clone(),
        features: cache.clone(),
        unlabeled: a.unlabeled.clone(),
        from: a.from.clone(),
        training: cfg.clone(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("config.toml"), &to_toml(&run)?)?;
    let data = train_data(&ds, &cache, &a.unlabeled)?;
    let report = |name: &str, o: &train::TrainOutcome| {
        let f1 = o.final_val_f1().map_or("n/a".into(), |v| format!("{v:.4}"));
        info!("{name}: {} steps, validation F1 {f1}", o.records.len());
    };
    match from {
        None => {
            let s1 = train::train_stage1(&cfg, &data, &run_output(&a.out))?;
            report("stage 1", &s1);
            if ada {
                let dir = a.out.join("stage2");
                fs::create_dir_all(&dir)?;
                let s2 = train_stage2(&s1.checkpoint, &cfg, &data, &run_output(&dir))?;
                report("stage 2", &s2);
            }
        }
        Some(ck) => {
            let s2 = train_stage2(&ck, &cfg, &data, &run_output(&a.out))?;
            report("stage 2", &s2);
        }
    }
    Ok(())
}

fn train_tagger(a: TrainTagger) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let cache = cache_dir(&a.data);
    let cfg = resolve_training(&a.train, None)?;
    fs::create_dir_all(&a.out)?;
    #[derive(Serialize)]
    struct Frozen<'a> {
        command: &'static str,
        data: &'a Path,
        training: &'a TrainingConfig,
    }
    write(
        &a.out.join("config.toml"),
        &to_toml(&Frozen {
            command: "train-tagger",
            data: &a.data.data,
            training: &cfg,
        })?,
    )?;
    let strong = load_split(&ds, &cache, "synthetic_strong")?;
    let weak = load_split(&ds, &cache, "weak")?;
    let norm = scmt_core::dsp::NormStats::compute(strong.features.iter().chain(&weak.features))?;
    let t = train::train_tagger(&cfg, &strong, &weak, &norm)?;
    let mut ck = Checkpoint::new(t.model.clone(), t.model, t.norm, cfg.steps);
    ck.info.insert("role".into(), "tagger".into());
    ck.info.insert("seed".into(), cfg.seed.to_string());
    ck.save(&a.out.join("tagger.safetensors"))?;
    info!("tagger saved to {}", a.out.join("tagger.safetensors").display());
    Ok(())
}

fn pseudo_label(a: PseudoLabel) -> Result<()> {
    let mut ds = open_dataset(&a.data)?;
    let cache = cache_dir(&a.data);
    require_file(&a.tagger, "tagger checkpoint")?;
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("threshold {} outside [0, 1]", a.threshold);
    }
    let ck = Checkpoint::load(&a.tagger)?;
    let tagger = ModelTagger {
        model: ck.student,
        norm: ck.norm,
    };
    let source = ds.manifest(&a.split)?;
    let set = load_split(&ds, &cache, &a.split)?;
    let labelled = train::pseudo_label(&tagger, &set, a.threshold)?;
    let n = labelled.clips.iter().filter(|c| c.pseudo).count();
    let m = datagen::DatasetManifest {
        split: a.name.clone(),
        domain: source.domain,
        kind: datagen::LabelKind::Weak,
        audio_dir: source.audio_dir.clone(),
        clips: labelled.clips.clone(),
    };
    ds.add_split(&m, true)?;
    if cache.is_dir() {
        datagen::save_features(&cache.join(format!("{}.features", a.name)), &labelled)?;
    }
    info!("{}: {n} of {} clips received labels", a.name, labelled.len());
    Ok(())
}

// ---------------------------------------------------------------- analysis

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    require_file(p, "checkpoint")?;
    Ok(Checkpoint::load(p)?)
}

fn evaluate(a: Evaluate) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = open_dataset(&a.data)?;
    let set = load_split(&ds, &cache_dir(&a.data), &a.split)?;
    let dc = DecodeConfig {
        threshold: a.threshold,
        median_window: a.median_window,
        ..DecodeConfig::default()
    };
    let r = eval::evaluate_f1(&ck.student, &ck.norm, &set, &dc)?;
    let out = EvalFile {
        checkpoint: a.ckpt.clone(),
        split: a.split.clone(),
        info: ck.info.clone().into_iter().collect(),
        decode: dc,
        report: r,
    };
    let json = serde_json::to_string_pretty(&out)?;
    match &a.out {
        Some(dir) => {
            write(&dir.join("eval.json"), &json)?;
            #[derive(Serialize)]
            struct Frozen<'a> {
                command: &'static str,
                ckpt: &'a Path,
                data: &'a Path,
                split: &'a str,
                decode: DecodeConfig,
            }
            write(
                &dir.join("evaluate.toml"),
                &to_toml(&Frozen {
                    command: "evaluate",
                    ckpt: &a.ckpt,
                    data: &a.data.data,
                    split: &a.split,
                    decode: dc,
                })?,
            )?;
        }
        None => println!("{json}"),
    }
    println!("macro F1 {:.4}  micro F1 {:.4}", out.report.macro_f1, out.report.micro.f1);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalFile {
    checkpoint: PathBuf,
    split: String,
    info: Vec<(String, String)>,
    decode: DecodeConfig,
    report: F1Report,
}

#[derive(Debug, Serialize, Deserialize)]
struct GapFile {
    checkpoint: PathBuf,
    splits: Vec<String>,
    info: Vec<(String, String)>,
    silhouette_projection: f64,
    silhouette_raw: f64,
    perplexity: f64,
    n_points: usize,
}

fn analyze(a: Analyze) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = open_dataset(&a.data)?;
    let cache = cache_dir(&a.data);
    let mut parts = Vec::new();
    for s in &a.splits {
        let set = load_split(&ds, &cache, s)?;
        let idx: Vec<usize> = (0..set.len().min(a.max_per_split)).collect();
        parts.push(set.subset(&idx));
    }
    let set = FeatureSet::concat(&parts);
    let tc = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let r: GapReport = eval::domain_gap_report(&ck.student, &ck.norm, &set, &tc)?;
    write(&a.out.join("coordinates.tsv"), &r.coordinates_tsv())?;
    let out = GapFile {
        checkpoint: a.ckpt.clone(),
        splits: a.splits.clone(),
        info: ck.info.clone().into_iter().collect(),
        silhouette_projection: r.silhouette_projection,
        silhouette_raw: r.silhouette_raw,
        perplexity: r.perplexity,
        n_points: r.n_points,
    };
    write(&a.out.join("gap.json"), &serde_json::to_string_pretty(&out)?)?;
    #[derive(Serialize)]
    struct Frozen<'a> {
        command: &'static str,
        ckpt: &'a Path,
        data: &'a Path,
        splits: &'a [String],
        max_per_split: usize,
        tsne: TsneConfig,
    }
    write(
        &a.out.join("analyze.toml"),
        &to_toml(&Frozen {
            command: "analyze",
            ckpt: &a.ckpt,
            data: &a.data.data,
            splits: &a.splits,
            max_per_split: a.max_per_split,
            tsne: tc,
        })?,
    )?;
    println!(
        "silhouette (projection) {:.4}  silhouette (raw) {:.4}  over {} clips",
        r.silhouette_projection, r.silhouette_raw, r.n_points
    );
    Ok(())
}

fn info_get<'a>(info: &'a [(String, String)], k: &str) -> Option<&'a str> {
    info.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str())
}

fn compare(a: Compare) -> Result<()> {
    let mut table = String::from("run\tstrategy\tstage\tmacro_f1\tsilhouette_projection\tsilhouette_raw\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for dir in &a.runs {
        require_dir(dir, "run directory")?;
        let read = |name: &str| -> Result<Option<String>> {
            let p = dir.join(name);
            if p.is_file() {
                Ok(Some(fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?))
            } else {
                Ok(None)
            }
        };
        let ev: Option<EvalFile> = read("eval.json")?
            .map(|t| serde_json::from_str(&t).with_context(|| format!("parsing {}/eval.json", dir.display())))
            .transpose()?;
        let gap: Option<GapFile> = read("gap.json")?
            .map(|t| serde_json::from_str(&t).with_context(|| format!("parsing {}/gap.json", dir.display())))
            .transpose()?;
        if ev.is_none() && gap.is_none() {
            bail!("{} holds neither eval.json nor gap.json", dir.display());
        }
        let info = ev
            .as_ref()
            .map(|e| e.info.clone())
            .or_else(|| gap.as_ref().map(|g| g.info.clone()))
            .unwrap_or_default();
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}",
            dir.display(),
            info_get(&info, "strategy").unwrap_or("-"),
            info_get(&info, "stage").unwrap_or("-"),
            fmt(ev.as_ref().map(|e| e.report.macro_f1)),
            fmt(gap.as_ref().map(|g| g.silhouette_projection)),
            fmt(gap.as_ref().map(|g| g.silhouette_raw)),
        );
    }
    print!("{table}");
    if let Some(p) = &a.out {
        write(p, &table)?;
    }
    Ok(())
}
