//! The four dataset splits on disk: 16-bit WAV files, DESED-style TSV
//! manifests and a `dataset.toml` index tying them together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{domainify, render_soundscape, templates, DomainShift};
use crate::data::{class_index, ClipAnnotation, ClipLabels, Domain, EventLabel, FeatureSet, CLASS_NAMES};
use crate::dsp::{self, read_wav, write_wav, AudioClip, LogMelExtractor, CLIP_SAMPLES, CLIP_SECONDS, N_FRAMES, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic, Archive};
use crate::train::derive_seed;
use crate::N_CLASSES;

/// Annotation granularity of a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Strong,
    Weak,
    Unlabeled,
}

impl LabelKind {
    fn header(self) -> &'static str {
        match self {
            LabelKind::Strong => "filename\tonset\toffset\tevent_label",
            LabelKind::Weak => "filename\tevent_labels",
            LabelKind::Unlabeled => "filename",
        }
    }
}

/// One split: where its audio lives and how each clip is labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub domain: Domain,
    pub kind: LabelKind,
    pub audio_dir: PathBuf,
    /// `clip_id` is the audio file name inside `audio_dir`.
    pub clips: Vec<ClipAnnotation>,
}

fn fmt_time(t: f64) -> String {
    // shortest round-trip form keeps sample-aligned times exact
    format!("{t}")
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// The manifest as TSV text with a header row.
    pub fn to_tsv(&self) -> Result<String> {
        let mut s = String::new();
        s.push_str(self.kind.header());
        s.push('\n');
        for c in &self.clips {
            match (self.kind, &c.labels) {
                (LabelKind::Strong, ClipLabels::Strong(ev)) => {
                    for e in ev {
                        let _ = writeln!(
                            s,
                            "{}\t{}\t{}\t{}",
                            c.clip_id,
                            fmt_time(e.onset),
                            fmt_time(e.offset),
                            CLASS_NAMES[e.class_id]
                        );
                    }
                }
                (LabelKind::Weak, labels) => {
                    let names: Vec<&str> = labels
                        .classes()
                        .unwrap_or_default()
                        .into_iter()
                        .map(|k| CLASS_NAMES[k])
                        .collect();
                    let _ = writeln!(s, "{}\t{}", c.clip_id, names.join(","));
                }
                (LabelKind::Unlabeled, _) => {
                    let _ = writeln!(s, "{}", c.clip_id);
                }
                (LabelKind::Strong, _) => {
                    return Err(Error::invalid(format!(
                        "clip {} in strong split {} has no strong labels",
                        c.clip_id, self.split
                    )))
                }
            }
        }
        Ok(s)
    }

    /// Parses a TSV manifest. Weak rows with an empty label column and
    /// strong rows without times become unlabeled clips.
    pub fn parse(
        text: &str,
        path: &Path,
        split: &str,
        domain: Domain,
        kind: LabelKind,
        audio_dir: PathBuf,
        pseudo: bool,
    ) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            what: "manifest",
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == kind.header() => {}
            Some((_, h)) => return Err(err(1, format!("expected header {:?}, found {h:?}", kind.header()))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut order: Vec<String> = Vec::new();
        let mut labels: BTreeMap<String, ClipLabels> = BTreeMap::new();
        for (i, line) in lines {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            let name = cols[0].to_string();
            if name.is_empty() {
                return Err(err(ln, "empty filename".into()));
            }
            let class = |s: &str| class_index(s.trim()).ok_or_else(|| err(ln, format!("unknown class {s:?}")));
            let new = match kind {
                LabelKind::Strong => {
                    if cols.len() != 4 {
                        return Err(err(ln, format!("expected 4 columns, found {}", cols.len())));
                    }
                    if cols[1].is_empty() && cols[2].is_empty() && cols[3].is_empty() {
                        None
                    } else {
                        let num = |s: &str| s.parse::<f64>().map_err(|e| err(ln, format!("{s:?}: {e}")));
                        let e = EventLabel::new(class(cols[3])?, num(cols[1])?, num(cols[2])?)
                            .map_err(|e| err(ln, e.to_string()))?;
                        Some(e)
                    }
                }
                LabelKind::Weak => {
                    if cols.len() != 2 {
                        return Err(err(ln, format!("expected 2 columns, found {}", cols.len())));
                    }
                    let mut set = Vec::new();
                    for c in cols[1].split(',').filter(|s| !s.trim().is_empty()) {
                        set.push(class(c)?);
                    }
                    set.sort_unstable();
                    set.dedup();
                    let l = if set.is_empty() {
                        ClipLabels::Unlabeled
                    } else {
                        ClipLabels::Weak(set)
                    };
                    if labels.insert(name.clone(), l).is_some() {
                        return Err(err(ln, format!("duplicate file {name}")));
                    }
                    order.push(name);
                    continue;
                }
                LabelKind::Unlabeled => {
                    if labels.insert(name.clone(), ClipLabels::Unlabeled).is_some() {
                        return Err(err(ln, format!("duplicate file {name}")));
                    }
                    order.push(name);
                    continue;
                }
            };
            let entry = labels.entry(name.clone()).or_insert_with(|| {
                order.push(name.clone());
                ClipLabels::Unlabeled
            });
            if let Some(e) = new {
                match entry {
                    ClipLabels::Strong(v) => v.push(e),
                    other => *other = ClipLabels::Strong(vec![e]),
                }
            }
        }
        let clips = order
            .into_iter()
            .map(|id| {
                let l = labels.remove(&id).unwrap();
                let pseudo = pseudo && matches!(l, ClipLabels::Weak(_));
                ClipAnnotation {
                    clip_id: id,
                    domain,
                    labels: l,
                    pseudo,
                }
            })
            .collect();
        Ok(Self {
            split: split.to_string(),
            domain,
            kind,
            audio_dir,
            clips,
        })
    }

    pub fn audio_path(&self, clip: &ClipAnnotation) -> PathBuf {
        self.audio_dir.join(&clip.clip_id)
    }

    /// Fails on the first referenced audio file that does not exist.
    pub fn verify_files(&self) -> Result<()> {
        for c in &self.clips {
            let p = self.audio_path(c);
            if !p.is_file() {
                return Err(Error::invalid(format!("manifest {} references missing file {}", self.split, p.display())));
            }
        }
        Ok(())
    }
}

/// Index entry of one split. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub domain: Domain,
    pub kind: LabelKind,
    pub manifest: PathBuf,
    pub audio_dir: PathBuf,
    /// Weak labels come from a tagger.
    #[serde(default)]
    pub pseudo: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    #[serde(rename = "split")]
    splits: Vec<SplitEntry>,
}

/// A dataset root with its split index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub splits: Vec<SplitEntry>,
}

pub const INDEX_FILE: &str = "dataset.toml";

impl Dataset {
    /// Reads `dataset.toml` under `root`. Hand-written indexes can point at
    /// DESED-format manifests and audio anywhere relative to the root.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let idx: Index = toml::from_str(&read_to_string(&path)?)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(Self {
            root: root.to_path_buf(),
            splits: idx.splits,
        })
    }

    pub fn save_index(&self) -> Result<()> {
        let idx = Index {
            splits: self.splits.clone(),
        };
        let text = toml::to_string(&idx).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&self.root.join(INDEX_FILE), text.as_bytes())
    }

    pub fn entry(&self, name: &str) -> Result<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.splits.iter().map(|s| s.name.as_str()).collect();
            Error::invalid(format!("no split {name:?} in {} (have {known:?})", self.root.display()))
        })
    }

    pub fn manifest(&self, name: &str) -> Result<DatasetManifest> {
        let e = self.entry(name)?;
        let path = self.root.join(&e.manifest);
        DatasetManifest::parse(
            &read_to_string(&path)?,
            &path,
            &e.name,
            e.domain,
            e.kind,
            self.root.join(&e.audio_dir),
            e.pseudo,
        )
    }

    /// Writes `manifest` under `metadata/` and adds or replaces its entry.
    pub fn add_split(&mut self, manifest: &DatasetManifest, pseudo: bool) -> Result<()> {
        let rel = PathBuf::from("metadata").join(format!("{}.tsv", manifest.split));
        write_atomic(&self.root.join(&rel), manifest.to_tsv()?.as_bytes())?;
        let audio_dir = manifest
            .audio_dir
            .strip_prefix(&self.root)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| manifest.audio_dir.clone());
        let entry = SplitEntry {
            name: manifest.split.clone(),
            domain: manifest.domain,
            kind: manifest.kind,
            manifest: rel,
            audio_dir,
            pseudo,
        };
        match self.splits.iter_mut().find(|s| s.name == entry.name) {
            Some(s) => *s = entry,
            None => self.splits.push(entry),
        }
        self.save_index()
    }
}

/// Sizes and recipe of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_strong: usize,
    pub n_weak: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    /// Events per clip are drawn uniformly from 1 to this.
    pub max_events: usize,
    /// Range of the background noise RMS.
    pub background_level: (f64, f64),
    pub shift: DomainShift,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_strong: 200,
            n_weak: 200,
            n_unlabeled: 400,
            n_validation: 100,
            max_events: 3,
            background_level: (0.005, 0.02),
            shift: DomainShift::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_events == 0 {
            return Err(Error::Config("max_events must be at least 1".into()));
        }
        let (lo, hi) = self.background_level;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::Config(format!("background_level ({lo}, {hi}) is not a range")));
        }
        Ok(())
    }

    fn total(&self) -> usize {
        self.n_strong + self.n_weak + self.n_unlabeled + self.n_validation
    }
}

const WAV_HEADER: u64 = 44;

/// Fails when the file system holding `dir` has fewer than `needed` free bytes.
pub fn check_disk_space(dir: &Path, needed: u64) -> Result<()> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let c = CString::new(dir.as_os_str().as_bytes()).map_err(|_| Error::invalid("path contains a NUL byte"))?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` is a writable statvfs.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    if rc != 0 {
        return Err(Error::io(dir, std::io::Error::last_os_error()));
    }
    let available = st.f_bavail as u64 * st.f_frsize as u64;
    if available < needed {
        return Err(Error::DiskSpace {
            path: dir.to_path_buf(),
            needed,
            available,
        });
    }
    Ok(())
}

struct SplitPlan {
    name: &'static str,
    domain: Domain,
    kind: LabelKind,
    count: usize,
}

/// Class ids of every clip's events. All events of a split come from one
/// shuffled deck holding each class equally often, so class counts differ
/// by at most one.
fn plan_classes(cfg: &DatasetConfig, split: u64, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x100 + split));
    let ks: Vec<usize> = (0..count).map(|_| rng.random_range(1..=cfg.max_events)).collect();
    let total: usize = ks.iter().sum();
    let mut deck: Vec<usize> = (0..total).map(|j| j % N_CLASSES).collect();
    deck.shuffle(&mut rng);
    let mut out = Vec::with_capacity(count);
    let mut at = 0;
    for k in ks {
        out.push(deck[at..at + k].to_vec());
        at += k;
    }
    out
}

fn render_clip(cfg: &DatasetConfig, plan: &SplitPlan, split: u64, i: usize, classes: &[usize]) -> Result<(AudioClip, Vec<EventLabel>)> {
    // each clip has its own stream so clips can be rendered in any order
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, (split << 32) | i as u64));
    let tpl = templates();
    let events: Vec<_> = classes
        .iter()
        .map(|&c| {
            let t = tpl[c];
            let onset = rng.random_range(0.0..CLIP_SECONDS - t.duration.1);
            (t, onset)
        })
        .collect();
    let (lo, hi) = cfg.background_level;
    let level = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let id = format!("{}_{i:04}.wav", plan.name);
    let (clip, labels) = render_soundscape(&events, level, &mut rng, &id)?;
    let clip = match plan.domain {
        Domain::Real => domainify(&clip, &cfg.shift, &mut rng)?,
        Domain::Synthetic => clip,
    };
    Ok((clip, labels))
}

/// Renders the strong synthetic, weak real, unlabeled real and validation
/// splits under `out`. Free space is checked before anything is written,
/// and manifests are written only once every audio file exists.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let needed = cfg.total() as u64 * (WAV_HEADER + 2 * CLIP_SAMPLES as u64) + (1 << 20);
    check_disk_space(out, needed)?;
    let plans = [
        SplitPlan {
            name: "synthetic_strong",
            domain: Domain::Synthetic,
            kind: LabelKind::Strong,
            count: cfg.n_strong,
        },
        SplitPlan {
            name: "weak",
            domain: Domain::Real,
            kind: LabelKind::Weak,
            count: cfg.n_weak,
        },
        SplitPlan {
            name: "unlabeled",
            domain: Domain::Real,
            kind: LabelKind::Unlabeled,
            count: cfg.n_unlabeled,
        },
        SplitPlan {
            name: "validation",
            domain: Domain::Real,
            kind: LabelKind::Strong,
            count: cfg.n_validation,
        },
    ];
    let mut manifests = Vec::new();
    for (s, plan) in plans.iter().enumerate() {
        let audio_dir = out.join("audio").join(plan.name);
        fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        let mut clips = Vec::with_capacity(plan.count);
        for (i, classes) in plan_classes(cfg, s as u64, plan.count).iter().enumerate() {
            let (clip, events) = render_clip(cfg, plan, s as u64, i, classes)?;
            write_wav(&audio_dir.join(&clip.clip_id), &clip)?;
            let labels = match plan.kind {
                LabelKind::Strong => ClipLabels::Strong(events),
                LabelKind::Weak => ClipLabels::Weak(ClipLabels::Strong(events).classes().unwrap_or_default()),
                LabelKind::Unlabeled => ClipLabels::Unlabeled,
            };
            clips.push(ClipAnnotation {
                clip_id: clip.clip_id,
                domain: plan.domain,
                labels,
                pseudo: false,
            });
        }
        manifests.push(DatasetManifest {
            split: plan.name.to_string(),
            domain: plan.domain,
            kind: plan.kind,
            audio_dir,
            clips,
        });
    }
    let mut ds = Dataset {
        root: out.to_path_buf(),
        splits: Vec::new(),
    };
    for m in &manifests {
        ds.add_split(m, false)?;
    }
    Ok(ds)
}

/// Events per class for strong manifests, clips per class for weak ones.
pub fn class_counts(m: &DatasetManifest) -> [usize; N_CLASSES] {
    let mut n = [0; N_CLASSES];
    for c in &m.clips {
        match &c.labels {
            ClipLabels::Strong(ev) => ev.iter().for_each(|e| n[e.class_id] += 1),
            ClipLabels::Weak(set) => set.iter().for_each(|&k| n[k] += 1),
            ClipLabels::Unlabeled => {}
        }
    }
    n
}

/// Log-mel features of every clip in the manifest. Audio at other rates
/// is resampled to 16 kHz, and every clip is cut or padded to 10 s.
pub fn extract_features(m: &DatasetManifest) -> Result<FeatureSet> {
    let ex = LogMelExtractor::new();
    let mut set = FeatureSet::default();
    for c in &m.clips {
        let mut clip = read_wav(&m.audio_path(c))?;
        if clip.sample_rate != SAMPLE_RATE {
            clip = dsp::resample(&clip, SAMPLE_RATE)?;
        }
        let spec = ex.compute(&clip.fit_to_clip_length())?;
        set.push(c.clone(), spec.into_values());
    }
    Ok(set)
}

const CACHE_FORMAT: &str = "scmt-features";

/// Stores the features of a split together with its clip ids.
pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let mut a = Archive::new();
    let mut x = Array3::<f32>::zeros((set.len(), N_FRAMES, N_MELS));
    for (i, f) in set.features.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(f);
    }
    a.insert("features", x.into_dyn());
    a.meta("format", CACHE_FORMAT);
    let ids: Vec<&str> = set.clips.iter().map(|c| c.clip_id.as_str()).collect();
    a.meta("clip_ids", serde_json::to_string(&ids).expect("strings serialise"));
    a.save(path)
}

/// Loads cached features and attaches the annotations of `m`. The cache
/// must hold exactly the manifest's clips in the same order.
pub fn load_features(path: &Path, m: &DatasetManifest) -> Result<FeatureSet> {
    let a = Archive::load(path)?;
    if a.get_meta("format")? != CACHE_FORMAT {
        return Err(Error::invalid(format!("{} is not a feature cache", path.display())));
    }
    let ids: Vec<String> = serde_json::from_str(a.get_meta("clip_ids")?)
        .map_err(|e| Error::invalid(format!("{}: clip ids: {e}", path.display())))?;
    let mine: Vec<&str> = m.clips.iter().map(|c| c.clip_id.as_str()).collect();
    if ids != mine {
        return Err(Error::invalid(format!(
            "feature cache {} does not match manifest {} ({} vs {} clips)",
            path.display(),
            m.split,
            ids.len(),
            mine.len()
        )));
    }
    let x: &ArrayD<f32> = a
        .arrays
        .get("features")
        .ok_or_else(|| Error::invalid(format!("{}: no features array", path.display())))?;
    if x.shape() != [ids.len(), N_FRAMES, N_MELS] {
        return Err(Error::invalid(format!("{}: features of shape {:?}", path.display(), x.shape())));
    }
    let mut set = FeatureSet::default();
    for (i, c) in m.clips.iter().enumerate() {
        let f: Array2<f32> = x.index_axis(Axis(0), i).into_dimensionality().expect("checked rank").to_owned();
        set.push(c.clone(), f);
    }
    Ok(set)
}
