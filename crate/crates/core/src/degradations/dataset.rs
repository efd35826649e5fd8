use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{config_err, data_err, format_err, Result};
use crate::numerics::Tensor;
use crate::seed::derive_seed;

use super::{apply_chain, gen_clean_image, read_ppm, write_ppm, Degradation, DegradationSpec};

pub const MANIFEST_TRAIN: &str = "train.manifest";
pub const MANIFEST_TEST: &str = "test.manifest";
pub const MANIFEST_MIXED: &str = "mixed.manifest";
const TASKS_FILE: &str = "tasks.tsv";
const HEADER_PREFIX: &str = "#uir-manifest v1 T=";

/// One task: a label and the degradation chain that produces its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub label: String,
    pub chain: Vec<Degradation>,
}

impl TaskConfig {
    pub fn single(d: Degradation) -> Self {
        TaskConfig {
            label: d.kind_name().to_string(),
            chain: vec![d],
        }
    }

    /// Composite task labelled `kind_a+kind_b+...`, applied in order.
    pub fn composite(chain: Vec<Degradation>) -> Self {
        let label = chain
            .iter()
            .map(Degradation::kind_name)
            .collect::<Vec<_>>()
            .join("+");
        TaskConfig { label, chain }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub mixed_per_task: usize,
    pub tasks: Vec<TaskConfig>,
    /// Test-only composite degradations.
    pub mixed: Vec<TaskConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let suite = Degradation::default_suite();
        let blur = suite[1];
        let low_light = suite[2];
        let quantize = suite[3];
        DataConfig {
            seed: 0,
            height: 32,
            width: 32,
            train_per_task: 200,
            test_per_task: 40,
            mixed_per_task: 40,
            tasks: suite.into_iter().map(TaskConfig::single).collect(),
            mixed: vec![
                TaskConfig::composite(vec![blur, low_light]),
                TaskConfig::composite(vec![blur, quantize]),
            ],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(config_err!("dataset needs at least one task"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(config_err!("image size must be at least 16x16"));
        }
        let mut seen = HashSet::new();
        for t in self.tasks.iter().chain(&self.mixed) {
            if t.label.is_empty() || t.label.contains(['\t', '\n']) {
                return Err(config_err!("invalid task label {:?}", t.label));
            }
            if !seen.insert(t.label.as_str()) {
                return Err(config_err!("duplicate task label {:?}", t.label));
            }
            if t.chain.is_empty() {
                return Err(config_err!("task {:?} has no degradations", t.label));
            }
            for d in &t.chain {
                d.validate()?;
            }
        }
        Ok(())
    }
}

/// One task's pairs, as `(clean, degraded)` paths relative to the manifest
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEntry {
    pub label: String,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    /// Generating chain; empty when the sidecar task file is absent.
    pub chain: Vec<Degradation>,
}

/// The task collection, one entry per label in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub tasks: Vec<TaskEntry>,
}

impl DatasetManifest {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.label.clone()).collect()
    }

    pub fn pair_count(&self) -> usize {
        self.tasks.iter().map(|t| t.pairs.len()).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_PREFIX}{}\n", self.tasks.len());
        for t in &self.tasks {
            for (clean, degraded) in &t.pairs {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}",
                    t.label,
                    path_text(clean),
                    path_text(degraded)
                );
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| format_err!("empty manifest"))?;
        let declared: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| format_err!("bad manifest header {header:?}"))?;
        let mut manifest = DatasetManifest::default();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [label, clean, degraded] = fields[..] else {
                return Err(format_err!(
                    "manifest line {} has {} fields, expected 3",
                    n + 2,
                    fields.len()
                ));
            };
            let pair = (PathBuf::from(clean), PathBuf::from(degraded));
            match manifest.tasks.iter_mut().find(|t| t.label == label) {
                Some(t) => t.pairs.push(pair),
                None => manifest.tasks.push(TaskEntry {
                    label: label.to_string(),
                    pairs: vec![pair],
                    chain: Vec::new(),
                }),
            }
        }
        if manifest.tasks.len() != declared {
            return Err(format_err!(
                "manifest header declares T={declared} but lists {} tasks",
                manifest.tasks.len()
            ));
        }
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    /// Every degraded input belongs to exactly one task.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tasks {
            for (_, degraded) in &t.pairs {
                if !seen.insert(degraded) {
                    return Err(data_err!(
                        "pair {} appears more than once",
                        degraded.display()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Reads a manifest, attaching generating chains from a sibling
    /// `tasks.tsv` when present.
    pub fn read(path: &Path) -> Result<Self> {
        let mut m = Self::parse(&fs::read_to_string(path)?)?;
        let sidecar = path.with_file_name(TASKS_FILE);
        if sidecar.exists() {
            let text = fs::read_to_string(sidecar)?;
            for line in text.lines().filter(|l| !l.is_empty()) {
                let (label, chain) = line
                    .split_once('\t')
                    .ok_or_else(|| format_err!("bad task line {line:?}"))?;
                if let Some(t) = m.tasks.iter_mut().find(|t| t.label == label) {
                    t.chain = chain
                        .split(';')
                        .map(str::parse)
                        .collect::<Result<_>>()?;
                }
            }
        }
        Ok(m)
    }
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub root: PathBuf,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub mixed: DatasetManifest,
}

#[derive(Clone, Copy)]
enum Split {
    Train = 0,
    Test = 1,
    Mixed = 2,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Mixed => "mixed",
        }
    }
}

/// Generates every split under `out_dir` and writes `train.manifest`,
/// `test.manifest`, `mixed.manifest`, and `tasks.tsv`.
///
/// Image `i` of task `t` in split `p` uses clean seed
/// `derive_seed(seed, "clean", [p, t, i])` and degradation seeds
/// `derive_seed(seed, "degrade", [p, t, i, j])`, so the pools of different
/// splits never share a seed.
pub fn make_dataset(config: &DataConfig, out_dir: &Path) -> Result<DatasetSplits> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train = write_split(config, out_dir, Split::Train, &config.tasks, config.train_per_task)?;
    let test = write_split(config, out_dir, Split::Test, &config.tasks, config.test_per_task)?;
    let mixed = write_split(config, out_dir, Split::Mixed, &config.mixed, config.mixed_per_task)?;
    train.write(&out_dir.join(MANIFEST_TRAIN))?;
    test.write(&out_dir.join(MANIFEST_TEST))?;
    mixed.write(&out_dir.join(MANIFEST_MIXED))?;

    let mut tasks = String::new();
    for t in config.tasks.iter().chain(&config.mixed) {
        let chain: Vec<String> = t.chain.iter().map(ToString::to_string).collect();
        let _ = writeln!(tasks, "{}\t{}", t.label, chain.join(";"));
    }
    fs::write(out_dir.join(TASKS_FILE), tasks)?;

    Ok(DatasetSplits {
        root: out_dir.to_path_buf(),
        train,
        test,
        mixed,
    })
}

fn write_split(
    config: &DataConfig,
    root: &Path,
    split: Split,
    tasks: &[TaskConfig],
    per_task: usize,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    if per_task == 0 {
        return Ok(manifest);
    }
    for (ti, task) in tasks.iter().enumerate() {
        let rel_dir = PathBuf::from(&task.label).join(split.name());
        fs::create_dir_all(root.join(&rel_dir))?;
        let mut pairs = Vec::with_capacity(per_task);
        for i in 0..per_task {
            let idx = [split as u64, ti as u64, i as u64];
            let clean = gen_clean_image(
                derive_seed(config.seed, "clean", &idx),
                config.height,
                config.width,
            )?;
            let specs: Vec<DegradationSpec> = task
                .chain
                .iter()
                .enumerate()
                .map(|(j, d)| DegradationSpec {
                    degradation: *d,
                    seed: derive_seed(config.seed, "degrade", &[idx[0], idx[1], idx[2], j as u64]),
                })
                .collect();
            let degraded = apply_chain(&clean, &specs)?;
            let clean_rel = rel_dir.join(format!("{i:04}_clean.ppm"));
            let degraded_rel = rel_dir.join(format!("{i:04}_degraded.ppm"));
            write_ppm(&root.join(&clean_rel), &clean)?;
            write_ppm(&root.join(&degraded_rel), &degraded)?;
            pairs.push((clean_rel, degraded_rel));
        }
        manifest.tasks.push(TaskEntry {
            label: task.label.clone(),
            pairs,
            chain: task.chain.clone(),
        });
    }
    Ok(manifest)
}

/// A loaded `(degraded, clean)` example with its task index in the manifest.
#[derive(Clone, Debug)]
pub struct Pair {
    pub label: String,
    pub task: usize,
    pub degraded: Tensor,
    pub clean: Tensor,
}

/// Loads every pair, resolving paths against `root`.
pub fn load_pairs(manifest: &DatasetManifest, root: &Path) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(manifest.pair_count());
    for (ti, t) in manifest.tasks.iter().enumerate() {
        for (clean, degraded) in &t.pairs {
            let clean_img = read_ppm(&root.join(clean))?;
            let degraded_img = read_ppm(&root.join(degraded))?;
            if clean_img.dims() != degraded_img.dims() {
                return Err(data_err!(
                    "pair {} / {} differ in shape",
                    clean.display(),
                    degraded.display()
                ));
            }
            out.push(Pair {
                label: t.label.clone(),
                task: ti,
                degraded: degraded_img,
                clean: clean_img,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DataConfig {
        DataConfig {
            seed: 3,
            train_per_task: 3,
            test_per_task: 2,
            mixed_per_task: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = DatasetManifest {
            tasks: vec![
                TaskEntry {
                    label: "a".into(),
                    pairs: vec![("c0".into(), "d0".into()), ("c1".into(), "d1".into())],
                    chain: vec![],
                },
                TaskEntry {
                    label: "b".into(),
                    pairs: vec![("c2".into(), "d2".into())],
                    chain: vec![],
                },
            ],
        };
        let text = m.to_text();
        assert!(text.starts_with("#uir-manifest v1 T=2\na\tc0\td0\n"));
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_bad_header_and_overlap() {
        assert!(DatasetManifest::parse("#uir-manifest v2 T=1\n").is_err());
        assert!(DatasetManifest::parse("#uir-manifest v1 T=2\na\tc\td\n").is_err());
        let dup = "#uir-manifest v1 T=2\na\tc\td\nb\tc\td\n";
        assert!(matches!(
            DatasetManifest::parse(dup),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut cfg = small_config();
        cfg.tasks.push(cfg.tasks[0].clone());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            make_dataset(&cfg, dir.path()),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn generation_is_byte_identical() {
        let cfg = small_config();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = make_dataset(&cfg, a.path()).unwrap();
        make_dataset(&cfg, b.path()).unwrap();
        assert_eq!(sa.train.task_count(), 5);
        assert_eq!(sa.mixed.labels(), vec!["gaussian_blur+low_light", "gaussian_blur+block_quantize"]);
        for m in [MANIFEST_TRAIN, MANIFEST_TEST, MANIFEST_MIXED, TASKS_FILE] {
            assert_eq!(fs::read(a.path().join(m)).unwrap(), fs::read(b.path().join(m)).unwrap());
        }
        for t in &sa.train.tasks {
            for (c, d) in &t.pairs {
                assert_eq!(fs::read(a.path().join(c)).unwrap(), fs::read(b.path().join(c)).unwrap());
                assert_eq!(fs::read(a.path().join(d)).unwrap(), fs::read(b.path().join(d)).unwrap());
            }
        }
        let back = DatasetManifest::read(&a.path().join(MANIFEST_TRAIN)).unwrap();
        assert_eq!(back, sa.train);
        let pairs = load_pairs(&back, a.path()).unwrap();
        assert_eq!(pairs.len(), 15);
        assert_eq!(pairs[3].task, 1);
    }

    #[test]
    fn train_and_test_pools_are_disjoint() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let s = make_dataset(&cfg, dir.path()).unwrap();
        let train = load_pairs(&s.train, dir.path()).unwrap();
        let test = load_pairs(&s.test, dir.path()).unwrap();
        for a in &train {
            for b in &test {
                assert_ne!(a.clean, b.clean);
            }
        }
    }
}
