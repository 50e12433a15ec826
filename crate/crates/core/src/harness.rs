//! Experiment plumbing behind the command-line verbs: config files, run
//! manifests, multi-seed training, the ablation suite, the cluster-count
//! sweep, checkpoint evaluation and diagnostic exports.

use crate::checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::env::{Preset, RoleArena};
use crate::episode::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kmeans::kmeans;
use crate::tensor::Mat;
use crate::trainer::{self, collect_episode, EvalReport, TrainSummary};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Content hash of the core sources this binary was built from.
pub const CODE_HASH: &str = env!("ACORM_CODE_HASH");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "acorm-manifest";

/// Parses a TOML config. An optional top-level `preset` key selects the
/// starting point; every other key overrides a [`TrainConfig`] field.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<toml>", e.message()))?;
    let preset = match table.remove("preset") {
        None => Preset::Default,
        Some(toml::Value::String(s)) => s.parse().map_err(|e: Error| Error::config("preset", e.to_string()))?,
        Some(other) => {
            return Err(Error::config(
                "preset",
                format!("expected a string, got {}", other.type_str()),
            ))
        }
    };
    let base = toml::Value::try_from(TrainConfig::with_preset(preset))
        .map_err(|e| Error::config("<defaults>", e.to_string()))?;
    let toml::Value::Table(mut merged) = base else {
        unreachable!("a struct serializes to a table")
    };
    merge(&mut merged, table);
    let config: TrainConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("<toml>", e.message()))?;
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value, falling back to a plain string.
pub fn apply_override(config: &TrainConfig, assignment: &str) -> Result<TrainConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let toml::Value::Table(mut table) =
        toml::Value::try_from(config).map_err(|e| Error::config("<config>", e.to_string()))?
    else {
        unreachable!("a struct serializes to a table")
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cursor = &mut table;
    for p in parts {
        cursor = match cursor.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::config(key, format!("unknown section {p:?}"))),
        };
    }
    if !cursor.contains_key(last) {
        return Err(Error::config(key, "unknown field"));
    }
    cursor.insert(last.to_string(), value);
    let updated: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(key, e.message()))?;
    updated.validate()?;
    Ok(updated)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config file: {e}")))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config { field, message } => Error::config(format!("{}: {field}", path.display()), message),
        other => other,
    })
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Everything needed to rerun a job, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub command: String,
    pub variant: Option<String>,
    pub code_hash: String,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, seeds: &[u64], output_dir: &Path) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            version: 1,
            command: command.into(),
            variant: config.variant().map(|v| v.name().to_string()),
            code_hash: CODE_HASH.into(),
            seeds: seeds.to_vec(),
            output_dir: output_dir.display().to_string(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: None,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "{} is not a run manifest",
                path.display()
            )));
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: TrainSummary,
}

/// Trains one run per seed under `out/seed_<s>/`, each with its own
/// manifest, metrics and checkpoint.
pub fn train_seeds(command: &str, config: &TrainConfig, seeds: &[u64], out: &Path) -> Result<Vec<RunResult>> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = config.clone();
        c.seed = seed;
        let dir = out.join(format!("seed_{seed}"));
        let mut manifest = RunManifest::new(command, &c, &[seed], &dir);
        manifest.write(&dir)?;
        let (_, summary) = trainer::train(c, Some(&dir))?;
        manifest.finished_unix_ms = Some(unix_ms());
        manifest.write(&dir)?;
        results.push(RunResult { seed, dir, summary });
    }
    Ok(results)
}

/// Re-executes the job a per-run manifest describes into `out`.
pub fn rerun_manifest(manifest_path: &Path, out: &Path) -> Result<Vec<RunResult>> {
    let m = RunManifest::read(manifest_path)?;
    train_seeds(&m.command, &m.config, &m.seeds, out)
}

/// Mean and percentile-bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || resamples == 0 {
        return (mean, mean, mean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (mean, at(0.025), at(0.975))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub seed: u64,
    pub final_win_rate: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const COMPARISON_HEADER: &str = "variant,seed,final_win_rate,mean,ci_low,ci_high";
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

fn curve_rows(summary: &TrainSummary) -> impl Iterator<Item = (u64, f64)> + '_ {
    summary.evaluations.iter().map(|(s, r)| (*s, r.win_rate))
}

/// Runs every variant for every seed under `out/<variant slug>/seed_<s>/`
/// and writes `comparison.csv` and `curves.csv`.
pub fn ablate(base: &TrainConfig, variants: &[Variant], seeds: &[u64], out: &Path) -> Result<Vec<ComparisonRow>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants given".into()));
    }
    for &v in variants {
        let mut c = base.clone();
        v.apply(&mut c);
        c.validate()?;
    }
    RunManifest::new("ablate", base, seeds, out).write(out)?;
    let mut rows = Vec::new();
    let mut curves = String::from("variant,seed,step,test_win_rate\n");
    for &v in variants {
        let mut c = base.clone();
        v.apply(&mut c);
        let results = train_seeds("ablate", &c, seeds, &out.join(v.slug()))?;
        let finals: Vec<f64> = results
            .iter()
            .map(|r| r.summary.final_win_rate().unwrap_or(0.0))
            .collect();
        let (mean, lo, hi) = bootstrap_ci(&finals, BOOTSTRAP_RESAMPLES, 0);
        for (r, &f) in results.iter().zip(&finals) {
            rows.push(ComparisonRow {
                variant: v.name().into(),
                seed: r.seed,
                final_win_rate: f,
                mean,
                ci_low: lo,
                ci_high: hi,
            });
            for (step, w) in curve_rows(&r.summary) {
                writeln!(curves, "{},{},{step},{w}", v.name(), r.seed).expect("string write");
            }
        }
    }
    let mut table = format!("{COMPARISON_HEADER}\n");
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{},{}",
            r.variant, r.seed, r.final_win_rate, r.mean, r.ci_low, r.ci_high
        )
        .expect("string write");
    }
    write_file(&out.join("comparison.csv"), &table)?;
    write_file(&out.join("curves.csv"), &curves)?;
    Ok(rows)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub step: u64,
    pub value: f64,
}

/// One training run per cluster count and seed under `out/k_<k>/seed_<s>/`;
/// writes `sweep_k.csv` keyed by `(k, seed, step)`. Every `k` is checked
/// against the agent count before anything runs.
pub fn sweep_k(base: &TrainConfig, ks: &[usize], seeds: &[u64], out: &Path) -> Result<Vec<SweepRow>> {
    let n = base.env.n_agents();
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no cluster counts given".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::config(
            "cluster_k",
            format!("{bad} is outside 1..={n} for a roster of {n} agents"),
        ));
    }
    RunManifest::new("sweep-k", base, seeds, out).write(out)?;
    let mut rows = Vec::new();
    for &k in ks {
        let mut c = base.clone();
        c.cluster_k = k;
        for r in train_seeds("sweep-k", &c, seeds, &out.join(format!("k_{k}")))? {
            rows.extend(curve_rows(&r.summary).map(|(step, value)| SweepRow {
                k,
                seed: r.seed,
                step,
                value,
            }));
        }
    }
    let mut csv = String::from("k,seed,step,test_win_rate\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{}", r.k, r.seed, r.step, r.value).expect("string write");
    }
    write_file(&out.join("sweep_k.csv"), &csv)?;
    Ok(rows)
}

/// Greedy evaluation of a saved checkpoint.
pub fn evaluate_checkpoint(path: &Path, episodes: usize, seed: u64) -> Result<EvalReport> {
    let t = checkpoint::load(path)?;
    let l = &t.learner;
    trainer::evaluate(&l.nets, &l.params, &l.config.env, episodes, seed)
}

/// Projects points onto their two leading principal components. Each axis
/// is signed so its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![[0.0, 0.0]; n];
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    for &c in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(c).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = row.iter().zip(axis.iter()).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDiagnostics {
    pub t: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub role_representations: Vec<Vec<f64>>,
    pub cluster_labels: Vec<usize>,
    pub projection: Vec<[f64; 2]>,
    /// `H × n` weights, absent when attention is ablated.
    pub attention: Option<Vec<Vec<f64>>>,
    pub grid: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetadata {
    pub checkpoint: String,
    pub episode_seed: u64,
    pub n_agents: usize,
    pub attention_heads: usize,
    pub cluster_k: usize,
    pub projection_method: String,
    pub won: bool,
    pub episode_return: f64,
    pub steps: usize,
    pub code_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub metadata: DiagnosisMetadata,
    pub timesteps: Vec<TimestepDiagnostics>,
}

impl Diagnosis {
    /// Attention weights as a `(T, H, n)` array.
    pub fn attention_array(&self) -> Option<Vec<Vec<Vec<f64>>>> {
        self.timesteps.iter().map(|t| t.attention.clone()).collect()
    }

    /// True when the canonical cluster labels differ between timesteps.
    pub fn labels_change(&self) -> bool {
        self.timesteps
            .windows(2)
            .any(|w| w[0].cluster_labels != w[1].cluster_labels)
    }
}

pub const PROJECTION_METHOD: &str = "pca";

/// Rolls one greedy episode from a checkpoint and collects per-timestep
/// embeddings, role representations, cluster labels, a 2-D projection,
/// attention weights and grid renderings. With `out`, writes
/// `diagnosis.json`, `attention.json` and `grid.txt` there.
pub fn diagnose(path: &Path, preset: Option<Preset>, episode_seed: u64, out: Option<&Path>) -> Result<Diagnosis> {
    let trainer = checkpoint::load(path)?;
    let l = &trainer.learner;
    let mut env_config = l.config.env.clone();
    if let Some(p) = preset {
        let pc = p.config();
        if (pc.n_agents(), pc.obs_dim(), pc.n_actions(), pc.state_dim())
            != (
                env_config.n_agents(),
                env_config.obs_dim(),
                env_config.n_actions(),
                env_config.state_dim(),
            )
        {
            return Err(Error::InvalidArgument(format!(
                "preset {} does not match the checkpoint's environment dimensions",
                p.name()
            )));
        }
        env_config = pc;
    }
    let record = collect_episode(&l.nets, &l.params, &env_config, 0.0, episode_seed)?;
    let steps = record.len();
    let n = record.n_agents;
    let batch = Batch::new(&[&record])?;

    let mut g = Graph::no_grad(&l.params);
    let xs = g.constant(Mat::from_vec(
        steps * n,
        batch.inputs.cols(),
        batch.inputs.data()[..steps * n * batch.inputs.cols()].to_vec(),
    ));
    let emb = l.nets.agent.unroll(&mut g, xs, steps, n);
    let roles = l.nets.roles.forward_query(&mut g, emb);
    let states = g.constant(Mat::from_vec(
        steps,
        batch.states.cols(),
        batch.states.data()[..steps * batch.states.cols()].to_vec(),
    ));
    let (_, heads) = l.nets.conditioning(&mut g, states, emb, steps, 1)?;
    let emb_v = g.value(emb).clone();
    let roles_v = g.value(roles).clone();
    let head_values: Option<Vec<Mat>> = heads.map(|h| h.iter().map(|&v| g.value(v).clone()).collect());

    let all_points: Vec<Vec<f64>> = (0..steps * n).map(|r| emb_v.row(r).to_vec()).collect();
    let projection = pca_2d(&all_points);

    let (mut env, _) = RoleArena::reset(&env_config, episode_seed)?;
    let mut frames = vec![env.render()];
    for t in 0..steps {
        let joint: Vec<usize> = (0..n).map(|i| record.action(t, i)).collect();
        env.step(&joint)?;
        frames.push(env.render());
    }

    let k = l.config.cluster_k.min(n);
    let mut timesteps = Vec::with_capacity(steps);
    for t in 0..steps {
        let points = all_points[t * n..(t + 1) * n].to_vec();
        let assignment = kmeans(&points, k, t as u64, l.config.kmeans_max_iters)?;
        timesteps.push(TimestepDiagnostics {
            t,
            embeddings: points,
            role_representations: (0..n).map(|i| roles_v.row(t * n + i).to_vec()).collect(),
            cluster_labels: assignment.canonical_labels(),
            projection: projection[t * n..(t + 1) * n].to_vec(),
            attention: head_values
                .as_ref()
                .map(|hs| hs.iter().map(|h| h.row(t).to_vec()).collect()),
            grid: frames[t].clone(),
        });
    }
    let diagnosis = Diagnosis {
        metadata: DiagnosisMetadata {
            checkpoint: path.display().to_string(),
            episode_seed,
            n_agents: n,
            attention_heads: l.config.net.attention_heads,
            cluster_k: k,
            projection_method: PROJECTION_METHOD.into(),
            won: record.won,
            episode_return: record.episode_return(),
            steps,
            code_hash: CODE_HASH.into(),
        },
        timesteps,
    };
    if let Some(dir) = out {
        write_file(&dir.join("diagnosis.json"), &serde_json::to_string(&diagnosis)?)?;
        if let Some(att) = diagnosis.attention_array() {
            write_file(&dir.join("attention.json"), &serde_json::to_string(&att)?)?;
        }
        let mut grid = String::new();
        for (t, f) in frames.iter().enumerate() {
            writeln!(grid, "t = {t}\n{f}").expect("string write");
        }
        write_file(&dir.join("grid.txt"), &grid)?;
    }
    Ok(diagnosis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overrides_and_preset() {
        let c = parse_config("preset = \"easy\"\ncluster_k = 2\n[env]\nepisode_limit = 30\n").unwrap();
        assert_eq!(c.env.grid_size, 6);
        assert_eq!(c.env.episode_limit, 30);
        assert_eq!(c.cluster_k, 2);
        assert_eq!(c.learning_rate, 6e-4);
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = parse_config("cluster_k = 9").unwrap_err().to_string();
        assert!(e.contains("cluster_k"), "{e}");
        let e = parse_config("learning_rat = 0.1").unwrap_err().to_string();
        assert!(e.contains("learning_rat"), "{e}");
        let e = parse_config("[env]\nsight = 3").unwrap_err().to_string();
        assert!(e.contains("sight"), "{e}");
        let e = load_config(Path::new("/nonexistent/run.toml")).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/run.toml"), "{e}");
    }

    #[test]
    fn dotted_overrides() {
        let c = TrainConfig::default();
        let c = apply_override(&c, "env.episode_limit=25").unwrap();
        assert_eq!(c.env.episode_limit, 25);
        let c = apply_override(&c, "target_update_mode = hard").unwrap();
        assert_eq!(c.target_update_mode, crate::config::TargetUpdateMode::Hard);
        assert!(apply_override(&c, "no_such=1")
            .unwrap_err()
            .to_string()
            .contains("no_such"));
        assert!(apply_override(&c, "batch_size=0")
            .unwrap_err()
            .to_string()
            .contains("batch_size"));
    }

    #[test]
    fn bootstrap_interval_brackets_the_mean() {
        let (m, lo, hi) = bootstrap_ci(&[0.2, 0.4, 0.6, 0.8, 1.0], 2000, 1);
        assert!((m - 0.6).abs() < 1e-12);
        assert!(lo <= m && m <= hi && lo >= 0.2 && hi <= 1.0);
        assert_eq!(bootstrap_ci(&[0.5], 100, 0), (0.5, 0.5, 0.5));
    }

    #[test]
    fn pca_recovers_a_line() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let p = pca_2d(&pts);
        for w in p.windows(2) {
            let d = w[1][0] - w[0][0];
            assert!((d - 5f64.sqrt()).abs() < 1e-9);
            assert!(w[1][1].abs() < 1e-9);
        }
    }
}
