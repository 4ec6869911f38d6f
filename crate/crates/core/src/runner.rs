//! Commands behind the `fgmine` binary and their on-disk artifacts.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json      manifest: run id, resolved config, data fingerprint
//! <run>/metrics.jsonl    one record per (epoch, split)
//! <run>/summary.csv      final metrics, one row per split
//! <run>/ckpt_<step>.bin  parameters after every epoch
//! <run>/bo_trials.jsonl  with --dump-bo
//! <run>/negatives.jsonl  with --dump-negatives
//! ```

use std::collections::BTreeMap;
use std::env;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{
    build_eval_pool, evaluate, init_pair, train, BoTrialRecord, EpochMetrics, EvalEpisode, FgnBatch, ModelPair,
    Selector, SyncPeriod, TrainData, TrainObserver,
};
use crate::checkpoint::{self, CheckpointHeader};
use crate::config::RunConfig;
use crate::encoder::{encode_trajectory, EncoderParams};
use crate::error::{Error, Result};
use crate::forge::ReplacementMode;
use crate::ranking::{DistanceStats, Provenance};
use crate::world::{check_episode, dataset, generate_world, read_jsonl, to_jsonl, Episode, Split, World};

/// Bumped whenever a `summary.csv` column is added, removed or reordered.
pub const SCHEMA_VERSION: u32 = 1;
pub const RUN_ROOT_ENV: &str = "FGMINE_RUN_ROOT";

/// Output root: `$FGMINE_RUN_ROOT` if set, else the working directory.
pub fn run_root() -> PathBuf {
    env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Relative paths are taken under [`run_root`].
pub fn resolve_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        run_root().join(dir)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A world with its two episode lists.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: World,
    pub seen: Vec<Episode>,
    pub unseen: Vec<Episode>,
    /// SHA-256 over the serialized seen then unseen episode files.
    pub fingerprint: String,
}

fn fingerprint(seen: &[u8], unseen: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(seen);
    h.update(unseen);
    hex::encode(h.finalize())
}

pub fn generate_data(cfg: &RunConfig) -> Result<Prepared> {
    cfg.world.validate()?;
    cfg.data.validate()?;
    let world = generate_world(&cfg.world)?;
    let seen = dataset(&world, Split::Seen, cfg.data.n_seen, cfg.data.n_coarse, cfg.data.seed)?;
    let unseen = dataset(&world, Split::Unseen, cfg.data.n_unseen, cfg.data.n_coarse, cfg.data.seed)?;
    let fingerprint = fingerprint(&to_jsonl(&seen)?, &to_jsonl(&unseen)?);
    Ok(Prepared { world, seen, unseen, fingerprint })
}

/// Reads `world.json`, `data_seen.jsonl` and `data_unseen.jsonl` from `dir`.
pub fn load_data(dir: &Path) -> Result<Prepared> {
    let world_path = dir.join("world.json");
    let world: World = serde_json::from_slice(&fs::read(&world_path).map_err(|e| Error::io(&world_path, e))?)
        .map_err(|e| Error::Load(format!("{}: {e}", world_path.display())))?;
    let mut lists = Vec::new();
    let mut bytes = Vec::new();
    for split in [Split::Seen, Split::Unseen] {
        let path = dir.join(format!("data_{split}.jsonl"));
        bytes.push(fs::read(&path).map_err(|e| Error::io(&path, e))?);
        let eps = read_jsonl(&path)?;
        if eps.is_empty() {
            return Err(Error::Load(format!("{} holds no episodes", path.display())));
        }
        for ep in &eps {
            check_episode(&world, ep)?;
            if ep.split != split {
                return Err(Error::Load(format!("{} holds a {} episode", path.display(), ep.split)));
            }
        }
        lists.push(eps);
    }
    let unseen = lists.pop().expect("two splits");
    let seen = lists.pop().expect("two splits");
    Ok(Prepared {
        fingerprint: fingerprint(&bytes[0], &bytes[1]),
        world,
        seen,
        unseen,
    })
}

/// Uses the data directory when given, otherwise generates from `cfg`. The
/// returned config carries the world and episode counts actually used.
pub fn prepare(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<(RunConfig, Prepared)> {
    match data_dir {
        None => Ok((cfg.clone(), generate_data(cfg)?)),
        Some(dir) => {
            let data = load_data(&resolve_dir(dir))?;
            let mut cfg = cfg.clone();
            cfg.world = data.world.config.clone();
            cfg.data.n_seen = data.seen.len();
            cfg.data.n_unseen = data.unseen.len();
            cfg.data.n_coarse = data
                .seen
                .iter()
                .chain(&data.unseen)
                .map(|e| e.coarse_negatives.len())
                .min()
                .unwrap_or(0);
            cfg.validate()?;
            Ok((cfg, data))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenReport {
    pub fingerprint: String,
    pub n_seen: usize,
    pub n_unseen: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenReport> {
    let data = generate_data(cfg)?;
    let out = resolve_dir(out);
    create_dir(&out)?;
    let mut world_json = serde_json::to_vec(&data.world)?;
    world_json.push(b'\n');
    write_file(&out.join("world.json"), &world_json)?;
    write_file(&out.join("data_seen.jsonl"), &to_jsonl(&data.seen)?)?;
    write_file(&out.join("data_unseen.jsonl"), &to_jsonl(&data.unseen)?)?;
    Ok(GenReport {
        fingerprint: data.fingerprint,
        n_seen: data.seen.len(),
        n_unseen: data.unseen.len(),
    })
}

/// Wall-clock data; ignored by every determinism comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub elapsed_secs: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub world_fingerprint: String,
    pub data_dir: Option<String>,
    pub tool_version: String,
    pub metadata: RunMetadata,
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Stable id derived from the resolved config and the data fingerprint.
pub fn run_id(cfg: &RunConfig, fingerprint: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_flat().as_bytes());
    h.update(fingerprint.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

/// Final metrics of one run on one split, as written to `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub config: String,
    /// A seed, or `mean` for per-config averages.
    pub seed: String,
    pub split: String,
    pub epochs: usize,
    pub ranking_accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub acc_shuffle: Option<f64>,
    pub acc_alt_path: Option<f64>,
    pub acc_fine_grained: Option<f64>,
    pub mu_shuffle: Option<f64>,
    pub sigma_shuffle: Option<f64>,
    pub mu_alt_path: Option<f64>,
    pub sigma_alt_path: Option<f64>,
    pub mu_fine_grained: Option<f64>,
    pub sigma_fine_grained: Option<f64>,
    pub status: String,
}

impl SummaryRow {
    fn from_metrics(config: &str, seed: u64, m: &EpochMetrics) -> Self {
        let acc = |p| m.style_accuracy.get(&p).copied();
        let mu = |p| m.dist_stats.get(&p).map(|s| s.mu);
        let sigma = |p| m.dist_stats.get(&p).map(|s| s.sigma);
        Self {
            schema_version: SCHEMA_VERSION,
            config: config.to_string(),
            seed: seed.to_string(),
            split: m.split.to_string(),
            epochs: m.epoch + 1,
            ranking_accuracy: Some(m.ranking_accuracy),
            mean_loss: Some(m.mean_loss),
            acc_shuffle: acc(Provenance::Shuffle),
            acc_alt_path: acc(Provenance::AltPath),
            acc_fine_grained: acc(Provenance::FineGrained),
            mu_shuffle: mu(Provenance::Shuffle),
            sigma_shuffle: sigma(Provenance::Shuffle),
            mu_alt_path: mu(Provenance::AltPath),
            sigma_alt_path: sigma(Provenance::AltPath),
            mu_fine_grained: mu(Provenance::FineGrained),
            sigma_fine_grained: sigma(Provenance::FineGrained),
            status: "ok".into(),
        }
    }

    fn failed(config: &str, seed: u64, split: Split, epochs: usize, err: &Error) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: config.to_string(),
            seed: seed.to_string(),
            split: split.to_string(),
            epochs,
            ranking_accuracy: None,
            mean_loss: None,
            acc_shuffle: None,
            acc_alt_path: None,
            acc_fine_grained: None,
            mu_shuffle: None,
            sigma_shuffle: None,
            mu_alt_path: None,
            sigma_alt_path: None,
            mu_fine_grained: None,
            sigma_fine_grained: None,
            status: format!("failed: {err}"),
        }
    }

    /// Column-wise arithmetic mean of successful rows.
    fn mean(config: &str, split: &str, rows: &[&SummaryRow]) -> Self {
        let ok: Vec<&&SummaryRow> = rows.iter().filter(|r| r.status == "ok").collect();
        let avg = |f: fn(&SummaryRow) -> Option<f64>| -> Option<f64> {
            let xs: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!xs.is_empty() && xs.len() == ok.len()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        Self {
            schema_version: SCHEMA_VERSION,
            config: config.to_string(),
            seed: "mean".into(),
            split: split.to_string(),
            epochs: ok.first().map(|r| r.epochs).unwrap_or(0),
            ranking_accuracy: avg(|r| r.ranking_accuracy),
            mean_loss: avg(|r| r.mean_loss),
            acc_shuffle: avg(|r| r.acc_shuffle),
            acc_alt_path: avg(|r| r.acc_alt_path),
            acc_fine_grained: avg(|r| r.acc_fine_grained),
            mu_shuffle: avg(|r| r.mu_shuffle),
            sigma_shuffle: avg(|r| r.sigma_shuffle),
            mu_alt_path: avg(|r| r.mu_alt_path),
            sigma_alt_path: avg(|r| r.sigma_alt_path),
            mu_fine_grained: avg(|r| r.mu_fine_grained),
            sigma_fine_grained: avg(|r| r.sigma_fine_grained),
            status: format!("{} of {} seeds", ok.len(), rows.len()),
        }
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Name written to the `config` column of `summary.csv`.
    pub label: String,
    pub dump_bo: bool,
    pub dump_negatives: bool,
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub run_id: String,
    pub history: Vec<EpochMetrics>,
    pub params: EncoderParams,
}

impl TrainReport {
    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.history.iter().rev().find(|m| m.split == split)
    }
}

fn jsonl_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

struct RunWriter {
    dir: PathBuf,
    seed: u64,
    metrics: BufWriter<File>,
    bo: Option<BufWriter<File>>,
    negatives: Option<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Serialize)]
struct NegativeRecord<'a> {
    step: u64,
    episode_id: usize,
    #[serde(flatten)]
    batch: &'a FgnBatch,
}

impl TrainObserver for RunWriter {
    fn on_epoch(&mut self, metrics: &[EpochMetrics], pair: &ModelPair) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        for m in metrics {
            jsonl_line(&mut self.metrics, m, &path)?;
        }
        // flushed per epoch so an aborted run keeps what it finished
        self.metrics.flush().map_err(|e| Error::io(&path, e))?;
        for (w, name) in [(&mut self.bo, "bo_trials.jsonl"), (&mut self.negatives, "negatives.jsonl")] {
            if let Some(w) = w {
                w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
            }
        }
        let header = CheckpointHeader {
            dims: pair.online.dims,
            seed: self.seed,
            step: pair.step,
        };
        checkpoint::save(&checkpoint::checkpoint_path(&self.dir, pair.step), &header, &pair.online)
    }

    fn on_bo_trial(&mut self, record: &BoTrialRecord) -> Result<()> {
        match &mut self.bo {
            Some(w) => jsonl_line(w, record, &self.dir.join("bo_trials.jsonl")),
            None => Ok(()),
        }
    }

    fn on_outer_batch(&mut self, step: u64, episode_id: usize, batch: &FgnBatch) -> Result<()> {
        match &mut self.negatives {
            Some(w) => jsonl_line(w, &NegativeRecord { step, episode_id, batch }, &self.dir.join("negatives.jsonl")),
            None => Ok(()),
        }
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    write_file(&dir.join("config.json"), &bytes)
}

pub fn eval_pools(cfg: &RunConfig, data: &Prepared) -> Result<(Vec<EvalEpisode>, Vec<EvalEpisode>)> {
    Ok((
        build_eval_pool(&data.world, &data.seen, Split::Seen, &cfg.train)?,
        build_eval_pool(&data.world, &data.unseen, Split::Unseen, &cfg.train)?,
    ))
}

/// Trains one model into `out`. The manifest is written before the first
/// step; metrics survive an aborted run.
pub fn cmd_train(cfg: &RunConfig, data: &Prepared, out: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let dir = resolve_dir(out);
    create_dir(&dir)?;
    let run_id = run_id(cfg, &data.fingerprint);
    let clock = Instant::now();
    let mut manifest = RunManifest {
        run_id: run_id.clone(),
        config: cfg.clone(),
        world_fingerprint: data.fingerprint.clone(),
        data_dir: opts.data_dir.as_ref().map(|d| d.display().to_string()),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        metadata: RunMetadata {
            started_unix_ms: unix_ms(),
            finished_unix_ms: None,
            elapsed_secs: None,
            status: "running".into(),
        },
    };
    write_manifest(&dir, &manifest)?;

    let mut writer = RunWriter {
        metrics: create(&dir.join("metrics.jsonl"))?,
        bo: if opts.dump_bo { Some(create(&dir.join("bo_trials.jsonl"))?) } else { None },
        negatives: if opts.dump_negatives { Some(create(&dir.join("negatives.jsonl"))?) } else { None },
        dir: dir.clone(),
        seed: cfg.train.seed,
    };
    let (eval_seen, eval_unseen) = eval_pools(cfg, data)?;
    let outcome = train(
        &cfg.train,
        &cfg.encoder,
        &TrainData {
            world: &data.world,
            train: &data.seen,
            eval_seen: &eval_seen,
            eval_unseen: &eval_unseen,
        },
        &mut writer,
    );

    manifest.metadata.finished_unix_ms = Some(unix_ms());
    manifest.metadata.elapsed_secs = Some(clock.elapsed().as_secs_f64());
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            manifest.metadata.status = format!("failed: {e}");
            write_manifest(&dir, &manifest)?;
            return Err(e);
        }
    };
    manifest.metadata.status = "ok".into();
    write_manifest(&dir, &manifest)?;

    let label = if opts.label.is_empty() { "run" } else { &opts.label };
    let rows: Vec<SummaryRow> = [Split::Seen, Split::Unseen]
        .iter()
        .filter_map(|&s| outcome.history.iter().rev().find(|m| m.split == s))
        .map(|m| SummaryRow::from_metrics(label, cfg.train.seed, m))
        .collect();
    write_summary(&dir.join("summary.csv"), &rows)?;
    Ok(TrainReport {
        run_dir: dir,
        run_id,
        history: outcome.history,
        params: outcome.pair.online,
    })
}

/// One named row of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub name: String,
    pub cfg: RunConfig,
}

/// The seven-row selector ablation, optionally followed by a sweep of the
/// sync period over {1, 4, 16, inf} at the full configuration.
pub fn ablation_grid(base: &RunConfig, sync_sweep: bool) -> Vec<GridEntry> {
    let with = |iters, n_fgn, sync, replacement, selector| {
        let mut c = base.clone();
        c.train.iters = iters;
        c.train.n_fgn = n_fgn;
        c.train.sync = sync;
        c.train.replacement = replacement;
        c.train.selector = selector;
        c
    };
    use ReplacementMode::{InDomain, OutDomain};
    use Selector::{Random, Tpe};
    let j = SyncPeriod::Every(4);
    let mut grid = vec![
        ("baseline", with(5, 0, j, OutDomain, Tpe)),
        ("rand-selector", with(5, 2, j, OutDomain, Random)),
        ("r3-no-delay-in", with(3, 1, SyncPeriod::Every(1), InDomain, Tpe)),
        ("r3-delay-in", with(3, 1, j, InDomain, Tpe)),
        ("r3-delay-out", with(3, 1, j, OutDomain, Tpe)),
        ("r3-b2-out", with(3, 2, j, OutDomain, Tpe)),
        ("r5-b2-out", with(5, 2, j, OutDomain, Tpe)),
    ];
    if sync_sweep {
        for (name, s) in [
            ("sync-1", SyncPeriod::Every(1)),
            ("sync-4", SyncPeriod::Every(4)),
            ("sync-16", SyncPeriod::Every(16)),
            ("sync-inf", SyncPeriod::Never),
        ] {
            grid.push((name, with(5, 2, s, OutDomain, Tpe)));
        }
    }
    grid.into_iter()
        .map(|(n, cfg)| GridEntry { name: n.to_string(), cfg })
        .collect()
}

pub const GRID_BASELINE: &str = "baseline";
pub const GRID_FULL: &str = "r5-b2-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub baseline_unseen: Option<f64>,
    pub full_unseen: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct AblateReport {
    pub rows: Vec<SummaryRow>,
    pub check: DirectionalCheck,
}

/// Runs every grid row for every seed into `out/<row>/seed_<s>`. A failing
/// sub-run is recorded in its row and the grid continues.
pub fn cmd_ablate(base: &RunConfig, data: &Prepared, seeds: &[u64], sync_sweep: bool, out: &Path) -> Result<AblateReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let dir = resolve_dir(out);
    create_dir(&dir)?;
    let grid = ablation_grid(base, sync_sweep);
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for entry in &grid {
        let first = rows.len();
        for &seed in seeds {
            let mut cfg = entry.cfg.clone();
            cfg.train.seed = seed;
            let opts = TrainOptions {
                label: entry.name.clone(),
                ..TrainOptions::default()
            };
            let run_dir = dir.join(&entry.name).join(format!("seed_{seed}"));
            match cmd_train(&cfg, data, &run_dir, &opts) {
                Ok(report) => {
                    for split in [Split::Seen, Split::Unseen] {
                        match report.last(split) {
                            Some(m) => rows.push(SummaryRow::from_metrics(&entry.name, seed, m)),
                            None => rows.push(SummaryRow::failed(
                                &entry.name,
                                seed,
                                split,
                                cfg.train.epochs,
                                &Error::Usage("no epochs ran".into()),
                            )),
                        }
                    }
                }
                Err(e) => {
                    for split in [Split::Seen, Split::Unseen] {
                        rows.push(SummaryRow::failed(&entry.name, seed, split, cfg.train.epochs, &e));
                    }
                }
            }
        }
        for split in ["seen", "unseen"] {
            let of_split: Vec<&SummaryRow> = rows[first..].iter().filter(|r| r.split == split).collect();
            means.push(SummaryRow::mean(&entry.name, split, &of_split));
        }
    }
    let unseen_mean = |name: &str| {
        means
            .iter()
            .find(|r| r.config == name && r.split == "unseen")
            .and_then(|r| r.ranking_accuracy)
    };
    let check = DirectionalCheck {
        baseline_unseen: unseen_mean(GRID_BASELINE),
        full_unseen: unseen_mean(GRID_FULL),
        passed: matches!((unseen_mean(GRID_FULL), unseen_mean(GRID_BASELINE)), (Some(f), Some(b)) if f > b),
    };
    rows.extend(means);
    write_summary(&dir.join("summary.csv"), &rows)?;
    let mut check_json = serde_json::to_vec_pretty(&check)?;
    check_json.push(b'\n');
    write_file(&dir.join("directional_check.json"), &check_json)?;
    Ok(AblateReport { rows, check })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistRow {
    pub style: String,
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjRow {
    pub episode_id: usize,
    pub style: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct EmbedReport {
    pub dist: DistanceStats,
    pub proj: Vec<ProjRow>,
}

/// Projects rows of `points` on their top two principal components. Each
/// component's sign is fixed so that its largest-magnitude loading is
/// positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![(0.0, 0.0); n];
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |k: usize| -> Vec<f64> {
        let Some(&c) = order.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (c0, c1) = (component(0), component(1));
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            (dot(&c0), dot(&c1))
        })
        .collect()
}

/// Distance statistics and a 2-D projection for one negative of each style
/// per episode (first alternate path, one shuffle, one fine-grained).
pub fn cmd_embed_analysis(
    cfg: &RunConfig,
    params: &EncoderParams,
    data: &Prepared,
    split: Split,
    limit: usize,
    out: &Path,
) -> Result<EmbedReport> {
    let episodes = match split {
        Split::Seen => &data.seen,
        Split::Unseen => &data.unseen,
    };
    let mut pool_cfg = cfg.train.clone();
    pool_cfg.n_coarse = 1;
    pool_cfg.eval_fgn = 1;
    pool_cfg.eval_limit = limit;
    let pool = build_eval_pool(&data.world, episodes, split, &pool_cfg)?;
    let dist = evaluate(params, &pool)?.dist_stats;

    let mut labels = Vec::new();
    let mut points = Vec::new();
    for (i, ep) in pool.iter().enumerate() {
        labels.push((i, "positive".to_string()));
        points.push(encode_trajectory(params, &ep.positive)?.values);
        for (p, t) in &ep.negatives {
            labels.push((i, p.as_str().to_string()));
            points.push(encode_trajectory(params, t)?.values);
        }
    }
    let proj: Vec<ProjRow> = labels
        .into_iter()
        .zip(pca_2d(&points))
        .map(|((episode_id, style), (x, y))| ProjRow { episode_id, style, x, y })
        .collect();

    let dir = resolve_dir(out);
    create_dir(&dir)?;
    let report_path = dir.join("dist_report.csv");
    let mut w = csv::Writer::from_path(&report_path)?;
    for (style, s) in &dist {
        w.serialize(DistRow {
            style: style.as_str().to_string(),
            mu: s.mu,
            sigma: s.sigma,
            n: s.n,
        })?;
    }
    w.flush().map_err(|e| Error::io(&report_path, e))?;
    let proj_path = dir.join("proj.csv");
    let mut w = csv::Writer::from_path(&proj_path)?;
    for r in &proj {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&proj_path, e))?;
    Ok(EmbedReport { dist, proj })
}

/// Parameters for embedding analysis: a checkpoint checked against the
/// configured dims, or the untrained initialization for the config's seed.
pub fn analysis_params(cfg: &RunConfig, world: &World, checkpoint: Option<&Path>) -> Result<EncoderParams> {
    let dims = cfg.encoder.dims_for(world);
    match checkpoint {
        Some(path) => Ok(checkpoint::load_expecting(path, dims)?.1),
        None => Ok(init_pair(&cfg.train, dims)?.online),
    }
}

/// Final-epoch unseen accuracy per grid row and seed, read back from rows.
pub fn unseen_by_config(rows: &[SummaryRow]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "unseen" && r.seed != "mean") {
        if let Some(a) = r.ranking_accuracy {
            out.entry(r.config.clone()).or_default().push(a);
        }
    }
    out
}
