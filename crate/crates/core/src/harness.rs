//! Dataset sweep x architecture grid x seeds, with a resumable record store
//! and the aggregations behind the loss and frequency distributions.
//!
//! A store is a directory:
//!
//! * `config.json`: the experiment configuration
//! * `records.csv`: one [`RunRecord`] per finished cell, appended as cells
//!   complete and rewritten in canonical order once the sweep is complete
//! * `train.jsonl`: one [`TrainRecord`] per finished cell
//! * `manifest.json`: expected and completed cell counts
//!
//! Every random draw is derived from the root seed and a label naming the
//! dataset (`ds/{i}`) or the cell (`ds/{i}/arch/{arch}/seed/{j}`), so records do
//! not depend on the worker schedule and adding grid points leaves existing
//! cells untouched.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{dominant_frequency, test_cross_entropy, RANDOM_BASELINE_LOSS};
use crate::datagen::{
    build_dataset, sample_labels, sample_sequence, BinarySequence, LabelAssignment, TrainDataset,
};
use crate::error::{Error, Result};
use crate::models::{Architecture, CellKind, RnnModel};
use crate::numerics::RngStream;
use crate::scalar::Scalar;
use crate::training::{fit, TrainConfig, TrainRecord};

pub const RECORDS_FILE: &str = "records.csv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One architecture setting of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub kind: CellKind,
    pub num_layers: usize,
    pub hidden_size: usize,
}

impl GridPoint {
    pub fn new(kind: CellKind, num_layers: usize, hidden_size: usize) -> Self {
        Self {
            kind,
            num_layers,
            hidden_size,
        }
    }

    pub fn arch(&self) -> Result<Architecture> {
        Architecture::new(self.kind, self.num_layers, self.hidden_size)
    }

    /// Stable name used in stream labels and train records, e.g. `lstm-l2-h200`.
    pub fn descriptor(&self) -> String {
        format!("{}-l{}-h{}", self.kind, self.num_layers, self.hidden_size)
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

impl FromStr for GridPoint {
    type Err = Error;

    /// Accepts `kind:layers:hidden` or the descriptor form `kind-l{layers}-h{hidden}`.
    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidConfig(format!("bad grid point {s:?}, expected kind:layers:hidden"));
        let parts: Vec<&str> = if s.contains(':') {
            s.split(':').collect()
        } else {
            let p: Vec<&str> = s.split('-').collect();
            match p.as_slice() {
                [k, l, h] => vec![
                    k,
                    l.strip_prefix('l').ok_or_else(bad)?,
                    h.strip_prefix('h').ok_or_else(bad)?,
                ],
                _ => return Err(bad()),
            }
        };
        match parts.as_slice() {
            [k, l, h] => {
                let gp = GridPoint::new(
                    k.parse()?,
                    l.parse().map_err(|_| bad())?,
                    h.parse().map_err(|_| bad())?,
                );
                gp.arch()?;
                Ok(gp)
            }
            _ => Err(bad()),
        }
    }
}

/// The four `(num_layers, hidden_size)` settings for each of the three cells.
pub fn full_grid() -> Vec<GridPoint> {
    let mut grid = Vec::new();
    for (layers, hidden) in [(1, 200), (2, 200), (3, 200), (2, 2000)] {
        for kind in [CellKind::Lstm, CellKind::Gru, CellKind::Elman] {
            grid.push(GridPoint::new(kind, layers, hidden));
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_datasets: usize,
    pub seq_length: usize,
    pub max_changes: usize,
    pub seeds_per_dataset: usize,
    pub grid: Vec<GridPoint>,
    pub train: TrainConfig,
    pub root_seed: u64,
    pub worker_count: usize,
    /// Use one dataset per id for every grid point, rather than one per
    /// `(id, grid point)`.
    pub shared_datasets: bool,
}

impl Default for ExperimentConfig {
    /// The full protocol: 500 datasets, N = 100, M = 5, 10 seeds, all 12 grid points.
    fn default() -> Self {
        Self {
            n_datasets: 500,
            seq_length: 100,
            max_changes: 5,
            seeds_per_dataset: 10,
            grid: full_grid(),
            train: TrainConfig::default(),
            root_seed: 0,
            worker_count: 1,
            shared_datasets: true,
        }
    }
}

/// Number of trained models above which a sweep is flagged as full scale.
const LARGE_SWEEP_MODELS: usize = 10_000;

impl ExperimentConfig {
    /// Reduced sweep: 50 datasets, 5 seeds, two-layer cells of width 32.
    pub fn desk() -> Self {
        Self {
            n_datasets: 50,
            seeds_per_dataset: 5,
            grid: [CellKind::Lstm, CellKind::Gru, CellKind::Elman]
                .into_iter()
                .map(|k| GridPoint::new(k, 2, 32))
                .collect(),
            ..Self::default()
        }
    }

    /// Checks every invariant; returns warnings for configurations that are
    /// valid but expensive.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("n_datasets", self.n_datasets),
            ("seq_length", self.seq_length),
            ("max_changes", self.max_changes),
            ("seeds_per_dataset", self.seeds_per_dataset),
            ("worker_count", self.worker_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("grid must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for gp in &self.grid {
            gp.arch()?;
            if !seen.insert(*gp) {
                return Err(Error::InvalidConfig(format!(
                    "grid point {gp} is listed twice"
                )));
            }
        }
        if !self.seq_length.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "seq_length must be even for the dominant frequency, got {}",
                self.seq_length
            )));
        }
        if self.seq_length < 2 * self.max_changes + 1 {
            return Err(Error::InvalidConfig(format!(
                "seq_length {} cannot hold {} non-overlapping label changes",
                self.seq_length, self.max_changes
            )));
        }
        self.train.validate()?;

        let mut warnings = Vec::new();
        let models = self.total_cells();
        if models >= LARGE_SWEEP_MODELS || self.grid.iter().any(|g| g.hidden_size >= 1000) {
            warnings.push(format!(
                "{models} models x {} epochs is a full-scale sweep (on the order of 30 hours on 8 GPUs); expect a very long CPU run",
                self.train.epochs
            ));
        }
        Ok(warnings)
    }

    pub fn total_cells(&self) -> usize {
        self.n_datasets * self.grid.len() * self.seeds_per_dataset
    }
}

/// A generated sequence with its dense labels and sparse train set.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInstance {
    pub labels: LabelAssignment,
    pub dataset: TrainDataset,
}

impl DatasetInstance {
    pub fn sequence(&self) -> &BinarySequence {
        self.dataset.sequence()
    }
}

fn dataset_label(cfg: &ExperimentConfig, dataset_id: usize, grid: &GridPoint) -> String {
    if cfg.shared_datasets {
        format!("ds/{dataset_id}")
    } else {
        format!("ds/{dataset_id}/arch/{grid}")
    }
}

fn cell_label(dataset_id: usize, grid: &GridPoint, seed: usize) -> String {
    format!("ds/{dataset_id}/arch/{grid}/seed/{seed}")
}

/// Generates the dataset a grid point trains on for `dataset_id`.
pub fn generate_dataset(
    cfg: &ExperimentConfig,
    dataset_id: usize,
    grid: &GridPoint,
) -> Result<DatasetInstance> {
    let mut rng = RngStream::new(cfg.root_seed).derive(&dataset_label(cfg, dataset_id, grid));
    let seq = sample_sequence(&mut rng, cfg.seq_length)?;
    let labels = sample_labels(&mut rng, cfg.seq_length, cfg.max_changes)?;
    let dataset = build_dataset(&seq, &labels);
    Ok(DatasetInstance { labels, dataset })
}

/// Writes every dataset as TSV under `out_dir`; returns the number of files.
pub fn generate_datasets(cfg: &ExperimentConfig, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut written = 0;
    for i in 0..cfg.n_datasets {
        let targets: Vec<(GridPoint, String)> = if cfg.shared_datasets {
            vec![(cfg.grid[0], format!("ds_{i:05}.tsv"))]
        } else {
            cfg.grid
                .iter()
                .map(|g| (*g, format!("ds_{i:05}_{g}.tsv")))
                .collect()
        };
        for (grid, name) in targets {
            let inst = generate_dataset(cfg, i, &grid)?;
            let mut w = BufWriter::new(File::create(out_dir.join(name))?);
            inst.dataset.write_tsv(&mut w)?;
            w.flush()?;
            written += 1;
        }
    }
    Ok(written)
}

/// Outcome of one `(dataset, grid point, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset_id: usize,
    pub seed: usize,
    pub arch: CellKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub k_max: Option<usize>,
    pub omega_dom: Option<f64>,
    /// Number of label changes in the dataset.
    pub m: usize,
    pub diverged: bool,
}

impl RunRecord {
    pub fn grid_point(&self) -> GridPoint {
        GridPoint::new(self.arch, self.num_layers, self.hidden_size)
    }

    /// Canonical sort key.
    pub fn key(&self) -> (usize, GridPoint, usize) {
        (self.dataset_id, self.grid_point(), self.seed)
    }
}

/// Trains and evaluates one cell.
pub fn run_cell<T: Scalar>(
    cfg: &ExperimentConfig,
    inst: &DatasetInstance,
    dataset_id: usize,
    grid: &GridPoint,
    seed: usize,
    with_trace: bool,
) -> Result<(RunRecord, TrainRecord)> {
    let arch = grid.arch()?;
    let mut rng = RngStream::new(cfg.root_seed).derive(&cell_label(dataset_id, grid, seed));
    let mut model = RnnModel::<T>::init(arch, &mut rng)?;
    let report = fit(&mut model, &inst.dataset, &cfg.train)?;
    let train = TrainRecord::new(dataset_id, seed, grid.descriptor(), &report, with_trace);

    let mut record = RunRecord {
        dataset_id,
        seed,
        arch: grid.kind,
        num_layers: grid.num_layers,
        hidden_size: grid.hidden_size,
        train_loss: None,
        test_loss: None,
        k_max: None,
        omega_dom: None,
        m: inst.labels.change_count(),
        diverged: true,
    };
    if report.diverged {
        return Ok((record, train));
    }
    let signal = match model.forward_signal(inst.sequence()) {
        Ok(s) => s,
        Err(Error::NumericOverflow(_)) => return Ok((record, train)),
        Err(e) => return Err(e),
    };
    let clamp = T::from_f64_lossy(cfg.train.log_clamp);
    let test = test_cross_entropy(signal.as_slice(), &inst.labels, &inst.dataset, clamp)?;
    record.diverged = false;
    record.train_loss = Some(report.final_loss.to_f64_lossy());
    record.test_loss = Some(test.value.to_f64_lossy());
    match dominant_frequency(signal.as_slice()) {
        Ok(dom) => {
            record.k_max = Some(dom.k_max);
            record.omega_dom = Some(dom.omega.to_f64_lossy());
        }
        Err(Error::DegenerateSignal) => {}
        Err(e) => return Err(e),
    }
    Ok((record, train))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue an existing store, running only the missing cells.
    pub resume: bool,
    /// Stop after this many newly executed cells.
    pub cell_limit: Option<usize>,
    /// Include the per-epoch loss trace in `train.jsonl`.
    pub with_trace: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub expected_cells: usize,
    pub completed_cells: usize,
    pub diverged_cells: usize,
    pub complete: bool,
    pub median_convention: String,
    pub shared_datasets: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub expected_cells: usize,
    pub executed_cells: usize,
    pub skipped_cells: usize,
    pub diverged_cells: usize,
    pub complete: bool,
}

struct StoreWriter {
    records: File,
    train: File,
}

impl StoreWriter {
    fn commit(&mut self, record: &RunRecord, train: &TrainRecord) -> Result<()> {
        let mut line = train.to_json_line()?;
        line.push('\n');
        self.train.write_all(line.as_bytes())?;
        self.train.flush()?;
        self.records.write_all(&record_line(record)?)?;
        self.records.flush()?;
        Ok(())
    }
}

fn record_line(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.serialize(record)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn records_header() -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset_id",
        "seed",
        "arch",
        "num_layers",
        "hidden_size",
        "train_loss",
        "test_loss",
        "k_max",
        "omega_dom",
        "m",
        "diverged",
    ])?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Drops a trailing partial line left by an interrupted append.
fn truncate_partial_line(path: &Path) -> Result<()> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    warn!(
        "dropping {} bytes of partial record from {}",
        bytes.len() - keep,
        path.display()
    );
    f.set_len(keep as u64)?;
    f.seek(SeekFrom::End(0))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let records = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<RunRecord>, _>>()?;
    Ok(records)
}

/// Records of a store directory, in canonical order.
pub fn load_store(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = read_records(&dir.join(RECORDS_FILE))?;
    records.sort_by_key(RunRecord::key);
    Ok(records)
}

pub fn read_train_records(path: &Path) -> Result<Vec<TrainRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(out)
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Rewrites both record files sorted by `(dataset, grid point, seed)`, with
/// exactly one train record per run record.
fn canonicalize(dir: &Path, records: &mut [RunRecord]) -> Result<()> {
    records.sort_by_key(RunRecord::key);
    let mut bytes = records_header()?;
    for r in records.iter() {
        bytes.extend(record_line(r)?);
    }
    write_atomically(&dir.join(RECORDS_FILE), &bytes)?;

    let train_path = dir.join(TRAIN_FILE);
    let mut by_key: BTreeMap<(usize, String, usize), TrainRecord> = BTreeMap::new();
    for t in read_train_records(&train_path)? {
        by_key.insert((t.dataset_id, t.arch.clone(), t.seed), t);
    }
    let mut out = String::new();
    for r in records.iter() {
        let key = (r.dataset_id, r.grid_point().descriptor(), r.seed);
        let t = by_key
            .get(&key)
            .ok_or_else(|| Error::DataCorruption(format!("no train record for cell {key:?}")))?;
        out.push_str(&t.to_json_line()?);
        out.push('\n');
    }
    write_atomically(&train_path, out.as_bytes())
}

fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    complete: bool,
) -> Result<Manifest> {
    let manifest = Manifest {
        version: 1,
        expected_cells: cfg.total_cells(),
        completed_cells: records.len(),
        diverged_cells: records.iter().filter(|r| r.diverged).count(),
        complete,
        median_convention: "lower-middle".into(),
        shared_datasets: cfg.shared_datasets,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomically(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_reader(File::open(
        dir.join(MANIFEST_FILE),
    )?)?)
}

/// Runs every missing cell of the sweep into the store at `dir`.
///
/// Cells are independent and run on `worker_count` threads; each finished
/// cell is appended to the store as one complete line. Once all cells exist
/// the store is rewritten in canonical order, so the final files do not
/// depend on the schedule or on interruptions.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    for w in cfg.validate()? {
        warn!("{w}");
    }
    fs::create_dir_all(dir)?;
    let config_path = dir.join(CONFIG_FILE);
    let records_path = dir.join(RECORDS_FILE);
    let train_path = dir.join(TRAIN_FILE);

    let mut existing = Vec::new();
    if config_path.exists() {
        if !opts.resume {
            return Err(Error::InvalidConfig(format!(
                "{} already holds a store; resume it or choose another directory",
                dir.display()
            )));
        }
        let stored: ExperimentConfig = serde_json::from_reader(File::open(&config_path)?)?;
        if !same_sweep(&stored, cfg) {
            return Err(Error::InvalidConfig(
                "the stored configuration differs from the requested one".into(),
            ));
        }
        if records_path.exists() {
            truncate_partial_line(&records_path)?;
            existing = read_records(&records_path)?;
        }
        if train_path.exists() {
            truncate_partial_line(&train_path)?;
        }
    } else {
        let mut text = serde_json::to_string_pretty(cfg)?;
        text.push('\n');
        write_atomically(&config_path, text.as_bytes())?;
    }
    if !records_path.exists() || fs::metadata(&records_path)?.len() == 0 {
        write_atomically(&records_path, &records_header()?)?;
    }
    if !train_path.exists() {
        File::create(&train_path)?;
    }

    let done: BTreeSet<(usize, GridPoint, usize)> = existing.iter().map(RunRecord::key).collect();
    let mut pending: Vec<(usize, GridPoint, usize)> = Vec::new();
    for i in 0..cfg.n_datasets {
        for g in &cfg.grid {
            for j in 0..cfg.seeds_per_dataset {
                if !done.contains(&(i, *g, j)) {
                    pending.push((i, *g, j));
                }
            }
        }
    }
    let skipped = cfg.total_cells() - pending.len();
    if let Some(limit) = opts.cell_limit {
        pending.truncate(limit);
    }
    info!("{} cells to run, {} already stored", pending.len(), skipped);

    // each grid point of a dataset trains on the same instance when shared
    let mut datasets: HashMap<(usize, Option<GridPoint>), DatasetInstance> = HashMap::new();
    for &(i, g, _) in &pending {
        let key = (i, (!cfg.shared_datasets).then_some(g));
        if let std::collections::hash_map::Entry::Vacant(e) = datasets.entry(key) {
            e.insert(generate_dataset(cfg, i, &g)?);
        }
    }

    let writer = Mutex::new(StoreWriter {
        records: OpenOptions::new().append(true).open(&records_path)?,
        train: OpenOptions::new().append(true).open(&train_path)?,
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start workers: {e}")))?;
    let results: Vec<Result<()>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&(i, g, j)| {
                let inst = &datasets[&(i, (!cfg.shared_datasets).then_some(g))];
                let (record, train) = run_cell::<T>(cfg, inst, i, &g, j, opts.with_trace)?;
                writer
                    .lock()
                    .expect("store writer poisoned")
                    .commit(&record, &train)
            })
            .collect()
    });
    drop(writer);
    let executed = results.iter().filter(|r| r.is_ok()).count();
    let first_err = results.into_iter().find_map(|r| r.err());

    let mut records = read_records(&records_path)?;
    let complete = records.len() == cfg.total_cells();
    if complete {
        canonicalize(dir, &mut records)?;
    }
    let manifest = write_manifest(dir, cfg, &records, complete)?;
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(RunSummary {
        expected_cells: manifest.expected_cells,
        executed_cells: executed,
        skipped_cells: skipped,
        diverged_cells: manifest.diverged_cells,
        complete,
    })
}

/// Everything except the worker count must match for a resume.
fn same_sweep(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    ExperimentConfig {
        worker_count: 1,
        ..a.clone()
    } == ExperimentConfig {
        worker_count: 1,
        ..b.clone()
    }
}

/// Lower-middle median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Per-dataset medians over the non-diverged seeds of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset_id: usize,
    pub arch: CellKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub m: usize,
    pub seeds: usize,
    pub valid_seeds: usize,
    pub median_train_loss: Option<f64>,
    pub median_test_loss: Option<f64>,
    pub median_omega_dom: Option<f64>,
    /// Every seed diverged; the row is excluded from histograms.
    pub flagged: bool,
}

impl AggregateRow {
    pub fn grid_point(&self) -> GridPoint {
        GridPoint::new(self.arch, self.num_layers, self.hidden_size)
    }
}

/// One row per `(grid point, dataset)`, ordered by grid point then dataset.
pub fn aggregate_medians(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("record store is empty".into()));
    }
    let mut cells: BTreeMap<(GridPoint, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.grid_point(), r.dataset_id))
            .or_default()
            .push(r);
    }
    let rows = cells
        .into_iter()
        .map(|((g, dataset_id), runs)| {
            let valid: Vec<&&RunRecord> = runs.iter().filter(|r| !r.diverged).collect();
            let collect = |f: fn(&RunRecord) -> Option<f64>| -> Vec<f64> {
                valid.iter().filter_map(|r| f(r)).collect()
            };
            AggregateRow {
                dataset_id,
                arch: g.kind,
                num_layers: g.num_layers,
                hidden_size: g.hidden_size,
                m: runs[0].m,
                seeds: runs.len(),
                valid_seeds: valid.len(),
                median_train_loss: lower_median(&collect(|r| r.train_loss)),
                median_test_loss: lower_median(&collect(|r| r.test_loss)),
                median_omega_dom: lower_median(&collect(|r| r.omega_dom)),
                flagged: valid.is_empty(),
            }
        })
        .collect();
    Ok(rows)
}

/// Divergence and degenerate-signal counts per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub arch: CellKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub runs: usize,
    pub diverged: usize,
    pub degenerate_signals: usize,
}

pub fn divergence_diagnostics(records: &[RunRecord]) -> Vec<DiagnosticRow> {
    let mut by_grid: BTreeMap<GridPoint, DiagnosticRow> = BTreeMap::new();
    for r in records {
        let g = r.grid_point();
        let row = by_grid.entry(g).or_insert(DiagnosticRow {
            arch: g.kind,
            num_layers: g.num_layers,
            hidden_size: g.hidden_size,
            runs: 0,
            diverged: 0,
            degenerate_signals: 0,
        });
        row.runs += 1;
        row.diverged += usize::from(r.diverged);
        row.degenerate_signals += usize::from(!r.diverged && r.omega_dom.is_none());
    }
    by_grid.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricField {
    TestLoss,
    OmegaDom,
}

impl MetricField {
    fn of(self, row: &AggregateRow) -> Option<f64> {
        match self {
            MetricField::TestLoss => row.median_test_loss,
            MetricField::OmegaDom => row.median_omega_dom,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricField::TestLoss => "test_loss",
            MetricField::OmegaDom => "omega_dom",
        }
    }
}

impl FromStr for MetricField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_loss" | "test-loss" => Ok(MetricField::TestLoss),
            "omega_dom" | "omega-dom" | "omega" => Ok(MetricField::OmegaDom),
            _ => Err(Error::InvalidConfig(format!("unknown field {s:?}"))),
        }
    }
}

/// Equal-width bin counts of one median metric, per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub field: MetricField,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: BTreeMap<GridPoint, Vec<usize>>,
}

/// Bins the chosen median over the non-flagged rows that have a value.
///
/// Loss bins are `[a, b)` over `[0, max(largest loss, ln 2)]`, the last bin
/// closed. Frequency bins are `(a, b]` over `(0, pi]`.
pub fn histogram(rows: &[AggregateRow], field: MetricField, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let values: Vec<(GridPoint, f64)> = rows
        .iter()
        .filter(|r| !r.flagged)
        .filter_map(|r| field.of(r).map(|v| (r.grid_point(), v)))
        .collect();
    let upper = match field {
        MetricField::TestLoss => values
            .iter()
            .map(|(_, v)| *v)
            .fold(RANDOM_BASELINE_LOSS, f64::max),
        MetricField::OmegaDom => PI,
    };
    let width = upper / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    edges[bins] = upper;

    let mut counts: BTreeMap<GridPoint, Vec<usize>> = BTreeMap::new();
    for r in rows {
        counts
            .entry(r.grid_point())
            .or_insert_with(|| vec![0; bins]);
    }
    for (g, v) in values {
        let idx = match field {
            MetricField::TestLoss => (v / width).floor(),
            MetricField::OmegaDom => (v / width).ceil() - 1.0,
        };
        let idx = (idx.max(0.0) as usize).min(bins - 1);
        counts.get_mut(&g).expect("seeded above")[idx] += 1;
    }
    Ok(Histogram {
        field,
        edges,
        counts,
    })
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "arch",
            "num_layers",
            "hidden_size",
            "field",
            "bin",
            "lower",
            "upper",
            "count",
        ])?;
        for (g, counts) in &self.counts {
            for (i, c) in counts.iter().enumerate() {
                out.write_record([
                    g.kind.to_string(),
                    g.num_layers.to_string(),
                    g.hidden_size.to_string(),
                    self.field.name().to_string(),
                    i.to_string(),
                    self.edges[i].to_string(),
                    self.edges[i + 1].to_string(),
                    c.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct ScatterRow {
    arch: CellKind,
    num_layers: usize,
    hidden_size: usize,
    m: usize,
    rank: usize,
    dataset_id: usize,
    seed: usize,
    train_loss: Option<f64>,
    test_loss: Option<f64>,
    omega_dom: Option<f64>,
    k_max: Option<usize>,
    diverged: bool,
    median_train_loss: Option<f64>,
    median_test_loss: Option<f64>,
    median_omega_dom: Option<f64>,
    baseline: f64,
}

/// Every raw seed value, per grid point, with datasets grouped by label-change
/// count and sorted within each group by the chosen median (ascending,
/// missing medians last, ties by dataset id).
pub fn scatter_export<W: Write>(records: &[RunRecord], sort_by: MetricField, w: W) -> Result<()> {
    let rows = aggregate_medians(records)?;
    let mut by_cell: HashMap<(GridPoint, usize), Vec<&RunRecord>> = HashMap::new();
    for r in records {
        by_cell
            .entry((r.grid_point(), r.dataset_id))
            .or_default()
            .push(r);
    }
    let mut by_grid: BTreeMap<GridPoint, Vec<&AggregateRow>> = BTreeMap::new();
    for r in &rows {
        by_grid.entry(r.grid_point()).or_default().push(r);
    }

    let mut out = csv::Writer::from_writer(w);
    for (g, mut datasets) in by_grid {
        datasets.sort_by(|a, b| {
            let ka = sort_by.of(a);
            let kb = sort_by.of(b);
            a.m.cmp(&b.m)
                .then_with(|| match (ka, kb) {
                    (Some(x), Some(y)) => x.total_cmp(&y),
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (None, None) => std::cmp::Ordering::Equal,
                })
                .then(a.dataset_id.cmp(&b.dataset_id))
        });
        for (rank, agg) in datasets.into_iter().enumerate() {
            let mut seeds = by_cell[&(g, agg.dataset_id)].clone();
            seeds.sort_by_key(|r| r.seed);
            for r in seeds {
                out.serialize(ScatterRow {
                    arch: g.kind,
                    num_layers: g.num_layers,
                    hidden_size: g.hidden_size,
                    m: agg.m,
                    rank,
                    dataset_id: agg.dataset_id,
                    seed: r.seed,
                    train_loss: r.train_loss,
                    test_loss: r.test_loss,
                    omega_dom: r.omega_dom,
                    k_max: r.k_max,
                    diverged: r.diverged,
                    median_train_loss: agg.median_train_loss,
                    median_test_loss: agg.median_test_loss,
                    median_omega_dom: agg.median_omega_dom,
                    baseline: RANDOM_BASELINE_LOSS,
                })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Paths of the files a store directory holds.
pub fn store_paths(dir: &Path) -> [PathBuf; 4] {
    [CONFIG_FILE, RECORDS_FILE, TRAIN_FILE, MANIFEST_FILE].map(|f| dir.join(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        dataset_id: usize,
        kind: CellKind,
        seed: usize,
        m: usize,
        test: f64,
        omega: f64,
    ) -> RunRecord {
        RunRecord {
            dataset_id,
            seed,
            arch: kind,
            num_layers: 2,
            hidden_size: 4,
            train_loss: Some(0.01 * seed as f64),
            test_loss: Some(test),
            k_max: Some(1),
            omega_dom: Some(omega),
            m,
            diverged: false,
        }
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            n_datasets: 2,
            seq_length: 12,
            max_changes: 2,
            seeds_per_dataset: 2,
            grid: CellKind::ALL
                .iter()
                .map(|&k| GridPoint::new(k, 1, 3))
                .collect(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            root_seed: 42,
            worker_count: 2,
            shared_datasets: true,
        }
    }

    #[test]
    fn grid_point_parsing() {
        let g: GridPoint = "lstm:2:200".parse().unwrap();
        assert_eq!(g, GridPoint::new(CellKind::Lstm, 2, 200));
        assert_eq!(g.descriptor(), "lstm-l2-h200");
        assert_eq!(g.descriptor().parse::<GridPoint>().unwrap(), g);
        assert!("lstm:0:3".parse::<GridPoint>().is_err());
        assert!("cnn:1:3".parse::<GridPoint>().is_err());
        assert!("lstm-2-3".parse::<GridPoint>().is_err());
    }

    #[test]
    fn full_scale_is_valid_but_warned() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.grid.len(), 12);
        assert_eq!(cfg.total_cells(), 500 * 12 * 10);
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("30 hours"));
        assert!(ExperimentConfig::desk().validate().unwrap().is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = tiny_config();
        for bad in [
            ExperimentConfig {
                n_datasets: 0,
                ..base.clone()
            },
            ExperimentConfig {
                grid: vec![],
                ..base.clone()
            },
            ExperimentConfig {
                seq_length: 11,
                ..base.clone()
            },
            ExperimentConfig {
                seq_length: 4,
                ..base.clone()
            },
            ExperimentConfig {
                worker_count: 0,
                ..base.clone()
            },
            ExperimentConfig {
                grid: vec![base.grid[0], base.grid[0]],
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_json_uses_defaults_for_missing_fields() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"n_datasets": 3, "train": {"epochs": 7}}"#).unwrap();
        assert_eq!(cfg.n_datasets, 3);
        assert_eq!(cfg.seq_length, 100);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn datasets_are_shared_across_grid_points() {
        let cfg = tiny_config();
        let a = generate_dataset(&cfg, 1, &cfg.grid[0]).unwrap();
        let b = generate_dataset(&cfg, 1, &cfg.grid[2]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(&cfg, 0, &cfg.grid[0]).unwrap());

        let unshared = ExperimentConfig {
            shared_datasets: false,
            ..cfg
        };
        let c = generate_dataset(&unshared, 1, &unshared.grid[0]).unwrap();
        let d = generate_dataset(&unshared, 1, &unshared.grid[2]).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn medians_use_the_lower_middle() {
        assert_eq!(lower_median(&[0.9, 0.1, 0.5]), Some(0.5));
        let ten: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        assert_eq!(lower_median(&ten), Some(5.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn aggregate_is_seed_permutation_invariant_and_skips_diverged() {
        let mut records = vec![
            rec(0, CellKind::Lstm, 0, 1, 0.9, 0.1),
            rec(0, CellKind::Lstm, 1, 1, 0.2, 0.5),
            rec(0, CellKind::Lstm, 2, 1, 0.5, 0.9),
        ];
        let mut diverged = rec(0, CellKind::Lstm, 3, 1, 0.0, 0.0);
        diverged.diverged = true;
        records.push(diverged);
        let rows = aggregate_medians(&records).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].median_omega_dom, Some(0.5));
        assert_eq!(rows[0].median_test_loss, Some(0.5));
        assert_eq!(rows[0].valid_seeds, 3);
        records.reverse();
        assert_eq!(aggregate_medians(&records).unwrap(), rows);
    }

    #[test]
    fn all_diverged_cells_are_flagged_and_not_binned() {
        let mut a = rec(0, CellKind::Gru, 0, 2, 0.3, 1.0);
        a.diverged = true;
        let b = rec(1, CellKind::Gru, 0, 2, 0.3, 1.0);
        let rows = aggregate_medians(&[a, b]).unwrap();
        assert!(rows[0].flagged && !rows[1].flagged);
        let h = histogram(&rows, MetricField::OmegaDom, 4).unwrap();
        assert_eq!(h.counts.values().flatten().sum::<usize>(), 1);
        assert!(aggregate_medians(&[]).is_err());
    }

    #[test]
    fn histogram_contracts() {
        let rows: Vec<AggregateRow> = (0..5)
            .map(|i| {
                aggregate_medians(&[rec(i, CellKind::Elman, 0, 1, 1.5, 2.0)])
                    .unwrap()
                    .remove(0)
            })
            .collect();
        let h = histogram(&rows, MetricField::OmegaDom, 8).unwrap();
        assert_eq!(*h.edges.last().unwrap(), PI);
        assert_eq!(h.edges.len(), 9);
        let counts = &h.counts[&GridPoint::new(CellKind::Elman, 2, 4)];
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(counts.iter().sum::<usize>(), 5);

        let loss = histogram(&rows, MetricField::TestLoss, 3).unwrap();
        assert_eq!(*loss.edges.last().unwrap(), 1.5);
        assert_eq!(loss.counts.values().next().unwrap(), &vec![0, 0, 5]);
        assert!(histogram(&rows, MetricField::TestLoss, 1).is_err());

        // omega exactly at pi lands in the last bin, tiny omega in the first
        let edge_rows = vec![
            aggregate_medians(&[rec(0, CellKind::Lstm, 0, 1, 0.1, PI)])
                .unwrap()
                .remove(0),
            aggregate_medians(&[rec(1, CellKind::Lstm, 0, 1, 0.1, 1e-9)])
                .unwrap()
                .remove(0),
        ];
        let h = histogram(&edge_rows, MetricField::OmegaDom, 4).unwrap();
        assert_eq!(h.counts.values().next().unwrap(), &vec![1, 0, 0, 1]);
        // losses below the baseline still span [0, ln 2]
        let h = histogram(&edge_rows, MetricField::TestLoss, 2).unwrap();
        assert_eq!(*h.edges.last().unwrap(), RANDOM_BASELINE_LOSS);
    }

    #[test]
    fn scatter_groups_by_change_count_then_sorts_by_median() {
        let records = vec![
            rec(0, CellKind::Lstm, 0, 3, 0.1, 0.3),
            rec(1, CellKind::Lstm, 0, 1, 0.9, 0.3),
            rec(2, CellKind::Lstm, 0, 1, 0.4, 0.3),
            rec(2, CellKind::Lstm, 1, 1, 0.6, 0.3),
        ];
        let mut buf = Vec::new();
        scatter_export(&records, MetricField::TestLoss, &mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        let headers = rdr.headers().unwrap().clone();
        let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        let ids: Vec<&str> = rows.iter().map(|r| &r[col("dataset_id")]).collect();
        assert_eq!(ids, vec!["2", "2", "1", "0"]);
        let ms: Vec<&str> = rows.iter().map(|r| &r[col("m")]).collect();
        assert_eq!(ms, vec!["1", "1", "1", "3"]);
        assert!(rows
            .iter()
            .all(|r| r[col("baseline")].parse::<f64>().unwrap() == RANDOM_BASELINE_LOSS));
        assert_eq!(&rows[0][col("seed")], "0");
        assert_eq!(&rows[1][col("seed")], "1");
    }

    #[test]
    fn smoke_run_counts_and_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let summary = run_experiment::<f64>(&cfg, dir.path(), &RunOptions::default()).unwrap();
        assert!(summary.complete);
        assert_eq!(summary.executed_cells, 12);
        let records = load_store(dir.path()).unwrap();
        assert_eq!(records.len(), 12);
        let rows = aggregate_medians(&records).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        let manifest = read_manifest(dir.path()).unwrap();
        assert!(manifest.complete);
        assert_eq!(manifest.completed_cells, 12);
        assert_eq!(
            read_train_records(&dir.path().join(TRAIN_FILE))
                .unwrap()
                .len(),
            12
        );

        // a second plain run refuses to clobber the store
        assert!(run_experiment::<f64>(&cfg, dir.path(), &RunOptions::default()).is_err());
        // resuming with a different sweep is refused
        let other = ExperimentConfig {
            root_seed: 1,
            ..cfg.clone()
        };
        let resume = RunOptions {
            resume: true,
            ..RunOptions::default()
        };
        assert!(run_experiment::<f64>(&other, dir.path(), &resume).is_err());
        // resuming a complete store runs nothing
        let again = run_experiment::<f64>(&cfg, dir.path(), &resume).unwrap();
        assert_eq!(again.executed_cells, 0);
        assert_eq!(again.skipped_cells, 12);
    }

    #[test]
    fn generate_writes_readable_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        assert_eq!(generate_datasets(&cfg, dir.path()).unwrap(), 2);
        let f = BufReader::new(File::open(dir.path().join("ds_00001.tsv")).unwrap());
        let d = TrainDataset::read_tsv(f).unwrap();
        assert_eq!(d, generate_dataset(&cfg, 1, &cfg.grid[0]).unwrap().dataset);
    }
}
