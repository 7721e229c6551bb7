//! End-to-end runs over an output directory: dataset generation, training
//! across all sessions, re-evaluation from checkpoints, reporting and mesh
//! export.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.resolved.json
//! dataset/                 manifest.json + session_<t>/ files
//! checkpoints/session_<t>.crec
//! reports/session_<t>.json
//! bank.json
//! buffer/
//! iou_matrix.csv
//! metrics.json, summary.txt
//! meshes/<object>.obj
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::iso::{extract_mesh, DecoderField, TriMesh};
use crate::metrics::{summarize, IouMatrix, MetricsSummary};
use crate::priors::PriorBank;
use crate::replay::{BufferSize, BufferSpec, ReplayBuffer};
use crate::shapes::{
    build_sessions, create_dir, export_dataset, import_dataset, SessionDataset, ShapeClass,
};
use crate::trainer::{evaluate_cumulative, run_session, SessionReport, TrainState};

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint(&self, t: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("session_{t}.crec"))
    }

    pub fn session_report(&self, t: usize) -> PathBuf {
        self.root.join("reports").join(format!("session_{t}.json"))
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.json")
    }

    pub fn buffer(&self) -> PathBuf {
        self.root.join("buffer")
    }

    pub fn iou_matrix(&self) -> PathBuf {
        self.root.join("iou_matrix.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }

    pub fn mesh(&self, object: &str) -> PathBuf {
        self.root.join("meshes").join(format!("{object}.obj"))
    }

    /// Indices of the sessions with a checkpoint, ascending.
    pub fn checkpoints(&self, sessions: usize) -> Vec<usize> {
        (0..sessions)
            .filter(|&t| self.checkpoint(t).is_file())
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

pub fn write_resolved_config(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let mut text = cfg.to_json()?;
    text.push('\n');
    write_file(&out.resolved_config(), text.as_bytes())
}

pub fn buffer_spec(cfg: &RunConfig) -> BufferSpec {
    BufferSpec {
        strategy: cfg.replay.strategy,
        k: cfg.replay.k_maps,
        width: cfg.data.image_size,
        height: cfg.data.image_size,
        res: cfg.data.res,
        objects_per_class: cfg.replay.objects_per_class,
    }
}

/// Generates the dataset and writes it under `dataset/`.
pub fn generate_data(cfg: &RunConfig, out: &OutputDir) -> Result<Vec<SessionDataset>> {
    let sessions = build_sessions(&cfg.data, cfg.seed)?;
    export_dataset(&out.dataset(), &sessions, cfg.seed)?;
    Ok(sessions)
}

/// Reads `dataset/` when present, otherwise generates it in memory. A stored
/// dataset must match the config's seed and layout.
pub fn load_dataset(cfg: &RunConfig, out: &OutputDir) -> Result<Vec<SessionDataset>> {
    let dir = out.dataset();
    if !dir.join("manifest.json").is_file() {
        return build_sessions(&cfg.data, cfg.seed);
    }
    let manifest: crate::shapes::Manifest = read_json(&dir.join("manifest.json"))?;
    let plan = crate::shapes::plan_sessions(&cfg.data, cfg.seed)?;
    let stored: Vec<Vec<ShapeClass>> = manifest
        .sessions
        .iter()
        .map(|s| s.classes.clone())
        .collect();
    if manifest.seed != cfg.seed
        || manifest.res != cfg.data.res
        || manifest.image_size != cfg.data.image_size
        || manifest.points_per_object != cfg.data.points_per_object
        || stored != plan
    {
        return Err(Error::config(
            "data",
            format!(
                "{} was generated with a different seed or data layout",
                dir.display()
            ),
        ));
    }
    import_dataset(&dir)
}

pub struct StreamOutcome {
    pub matrix: IouMatrix,
    pub reports: Vec<SessionReport>,
    pub state: TrainState,
    pub bank: PriorBank,
    pub buffer: ReplayBuffer,
}

/// Trains through every session, filling one IOU-matrix row per session.
/// With an output directory, checkpoints, session reports, the bank, the
/// buffer and the matrix are written as they become available.
pub fn train_stream(
    cfg: &RunConfig,
    sessions: &[SessionDataset],
    out: Option<&OutputDir>,
) -> Result<StreamOutcome> {
    let mut state = TrainState::new(cfg)?;
    let mut bank = PriorBank::new();
    let mut buffer = ReplayBuffer::new(buffer_spec(cfg))?;
    let mut matrix = IouMatrix::new(sessions.len());
    let mut reports = Vec::new();
    for t in 0..sessions.len() {
        let (report, eval, _) =
            run_session(&mut state, &sessions[..=t], &mut bank, &mut buffer, cfg)?;
        matrix.update(t, &eval.matrix_row())?;
        log::info!(
            "session {t}: loss {:.4}, mean IOU {:.4}",
            report.final_loss,
            matrix
                .row(t)
                .map(|r| r.iter().sum::<f64>() / r.len() as f64)
                .unwrap_or(f64::NAN)
        );
        if let Some(out) = out {
            write_file(&out.checkpoint(t), &state.to_checkpoint()?)?;
            write_json(&out.session_report(t), &report)?;
            bank.save(&out.bank())?;
            buffer.save(&out.buffer())?;
            write_file(&out.iou_matrix(), matrix.to_csv().as_bytes())?;
        }
        reports.push(report);
    }
    Ok(StreamOutcome {
        matrix,
        reports,
        state,
        bank,
        buffer,
    })
}

/// Rebuilds the IOU matrix from the stored checkpoints and rewrites
/// `iou_matrix.csv`.
pub fn evaluate_checkpoints(
    cfg: &RunConfig,
    sessions: &[SessionDataset],
    out: &OutputDir,
) -> Result<IouMatrix> {
    let present = out.checkpoints(sessions.len());
    if present.is_empty() {
        return Err(Error::contract(format!(
            "no checkpoints under {}",
            out.root().display()
        )));
    }
    let mut matrix = IouMatrix::new(sessions.len());
    for t in present {
        let state = TrainState::from_checkpoint(&read_file(&out.checkpoint(t))?)?;
        if state.session != t + 1 {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "session_{t} holds the state after session {}",
                    state.session
                ),
            ));
        }
        let eval = evaluate_cumulative(&state.model, &sessions[..=t], &cfg.eval, cfg.seed)?;
        matrix.update(t, &eval.matrix_row())?;
    }
    write_file(&out.iou_matrix(), matrix.to_csv().as_bytes())?;
    Ok(matrix)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferAccounting {
    pub n_b: u64,
    pub objects: usize,
    pub total_units: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub sessions: usize,
    #[serde(flatten)]
    pub summary: MetricsSummary,
    pub bank_size: usize,
    pub buffer: BufferAccounting,
}

/// Writes `metrics.json` and `summary.txt` from the persisted matrix, bank,
/// buffer and session reports. Regenerating from the same files gives the
/// same bytes.
pub fn write_report(cfg: &RunConfig, out: &OutputDir) -> Result<RunMetrics> {
    let t = cfg.session_count();
    let csv = String::from_utf8(read_file(&out.iou_matrix())?)
        .map_err(|_| Error::format("iou csv", "not UTF-8"))?;
    let matrix = IouMatrix::from_csv(&csv, t)?;
    let summary = summarize(&matrix)?;
    let bank = PriorBank::load(&out.bank())?;
    let buffer = ReplayBuffer::load(&out.buffer())?;
    let size: BufferSize = buffer.size();
    if size.total != size.n_b * size.objects as u64 {
        return Err(Error::contract(format!(
            "buffer holds {} units for {} objects at {} each",
            size.total, size.objects, size.n_b
        )));
    }
    let reports = (0..t)
        .filter(|&i| out.session_report(i).is_file())
        .map(|i| read_json::<SessionReport>(&out.session_report(i)))
        .collect::<Result<Vec<_>>>()?;
    let metrics = RunMetrics {
        sessions: t,
        summary,
        bank_size: bank.len(),
        buffer: BufferAccounting {
            n_b: size.n_b,
            objects: size.objects,
            total_units: size.total,
        },
    };
    write_json(&out.metrics(), &metrics)?;
    write_file(
        &out.summary(),
        summary_table(&matrix, &reports, &metrics).as_bytes(),
    )?;
    Ok(metrics)
}

/// Plain-text table: one row per class with its IOU after each session,
/// then the per-session rows of the matrix and the headline metrics.
pub fn summary_table(
    matrix: &IouMatrix,
    reports: &[SessionReport],
    metrics: &RunMetrics,
) -> String {
    let mut classes: BTreeMap<ShapeClass, Vec<Option<f64>>> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        for (c, v) in &r.per_class_iou {
            let row = classes
                .entry(*c)
                .or_insert_with(|| vec![None; reports.len()]);
            row[i] = Some(*v);
        }
    }
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "class");
    for r in reports {
        let _ = write!(s, " {:>8}", format!("after s{}", r.session));
    }
    s.push('\n');
    for (c, row) in &classes {
        let _ = write!(s, "{:<12}", c.name());
        for v in row {
            match v {
                Some(v) => {
                    let _ = write!(s, " {v:>8.4}");
                }
                None => {
                    let _ = write!(s, " {:>8}", "-");
                }
            }
        }
        s.push('\n');
    }
    s.push('\n');
    let _ = writeln!(
        s,
        "mean IOU per session (row = trained through, column = evaluated)"
    );
    for i in 0..matrix.sessions() {
        if let Some(row) = matrix.row(i) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "  s{i}: {}", cells.join(" "));
        }
    }
    s.push('\n');
    let _ = writeln!(s, "i_iou: {:.6}", metrics.summary.i_iou);
    match metrics.summary.bwt {
        Some(b) => {
            let _ = writeln!(s, "bwt: {b:.6}");
        }
        None => {
            let _ = writeln!(s, "bwt: undefined (single session)");
        }
    }
    let _ = writeln!(s, "bank: {} priors", metrics.bank_size);
    let b = &metrics.buffer;
    let _ = writeln!(
        s,
        "buffer: {} units = {} per object x {} objects",
        b.total_units, b.n_b, b.objects
    );
    s
}

/// Reconstructs the named test objects with the latest checkpoint and writes
/// one OBJ per object.
pub fn export_meshes(
    cfg: &RunConfig,
    sessions: &[SessionDataset],
    out: &OutputDir,
    objects: &[String],
) -> Result<Vec<(PathBuf, TriMesh)>> {
    let last = *out
        .checkpoints(sessions.len())
        .last()
        .ok_or_else(|| Error::contract(format!("no checkpoints under {}", out.root().display())))?;
    let state = TrainState::from_checkpoint(&read_file(&out.checkpoint(last))?)?;
    let mut written = Vec::new();
    for name in objects {
        let inst = sessions
            .iter()
            .flat_map(SessionDataset::instances)
            .find(|i| &i.id == name)
            .ok_or_else(|| Error::config("object", format!("no object named {name:?}")))?;
        let (e, _) = state.model.encode_view(&inst.view)?;
        let q = state.model.posterior(&e, &inst.sample)?;
        let field = DecoderField {
            model: &state.model,
            feature: e,
            z: q.mu,
        };
        let (mesh, evals) = extract_mesh(&field, cfg.mesh.r0, cfg.mesh.r_final, cfg.mesh.tau)?;
        log::info!(
            "{name}: {} triangles from {evals} field evaluations",
            mesh.triangles.len()
        );
        let path = out.mesh(name);
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        mesh.export_obj(&path)?;
        written.push((path, mesh));
    }
    Ok(written)
}
