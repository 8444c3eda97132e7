//! On-disk formats.
//!
//! Bit-exact intermediates (trajectories, Lyapunov sets, observation sets)
//! go into a little-endian binary container:
//!
//! ```text
//! magic "CLVB" | version u16 | kind u8 | kind-specific header | f64 payload
//! ```
//!
//! with kind 1 = trajectory, 2 = Lyapunov set, 3 = observation set. Matrices
//! are stored column-major, states sample-major, all values 64-bit LE.
//!
//! Result tables are CSV with a single header line plus a JSON sidecar
//! (`<table>.meta.json`) carrying the experiment id, canonical config hash,
//! master seed, code version, column list, and units. Floats are written
//! with Rust's shortest round-trip formatting so identical runs produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use clv_core::enkf::{ObservationModel, ObservationSet};
use clv_core::ginelli::{GinelliSchedule, LyapunovSet};
use clv_core::models::{ModelKind, ModelSpec, Trajectory, TrajectoryProvenance};

const MAGIC: &[u8; 4] = b"CLVB";
const VERSION: u16 = 1;

const KIND_TRAJECTORY: u8 = 1;
const KIND_LYAPUNOV: u8 = 2;
const KIND_OBSERVATIONS: u8 = 3;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad container: {0}")]
    Format(String),
    #[error("invalid payload: {0}")]
    Invalid(String),
}

fn format_err<E: std::fmt::Display>(e: E) -> IoError {
    IoError::Invalid(e.to_string())
}

// ---------------------------------------------------------------------------
// primitive readers/writers

fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<(), IoError> {
    Ok(w.write_all(&[v])?)
}

fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], IoError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, IoError> {
    Ok(read_exact::<_, 1>(r)?[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, IoError> {
    Ok(u16::from_le_bytes(read_exact(r)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IoError> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IoError> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, IoError> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize, IoError> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| IoError::Format(format!("{what} count {v} overflows usize")))
}

// ---------------------------------------------------------------------------
// headers

fn write_header<W: Write>(w: &mut W, kind: u8) -> Result<(), IoError> {
    w.write_all(MAGIC)?;
    write_u16(w, VERSION)?;
    write_u8(w, kind)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, expected_kind: u8) -> Result<(), IoError> {
    let magic = read_exact::<_, 4>(r)?;
    if &magic != MAGIC {
        return Err(IoError::Format("missing CLVB magic".into()));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(IoError::Format(format!("unsupported version {version}")));
    }
    let kind = read_u8(r)?;
    if kind != expected_kind {
        return Err(IoError::Format(format!(
            "container kind {kind}, expected {expected_kind}"
        )));
    }
    Ok(())
}

fn write_model<W: Write>(w: &mut W, model: &ModelSpec) -> Result<(), IoError> {
    let kind = match model.kind() {
        ModelKind::Lorenz63 => 1u8,
        ModelKind::Lorenz96 => 2u8,
    };
    write_u8(w, kind)?;
    write_u32(w, model.dim() as u32)?;
    write_u32(w, model.params().len() as u32)?;
    for &p in model.params() {
        write_f64(w, p)?;
    }
    Ok(())
}

fn read_model<R: Read>(r: &mut R) -> Result<ModelSpec, IoError> {
    let kind = read_u8(r)?;
    let dim = read_u32(r)? as usize;
    let n_params = read_u32(r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_f64(r)?);
    }
    match (kind, params.as_slice()) {
        (1, [sigma, rho, beta]) => {
            if dim != 3 {
                return Err(IoError::Format(format!("lorenz63 with dimension {dim}")));
            }
            ModelSpec::lorenz63(*sigma, *rho, *beta).map_err(format_err)
        }
        (2, [forcing]) => ModelSpec::lorenz96(dim, *forcing).map_err(format_err),
        _ => Err(IoError::Format(format!(
            "unknown model kind {kind} / parameter count {n_params}"
        ))),
    }
}

fn provenance_code(p: TrajectoryProvenance) -> u8 {
    match p {
        TrajectoryProvenance::Integrated => 0,
        TrajectoryProvenance::Perturbed => 1,
        TrajectoryProvenance::AnalysisMean => 2,
    }
}

fn provenance_from(code: u8) -> Result<TrajectoryProvenance, IoError> {
    match code {
        0 => Ok(TrajectoryProvenance::Integrated),
        1 => Ok(TrajectoryProvenance::Perturbed),
        2 => Ok(TrajectoryProvenance::AnalysisMean),
        other => Err(IoError::Format(format!("unknown provenance code {other}"))),
    }
}

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<(), IoError> {
    for v in m.iter() {
        write_f64(w, *v)?; // column-major, nalgebra's native order
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>, IoError> {
    let mut data = vec![0.0f64; rows * cols];
    for v in data.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(DMatrix::from_vec(rows, cols, data))
}

// ---------------------------------------------------------------------------
// trajectory

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_TRAJECTORY)?;
    write_model(&mut w, &traj.model)?;
    write_f64(&mut w, traj.t0)?;
    write_f64(&mut w, traj.solver_step)?;
    write_f64(&mut w, traj.save_interval)?;
    write_u8(&mut w, provenance_code(traj.provenance))?;
    write_u64(&mut w, traj.len() as u64)?;
    for state in traj.states() {
        for &v in state.iter() {
            write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, KIND_TRAJECTORY)?;
    let model = read_model(&mut r)?;
    let t0 = read_f64(&mut r)?;
    let solver_step = read_f64(&mut r)?;
    let save_interval = read_f64(&mut r)?;
    let provenance = provenance_from(read_u8(&mut r)?)?;
    let n = read_len(&mut r, "sample")?;
    let d = model.dim();
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = DVector::zeros(d);
        for i in 0..d {
            s[i] = read_f64(&mut r)?;
        }
        states.push(s);
    }
    Trajectory::new(model, t0, solver_step, save_interval, provenance, states)
        .map_err(format_err)
}

// ---------------------------------------------------------------------------
// Lyapunov set

pub fn write_lyapunov_set(path: &Path, lyap: &LyapunovSet) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_LYAPUNOV)?;
    let s = &lyap.schedule;
    write_u32(&mut w, s.qr_interval as u32)?;
    write_u64(&mut w, s.n_forward as u64)?;
    write_u64(&mut w, s.n_sampling as u64)?;
    write_u64(&mut w, s.n_backward as u64)?;
    write_f64(&mut w, s.save_interval)?;
    write_u32(&mut w, lyap.dim() as u32)?;
    write_u32(&mut w, lyap.num_vectors() as u32)?;
    write_u64(&mut w, lyap.num_samples() as u64)?;
    for &e in &lyap.exponents {
        write_f64(&mut w, e)?;
    }
    for b in &lyap.blvs {
        write_matrix(&mut w, b)?;
    }
    for u in &lyap.coefficients {
        write_matrix(&mut w, u)?;
    }
    for c in &lyap.clvs {
        write_matrix(&mut w, c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lyapunov_set(path: &Path) -> Result<LyapunovSet, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, KIND_LYAPUNOV)?;
    let qr_interval = read_u32(&mut r)? as usize;
    let n_forward = read_len(&mut r, "forward QR")?;
    let n_sampling = read_len(&mut r, "sampling QR")?;
    let n_backward = read_len(&mut r, "backward QR")?;
    let save_interval = read_f64(&mut r)?;
    let schedule = GinelliSchedule::new(qr_interval, n_forward, n_sampling, n_backward, save_interval)
        .map_err(format_err)?;
    let d = read_u32(&mut r)? as usize;
    let m = read_u32(&mut r)? as usize;
    let n_window = read_len(&mut r, "window sample")?;
    if m == 0 || d == 0 || m > d {
        return Err(IoError::Format(format!("bad dimensions d={d}, m={m}")));
    }
    let mut exponents = Vec::with_capacity(m);
    for _ in 0..m {
        exponents.push(read_f64(&mut r)?);
    }
    let mut blvs = Vec::with_capacity(n_window);
    for _ in 0..n_window {
        blvs.push(read_matrix(&mut r, d, m)?);
    }
    let mut coefficients = Vec::with_capacity(n_window);
    for _ in 0..n_window {
        coefficients.push(read_matrix(&mut r, m, m)?);
    }
    let mut clvs = Vec::with_capacity(n_window);
    for _ in 0..n_window {
        clvs.push(read_matrix(&mut r, d, m)?);
    }
    if n_window == 0 {
        return Err(IoError::Format("empty Lyapunov set".into()));
    }
    Ok(LyapunovSet {
        schedule,
        exponents,
        blvs,
        coefficients,
        clvs,
    })
}

// ---------------------------------------------------------------------------
// observation set

pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_OBSERVATIONS)?;
    let h = obs.model.operator();
    write_u32(&mut w, h.nrows() as u32)?;
    write_u32(&mut w, h.ncols() as u32)?;
    write_matrix(&mut w, h)?;
    write_f64(&mut w, obs.model.noise_std())?;
    write_f64(&mut w, obs.model.obs_interval())?;
    write_u64(&mut w, obs.seed)?;
    write_u64(&mut w, obs.sample_stride as u64)?;
    write_f64(&mut w, obs.first_time)?;
    write_u64(&mut w, obs.len() as u64)?;
    for y in &obs.values {
        for &v in y.iter() {
            write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<ObservationSet, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, KIND_OBSERVATIONS)?;
    let p = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let h = read_matrix(&mut r, p, d)?;
    let noise_std = read_f64(&mut r)?;
    let obs_interval = read_f64(&mut r)?;
    let model = ObservationModel::new(h, noise_std, obs_interval).map_err(format_err)?;
    let seed = read_u64(&mut r)?;
    let sample_stride = read_len(&mut r, "stride")?;
    let first_time = read_f64(&mut r)?;
    let n = read_len(&mut r, "observation")?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = DVector::zeros(p);
        for i in 0..p {
            y[i] = read_f64(&mut r)?;
        }
        values.push(y);
    }
    Ok(ObservationSet {
        model,
        seed,
        sample_stride,
        first_time,
        values,
    })
}

// ---------------------------------------------------------------------------
// result tables

/// One typed cell; floats use shortest round-trip formatting.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Str(String),
    Int(i64),
    Float(f64),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Str(s) => write!(f, "{s}"),
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Float(v) => write!(f, "{v}"),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<&'static str>) -> Self {
        Self {
            name: name.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }
}

/// Sidecar metadata written next to every CSV table.
#[derive(Debug, Clone, Serialize)]
pub struct TableMeta {
    pub experiment_id: String,
    pub config_sha256: String,
    pub master_seed: u64,
    pub code_version: String,
    pub columns: Vec<String>,
    pub units: BTreeMap<String, String>,
    pub percentile_method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

impl TableMeta {
    pub fn new(experiment_id: &str, config_sha256: &str, master_seed: u64) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            config_sha256: config_sha256.to_string(),
            master_seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            columns: Vec::new(),
            units: BTreeMap::new(),
            percentile_method: "linear interpolation between order statistics".to_string(),
            notes: None,
        }
    }
}

/// Writes `<dir>/<name>.csv` plus `<dir>/<name>.meta.json`. Rows containing
/// non-finite floats are rejected; published tables never carry NaNs.
pub fn write_table(dir: &Path, table: &Table, meta: &TableMeta) -> Result<(), IoError> {
    for (i, row) in table.rows.iter().enumerate() {
        for cell in row {
            if let Cell::Float(v) = cell {
                if !v.is_finite() {
                    return Err(IoError::Invalid(format!(
                        "non-finite value in row {i} of table {}",
                        table.name
                    )));
                }
            }
        }
    }
    let csv_path = dir.join(format!("{}.csv", table.name));
    let mut w = BufWriter::new(File::create(&csv_path)?);
    writeln!(w, "{}", table.columns.join(","))?;
    for row in &table.rows {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;

    let mut meta = meta.clone();
    meta.columns = table.columns.iter().map(|c| c.to_string()).collect();
    let json_path = dir.join(format!("{}.meta.json", table.name));
    let mut jw = BufWriter::new(File::create(&json_path)?);
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| IoError::Invalid(format!("metadata serialization: {e}")))?;
    jw.write_all(text.as_bytes())?;
    jw.write_all(b"\n")?;
    jw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clv_core::ginelli::{compute_lyapunov_set, random_upper_triangular, standard_basis_block};
    use clv_core::models::integrate_trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_trajectory() -> Trajectory {
        let model = ModelSpec::standard_lorenz63();
        let x0 = DVector::from_column_slice(&[1.0, 1.0, 1.0]);
        integrate_trajectory(&model, &x0, 10.0, 3.0, 0.002, 0.01).unwrap()
    }

    #[test]
    fn trajectory_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let traj = tiny_trajectory();
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(traj, back);
    }

    #[test]
    fn lyapunov_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.bin");
        let traj = tiny_trajectory();
        let schedule = GinelliSchedule::from_times(1, 0.01, 1.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let seed = random_upper_triangular(3, &mut rng);
        let lyap =
            compute_lyapunov_set(&traj, &standard_basis_block(3, 3), &seed, &schedule).unwrap();
        write_lyapunov_set(&path, &lyap).unwrap();
        let back = read_lyapunov_set(&path).unwrap();
        assert_eq!(lyap.exponents, back.exponents);
        assert_eq!(lyap.blvs, back.blvs);
        assert_eq!(lyap.coefficients, back.coefficients);
        assert_eq!(lyap.clvs, back.clvs);
        assert_eq!(lyap.schedule, back.schedule);
    }

    #[test]
    fn observations_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.bin");
        let traj = tiny_trajectory();
        let model = ObservationModel::select(&[1], 3, 0.3, 0.01).unwrap();
        let obs = clv_core::enkf::generate_observations(&traj, &model, 9).unwrap();
        write_observations(&path, &obs).unwrap();
        let back = read_observations(&path).unwrap();
        assert_eq!(obs, back);
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_trajectory(&path), Err(IoError::Format(_))));
    }

    #[test]
    fn tables_reject_nans_and_write_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new("demo", vec!["a", "b"]);
        t.push(vec![Cell::from("x"), Cell::from(0.3)]);
        let meta = TableMeta::new("exp", "deadbeef", 7);
        write_table(dir.path(), &t, &meta).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("demo.csv")).unwrap();
        assert_eq!(csv, "a,b\nx,0.3\n");
        write_table(dir.path(), &t, &meta).unwrap();
        let csv2 = std::fs::read_to_string(dir.path().join("demo.csv")).unwrap();
        assert_eq!(csv, csv2);

        t.push(vec![Cell::from("y"), Cell::from(f64::NAN)]);
        assert!(write_table(dir.path(), &t, &meta).is_err());
    }
}
